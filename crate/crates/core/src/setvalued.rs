//! Compact convex sets as vertex-list polytopes, set-valued maps, and sampled
//! checks of the Marchaud growth bound and upper semi-continuity.
//!
//! Distances to a hull use Wolfe's minimum-norm-point algorithm, which
//! terminates finitely and is exact up to roundoff. One-dimensional sets are
//! kept in canonical `[lo, hi]` form and handled by endpoint arithmetic.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vecops::{dist, dot, norm, sub};
use crate::MEMBERSHIP_TOL;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SetError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("a convex set needs at least one vertex")]
    NoVertices,
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("non-finite coordinate in input")]
    NonFinite,
    #[error("empty list of sets")]
    EmptyUnion,
    #[error("basis vectors are not orthonormal")]
    NotOrthonormal,
    #[error("sequence {sequence}: selection {index} is at distance {distance:e} from the map value")]
    SelectionNotInValue { sequence: usize, index: usize, distance: f64 },
    #[error("sequence {0} is empty or has mismatched point/selection lengths")]
    MalformedSequence(usize),
}

/// Convex hull of a non-empty finite vertex list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SetRepr", into = "SetRepr")]
pub struct ConvexCompactSet {
    dimension: usize,
    vertices: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetRepr {
    dimension: usize,
    vertices: Vec<Vec<f64>>,
}

impl TryFrom<SetRepr> for ConvexCompactSet {
    type Error = SetError;
    fn try_from(r: SetRepr) -> Result<Self, SetError> {
        let s = ConvexCompactSet::new(r.vertices)?;
        if s.dimension != r.dimension {
            return Err(SetError::DimensionMismatch {
                expected: r.dimension,
                got: s.dimension,
            });
        }
        Ok(s)
    }
}

impl From<ConvexCompactSet> for SetRepr {
    fn from(s: ConvexCompactSet) -> Self {
        SetRepr {
            dimension: s.dimension,
            vertices: s.vertices,
        }
    }
}

impl ConvexCompactSet {
    pub fn new(vertices: Vec<Vec<f64>>) -> Result<Self, SetError> {
        let first = vertices.first().ok_or(SetError::NoVertices)?;
        let dimension = first.len();
        if dimension == 0 {
            return Err(SetError::ZeroDimension);
        }
        for v in &vertices {
            if v.len() != dimension {
                return Err(SetError::DimensionMismatch {
                    expected: dimension,
                    got: v.len(),
                });
            }
            if !v.iter().all(|c| c.is_finite()) {
                return Err(SetError::NonFinite);
            }
        }
        Ok(Self::canonical(dimension, vertices))
    }

    fn canonical(dimension: usize, mut vertices: Vec<Vec<f64>>) -> Self {
        if dimension == 1 {
            let lo = vertices.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
            let hi = vertices.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max);
            vertices = if lo == hi { vec![vec![lo]] } else { vec![vec![lo], vec![hi]] };
        } else {
            let mut unique: Vec<Vec<f64>> = Vec::with_capacity(vertices.len());
            for v in vertices {
                if !unique.contains(&v) {
                    unique.push(v);
                }
            }
            vertices = unique;
        }
        ConvexCompactSet { dimension, vertices }
    }

    pub fn singleton(point: Vec<f64>) -> Self {
        let dimension = point.len();
        assert!(dimension > 0, "singleton needs a positive dimension");
        ConvexCompactSet {
            dimension,
            vertices: vec![point],
        }
    }

    /// `[lo, hi]` in one dimension; the endpoints may come in either order.
    pub fn interval(lo: f64, hi: f64) -> Self {
        Self::canonical(1, vec![vec![lo], vec![hi]])
    }

    /// Axis-aligned box with the given per-coordinate bounds.
    pub fn boxed(lower: &[f64], upper: &[f64]) -> Self {
        assert_eq!(lower.len(), upper.len());
        let d = lower.len();
        let mut vertices = Vec::with_capacity(1 << d);
        for mask in 0..(1usize << d) {
            let v = (0..d)
                .map(|i| if mask >> i & 1 == 1 { upper[i] } else { lower[i] })
                .collect();
            vertices.push(v);
        }
        Self::canonical(d, vertices)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn vertices(&self) -> &[Vec<f64>] {
        &self.vertices
    }

    pub fn is_singleton(&self) -> bool {
        self.vertices.len() == 1
    }

    /// `[lo, hi]` for one-dimensional sets.
    pub fn bounds_1d(&self) -> Option<(f64, f64)> {
        (self.dimension == 1).then(|| (self.vertices[0][0], self.vertices[self.vertices.len() - 1][0]))
    }

    /// Largest vertex norm, which is the largest norm over the whole hull.
    pub fn max_norm(&self) -> f64 {
        self.vertices.iter().map(|v| norm(v)).fold(0.0, f64::max)
    }

    fn check_dim(&self, got: usize) -> Result<(), SetError> {
        if got != self.dimension {
            Err(SetError::DimensionMismatch {
                expected: self.dimension,
                got,
            })
        } else {
            Ok(())
        }
    }

    /// Euclidean projection of `x` onto the hull.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>, SetError> {
        self.check_dim(x.len())?;
        if let Some((lo, hi)) = self.bounds_1d() {
            return Ok(vec![x[0].clamp(lo, hi)]);
        }
        if self.vertices.len() == 1 {
            return Ok(self.vertices[0].clone());
        }
        let shifted: Vec<Vec<f64>> = self.vertices.iter().map(|v| sub(v, x)).collect();
        let nearest = min_norm_point(&shifted);
        Ok(nearest.iter().zip(x).map(|(p, xi)| p + xi).collect())
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> Result<bool, SetError> {
        Ok(distance(x, self)? <= tol)
    }

    pub fn translate(&self, shift: &[f64]) -> Self {
        let vertices = self
            .vertices
            .iter()
            .map(|v| v.iter().zip(shift).map(|(a, b)| a + b).collect())
            .collect();
        Self::canonical(self.dimension, vertices)
    }
}

impl fmt::Display for ConvexCompactSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some((lo, hi)) = self.bounds_1d() {
            return write!(f, "[{lo}, {hi}]");
        }
        write!(f, "hull{:?}", self.vertices)
    }
}

/// `max_{v ∈ C} <v, direction>`.
pub fn support(set: &ConvexCompactSet, direction: &[f64]) -> Result<f64, SetError> {
    set.check_dim(direction.len())?;
    Ok(set
        .vertices
        .iter()
        .map(|v| dot(v, direction))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Minimum-norm element of the hull.
pub fn least_norm(set: &ConvexCompactSet) -> Vec<f64> {
    let origin = vec![0.0; set.dimension];
    set.project(&origin).expect("dimension matches by construction")
}

/// `d(x, C) = inf_{c ∈ C} ||x - c||`.
pub fn distance(x: &[f64], set: &ConvexCompactSet) -> Result<f64, SetError> {
    let p = set.project(x)?;
    Ok(dist(x, &p))
}

/// Hausdorff distance. Exact for polytopes: the farthest point of one
/// polytope from a convex set is one of its vertices.
pub fn hausdorff(a: &ConvexCompactSet, b: &ConvexCompactSet) -> Result<f64, SetError> {
    a.check_dim(b.dimension)?;
    if let (Some((l1, h1)), Some((l2, h2))) = (a.bounds_1d(), b.bounds_1d()) {
        return Ok((l1 - l2).abs().max((h1 - h2).abs()));
    }
    let mut h: f64 = 0.0;
    for v in &a.vertices {
        h = h.max(distance(v, b)?);
    }
    for v in &b.vertices {
        h = h.max(distance(v, a)?);
    }
    Ok(h)
}

/// Convex hull of a union of polytopes.
pub fn convex_hull_union(sets: &[ConvexCompactSet]) -> Result<ConvexCompactSet, SetError> {
    let first = sets.first().ok_or(SetError::EmptyUnion)?;
    let mut vertices = Vec::new();
    for s in sets {
        first.check_dim(s.dimension)?;
        vertices.extend(s.vertices.iter().cloned());
    }
    Ok(ConvexCompactSet::canonical(first.dimension, vertices))
}

/// Wolfe's minimum-norm-point algorithm on `conv(points)`.
fn min_norm_point(points: &[Vec<f64>]) -> Vec<f64> {
    let scale = points.iter().map(|p| dot(p, p)).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let tol = 1e-14 * scale;

    let start = (0..points.len())
        .min_by(|&i, &j| dot(&points[i], &points[i]).total_cmp(&dot(&points[j], &points[j])))
        .unwrap();
    let mut active: Vec<usize> = vec![start];
    let mut weights: Vec<f64> = vec![1.0];
    let mut x = points[start].clone();

    for _ in 0..(50 * points.len() + 100) {
        // Major cycle: most improving vertex.
        let (j, xp) = (0..points.len())
            .map(|j| (j, dot(&x, &points[j])))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        if dot(&x, &x) - xp <= tol || active.contains(&j) {
            break;
        }
        active.push(j);
        weights.push(0.0);

        // Minor cycles: move toward the affine minimizer until it lies in the
        // relative interior of the active simplex.
        loop {
            let mu = match affine_min_norm(points, &active) {
                Some(mu) => mu,
                None => {
                    active.pop();
                    weights.pop();
                    return combine(points, &active, &weights);
                }
            };
            if mu.iter().all(|&m| m > 1e-12) {
                weights = mu;
                x = combine(points, &active, &weights);
                break;
            }
            let mut theta: f64 = 1.0;
            for (w, m) in weights.iter().zip(&mu) {
                if *m <= 1e-12 {
                    let denom = w - m;
                    if denom > 0.0 {
                        theta = theta.min(w / denom);
                    }
                }
            }
            for (w, m) in weights.iter_mut().zip(&mu) {
                *w = (1.0 - theta) * *w + theta * m;
            }
            let mut i = 0;
            while i < active.len() {
                if weights[i] <= 1e-12 {
                    active.remove(i);
                    weights.remove(i);
                } else {
                    i += 1;
                }
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            x = combine(points, &active, &weights);
            if active.len() == 1 {
                break;
            }
        }
    }
    x
}

fn combine(points: &[Vec<f64>], active: &[usize], weights: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; points[0].len()];
    for (&i, &w) in active.iter().zip(weights) {
        for (xc, pc) in x.iter_mut().zip(&points[i]) {
            *xc += w * pc;
        }
    }
    x
}

/// Weights of the minimum-norm point of the affine hull of the active points.
fn affine_min_norm(points: &[Vec<f64>], active: &[usize]) -> Option<Vec<f64>> {
    let m = active.len();
    let mut kkt = DMatrix::<f64>::zeros(m + 1, m + 1);
    for (r, &i) in active.iter().enumerate() {
        for (c, &j) in active.iter().enumerate() {
            kkt[(r, c)] = dot(&points[i], &points[j]);
        }
        kkt[(r, m)] = 1.0;
        kkt[(m, r)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(m + 1);
    rhs[m] = 1.0;
    let sol = kkt.clone().lu().solve(&rhs).or_else(|| {
        let svd = kkt.svd(true, true);
        svd.solve(&rhs, 1e-13).ok()
    })?;
    let mu: Vec<f64> = sol.iter().take(m).cloned().collect();
    mu.iter().all(|v| v.is_finite()).then_some(mu)
}

type Evaluator = dyn Fn(&[f64]) -> ConvexCompactSet + Send + Sync;

/// A map from points to polytopes with a claimed growth constant `K`.
#[derive(Clone)]
pub struct SetValuedMap {
    name: String,
    domain_dim: usize,
    codomain_dim: usize,
    growth_constant: f64,
    eval: Arc<Evaluator>,
}

impl fmt::Debug for SetValuedMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SetValuedMap")
            .field("name", &self.name)
            .field("domain_dim", &self.domain_dim)
            .field("codomain_dim", &self.codomain_dim)
            .field("growth_constant", &self.growth_constant)
            .finish()
    }
}

impl SetValuedMap {
    pub fn new<F>(name: impl Into<String>, domain_dim: usize, codomain_dim: usize, growth_constant: f64, eval: F) -> Self
    where
        F: Fn(&[f64]) -> ConvexCompactSet + Send + Sync + 'static,
    {
        SetValuedMap {
            name: name.into(),
            domain_dim,
            codomain_dim,
            growth_constant,
            eval: Arc::new(eval),
        }
    }

    /// Single-valued map `z ↦ {f(z)}`.
    pub fn single_valued<F>(name: impl Into<String>, domain_dim: usize, codomain_dim: usize, growth_constant: f64, f: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self::new(name, domain_dim, codomain_dim, growth_constant, move |z| {
            ConvexCompactSet::singleton(f(z))
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn domain_dim(&self) -> usize {
        self.domain_dim
    }

    pub fn codomain_dim(&self) -> usize {
        self.codomain_dim
    }

    pub fn growth_constant(&self) -> f64 {
        self.growth_constant
    }

    pub fn evaluate(&self, z: &[f64]) -> ConvexCompactSet {
        debug_assert_eq!(z.len(), self.domain_dim, "map {}", self.name);
        let value = (self.eval)(z);
        debug_assert_eq!(value.dimension(), self.codomain_dim, "map {}", self.name);
        value
    }
}

/// The subdifferential of `max(|x| - 1, 0)`, negated: zero inside `[-1, 1]`,
/// unit drift back toward the interval outside, and a segment at the kinks.
pub fn neg_subdiff_flat_box(x: f64) -> ConvexCompactSet {
    if x > 1.0 {
        ConvexCompactSet::singleton(vec![-1.0])
    } else if x < -1.0 {
        ConvexCompactSet::singleton(vec![1.0])
    } else if x == 1.0 {
        ConvexCompactSet::interval(-1.0, 0.0)
    } else if x == -1.0 {
        ConvexCompactSet::interval(0.0, 1.0)
    } else {
        ConvexCompactSet::singleton(vec![0.0])
    }
}

/// `-∂|x|`.
pub fn neg_subdiff_abs(x: f64) -> ConvexCompactSet {
    if x > 0.0 {
        ConvexCompactSet::singleton(vec![-1.0])
    } else if x < 0.0 {
        ConvexCompactSet::singleton(vec![1.0])
    } else {
        ConvexCompactSet::interval(-1.0, 1.0)
    }
}

/// Affine set `anchor + span(basis)` with an orthonormal basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineSetRep {
    anchor: Vec<f64>,
    basis: Vec<Vec<f64>>,
}

impl AffineSetRep {
    pub fn new(anchor: Vec<f64>, basis: Vec<Vec<f64>>) -> Result<Self, SetError> {
        for b in &basis {
            if b.len() != anchor.len() {
                return Err(SetError::DimensionMismatch {
                    expected: anchor.len(),
                    got: b.len(),
                });
            }
        }
        for (i, u) in basis.iter().enumerate() {
            for (j, v) in basis.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                if (dot(u, v) - target).abs() > 1e-9 {
                    return Err(SetError::NotOrthonormal);
                }
            }
        }
        Ok(AffineSetRep { anchor, basis })
    }

    pub fn point(anchor: Vec<f64>) -> Self {
        AffineSetRep { anchor, basis: vec![] }
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    /// `anchor + Σ coords_j basis_j`; missing coordinates count as zero.
    pub fn at(&self, coords: &[f64]) -> Vec<f64> {
        let mut p = self.anchor.clone();
        for (c, e) in coords.iter().zip(&self.basis) {
            p.iter_mut().zip(e).for_each(|(pi, ei)| *pi += c * ei);
        }
        p
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn dimension(&self) -> usize {
        self.anchor.len()
    }

    pub fn is_point(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let r = sub(x, &self.anchor);
        let mut p = self.anchor.clone();
        for e in &self.basis {
            let c = dot(&r, e);
            for (pi, ei) in p.iter_mut().zip(e) {
                *pi += c * ei;
            }
        }
        p
    }

    pub fn distance(&self, x: &[f64]) -> f64 {
        dist(x, &self.project(x))
    }

    /// Image under the linear map `m` (rows × dimension). Directions that
    /// collapse below `1e-10` relative to the map's scale are dropped.
    pub fn image(&self, m: &DMatrix<f64>) -> AffineSetRep {
        let apply = |v: &[f64]| -> Vec<f64> { (m * DVector::from_column_slice(v)).iter().cloned().collect() };
        let anchor = apply(&self.anchor);
        let cutoff = 1e-10 * m.norm().max(f64::MIN_POSITIVE);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for e in &self.basis {
            let mut w = apply(e);
            for q in &basis {
                let c = dot(&w, q);
                w.iter_mut().zip(q).for_each(|(wi, qi)| *wi -= c * qi);
            }
            let n = norm(&w);
            if n > cutoff {
                basis.push(w.into_iter().map(|c| c / n).collect());
            }
        }
        AffineSetRep { anchor, basis }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundViolation {
    pub point: Vec<f64>,
    pub max_norm: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub samples_checked: usize,
    pub constant: f64,
    pub violations: Vec<BoundViolation>,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `sup_{w ∈ H(z)} ||w|| < K (1 + ||z||)` at every sample.
pub fn check_pointwise_bound(map: &SetValuedMap, samples: &[Vec<f64>], k: f64) -> BoundReport {
    let violations = samples
        .iter()
        .filter_map(|z| {
            let max_norm = map.evaluate(z).max_norm();
            let bound = k * (1.0 + norm(z));
            (max_norm >= bound).then(|| BoundViolation {
                point: z.clone(),
                max_norm,
                bound,
            })
        })
        .collect();
    BoundReport {
        samples_checked: samples.len(),
        constant: k,
        violations,
    }
}

/// A convergent sequence `z_n → limit` with selections `w_n ∈ H(z_n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UscSequence {
    pub points: Vec<Vec<f64>>,
    pub selections: Vec<Vec<f64>>,
    pub limit: Vec<f64>,
}

impl UscSequence {
    /// `z_n = limit + offset 2^-n` for `n < len`, selecting vertex
    /// `(pick + n) mod #vertices` of `H(z_n)` at each step.
    pub fn geometric(map: &SetValuedMap, limit: &[f64], offset: &[f64], len: usize, pick: usize) -> Self {
        let mut points = Vec::with_capacity(len);
        let mut selections = Vec::with_capacity(len);
        for n in 0..len {
            let f = 0.5f64.powi(n as i32);
            let z: Vec<f64> = limit.iter().zip(offset).map(|(l, o)| l + o * f).collect();
            let value = map.evaluate(&z);
            let vs = value.vertices();
            selections.push(vs[(pick + n) % vs.len()].clone());
            points.push(z);
        }
        UscSequence {
            points,
            selections,
            limit: limit.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UscOptions {
    /// Absolute slack on the limit membership.
    pub tol: f64,
    /// Allowed distance per unit of `||z_n - z||`, for finite prefixes.
    pub modulus: f64,
    /// Fraction of the sequence treated as its tail.
    pub tail_fraction: f64,
}

impl Default for UscOptions {
    fn default() -> Self {
        UscOptions {
            tol: MEMBERSHIP_TOL,
            modulus: 10.0,
            tail_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UscViolation {
    pub sequence: usize,
    pub limit: Vec<f64>,
    pub last_distance: f64,
    pub tail_average_distance: f64,
    pub allowed: f64,
}

/// Outcome of the sampled upper semi-continuity check. Passing is a
/// necessary condition only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UscReport {
    pub sequences_checked: usize,
    pub violations: Vec<UscViolation>,
}

impl UscReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// For each sequence, the tail of the selections must approach `H(limit)`:
/// both the last selection and the tail average must lie within
/// `tol + modulus * ||z_n - limit||` of `H(limit)`.
pub fn check_usc(map: &SetValuedMap, sequences: &[UscSequence], opts: UscOptions) -> Result<UscReport, SetError> {
    let mut violations = Vec::new();
    for (si, seq) in sequences.iter().enumerate() {
        let len = seq.points.len();
        if len == 0 || seq.selections.len() != len {
            return Err(SetError::MalformedSequence(si));
        }
        for (index, (z, w)) in seq.points.iter().zip(&seq.selections).enumerate() {
            let d = distance(w, &map.evaluate(z))?;
            if d > opts.tol {
                return Err(SetError::SelectionNotInValue {
                    sequence: si,
                    index,
                    distance: d,
                });
            }
        }
        let target = map.evaluate(&seq.limit);
        let tail_len = ((len as f64 * opts.tail_fraction).ceil() as usize).clamp(1, len);
        let tail = &seq.selections[len - tail_len..];
        let tail_pts = &seq.points[len - tail_len..];
        let dim = tail[0].len();
        let mut avg = vec![0.0; dim];
        for w in tail {
            avg.iter_mut().zip(w).for_each(|(a, wi)| *a += wi / tail_len as f64);
        }
        let last_distance = distance(&seq.selections[len - 1], &target)?;
        let tail_average_distance = distance(&avg, &target)?;
        let gap_last = dist(&seq.points[len - 1], &seq.limit);
        let gap_tail = tail_pts.iter().map(|z| dist(z, &seq.limit)).fold(0.0, f64::max);
        let allowed = opts.tol + opts.modulus * gap_last.max(0.0);
        let allowed_tail = opts.tol + opts.modulus * gap_tail;
        if last_distance > allowed || tail_average_distance > allowed_tail {
            violations.push(UscViolation {
                sequence: si,
                limit: seq.limit.clone(),
                last_distance,
                tail_average_distance,
                allowed,
            });
        }
    }
    Ok(UscReport {
        sequences_checked: sequences.len(),
        violations,
    })
}
