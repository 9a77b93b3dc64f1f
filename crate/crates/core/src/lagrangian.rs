//! Convex quadratic programs `min xᵀQx + bᵀx + c  s.t.  Ax <= 0` solved
//! through their Lagrangian dual with two-timescale stochastic approximation.
//!
//! The dual scheme runs `x` on the fast clock along `-∇_x L` and `μ` on the
//! slow clock along `∇_μ L = Ax`. The primal scheme swaps the clocks. A brute
//! force KKT enumeration provides the reference optimum.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{self, CoupledSystem, EngineError, Monitor, Projection, RunConfig, RunVerdict, Trace};
use crate::setvalued::{AffineSetRep, ConvexCompactSet, SetValuedMap};
use crate::vecops::{dist, norm};

/// Eigenvalues and singular values below this fraction of the largest are zero.
pub const RANK_TOL: f64 = 1e-10;
pub const PSD_TOL: f64 = 1e-10;
pub const MAX_ORACLE_CONSTRAINTS: usize = 20;

#[derive(Debug, Error)]
pub enum LagrangianError {
    #[error("Q must be square and non-empty, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("{what} has length {got}, expected {expected}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("Q is not positive semi-definite: smallest eigenvalue {0:e}")]
    NotPsd(f64),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("the Lagrangian is unbounded below in x at this multiplier")]
    UnboundedBelow,
    #[error("primal problem is unbounded below")]
    Unbounded,
    #[error("{0} constraints exceed the enumeration budget of {MAX_ORACLE_CONSTRAINTS}")]
    TooManyConstraints(usize),
    #[error("duality gap {0:e} exceeds 1e-6")]
    DualityGap(f64),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QpSpec {
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    b: Vec<f64>,
    #[serde(default)]
    c: f64,
    #[serde(rename = "A", default)]
    a: Vec<Vec<f64>>,
}

/// Validated QP data. `Q` is stored symmetrized, which leaves `xᵀQx` unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QpSpec", into = "QpSpec")]
pub struct QuadraticProgram {
    q: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
    a: DMatrix<f64>,
}

impl TryFrom<QpSpec> for QuadraticProgram {
    type Error = LagrangianError;

    fn try_from(s: QpSpec) -> Result<Self, Self::Error> {
        QuadraticProgram::new(s.q, s.b, s.c, s.a)
    }
}

impl From<QuadraticProgram> for QpSpec {
    fn from(qp: QuadraticProgram) -> Self {
        let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        QpSpec {
            q: rows(&qp.q),
            b: qp.b.iter().copied().collect(),
            c: qp.c,
            a: rows(&qp.a),
        }
    }
}

impl QuadraticProgram {
    pub fn new(q: Vec<Vec<f64>>, b: Vec<f64>, c: f64, a: Vec<Vec<f64>>) -> Result<Self, LagrangianError> {
        let d = q.len();
        if d == 0 || q.iter().any(|r| r.len() != d) {
            return Err(LagrangianError::NotSquare {
                rows: d,
                cols: q.first().map_or(0, Vec::len),
            });
        }
        if b.len() != d {
            return Err(LagrangianError::Dimension {
                what: "b",
                expected: d,
                got: b.len(),
            });
        }
        if let Some(bad) = a.iter().find(|r| r.len() != d) {
            return Err(LagrangianError::Dimension {
                what: "row of A",
                expected: d,
                got: bad.len(),
            });
        }
        if q.iter().flatten().any(|v| !v.is_finite()) {
            return Err(LagrangianError::NonFinite("Q"));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(LagrangianError::NonFinite("b"));
        }
        if !c.is_finite() {
            return Err(LagrangianError::NonFinite("c"));
        }
        if a.iter().flatten().any(|v| !v.is_finite()) {
            return Err(LagrangianError::NonFinite("A"));
        }
        let q = DMatrix::from_fn(d, d, |i, j| q[i][j]);
        let q = (&q + q.transpose()) * 0.5;
        let min_eig = SymmetricEigen::new(q.clone()).eigenvalues.min();
        if min_eig < -PSD_TOL {
            return Err(LagrangianError::NotPsd(min_eig));
        }
        let k = a.len();
        Ok(QuadraticProgram {
            q,
            b: DVector::from_vec(b),
            c,
            a: DMatrix::from_fn(k, d, |i, j| a[i][j]),
        })
    }

    /// One variable, one constraint `a x <= 0`.
    pub fn scalar(q: f64, b: f64, c: f64, a: f64) -> Result<Self, LagrangianError> {
        Self::new(vec![vec![q]], vec![b], c, vec![vec![a]])
    }

    /// `min (x-1)²  s.t.  x <= 0`: the constraint binds, `x* = 0`, `μ* = 2`.
    pub fn example_active() -> Self {
        Self::scalar(1.0, -2.0, 1.0, 1.0).expect("valid")
    }

    /// `min (x+1)²  s.t.  x <= 0`: the constraint is slack, `x* = -1`, `μ* = 0`.
    pub fn example_inactive() -> Self {
        Self::scalar(1.0, 2.0, 1.0, 1.0).expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn constraints(&self) -> usize {
        self.a.nrows()
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// `Q + Qᵀ`, the Hessian of the objective.
    pub fn hessian(&self) -> DMatrix<f64> {
        &self.q * 2.0
    }

    /// The same program with `Q`, `b`, `c` and `A` multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        QuadraticProgram {
            q: &self.q * factor,
            b: &self.b * factor,
            c: self.c * factor,
            a: &self.a * factor,
        }
    }

    pub fn with_constant(&self, c: f64) -> Self {
        QuadraticProgram { c, ..self.clone() }
    }

    pub fn objective(&self, x: &[f64]) -> Result<f64, LagrangianError> {
        let x = self.point(x)?;
        Ok(x.dot(&(&self.q * &x)) + self.b.dot(&x) + self.c)
    }

    fn point(&self, x: &[f64]) -> Result<DVector<f64>, LagrangianError> {
        check_len("x", self.dim(), x.len())?;
        Ok(DVector::from_column_slice(x))
    }

    fn multiplier(&self, mu: &[f64]) -> Result<DVector<f64>, LagrangianError> {
        check_len("mu", self.constraints(), mu.len())?;
        Ok(DVector::from_column_slice(mu))
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), LagrangianError> {
    if expected == got {
        Ok(())
    } else {
        Err(LagrangianError::Dimension { what, expected, got })
    }
}

/// `L(x, μ) = xᵀQx + bᵀx + c + μᵀAx`.
pub fn lagrangian_value(qp: &QuadraticProgram, x: &[f64], mu: &[f64]) -> Result<f64, LagrangianError> {
    let xv = qp.point(x)?;
    let mv = qp.multiplier(mu)?;
    Ok(qp.objective(x)? + mv.dot(&(&qp.a * &xv)))
}

/// `(Q + Qᵀ)x + b + Aᵀμ`.
pub fn grad_x(qp: &QuadraticProgram, x: &[f64], mu: &[f64]) -> Result<Vec<f64>, LagrangianError> {
    let xv = qp.point(x)?;
    let mv = qp.multiplier(mu)?;
    Ok((qp.hessian() * xv + &qp.b + qp.a.tr_mul(&mv)).iter().copied().collect())
}

/// `Ax`.
pub fn grad_mu(qp: &QuadraticProgram, x: &[f64]) -> Result<Vec<f64>, LagrangianError> {
    let xv = qp.point(x)?;
    Ok((&qp.a * xv).iter().copied().collect())
}

/// `argmin_x L(x, μ)`.
#[derive(Debug, Clone, PartialEq)]
pub enum MinimumSet {
    Singleton(Vec<f64>),
    /// Minimum-norm solution plus an orthonormal basis of `ker(Q + Qᵀ)`.
    Affine(AffineSetRep),
    UnboundedBelow,
}

impl MinimumSet {
    /// Any minimizer, `None` when unbounded.
    pub fn representative(&self) -> Option<&[f64]> {
        match self {
            MinimumSet::Singleton(p) => Some(p),
            MinimumSet::Affine(a) => Some(a.anchor()),
            MinimumSet::UnboundedBelow => None,
        }
    }

    pub fn distance(&self, x: &[f64]) -> Option<f64> {
        match self {
            MinimumSet::Singleton(p) => Some(dist(x, p)),
            MinimumSet::Affine(a) => Some(a.distance(x)),
            MinimumSet::UnboundedBelow => None,
        }
    }
}

/// Solves `(Q + Qᵀ)x = -(b + Aᵀμ)` by eigen-decomposition.
pub fn minimum_set(qp: &QuadraticProgram, mu: &[f64]) -> MinimumSet {
    let mv = DVector::from_column_slice(mu);
    let rhs = -(&qp.b + qp.a.tr_mul(&mv));
    let eig = SymmetricEigen::new(qp.hessian());
    let scale = eig.eigenvalues.amax();
    let cutoff = RANK_TOL * scale;
    let consistency = RANK_TOL * (1.0 + qp.b.norm() + qp.a.tr_mul(&mv).norm()) * 10.0;
    let d = qp.dim();
    let mut anchor = DVector::zeros(d);
    let mut basis = Vec::new();
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        let coef = v.dot(&rhs);
        if lam.abs() <= cutoff {
            if coef.abs() > consistency {
                return MinimumSet::UnboundedBelow;
            }
            basis.push(v.iter().copied().collect::<Vec<f64>>());
        } else {
            anchor += v * (coef / lam);
        }
    }
    let anchor: Vec<f64> = anchor.iter().copied().collect();
    if basis.is_empty() {
        MinimumSet::Singleton(anchor)
    } else {
        MinimumSet::Affine(AffineSetRep::new(anchor, basis).expect("eigenvectors are orthonormal"))
    }
}

/// `H(μ) = inf_x L(x, μ)`, `-∞` when unbounded below.
pub fn dual_function(qp: &QuadraticProgram, mu: &[f64]) -> f64 {
    match minimum_set(qp, mu).representative() {
        Some(x) => lagrangian_value(qp, x, mu).expect("dimensions match"),
        None => f64::NEG_INFINITY,
    }
}

/// `G(μ) = {Ax : x ∈ λ_m(μ)}`.
#[derive(Debug, Clone, PartialEq)]
pub enum Supergradient {
    Compact(ConvexCompactSet),
    /// Non-compact image of an affine minimum set.
    Affine(AffineSetRep),
}

pub fn dual_supergradient_set(qp: &QuadraticProgram, mu: &[f64]) -> Result<Supergradient, LagrangianError> {
    match minimum_set(qp, mu) {
        MinimumSet::Singleton(x) => Ok(Supergradient::Compact(ConvexCompactSet::singleton(grad_mu(qp, &x)?))),
        MinimumSet::Affine(a) => {
            let img = a.image(&qp.a);
            if img.is_point() {
                Ok(Supergradient::Compact(ConvexCompactSet::singleton(img.anchor().to_vec())))
            } else {
                Ok(Supergradient::Affine(img))
            }
        }
        MinimumSet::UnboundedBelow => Err(LagrangianError::UnboundedBelow),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktSolution {
    pub x_star: Vec<f64>,
    pub mu_star: Vec<f64>,
    pub value: f64,
    pub active_set: Vec<usize>,
    pub duality_gap: f64,
}

/// Minimum-norm least-squares solution of `m z = r`, `None` when the system
/// is inconsistent.
fn min_norm_solve(m: DMatrix<f64>, r: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = (RANK_TOL * smax).max(f64::MIN_POSITIVE);
    let z = svd.solve(r, eps).ok()?;
    let resid = (&m * &z - r).norm();
    (resid <= 1e-8 * (1.0 + r.norm())).then_some(z)
}

/// Enumerates every active set `S`, solves the stationarity system
/// `[(Q+Qᵀ) A_Sᵀ; A_S 0][x; μ_S] = [-b; 0]` and keeps the best candidate with
/// `μ_S >= 0` and `Ax <= 0`.
///
/// Each system contributes its minimum-norm solution only. Degenerate
/// instances whose KKT points are all non-minimal-norm may be missed, which
/// does not arise when `Q` is definite.
pub fn kkt_oracle(qp: &QuadraticProgram) -> Result<KktSolution, LagrangianError> {
    let k = qp.constraints();
    if k > MAX_ORACLE_CONSTRAINTS {
        return Err(LagrangianError::TooManyConstraints(k));
    }
    let d = qp.dim();
    let hess = qp.hessian();
    let mut best: Option<KktSolution> = None;
    for mask in 0u32..(1u32 << k) {
        let active: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let s = active.len();
        let mut m = DMatrix::zeros(d + s, d + s);
        m.view_mut((0, 0), (d, d)).copy_from(&hess);
        for (j, &row) in active.iter().enumerate() {
            for c in 0..d {
                m[(c, d + j)] = qp.a[(row, c)];
                m[(d + j, c)] = qp.a[(row, c)];
            }
        }
        let mut r = DVector::zeros(d + s);
        r.rows_mut(0, d).copy_from(&(-&qp.b));
        let Some(z) = min_norm_solve(m, &r) else { continue };
        let x: Vec<f64> = z.rows(0, d).iter().copied().collect();
        let mut mu = vec![0.0; k];
        let mut ok = true;
        for (j, &row) in active.iter().enumerate() {
            let v = z[d + j];
            if v < -1e-10 {
                ok = false;
            }
            mu[row] = v.max(0.0);
        }
        let ax = grad_mu(qp, &x)?;
        if !ok || ax.iter().any(|&v| v > 1e-8) {
            continue;
        }
        let value = qp.objective(&x)?;
        if best.as_ref().is_none_or(|b| value < b.value - 1e-12) {
            best = Some(KktSolution {
                x_star: x,
                mu_star: mu,
                value,
                active_set: active,
                duality_gap: f64::NAN,
            });
        }
    }
    // A convex QP that is bounded below attains its minimum at a KKT point.
    let mut sol = best.ok_or(LagrangianError::Unbounded)?;
    sol.duality_gap = (sol.value - dual_function(qp, &sol.mu_star)).abs();
    if sol.duality_gap > 1e-6 {
        return Err(LagrangianError::DualityGap(sol.duality_gap));
    }
    Ok(sol)
}

fn hessian_rows(qp: &QuadraticProgram) -> Vec<Vec<f64>> {
    let h = qp.hessian();
    (0..h.nrows()).map(|i| h.row(i).iter().copied().collect()).collect()
}

fn a_rows(qp: &QuadraticProgram) -> Vec<Vec<f64>> {
    (0..qp.a.nrows()).map(|i| qp.a.row(i).iter().copied().collect()).collect()
}

fn neg_grad_x_map(qp: &QuadraticProgram, x_first: bool) -> SetValuedMap {
    let (d, k) = (qp.dim(), qp.constraints());
    let hess = hessian_rows(qp);
    let a = a_rows(qp);
    let b: Vec<f64> = qp.b.iter().copied().collect();
    let growth = 1.0 + qp.hessian().norm() + qp.b.norm() + qp.a.norm();
    SetValuedMap::single_valued("-grad_x L", d + k, d, growth, move |z| {
        let (x, mu) = if x_first { (&z[..d], &z[d..]) } else { (&z[k..], &z[..k]) };
        (0..d)
            .map(|i| {
                let hx: f64 = hess[i].iter().zip(x).map(|(h, xj)| h * xj).sum();
                let am: f64 = a.iter().zip(mu).map(|(row, m)| row[i] * m).sum();
                -(hx + b[i] + am)
            })
            .collect()
    })
}

fn grad_mu_map(qp: &QuadraticProgram, x_first: bool) -> SetValuedMap {
    let (d, k) = (qp.dim(), qp.constraints());
    let a = a_rows(qp);
    let growth = 1.0 + qp.a.norm();
    SetValuedMap::single_valued("grad_mu L", d + k, k, growth, move |z| {
        let x = if x_first { &z[..d] } else { &z[k..] };
        a.iter().map(|row| row.iter().zip(x).map(|(r, xi)| r * xi).sum()).collect()
    })
}

/// `x` fast with `h = {-∇_x L}`, `μ` slow with `g = {Ax}`.
pub fn dual_system(qp: &QuadraticProgram, project: bool) -> CoupledSystem {
    CoupledSystem::new(neg_grad_x_map(qp, true), grad_mu_map(qp, true), qp.dim(), qp.constraints())
        .expect("shapes match by construction")
        .with_projection(project.then_some(Projection::NonNegativeOrthant))
}

/// `μ` fast with `h = {Ax}`, `x` slow with `g = {-∇_x L}`, no projection.
pub fn primal_system(qp: &QuadraticProgram) -> CoupledSystem {
    CoupledSystem::new(grad_mu_map(qp, false), neg_grad_x_map(qp, false), qp.constraints(), qp.dim())
        .expect("shapes match by construction")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualSaReport {
    #[serde(skip)]
    pub trace: Trace,
    pub verdict: RunVerdict,
    pub x_final: Vec<f64>,
    pub mu_final: Vec<f64>,
    /// `d(x_N, λ_m(μ_N))`, `None` if `L(·, μ_N)` is unbounded below.
    pub distance_to_minimum_set: Option<f64>,
    pub dual_value: f64,
    pub oracle: Option<KktSolution>,
    /// `|H(μ_N) - H(μ*)|`.
    pub dual_gap: Option<f64>,
}

/// Runs the dual scheme; `config.x0` is `x`, `config.y0` is `μ`.
pub fn run_dual_sa(qp: &QuadraticProgram, config: &RunConfig, project: bool) -> Result<DualSaReport, LagrangianError> {
    let trace = engine::run(&dual_system(qp, project), config)?;
    let last = trace.last();
    let (x_final, mu_final) = (last.x.clone(), last.y.clone());
    let dual_value = dual_function(qp, &mu_final);
    let oracle = kkt_oracle(qp).ok();
    let dual_gap = oracle.as_ref().map(|o| (dual_value - o.value).abs());
    Ok(DualSaReport {
        verdict: trace.verdict,
        distance_to_minimum_set: minimum_set(qp, &mu_final).distance(&x_final),
        x_final,
        mu_final,
        dual_value,
        oracle,
        dual_gap,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrimalSaReport {
    #[serde(skip)]
    pub trace: Trace,
    pub verdict: RunVerdict,
    pub diverged: bool,
    /// `max_n ||μ_n||` over the logged records.
    pub max_mu_norm: f64,
    pub x_final: Vec<f64>,
    pub mu_final: Vec<f64>,
}

/// Runs the primal scheme; `config.x0` is `μ`, `config.y0` is `x`. The
/// divergence monitor always watches `||μ||`.
pub fn run_primal_sa(qp: &QuadraticProgram, config: &RunConfig) -> Result<PrimalSaReport, LagrangianError> {
    let mut config = config.clone();
    config.monitor = Monitor::Fast;
    let trace = engine::run(&primal_system(qp), &config)?;
    let last = trace.last();
    Ok(PrimalSaReport {
        verdict: trace.verdict,
        diverged: matches!(trace.verdict, RunVerdict::Diverged { .. }),
        max_mu_norm: trace.records.iter().map(|r| norm(&r.x)).fold(0.0, f64::max),
        x_final: last.y.clone(),
        mu_final: last.x.clone(),
        trace,
    })
}

/// Random bounded instance with `d` variables and `k <= d` constraints.
///
/// `Q = MᵀM` with `M = I + U(-1,1)·(0.5/d)`, rescaled so the Hessian's largest
/// eigenvalue is 1. Rows of `A` are orthonormal. The unconstrained minimizer
/// is feasible or infeasible with probability one half each.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, d: usize, k: usize) -> QuadraticProgram {
    assert!(d >= 1 && k <= d, "need 1 <= d and k <= d");
    let m = DMatrix::from_fn(d, d, |i, j| {
        let e = if i == j { 1.0 } else { 0.0 };
        e + rng.random_range(-1.0..1.0) * 0.5 / d as f64
    });
    let q = m.transpose() * &m;
    let top = SymmetricEigen::new(&q * 2.0).eigenvalues.max();
    let q = q / top;
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let orth = g.qr().q();
    let a = orth.rows(0, k).into_owned();
    let want_feasible = rng.random_bool(0.5);
    let mut xu = DVector::zeros(d);
    for _ in 0..1000 {
        xu = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        if (&a * &xu).iter().all(|&v| v <= 0.0) == want_feasible {
            break;
        }
    }
    let b = -(&q * &xu) * 2.0;
    QuadraticProgram {
        q,
        b,
        c: 0.0,
        a,
    }
}
