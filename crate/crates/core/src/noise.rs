//! Martingale-difference noise and the weighted noise-sum diagnostic.
//!
//! Streams are counter based: sample `c` of a stream with seed `s` is drawn
//! from ChaCha8 seeded with `s` on stream `c`, so the value depends only on
//! `(seed, counter)` and never on how other streams were interleaved.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::schedules::StepSchedule;
use crate::vecops::norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Zero,
    IidGaussian,
    /// `sigma (1 + ||x|| + ||y||) ξ` with `ξ` standard normal per coordinate.
    StateScaledGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub sigma: f64,
    pub dimension: usize,
}

impl NoiseModel {
    pub fn zero(dimension: usize) -> Self {
        NoiseModel {
            kind: NoiseKind::Zero,
            sigma: 0.0,
            dimension,
        }
    }

    pub fn iid_gaussian(sigma: f64, dimension: usize) -> Self {
        NoiseModel {
            kind: NoiseKind::IidGaussian,
            sigma,
            dimension,
        }
    }

    pub fn state_scaled(sigma: f64, dimension: usize) -> Self {
        NoiseModel {
            kind: NoiseKind::StateScaledGaussian,
            sigma,
            dimension,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.kind == NoiseKind::Zero || self.sigma == 0.0
    }

    /// `K` in `E[||M||² | F_n] <= K (1 + (||x|| + ||y||)²)`.
    ///
    /// For the state-scaled model `(1 + r)² <= 2 (1 + r²)` gives `2 d σ²`.
    pub fn second_moment_constant(&self) -> f64 {
        let d = self.dimension as f64;
        match self.kind {
            NoiseKind::Zero => 0.0,
            NoiseKind::IidGaussian => d * self.sigma * self.sigma,
            NoiseKind::StateScaledGaussian => 2.0 * d * self.sigma * self.sigma,
        }
    }
}

/// Config form `{kind, sigma, seed}`; the dimension comes from the system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn zero() -> Self {
        NoiseSpec {
            kind: NoiseKind::Zero,
            sigma: 0.0,
            seed: 0,
        }
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::IidGaussian,
            sigma,
            seed,
        }
    }

    pub fn model(&self, dimension: usize) -> NoiseModel {
        NoiseModel {
            kind: self.kind,
            sigma: self.sigma,
            dimension,
        }
    }

    /// Same spec with the seed shifted for batch run `run`.
    pub fn for_run(&self, run: u64) -> Self {
        NoiseSpec {
            seed: self.seed.wrapping_add(run),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStream {
    model: NoiseModel,
    seed: u64,
    counter: u64,
}

impl NoiseStream {
    pub fn new(model: NoiseModel, seed: u64) -> Self {
        NoiseStream { model, seed, counter: 0 }
    }

    pub fn model(&self) -> &NoiseModel {
        &self.model
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Draws the next noise vector given the current state.
    pub fn sample(&mut self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let c = self.counter;
        self.counter += 1;
        let d = self.model.dimension;
        if self.model.is_zero() {
            return vec![0.0; d];
        }
        let scale = match self.model.kind {
            NoiseKind::StateScaledGaussian => self.model.sigma * (1.0 + norm(x) + norm(y)),
            _ => self.model.sigma,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(c);
        (0..d)
            .map(|_| {
                let xi: f64 = StandardNormal.sample(&mut rng);
                scale * xi
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticOptions {
    /// Fraction of the indices forming the head segment.
    pub head_fraction: f64,
    /// The tail fluctuation must not exceed this multiple of the head's.
    pub ratio: f64,
}

impl Default for DiagnosticOptions {
    fn default() -> Self {
        DiagnosticOptions {
            head_fraction: 0.125,
            ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SumVerdict {
    ConsistentWithConvergence,
    NotConsistent,
}

/// Partial sums `ζ_n = Σ_{m<n} a(m) M_{m+1}` (with `ζ_0 = 0`) and their
/// Cauchy-style fluctuation statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseSumDiagnostic {
    pub dimension: usize,
    #[serde(skip)]
    partial_sums: Vec<f64>,
    pub steps: usize,
    pub split_index: usize,
    pub head_fluctuation: f64,
    pub tail_fluctuation: f64,
    pub options: DiagnosticOptions,
    pub verdict: SumVerdict,
}

impl NoiseSumDiagnostic {
    pub fn zeta(&self, n: usize) -> &[f64] {
        &self.partial_sums[n * self.dimension..(n + 1) * self.dimension]
    }

    pub fn last(&self) -> &[f64] {
        self.zeta(self.steps)
    }

    pub fn is_consistent(&self) -> bool {
        self.verdict == SumVerdict::ConsistentWithConvergence
    }
}

/// Largest per-coordinate range of `ζ` over indices `lo..=hi`.
fn fluctuation(sums: &[f64], dim: usize, lo: usize, hi: usize) -> f64 {
    (0..dim)
        .map(|c| {
            let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
            for n in lo..=hi {
                let v = sums[n * dim + c];
                mn = mn.min(v);
                mx = mx.max(v);
            }
            mx - mn
        })
        .fold(0.0, f64::max)
}

/// Builds `ζ_n` from a noise trace `M_1, M_2, ...` weighted by `a(0), a(1), ...`
/// and compares its fluctuation over the tail against the head.
///
/// Returns `None` for an empty trace.
pub fn weighted_sum_diagnostic<'a, I>(noise: I, schedule: &StepSchedule, opts: DiagnosticOptions) -> Option<NoiseSumDiagnostic>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut it = noise.into_iter().peekable();
    let dim = it.peek()?.len();
    let mut sums = vec![0.0; dim];
    let mut acc = vec![0.0; dim];
    for (m, sample) in it.enumerate() {
        let a = schedule.value(m as u64);
        for (z, s) in acc.iter_mut().zip(sample) {
            *z += a * s;
        }
        sums.extend_from_slice(&acc);
    }
    let steps = sums.len() / dim - 1;
    let split = ((steps as f64 * opts.head_fraction).ceil() as usize).clamp(1, steps);
    let head = fluctuation(&sums, dim, 0, split);
    let tail = fluctuation(&sums, dim, split, steps);
    Some(NoiseSumDiagnostic {
        dimension: dim,
        partial_sums: sums,
        steps,
        split_index: split,
        head_fluctuation: head,
        tail_fluctuation: tail,
        options: opts,
        verdict: if tail <= opts.ratio * head {
            SumVerdict::ConsistentWithConvergence
        } else {
            SumVerdict::NotConsistent
        },
    })
}
