//! Zero-order policy search on the max-oracle Lagrangian.
//!
//! One gradient sample perturbs the gain along a random unit direction U on
//! the sparsity pattern, picks the maximizing dual variable λ′ for the
//! perturbed policy (bang-bang, by the max oracle), and scales the direction
//! by the perturbed Lagrangian value:
//!
//!   ∇̂𝓛(K; U) = (n_𝒦 / r) · 𝓛(K + rU, λ′) · U
//!
//! Training averages M such samples per iteration and descends with step η,
//! projecting onto the pattern after every update. Unstable candidates and
//! sentinel-valued samples trigger backtracking: the attempt is repeated with
//! fresh directions and a shrunken step, and the iterate is kept unchanged
//! when every retry fails. All draws come from streams keyed by (iteration,
//! retry, sample), so a fixed master seed reproduces training bit for bit
//! regardless of thread schedule.

use crate::error::{Error, Result};
use crate::lfc::{DiscreteModel, DisturbanceModel};
use crate::risk::{max_oracle, CostSpec, EvalStrategy, GainEvaluation, NoiseStats, PolicyEvaluator};
use crate::rng::{stream, Domain};
use crate::topology::{project_onto_pattern, StructurePattern};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Feedback gain constrained to a sparsity pattern; entries outside the mask
/// are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredGain {
    values: DMatrix<f64>,
    pattern: StructurePattern,
}

impl StructuredGain {
    /// Rejects values with any nonzero outside the mask.
    pub fn new(values: DMatrix<f64>, pattern: StructurePattern) -> Result<Self> {
        if values.nrows() != pattern.rows() || values.ncols() != pattern.cols() {
            return Err(Error::ShapeMismatch(format!(
                "gain is {}x{} but the pattern is {}x{}",
                values.nrows(),
                values.ncols(),
                pattern.rows(),
                pattern.cols()
            )));
        }
        if !pattern.contains(&values) {
            return Err(Error::InvalidParameter(
                "gain has nonzero entries outside the sparsity pattern".into(),
            ));
        }
        Ok(Self { values, pattern })
    }

    /// Projects arbitrary values onto the pattern, zeroing masked-out entries.
    pub fn from_dense(values: &DMatrix<f64>, pattern: StructurePattern) -> Result<Self> {
        let projected = project_onto_pattern(values, &pattern)?;
        Ok(Self { values: projected, pattern })
    }

    pub fn zeros(pattern: StructurePattern) -> Self {
        Self { values: DMatrix::zeros(pattern.rows(), pattern.cols()), pattern }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn pattern(&self) -> &StructurePattern {
        &self.pattern
    }
}

/// Uniform draw from the unit Frobenius sphere of the pattern's support
/// subspace: independent standard normals on the support, then normalized.
/// Entries are filled in row-major order, so a given rng state yields one
/// specific direction.
pub fn sample_structured_direction<R: Rng>(
    pattern: &StructurePattern,
    rng: &mut R,
) -> DMatrix<f64> {
    loop {
        let mut u = DMatrix::zeros(pattern.rows(), pattern.cols());
        for i in 0..pattern.rows() {
            for j in 0..pattern.cols() {
                if pattern.mask()[(i, j)] {
                    u[(i, j)] = rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let norm = u.norm();
        if norm > 1e-12 {
            return u / norm;
        }
    }
}

/// One zero-order gradient sample, or the signal that the perturbed policy
/// was unstable (the Lagrangian sentinel makes the estimate undefined).
#[derive(Clone, Debug)]
pub enum ZopgOutcome {
    Gradient {
        gradient: DMatrix<f64>,
        /// λ′ the max oracle picked for the perturbed policy; always 0 or Λ.
        lambda: f64,
        /// 𝓛(K + rU, λ′), the scalar that scales the direction.
        lagrangian: f64,
    },
    Unstable,
}

/// Evaluates the perturbed policy K + rU under `strategy` and forms
/// (n_𝒦/r)·𝓛(K+rU, λ′)·U. The perturbation stays on the pattern because U
/// shares it.
#[allow(clippy::too_many_arguments)]
pub fn zopg(
    evaluator: &PolicyEvaluator,
    k: &StructuredGain,
    u: &DMatrix<f64>,
    r: f64,
    spec: &CostSpec,
    stats: &NoiseStats,
    strategy: EvalStrategy,
    disturbance: &DisturbanceModel,
    seed: u64,
) -> Result<ZopgOutcome> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidParameter(format!("smoothing radius must be > 0, got {r}")));
    }
    let perturbed = k.matrix() + r * u;
    let eval = strategy.evaluate(evaluator, &perturbed, disturbance, seed)?;
    if !eval.stable {
        return Ok(ZopgOutcome::Unstable);
    }
    let lambda = max_oracle(&eval, stats, spec);
    let lagrangian = eval.lagrangian_at(lambda);
    let scale = k.pattern().n_nonzero() as f64 / r;
    Ok(ZopgOutcome::Gradient { gradient: scale * lagrangian * u, lambda, lagrangian })
}

/// Backtracking policy for rejected steps.
#[derive(Clone, Copy, Debug)]
pub struct BacktrackConfig {
    pub enabled: bool,
    /// Step-size multiplier per retry, in (0, 1).
    pub shrink: f64,
    /// Retries after the initial attempt.
    pub max_tries: usize,
}

impl Default for BacktrackConfig {
    fn default() -> Self {
        Self { enabled: true, shrink: 0.5, max_tries: 10 }
    }
}

/// Training hyperparameters. The dual bound Λ lives in `CostSpec`; the risk
/// budget and weights come from the same place, so the optimizer cannot
/// disagree with the evaluator about the constraint.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Step size η. Zero is allowed and makes every iteration a no-op.
    pub eta: f64,
    /// Smoothing radius r of the zero-order estimator.
    pub r: f64,
    /// ZOPG samples M averaged per iteration.
    pub samples_per_iter: usize,
    /// Iteration count J.
    pub iterations: usize,
    /// Target stationarity ε; reported against the gradient norm, never used
    /// to stop early.
    pub epsilon: f64,
    /// How each perturbed policy is evaluated.
    pub strategy: EvalStrategy,
    pub master_seed: u64,
    pub backtrack: BacktrackConfig,
    /// Keep a gain snapshot every this many iterations.
    pub snapshot_every: Option<usize>,
    /// Common random numbers: reuse one disturbance stream for all samples of
    /// an iteration (directions stay fresh). Off by default.
    pub crn: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            problems.push(format!("eta must be ≥ 0 and finite, got {}", self.eta));
        }
        if !(self.r > 0.0) || !self.r.is_finite() {
            problems.push(format!("r must be > 0 and finite, got {}", self.r));
        }
        if self.samples_per_iter == 0 {
            problems.push("M (samples per iteration) must be ≥ 1".into());
        }
        if self.samples_per_iter as u64 > u32::MAX as u64 {
            problems.push("M must fit in 32 bits".into());
        }
        if self.iterations == 0 {
            problems.push("J (iterations) must be ≥ 1".into());
        }
        if !(self.epsilon >= 0.0) {
            problems.push(format!("epsilon must be ≥ 0, got {}", self.epsilon));
        }
        if self.backtrack.enabled {
            if !(self.backtrack.shrink > 0.0 && self.backtrack.shrink < 1.0) {
                problems.push(format!(
                    "backtrack shrink must lie in (0,1), got {}",
                    self.backtrack.shrink
                ));
            }
            if self.backtrack.max_tries == 0 {
                problems.push("backtrack max_tries must be ≥ 1 when enabled".into());
            }
        }
        if let EvalStrategy::MonteCarlo { horizon, burn_in, n_rollouts } = self.strategy {
            if horizon <= burn_in {
                problems.push(format!("horizon {horizon} must exceed burn-in {burn_in}"));
            }
            if n_rollouts == 0 {
                problems.push("n_rollouts must be ≥ 1".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// One completed training iteration, measured on the post-update iterate
/// with the exact Lyapunov oracle (deterministic, independent of the
/// Monte-Carlo noise driving the updates).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub iter: usize,
    pub r0: f64,
    pub rc: f64,
    /// λ the max oracle picks for this iterate.
    pub lambda: f64,
    /// Frobenius norm of the averaged gradient actually applied; 0 when the
    /// iterate was kept unchanged.
    pub grad_norm: f64,
    /// Closed-loop spectral radius on the regulated core.
    pub spectral_radius: f64,
    /// Cumulative simulated control-loop time consumed by gradient
    /// evaluations (steps × dt, including failed backtracking attempts).
    /// Deterministic, unlike wall time.
    pub sim_elapsed_s: f64,
    /// Cumulative wall-clock seconds; informational only.
    pub wall_elapsed_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    /// (iteration, gain) pairs captured at the configured cadence.
    pub snapshots: Vec<(usize, StructuredGain)>,
}

enum SampleResult {
    Gradient(DMatrix<f64>),
    Sentinel,
}

/// SGDmax: J iterations of M-sample averaged zero-order descent with the
/// bang-bang dual chosen per sample. Requires a stabilizing initial gain.
pub fn train(
    model: &DiscreteModel,
    k0: &StructuredGain,
    config: &TrainConfig,
    spec: &CostSpec,
    stats: &NoiseStats,
    disturbance: &DisturbanceModel,
) -> Result<(StructuredGain, TrainLog)> {
    config.validate()?;
    let evaluator = PolicyEvaluator::new(model, spec, stats)?;
    let rho0 = evaluator.core_spectral_radius(k0.matrix())?;
    if rho0 >= 1.0 {
        return Err(Error::UnstablePolicy { spectral_radius: rho0 });
    }

    let pattern = k0.pattern().clone();
    let sim_seconds_per_eval = match config.strategy {
        EvalStrategy::MonteCarlo { horizon, n_rollouts, .. } => {
            horizon as f64 * n_rollouts as f64 * model.dt
        }
        EvalStrategy::Lyapunov => 0.0,
    };
    let total_tries = if config.backtrack.enabled { 1 + config.backtrack.max_tries } else { 1 };

    let mut k = k0.clone();
    let mut log = TrainLog::default();
    let mut sim_elapsed = 0.0;
    let started = std::time::Instant::now();

    for iter in 0..config.iterations {
        let mut applied_norm = 0.0;
        for try_idx in 0..total_tries {
            let eta_try = config.eta * config.backtrack.shrink.powi(try_idx as i32);
            let samples: Vec<Result<SampleResult>> = (0..config.samples_per_iter)
                .into_par_iter()
                .map(|s| {
                    let key = ((try_idx as u64) << 32) | s as u64;
                    let mut dir_rng = stream(config.master_seed, Domain::Direction, iter as u64, key);
                    let u = sample_structured_direction(&pattern, &mut dir_rng);
                    let noise_key = if config.crn { (try_idx as u64) << 32 } else { key };
                    let eval_seed: u64 =
                        stream(config.master_seed, Domain::GradientEval, iter as u64, noise_key)
                            .gen();
                    match zopg(
                        &evaluator,
                        &k,
                        &u,
                        config.r,
                        spec,
                        stats,
                        config.strategy,
                        disturbance,
                        eval_seed,
                    )? {
                        ZopgOutcome::Gradient { gradient, .. } => {
                            Ok(SampleResult::Gradient(gradient))
                        }
                        ZopgOutcome::Unstable => Ok(SampleResult::Sentinel),
                    }
                })
                .collect();
            sim_elapsed += sim_seconds_per_eval * config.samples_per_iter as f64;

            let mut average = DMatrix::zeros(pattern.rows(), pattern.cols());
            let mut hit_sentinel = false;
            for sample in samples {
                match sample? {
                    SampleResult::Gradient(g) => {
                        average += g / config.samples_per_iter as f64;
                    }
                    SampleResult::Sentinel => {
                        hit_sentinel = true;
                    }
                }
            }
            if hit_sentinel {
                continue;
            }
            let stepped = k.matrix() - eta_try * &average;
            let candidate = StructuredGain::from_dense(&stepped, pattern.clone())?;
            if evaluator.core_spectral_radius(candidate.matrix())? >= 1.0 {
                continue;
            }
            k = candidate;
            applied_norm = average.norm();
            break;
        }

        let eval = match evaluator.lyapunov(k.matrix()) {
            Ok(eval) => eval,
            Err(Error::UnstablePolicy { spectral_radius }) => {
                GainEvaluation::unstable_sentinel(spectral_radius, evaluator.delta_bar())
            }
            Err(e) => return Err(e),
        };
        log.records.push(TrainRecord {
            iter,
            r0: eval.r0,
            rc: eval.rc,
            lambda: max_oracle(&eval, stats, spec),
            grad_norm: applied_norm,
            spectral_radius: eval.spectral_radius,
            sim_elapsed_s: sim_elapsed,
            wall_elapsed_s: started.elapsed().as_secs_f64(),
        });
        if let Some(every) = config.snapshot_every {
            if every > 0 && (iter + 1) % every == 0 {
                log.snapshots.push((iter, k.clone()));
            }
        }
    }

    Ok((k, log))
}
