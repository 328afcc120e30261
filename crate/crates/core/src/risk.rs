//! Cost and risk evaluation for structured output-feedback gains.
//!
//! Two interchangeable evaluators measure the same stationary quantities: a
//! Monte-Carlo estimator that rolls the closed loop forward, and an exact
//! Lyapunov-equation oracle. Both report
//!
//!   r0 = lim (1/T) E Σ yᵀQy + uᵀR_u u          (average quadratic cost)
//!   rc = lim (1/T) E Σ 4yᵀQCW_sCᵀQy + 4yᵀQC·M3  (reformulated risk value)
//!
//! with the mean-variance risk constraint expressed as rc ≤ δ̄,
//! δ̄ = δ − m4 + 4tr((W_s Q_c)²). All noise moments are carried for the
//! state-space noise w_s = B_wd·w, with Q_c = CᵀQC applying the output weight
//! in state coordinates.
//!
//! Stationary evaluation of the grid model needs care: the ACE integrator
//! states accumulate the regulated output but feed nothing back (their A_d
//! columns are identity columns and C never reads them), and the network-wide
//! tie-flow sum is exactly conserved and never excited from a zero initial
//! state. Both facts make the naive closed-loop spectral radius identically 1
//! and the full-state Lyapunov equation singular, while every measured output
//! is oblivious to the offending directions. Evaluators therefore restrict to
//! the regulated core: annotated inert states are deleted and conserved
//! functionals are deflated through an orthonormal basis of their complement.
//! The annotations are re-verified numerically before being trusted, and the
//! reduction leaves r0, rc, means, and covariances of the outputs unchanged.
//! Models without annotations pass through untouched.

use crate::error::{Error, Result};
use crate::lfc::{sample_disturbance, DiscreteModel, DisturbanceModel, GaussianNoise};
use crate::rng::{stream, Domain};
use crate::sgdmax::StructuredGain;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// States beyond this magnitude flag the rollout as divergent.
pub const OVERFLOW_GUARD: f64 = 1e9;

/// Quadratic weights and risk budget.
#[derive(Clone, Debug)]
pub struct CostSpec {
    q: DMatrix<f64>,
    r_u: DMatrix<f64>,
    delta: f64,
    lambda_max: f64,
}

impl CostSpec {
    /// Q must be symmetric PSD, R_u symmetric PD, delta ≥ 0, Lambda > 0.
    pub fn new(q: DMatrix<f64>, r_u: DMatrix<f64>, delta: f64, lambda_max: f64) -> Result<Self> {
        require_symmetric(&q, "Q")?;
        require_symmetric(&r_u, "R_u")?;
        let q_min = min_symmetric_eigenvalue(&q);
        if q_min < -1e-10 * q.amax().max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "Q must be positive semidefinite (eigenvalue {q_min})"
            )));
        }
        let r_min = min_symmetric_eigenvalue(&r_u);
        if r_min <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "R_u must be positive definite (eigenvalue {r_min})"
            )));
        }
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::InvalidParameter(format!("delta must be ≥ 0, got {delta}")));
        }
        if !(lambda_max > 0.0) || !lambda_max.is_finite() {
            return Err(Error::InvalidParameter(format!("Lambda must be > 0, got {lambda_max}")));
        }
        Ok(Self { q, r_u, delta, lambda_max })
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r_u(&self) -> &DMatrix<f64> {
        &self.r_u
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    /// Same weights and dual bound, different risk budget.
    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        Self::new(self.q.clone(), self.r_u.clone(), delta, self.lambda_max)
    }
}

/// Moments of the state-space disturbance w_s = B_wd·w and derived constants.
#[derive(Clone, Debug)]
pub struct NoiseStats {
    w_bar: DVector<f64>,
    w: DMatrix<f64>,
    m3: DVector<f64>,
    m4: f64,
    q_c: DMatrix<f64>,
    delta_bar: f64,
}

impl NoiseStats {
    fn assemble(
        w_bar: DVector<f64>,
        w: DMatrix<f64>,
        m3: DVector<f64>,
        m4: f64,
        q_c: DMatrix<f64>,
        delta: f64,
    ) -> Result<Self> {
        let n = w_bar.len();
        if w.nrows() != n || w.ncols() != n || q_c.nrows() != n || q_c.ncols() != n || m3.len() != n
        {
            return Err(Error::ShapeMismatch(format!(
                "noise moments must all live in state dimension {n}"
            )));
        }
        require_symmetric(&w, "W")?;
        require_symmetric(&q_c, "Q_c")?;
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::InvalidParameter(format!("delta must be ≥ 0, got {delta}")));
        }
        let wq = &w * &q_c;
        let delta_bar = delta - m4 + 4.0 * (&wq * &wq).trace();
        Ok(Self { w_bar, w, m3, m4, q_c, delta_bar })
    }

    /// Closed-form gaussian moments: M3 = 0 (odd central moment) and
    /// m4 = 2·tr((W·Q_c)²) (variance of a gaussian quadratic form).
    pub fn gaussian(
        w_bar: DVector<f64>,
        w: DMatrix<f64>,
        q_c: DMatrix<f64>,
        delta: f64,
    ) -> Result<Self> {
        let n = w_bar.len();
        let wq = &w * &q_c;
        let m4 = 2.0 * (&wq * &wq).trace();
        Self::assemble(w_bar, w, DVector::zeros(n), m4, q_c, delta)
    }

    /// Gaussian load noise mapped onto the state through B_wd, with
    /// Q_c = CᵀQC taken from the model and output weight.
    pub fn for_gaussian_load(
        model: &DiscreteModel,
        load: &GaussianNoise,
        q: &DMatrix<f64>,
        delta: f64,
    ) -> Result<Self> {
        if load.dim() != model.n_disturbances() {
            return Err(Error::ShapeMismatch(format!(
                "load noise dimension {} vs {} disturbance inputs",
                load.dim(),
                model.n_disturbances()
            )));
        }
        if q.nrows() != model.n_outputs() || q.ncols() != model.n_outputs() {
            return Err(Error::ShapeMismatch(format!(
                "Q is {}x{} but the model has {} outputs",
                q.nrows(),
                q.ncols(),
                model.n_outputs()
            )));
        }
        let w_bar = &model.b_wd * load.mean();
        let w = &model.b_wd * load.covariance() * model.b_wd.transpose();
        let q_c = model.c.transpose() * q * &model.c;
        Self::gaussian(w_bar, w, q_c, delta)
    }

    pub fn w_bar(&self) -> &DVector<f64> {
        &self.w_bar
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn m3(&self) -> &DVector<f64> {
        &self.m3
    }

    pub fn m4(&self) -> f64 {
        self.m4
    }

    pub fn q_c(&self) -> &DMatrix<f64> {
        &self.q_c
    }

    pub fn delta_bar(&self) -> f64 {
        self.delta_bar
    }
}

/// Empirical moments with population normalization: mean, covariance,
/// M3 = avg (w−w̄)·[(w−w̄)ᵀQ_c(w−w̄)], m4 = avg ((w−w̄)ᵀQ_c(w−w̄) − tr(WQ_c))².
/// δ̄ uses the empirical m4 and tr((WQ_c)²), consistent with data-driven use.
pub fn estimate_noise_stats(
    samples: &[DVector<f64>],
    q_c: &DMatrix<f64>,
    delta: f64,
) -> Result<NoiseStats> {
    if samples.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 noise samples, got {}",
            samples.len()
        )));
    }
    let n = samples[0].len();
    if samples.iter().any(|s| s.len() != n) {
        return Err(Error::ShapeMismatch("noise samples have inconsistent dimensions".into()));
    }
    if q_c.nrows() != n || q_c.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "Q_c is {}x{} but samples have dimension {n}",
            q_c.nrows(),
            q_c.ncols()
        )));
    }
    let count = samples.len() as f64;
    let mut w_bar = DVector::zeros(n);
    for s in samples {
        w_bar += s;
    }
    w_bar /= count;

    let mut w = DMatrix::zeros(n, n);
    for s in samples {
        let d = s - &w_bar;
        w.syger(1.0 / count, &d, &d, 1.0);
    }
    let w = (&w + w.transpose()) * 0.5;

    let tr_wq = (&w * q_c).trace();
    let mut m3 = DVector::zeros(n);
    let mut m4 = 0.0;
    for s in samples {
        let d = s - &w_bar;
        let quad = d.dot(&(q_c * &d));
        m3.axpy(quad / count, &d, 1.0);
        m4 += (quad - tr_wq) * (quad - tr_wq) / count;
    }
    NoiseStats::assemble(w_bar, w, m3, m4, q_c.clone(), delta)
}

/// yᵀQy + uᵀR_u u.
pub fn stage_cost(y: &DVector<f64>, u: &DVector<f64>, spec: &CostSpec) -> f64 {
    quad_form(&spec.q, y) + quad_form(&spec.r_u, u)
}

/// One-step risk contribution 4yᵀ(QC W_s CᵀQ)y + 4yᵀQ(C·M3), the term whose
/// ergodic average forms rc. `c` maps states to outputs for the model whose
/// noise `stats` describes.
pub fn risk_stage(y: &DVector<f64>, stats: &NoiseStats, spec: &CostSpec, c: &DMatrix<f64>) -> f64 {
    // v = CᵀQy pulls the output back to state coordinates, where the
    // state-space moments apply.
    let v = c.transpose() * (&spec.q * y);
    4.0 * (v.dot(&(&stats.w * &v)) + v.dot(&stats.m3))
}

/// Outcome of evaluating one gain: average cost, risk value, stability.
///
/// `spectral_radius` is taken on the regulated core when the model carries
/// structural annotations (the full closed loop of the grid model holds
/// integrators and a conserved flow sum at exactly 1 for every gain, so the
/// unreduced radius carries no information); it is the plain closed-loop
/// radius otherwise.
#[derive(Clone, Copy, Debug)]
pub struct GainEvaluation {
    pub r0: f64,
    pub rc: f64,
    pub delta_bar: f64,
    pub stable: bool,
    pub spectral_radius: f64,
}

impl GainEvaluation {
    /// r0 + λ(rc − δ̄); +∞ for unstable evaluations regardless of λ.
    pub fn lagrangian_at(&self, lambda: f64) -> f64 {
        if !self.stable || !self.r0.is_finite() || !self.rc.is_finite() {
            return f64::INFINITY;
        }
        self.r0 + lambda * (self.rc - self.delta_bar)
    }

    pub fn is_feasible(&self) -> bool {
        self.stable && self.rc <= self.delta_bar
    }

    pub fn unstable_sentinel(spectral_radius: f64, delta_bar: f64) -> Self {
        Self { r0: f64::INFINITY, rc: f64::INFINITY, delta_bar, stable: false, spectral_radius }
    }
}

/// Maximizer of the Lagrangian over λ ∈ [0, Λ]: the Lagrangian is affine in
/// λ, so the max sits at an endpoint chosen by the constraint sign. The
/// boundary rc = δ̄ resolves to 0 (any choice maximizes; feasibility wins).
pub fn max_oracle(eval: &GainEvaluation, stats: &NoiseStats, spec: &CostSpec) -> f64 {
    if eval.rc <= stats.delta_bar {
        0.0
    } else {
        spec.lambda_max
    }
}

/// Max |eigenvalue|, via the real Schur form.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != a.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "spectral radius needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 100_000)
        .ok_or_else(|| Error::Numerical("eigenvalue iteration did not converge".into()))?;
    Ok(schur.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max))
}

/// Verified reduction of an annotated model onto its regulated core.
struct CoreProjector {
    /// State indices kept after inert-state deletion, ascending.
    keep: Vec<usize>,
    /// Orthonormal basis (over the kept coordinates) of the complement of
    /// the conserved functionals; `keep.len()` × core dimension.
    basis: DMatrix<f64>,
}

impl CoreProjector {
    fn for_model(model: &DiscreteModel) -> Result<Self> {
        let n = model.n_states();
        let a_d = &model.a_d;
        let c = &model.c;
        let scale = a_d.amax().max(1.0);

        let mut is_inert = vec![false; n];
        for &i in &model.structure.inert_states {
            if i >= n {
                return Err(Error::ShapeMismatch(format!(
                    "inert-state annotation {i} outside state dimension {n}"
                )));
            }
            for r in 0..n {
                let expected = if r == i { 1.0 } else { 0.0 };
                if (a_d[(r, i)] - expected).abs() > 1e-10 * scale {
                    return Err(Error::Numerical(format!(
                        "state {i} is annotated inert but A_d column {i} is not an identity column"
                    )));
                }
            }
            if (0..c.nrows()).any(|r| c[(r, i)].abs() > 1e-12) {
                return Err(Error::Numerical(format!(
                    "state {i} is annotated inert but C reads it"
                )));
            }
            is_inert[i] = true;
        }
        let keep: Vec<usize> = (0..n).filter(|&i| !is_inert[i]).collect();

        let mut restricted = Vec::new();
        for v in &model.structure.conserved_functionals {
            if v.len() != n {
                return Err(Error::ShapeMismatch(
                    "conserved-functional annotation has wrong dimension".into(),
                ));
            }
            let v_scale = v.amax().max(1.0);
            let va = v.transpose() * a_d;
            if (va - v.transpose()).amax() > 1e-10 * v_scale * scale {
                return Err(Error::Numerical(
                    "annotated functional is not conserved by A_d".into(),
                ));
            }
            if (v.transpose() * &model.b_ud).amax() > 1e-10 * v_scale
                || (v.transpose() * &model.b_wd).amax() > 1e-10 * v_scale
            {
                return Err(Error::Numerical(
                    "annotated conserved functional is excited by an input".into(),
                ));
            }
            if model.structure.inert_states.iter().any(|&i| v[i].abs() > 1e-12 * v_scale) {
                return Err(Error::Numerical(
                    "conserved functional overlaps an inert state".into(),
                ));
            }
            restricted.push(DVector::from_fn(keep.len(), |r, _| v[keep[r]]));
        }

        let basis = orthonormal_complement(&restricted, keep.len())?;
        Ok(Self { keep, basis })
    }

    fn identity(n: usize) -> Self {
        Self { keep: (0..n).collect(), basis: DMatrix::identity(n, n) }
    }

    /// Zᵀ · M[keep, keep] · Z.
    fn reduce_square(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let sub = submatrix(m, &self.keep, &self.keep);
        self.basis.transpose() * sub * &self.basis
    }

    /// Zᵀ · M[keep, :] (input maps).
    fn reduce_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let rows: Vec<usize> = (0..m.ncols()).collect();
        let sub = submatrix(m, &self.keep, &rows);
        self.basis.transpose() * sub
    }

    /// M[:, keep] · Z (output maps).
    fn reduce_cols(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let rows: Vec<usize> = (0..m.nrows()).collect();
        let sub = submatrix(m, &rows, &self.keep);
        sub * &self.basis
    }

    fn reduce_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let sub = DVector::from_fn(self.keep.len(), |r, _| v[self.keep[r]]);
        self.basis.transpose() * sub
    }
}

/// Orthonormal basis of the complement of span(vs) in R^n, via twice-applied
/// modified Gram-Schmidt over [vs, e_0, ..., e_{n-1}]. Deterministic.
fn orthonormal_complement(vs: &[DVector<f64>], n: usize) -> Result<DMatrix<f64>> {
    let mut excluded: Vec<DVector<f64>> = Vec::new();
    for v in vs {
        let mut u = v.clone();
        for b in &excluded {
            let p = b.dot(&u);
            u.axpy(-p, b, 1.0);
        }
        for b in &excluded {
            let p = b.dot(&u);
            u.axpy(-p, b, 1.0);
        }
        let norm = u.norm();
        if norm <= 1e-12 * v.norm().max(1.0) {
            return Err(Error::InvalidParameter(
                "conserved functionals are linearly dependent".into(),
            ));
        }
        excluded.push(u / norm);
    }
    let mut kept: Vec<DVector<f64>> = Vec::new();
    for i in 0..n {
        let mut u = DVector::zeros(n);
        u[i] = 1.0;
        for _ in 0..2 {
            for b in excluded.iter().chain(kept.iter()) {
                let p = b.dot(&u);
                u.axpy(-p, b, 1.0);
            }
        }
        let norm = u.norm();
        if norm > 1e-8 {
            kept.push(u / norm);
        }
    }
    if kept.len() + excluded.len() != n {
        return Err(Error::Numerical(format!(
            "complement construction found {} + {} directions in dimension {n}",
            kept.len(),
            excluded.len()
        )));
    }
    let mut basis = DMatrix::zeros(n, kept.len());
    for (j, b) in kept.iter().enumerate() {
        basis.column_mut(j).copy_from(b);
    }
    Ok(basis)
}

fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

fn require_symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "{name} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(());
    }
    let asym = (m - m.transpose()).amax();
    if asym > 1e-10 * m.amax().max(1.0) {
        return Err(Error::InvalidParameter(format!("{name} must be symmetric")));
    }
    Ok(())
}

fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Smith doubling iteration for X = A X Aᵀ + Q, valid for ρ(A) < 1.
fn solve_discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let mut x = q.clone();
    let mut ak = a.clone();
    for _ in 0..200 {
        let inc = &ak * &x * ak.transpose();
        x += &inc;
        if inc.amax() <= 1e-15 * x.amax().max(1.0) {
            return Ok((&x + x.transpose()) * 0.5);
        }
        ak = &ak * &ak;
    }
    Err(Error::Numerical(
        "stationary covariance iteration did not converge (spectral radius too close to 1)".into(),
    ))
}

/// Precomputed evaluation context for one (model, weights, noise) triple.
/// Construction verifies the structural annotations and the consistency of
/// `stats.q_c` with CᵀQC, then caches the regulated-core reduction so each
/// gain evaluation only pays for its own Lyapunov solve or rollouts.
pub struct PolicyEvaluator {
    // full-state pieces for simulation
    a_d: DMatrix<f64>,
    b_ud: DMatrix<f64>,
    b_wd: DMatrix<f64>,
    c: DMatrix<f64>,
    q: DMatrix<f64>,
    r_u: DMatrix<f64>,
    /// y-space risk forms: risk_stage(y) = yᵀ·risk_quad·y + risk_lin·y.
    risk_quad: DMatrix<f64>,
    risk_lin: DVector<f64>,
    // regulated-core pieces
    a_hat: DMatrix<f64>,
    b_hat: DMatrix<f64>,
    c_hat: DMatrix<f64>,
    w_hat: DMatrix<f64>,
    w_bar_hat: DVector<f64>,
    s_r_hat: DMatrix<f64>,
    g_hat: DVector<f64>,
    delta_bar: f64,
}

impl PolicyEvaluator {
    pub fn new(model: &DiscreteModel, spec: &CostSpec, stats: &NoiseStats) -> Result<Self> {
        let n = model.n_states();
        let m = model.n_controls();
        let p = model.n_outputs();
        if spec.q.nrows() != p {
            return Err(Error::ShapeMismatch(format!(
                "Q is {}x{} but the model has {p} outputs",
                spec.q.nrows(),
                spec.q.ncols()
            )));
        }
        if spec.r_u.nrows() != m {
            return Err(Error::ShapeMismatch(format!(
                "R_u is {}x{} but the model has {m} controls",
                spec.r_u.nrows(),
                spec.r_u.ncols()
            )));
        }
        if stats.w_bar.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "noise stats have dimension {} but the state dimension is {n}",
                stats.w_bar.len()
            )));
        }
        let q_c = model.c.transpose() * &spec.q * &model.c;
        if (&q_c - &stats.q_c).amax() > 1e-9 * q_c.amax().max(1.0) {
            return Err(Error::InvalidParameter(
                "NoiseStats.Q_c does not match CᵀQC for this model and cost spec".into(),
            ));
        }

        let projector = if model.structure.inert_states.is_empty()
            && model.structure.conserved_functionals.is_empty()
        {
            CoreProjector::identity(n)
        } else {
            CoreProjector::for_model(model)?
        };

        let qc_w = &q_c * &stats.w * &q_c;
        let s_r = 4.0 * qc_w;
        let g = 4.0 * (&q_c * &stats.m3);
        let qc_f = &spec.q * &model.c;
        let risk_quad = 4.0 * (&qc_f * &stats.w * qc_f.transpose());
        let risk_lin = 4.0 * (&qc_f * &stats.m3);

        Ok(Self {
            a_d: model.a_d.clone(),
            b_ud: model.b_ud.clone(),
            b_wd: model.b_wd.clone(),
            c: model.c.clone(),
            q: spec.q.clone(),
            r_u: spec.r_u.clone(),
            risk_quad,
            risk_lin,
            a_hat: projector.reduce_square(&model.a_d),
            b_hat: projector.reduce_rows(&model.b_ud),
            c_hat: projector.reduce_cols(&model.c),
            w_hat: projector.reduce_square(&stats.w),
            w_bar_hat: projector.reduce_vec(&stats.w_bar),
            s_r_hat: projector.reduce_square(&s_r),
            g_hat: projector.reduce_vec(&g),
            delta_bar: stats.delta_bar,
        })
    }

    pub fn delta_bar(&self) -> f64 {
        self.delta_bar
    }

    fn core_closed_loop(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a_hat - &self.b_hat * k * &self.c_hat
    }

    /// Spectral radius of the closed loop on the regulated core.
    pub fn core_spectral_radius(&self, k: &DMatrix<f64>) -> Result<f64> {
        spectral_radius(&self.core_closed_loop(k))
    }

    /// Exact stationary evaluation: solves the core Lyapunov equation
    /// Σ = Â_K Σ Â_Kᵀ + Ŵ and mean equation μ = (I − Â_K)⁻¹ŵ̄, then
    /// r0 = tr(Ŝ_K Σ) + μᵀŜ_K μ and rc = tr(Ŝ_r Σ) + μᵀŜ_r μ + ĝᵀμ.
    /// Errors with `UnstablePolicy` when the core radius reaches 1.
    pub fn lyapunov(&self, k: &DMatrix<f64>) -> Result<GainEvaluation> {
        let a_k = self.core_closed_loop(k);
        let rho = spectral_radius(&a_k)?;
        if rho >= 1.0 {
            return Err(Error::UnstablePolicy { spectral_radius: rho });
        }
        let sigma = solve_discrete_lyapunov(&a_k, &self.w_hat)?;
        let dim = a_k.nrows();
        let mu = if dim == 0 {
            DVector::zeros(0)
        } else {
            let eye = DMatrix::identity(dim, dim);
            (eye - &a_k)
                .lu()
                .solve(&self.w_bar_hat)
                .ok_or_else(|| Error::Numerical("I − A_K singular on the regulated core".into()))?
        };
        let qk = &self.q + k.transpose() * &self.r_u * k;
        let s_k = self.c_hat.transpose() * qk * &self.c_hat;
        let r0 = (&s_k * &sigma).trace() + quad_form(&s_k, &mu);
        let rc = (&self.s_r_hat * &sigma).trace() + quad_form(&self.s_r_hat, &mu) + self.g_hat.dot(&mu);
        Ok(GainEvaluation { r0, rc, delta_bar: self.delta_bar, stable: true, spectral_radius: rho })
    }

    /// Monte-Carlo estimate over `n_rollouts` independent rollouts from
    /// x0 = 0, averaging stage costs over t ∈ [burn_in, horizon). Rollout r
    /// draws from the stream (seed, Rollout, r); instability (core radius
    /// ≥ 1 or state overflow) yields the +∞ sentinel, not an error.
    pub fn monte_carlo(
        &self,
        k: &DMatrix<f64>,
        horizon: usize,
        burn_in: usize,
        n_rollouts: usize,
        disturbance: &DisturbanceModel,
        seed: u64,
    ) -> Result<GainEvaluation> {
        if horizon <= burn_in {
            return Err(Error::InvalidParameter(format!(
                "horizon {horizon} must exceed burn-in {burn_in}"
            )));
        }
        if n_rollouts == 0 {
            return Err(Error::InvalidParameter("need at least one rollout".into()));
        }
        let rho = self.core_spectral_radius(k)?;
        if rho >= 1.0 {
            return Ok(GainEvaluation::unstable_sentinel(rho, self.delta_bar));
        }
        let a_k = &self.a_d - &self.b_ud * k * &self.c;
        let outcomes: Vec<Result<Option<(f64, f64)>>> = (0..n_rollouts)
            .into_par_iter()
            .map(|r| self.rollout(&a_k, k, horizon, burn_in, disturbance, seed, r as u64))
            .collect();
        let mut r0 = 0.0;
        let mut rc = 0.0;
        for outcome in outcomes {
            match outcome? {
                Some((a, b)) => {
                    r0 += a / n_rollouts as f64;
                    rc += b / n_rollouts as f64;
                }
                None => return Ok(GainEvaluation::unstable_sentinel(rho, self.delta_bar)),
            }
        }
        Ok(GainEvaluation { r0, rc, delta_bar: self.delta_bar, stable: true, spectral_radius: rho })
    }

    /// One rollout's time-averaged (stage cost, risk stage); None on overflow.
    fn rollout(
        &self,
        a_k: &DMatrix<f64>,
        k: &DMatrix<f64>,
        horizon: usize,
        burn_in: usize,
        disturbance: &DisturbanceModel,
        seed: u64,
        rollout: u64,
    ) -> Result<Option<(f64, f64)>> {
        let n = self.a_d.nrows();
        let mut rng = stream(seed, Domain::Rollout, rollout, 0);
        let mut x = DVector::zeros(n);
        let mut x_next = DVector::zeros(n);
        let mut y = DVector::zeros(self.c.nrows());
        let mut u = DVector::zeros(k.nrows());
        let mut r0_sum = 0.0;
        let mut rc_sum = 0.0;
        for t in 0..horizon {
            y.gemv(1.0, &self.c, &x, 0.0);
            u.gemv(-1.0, k, &y, 0.0);
            if t >= burn_in {
                r0_sum += quad_form(&self.q, &y) + quad_form(&self.r_u, &u);
                rc_sum += quad_form(&self.risk_quad, &y) + self.risk_lin.dot(&y);
            }
            let w = sample_disturbance(disturbance, t, &mut rng)?;
            x_next.gemv(1.0, a_k, &x, 0.0);
            x_next.gemv(1.0, &self.b_wd, &w, 1.0);
            std::mem::swap(&mut x, &mut x_next);
            if x.amax() > OVERFLOW_GUARD {
                return Ok(None);
            }
        }
        let steps = (horizon - burn_in) as f64;
        Ok(Some((r0_sum / steps, rc_sum / steps)))
    }
}

/// Evaluation strategy selector shared by the training loop and the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalStrategy {
    MonteCarlo { horizon: usize, burn_in: usize, n_rollouts: usize },
    Lyapunov,
}

impl EvalStrategy {
    /// Uniform entry point: Monte-Carlo simulates; Lyapunov is exact and maps
    /// instability to the +∞ sentinel so optimizers can keep iterating.
    pub fn evaluate(
        &self,
        evaluator: &PolicyEvaluator,
        k: &DMatrix<f64>,
        disturbance: &DisturbanceModel,
        seed: u64,
    ) -> Result<GainEvaluation> {
        match *self {
            EvalStrategy::MonteCarlo { horizon, burn_in, n_rollouts } => {
                evaluator.monte_carlo(k, horizon, burn_in, n_rollouts, disturbance, seed)
            }
            EvalStrategy::Lyapunov => match evaluator.lyapunov(k) {
                Ok(eval) => Ok(eval),
                Err(Error::UnstablePolicy { spectral_radius }) => {
                    Ok(GainEvaluation::unstable_sentinel(spectral_radius, evaluator.delta_bar()))
                }
                Err(e) => Err(e),
            },
        }
    }
}

/// Monte-Carlo estimate of the stationary cost and risk for a structured gain.
#[allow(clippy::too_many_arguments)]
pub fn mc_evaluate(
    model: &DiscreteModel,
    k: &StructuredGain,
    spec: &CostSpec,
    stats: &NoiseStats,
    horizon: usize,
    burn_in: usize,
    disturbance: &DisturbanceModel,
    seed: u64,
    n_rollouts: usize,
) -> Result<GainEvaluation> {
    let evaluator = PolicyEvaluator::new(model, spec, stats)?;
    evaluator.monte_carlo(k.matrix(), horizon, burn_in, n_rollouts, disturbance, seed)
}

/// Exact stationary evaluation via the regulated-core Lyapunov equation.
pub fn lyapunov_evaluate(
    model: &DiscreteModel,
    k: &StructuredGain,
    spec: &CostSpec,
    stats: &NoiseStats,
) -> Result<GainEvaluation> {
    let evaluator = PolicyEvaluator::new(model, spec, stats)?;
    evaluator.lyapunov(k.matrix())
}

/// Monte-Carlo estimate of the original (unreformulated) risk: the
/// time-averaged squared deviation of the realized one-step stage cost from
/// its conditional expectation E[y⁺ᵀQy⁺ | x, u] = x̄⁺ᵀQ_c x̄⁺ + tr(Q_c W_s),
/// x̄⁺ = A_K x + w̄_s. Gaussian disturbances only: the conditional moments
/// must be available in closed form.
pub fn mc_risk_original(
    model: &DiscreteModel,
    k: &StructuredGain,
    spec: &CostSpec,
    horizon: usize,
    burn_in: usize,
    disturbance: &DisturbanceModel,
    seed: u64,
) -> Result<f64> {
    if horizon <= burn_in {
        return Err(Error::InvalidParameter(format!(
            "horizon {horizon} must exceed burn-in {burn_in}"
        )));
    }
    let load = disturbance.gaussian().ok_or(Error::UnsupportedDisturbance(
        "the original-risk estimator needs the gaussian disturbance variant",
    ))?;
    let stats = NoiseStats::for_gaussian_load(model, load, &spec.q, spec.delta)?;
    let evaluator = PolicyEvaluator::new(model, spec, &stats)?;
    let rho = evaluator.core_spectral_radius(k.matrix())?;
    if rho >= 1.0 {
        return Ok(f64::INFINITY);
    }

    let n = model.n_states();
    let q_c = stats.q_c().clone();
    let w_bar_s = stats.w_bar().clone();
    let tr_term = (&q_c * stats.w()).trace();
    let a_k = model.closed_loop(k.matrix());

    let mut rng = stream(seed, Domain::Rollout, 0, 0);
    let mut x = DVector::zeros(n);
    let mut predicted = DVector::zeros(n);
    let mut x_next = DVector::zeros(n);
    let mut sum = 0.0;
    for t in 0..horizon {
        let w = sample_disturbance(disturbance, t, &mut rng)?;
        predicted.gemv(1.0, &a_k, &x, 0.0);
        predicted += &w_bar_s;
        x_next.gemv(1.0, &a_k, &x, 0.0);
        x_next.gemv(1.0, &model.b_wd, &w, 1.0);
        if t >= burn_in {
            let realized = quad_form(&q_c, &x_next);
            let expected = quad_form(&q_c, &predicted) + tr_term;
            sum += (realized - expected) * (realized - expected);
        }
        std::mem::swap(&mut x, &mut x_next);
        if x.amax() > OVERFLOW_GUARD {
            return Ok(f64::INFINITY);
        }
    }
    Ok(sum / (horizon - burn_in) as f64)
}
