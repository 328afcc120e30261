//! Multi-area load-frequency-control dynamics.
//!
//! Per-area state ordering is [Δf, ΔP_G, ΔP_tie, ∫z] (frequency deviation,
//! governor/turbine power deviation, tie-line flow deviation, integrated area
//! control error). The network model is assembled with Kronecker products:
//!
//!   ẋ = (I_N ⊗ A1 + 𝓛 ⊗ A2) x + (I_N ⊗ Bu) u + (I_N ⊗ Bw) w
//!
//! where 𝓛 is the interconnection Laplacian, so ΔṖ_tie,i = Σ_j k_tie(Δf_i − Δf_j)
//! over neighbours j. Two structural facts matter downstream: the ∫z states
//! never feed back into anything, and Σ_i ΔP_tie,i is exactly conserved (the
//! Laplacian rows sum to zero and neither control nor load touches tie rows).
//! Both are recorded in `StateStructure` so evaluators can restrict stability
//! and stationary-cost computations to the regulated part of the state.

use crate::error::{Error, Result};
use crate::harness::Scenario;
use crate::topology::{build_laplacian, build_output_matrix, InterconnectionGraph};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Physical constants of one control area. All positive.
#[derive(Clone, Debug, PartialEq)]
pub struct AreaParams {
    /// Aggregate inertia M_a (s·p.u.).
    pub inertia: f64,
    /// Load damping D (p.u./Hz).
    pub damping: f64,
    /// Primary droop R_d (Hz/p.u.).
    pub droop: f64,
    /// Combined governor-turbine time constant T (s).
    pub gov_turbine_t: f64,
    /// Tie-line synchronization coefficient (p.u./Hz).
    pub k_tie: f64,
    /// Frequency bias β (p.u./Hz).
    pub bias: f64,
    bias_from_rule: bool,
}

impl AreaParams {
    /// Default bias rule β = D + 1/R_d.
    pub fn new(inertia: f64, damping: f64, droop: f64, gov_turbine_t: f64, k_tie: f64) -> Result<Self> {
        let bias = damping + 1.0 / droop;
        Self::validate(inertia, damping, droop, gov_turbine_t, k_tie, bias)?;
        Ok(Self { inertia, damping, droop, gov_turbine_t, k_tie, bias, bias_from_rule: true })
    }

    pub fn with_explicit_bias(
        inertia: f64,
        damping: f64,
        droop: f64,
        gov_turbine_t: f64,
        k_tie: f64,
        bias: f64,
    ) -> Result<Self> {
        Self::validate(inertia, damping, droop, gov_turbine_t, k_tie, bias)?;
        Ok(Self { inertia, damping, droop, gov_turbine_t, k_tie, bias, bias_from_rule: false })
    }

    /// Nominal configuration: M_a=10 s, D=1, R_d=0.05, T=0.4 s, k_tie=1 → β=21.
    pub fn nominal() -> Self {
        Self::new(10.0, 1.0, 0.05, 0.4, 1.0).expect("nominal parameters are positive")
    }

    pub fn bias_follows_default_rule(&self) -> bool {
        self.bias_from_rule
    }

    fn validate(
        inertia: f64,
        damping: f64,
        droop: f64,
        gov_turbine_t: f64,
        k_tie: f64,
        bias: f64,
    ) -> Result<()> {
        let fields = [
            ("inertia", inertia),
            ("damping", damping),
            ("droop", droop),
            ("gov_turbine_t", gov_turbine_t),
            ("bias", bias),
        ];
        for (name, value) in fields {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be strictly positive and finite, got {value}"
                )));
            }
        }
        // k_tie = 0 is admitted: it decouples the areas, which some tests use.
        if !(k_tie >= 0.0) || !k_tie.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "k_tie must be nonnegative and finite, got {k_tie}"
            )));
        }
        Ok(())
    }
}

/// How robustness sweeps distort the physical model relative to the emulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbMode {
    /// Every parameter multiplied by (1 + fraction).
    UniformScale,
    /// Every parameter multiplied by (1 + s·fraction) with an independent
    /// random sign s per field.
    RandomSign,
}

/// Scales the physical parameters by ±fraction. The bias is re-derived from
/// the perturbed damping and droop when the default rule built it, otherwise
/// it is perturbed like any other field.
pub fn perturb_parameters<R: Rng>(
    params: &AreaParams,
    fraction: f64,
    mode: PerturbMode,
    rng: &mut R,
) -> Result<AreaParams> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidParameter(format!(
            "perturbation fraction must lie in [0,1), got {fraction}"
        )));
    }
    let mut scale = |_field: &str| -> f64 {
        match mode {
            PerturbMode::UniformScale => 1.0 + fraction,
            PerturbMode::RandomSign => {
                let s: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                1.0 + s * fraction
            }
        }
    };
    // Field draw order is fixed: inertia, damping, droop, gov_turbine_t,
    // k_tie, then bias only when it is an independent parameter.
    let inertia = params.inertia * scale("inertia");
    let damping = params.damping * scale("damping");
    let droop = params.droop * scale("droop");
    let gov_turbine_t = params.gov_turbine_t * scale("gov_turbine_t");
    let k_tie = params.k_tie * scale("k_tie");
    if params.bias_from_rule {
        AreaParams::new(inertia, damping, droop, gov_turbine_t, k_tie)
    } else {
        let bias = params.bias * scale("bias");
        AreaParams::with_explicit_bias(inertia, damping, droop, gov_turbine_t, k_tie, bias)
    }
}

/// Structural annotations carried by assembled models. Evaluators verify them
/// numerically before relying on them; hand-built models leave them empty.
#[derive(Clone, Debug, Default)]
pub struct StateStructure {
    /// States nothing depends on: zero column in the continuous A (identity
    /// column in A_d) and zero column in C. The ∫z bookkeeping integrators.
    pub inert_states: Vec<usize>,
    /// Left functionals v with vᵀA = 0 (vᵀA_d = vᵀ), vᵀB_u = 0, vᵀB_w = 0:
    /// conserved quantities that stay exactly zero along every closed-loop
    /// trajectory from x0 = 0. For a connected grid this is Σ_i ΔP_tie,i.
    pub conserved_functionals: Vec<DVector<f64>>,
}

#[derive(Clone, Debug)]
pub struct ContinuousModel {
    pub a: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub b_w: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub structure: StateStructure,
}

#[derive(Clone, Debug)]
pub struct DiscreteModel {
    pub a_d: DMatrix<f64>,
    pub b_ud: DMatrix<f64>,
    pub b_wd: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub dt: f64,
    pub structure: StateStructure,
}

impl DiscreteModel {
    /// Hand-built model without structural annotations.
    pub fn new(
        a_d: DMatrix<f64>,
        b_ud: DMatrix<f64>,
        b_wd: DMatrix<f64>,
        c: DMatrix<f64>,
        dt: f64,
    ) -> Result<Self> {
        let n = a_d.nrows();
        if a_d.ncols() != n {
            return Err(Error::ShapeMismatch("A_d must be square".into()));
        }
        if b_ud.nrows() != n || b_wd.nrows() != n || c.ncols() != n {
            return Err(Error::ShapeMismatch(
                "B_ud, B_wd rows and C columns must match the state dimension".into(),
            ));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { a_d, b_ud, b_wd, c, dt, structure: StateStructure::default() })
    }

    pub fn n_states(&self) -> usize {
        self.a_d.nrows()
    }

    pub fn n_controls(&self) -> usize {
        self.b_ud.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn n_disturbances(&self) -> usize {
        self.b_wd.ncols()
    }

    /// A_d − B_ud·K·C.
    pub fn closed_loop(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a_d - &self.b_ud * k * &self.c
    }
}

/// Per-area blocks over the state [Δf, ΔP_G, ΔP_tie, ∫z]:
///
///   Δḟ      = (ΔP_G − ΔP_tie − ΔP_L − D·Δf)/M_a
///   ΔṖ_G    = −(Δf/R_d + ΔP_G)/T + u/T
///   ΔṖ_tie  = k_tie·Σ_j (Δf − Δf_j)          (realized by 𝓛 ⊗ A2)
///   ż       = β·Δf + ΔP_tie
pub fn build_area_blocks(
    params: &AreaParams,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let m_a = params.inertia;
    let d = params.damping;
    let r_d = params.droop;
    let t = params.gov_turbine_t;
    #[rustfmt::skip]
    let a1 = DMatrix::from_row_slice(4, 4, &[
        -d / m_a,          1.0 / m_a, -1.0 / m_a, 0.0,
        -1.0 / (r_d * t), -1.0 / t,    0.0,       0.0,
         0.0,              0.0,        0.0,       0.0,
         params.bias,      0.0,        1.0,       0.0,
    ]);
    let mut a2 = DMatrix::zeros(4, 4);
    a2[(2, 0)] = params.k_tie;
    let b_u = DMatrix::from_column_slice(4, 1, &[0.0, 1.0 / t, 0.0, 0.0]);
    let b_w = DMatrix::from_column_slice(4, 1, &[-1.0 / m_a, 0.0, 0.0, 0.0]);
    (a1, a2, b_u, b_w)
}

/// Assembles the network model. All areas share `params` (identical-areas
/// assumption); heterogeneity enters only through perturbed copies in the
/// robustness pipeline.
pub fn assemble_network(
    params: &AreaParams,
    graph: &InterconnectionGraph,
    include_frequency: bool,
) -> ContinuousModel {
    let n = graph.n_areas();
    let (a1, a2, b_u1, b_w1) = build_area_blocks(params);
    let eye = DMatrix::<f64>::identity(n, n);
    let lap = build_laplacian(graph);
    let a = eye.kronecker(&a1) + lap.kronecker(&a2);
    let b_u = eye.kronecker(&b_u1);
    let b_w = eye.kronecker(&b_w1);
    let c = build_output_matrix(graph, include_frequency);

    let inert_states = (0..n).map(|i| 4 * i + 3).collect();
    let conserved_functionals = if params.k_tie > 0.0 {
        // Tie rows are 𝓛-coupled; only the network-wide sum is conserved.
        let mut v = DVector::zeros(4 * n);
        for i in 0..n {
            v[4 * i + 2] = 1.0;
        }
        vec![v]
    } else {
        // Decoupled areas: each tie flow is individually frozen.
        (0..n)
            .map(|i| {
                let mut v = DVector::zeros(4 * n);
                v[4 * i + 2] = 1.0;
                v
            })
            .collect()
    };

    ContinuousModel {
        a,
        b_u,
        b_w,
        c,
        structure: StateStructure { inert_states, conserved_functionals },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscretizationMethod {
    Euler,
    Exact,
}

/// Forward-Euler or exact (matrix-exponential, zero-order-hold inputs)
/// discretization. The method is never switched implicitly.
pub fn discretize(model: &ContinuousModel, dt: f64, method: DiscretizationMethod) -> Result<DiscreteModel> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let n = model.a.nrows();
    let (a_d, b_ud, b_wd) = match method {
        DiscretizationMethod::Euler => (
            DMatrix::identity(n, n) + dt * &model.a,
            dt * &model.b_u,
            dt * &model.b_w,
        ),
        DiscretizationMethod::Exact => {
            // expm of the augmented generator integrates the inputs under a
            // zero-order hold without inverting A (A is singular here: the
            // ACE integrators and tie conservation put it on the boundary).
            let m = model.b_u.ncols();
            let w = model.b_w.ncols();
            let dim = n + m + w;
            let mut aug = DMatrix::zeros(dim, dim);
            aug.view_mut((0, 0), (n, n)).copy_from(&model.a);
            aug.view_mut((0, n), (n, m)).copy_from(&model.b_u);
            aug.view_mut((0, n + m), (n, w)).copy_from(&model.b_w);
            let exp = (aug * dt).exp();
            if exp.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("matrix exponential overflowed".into()));
            }
            (
                exp.view((0, 0), (n, n)).into_owned(),
                exp.view((0, n), (n, m)).into_owned(),
                exp.view((0, n + m), (n, w)).into_owned(),
            )
        }
    };
    Ok(DiscreteModel {
        a_d,
        b_ud,
        b_wd,
        c: model.c.clone(),
        dt,
        structure: model.structure.clone(),
    })
}

/// Gaussian load disturbance with precomputed sampling factor.
#[derive(Clone, Debug)]
pub struct GaussianNoise {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    /// factor · z with z ~ N(0, I) has covariance `covariance`.
    factor: DMatrix<f64>,
}

impl GaussianNoise {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::ShapeMismatch(format!(
                "covariance {}x{} vs mean length {n}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        let asym = (&covariance - covariance.transpose()).abs().max();
        if asym > 1e-10 {
            return Err(Error::InvalidParameter("covariance must be symmetric".into()));
        }
        // Eigen-factorization instead of Cholesky: singular covariances
        // (including W = 0) are legitimate.
        let sym = (&covariance + covariance.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let max_ev = eig.eigenvalues.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
        let tol = 1e-10 * max_ev.max(1.0);
        let mut factor = eig.eigenvectors.clone();
        for (j, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev < -tol {
                return Err(Error::InvalidParameter(format!(
                    "covariance not positive semidefinite (eigenvalue {ev})"
                )));
            }
            let s = ev.max(0.0).sqrt();
            factor.column_mut(j).scale_mut(s);
        }
        Ok(Self { mean, covariance, factor })
    }

    pub fn zero(n: usize) -> Self {
        Self { mean: DVector::zeros(n), covariance: DMatrix::zeros(n, n), factor: DMatrix::zeros(n, n) }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.factor * z
    }
}

/// In-memory disturbance trace (one N-vector per step).
#[derive(Clone, Debug)]
pub struct DisturbanceTrace {
    rows: Vec<DVector<f64>>,
}

impl DisturbanceTrace {
    pub fn new(rows: Vec<DVector<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidParameter("disturbance trace is empty".into()));
        }
        let n = rows[0].len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch("trace rows have inconsistent widths".into()));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[DVector<f64>] {
        &self.rows
    }
}

/// Load disturbance process w_t (p.u. deviation per area).
#[derive(Clone, Debug)]
pub enum DisturbanceModel {
    Gaussian(GaussianNoise),
    StepScenario(Scenario),
    Trace(DisturbanceTrace),
}

impl DisturbanceModel {
    pub fn gaussian(&self) -> Option<&GaussianNoise> {
        match self {
            DisturbanceModel::Gaussian(g) => Some(g),
            _ => None,
        }
    }
}

/// Draws w_t. Gaussian draws are i.i.d.; scenarios are deterministic step
/// sums plus optional gaussian background; traces replay recorded rows.
pub fn sample_disturbance<R: Rng>(
    model: &DisturbanceModel,
    t: usize,
    rng: &mut R,
) -> Result<DVector<f64>> {
    match model {
        DisturbanceModel::Gaussian(g) => Ok(g.sample(rng)),
        DisturbanceModel::StepScenario(s) => Ok(s.load_at_step(t, rng)),
        DisturbanceModel::Trace(trace) => trace
            .rows()
            .get(t)
            .cloned()
            .ok_or(Error::TraceExhausted { step: t, rows: trace.rows().len() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::LoadStep;
    use approx::assert_abs_diff_eq;

    #[test]
    fn nominal_blocks_match_hand_computation() {
        let p = AreaParams::nominal();
        assert_abs_diff_eq!(p.bias, 21.0);
        let (a1, a2, b_u, b_w) = build_area_blocks(&p);
        let expected = [
            [-0.1, 0.1, -0.1, 0.0],
            [-50.0, -2.5, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
            [21.0, 0.0, 1.0, 0.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!(a1[(i, j)], expected[i][j], epsilon = 1e-12);
            }
        }
        assert_eq!(a2[(2, 0)], 1.0);
        assert_eq!(a2.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(b_u.column(0).as_slice(), &[0.0, 2.5, 0.0, 0.0]);
        assert_eq!(b_w.column(0).as_slice(), &[-0.1, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_k_tie_gives_zero_coupling_block() {
        let p = AreaParams::new(10.0, 1.0, 0.05, 0.4, 0.0).unwrap();
        let (_, a2, _, _) = build_area_blocks(&p);
        assert!(a2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_area_network_equals_blocks() {
        let g = InterconnectionGraph::new(1, &[]).unwrap();
        let p = AreaParams::nominal();
        let model = assemble_network(&p, &g, false);
        let (a1, _, b_u1, b_w1) = build_area_blocks(&p);
        assert_eq!(model.a, a1);
        assert_eq!(model.b_u, b_u1);
        assert_eq!(model.b_w, b_w1);
    }

    #[test]
    fn two_area_coupling_entries() {
        let g = InterconnectionGraph::new(2, &[(1, 2)]).unwrap();
        let p = AreaParams::nominal();
        let model = assemble_network(&p, &g, false);
        // tie row of area 1 (0-based row 2): +k_tie on own Δf, −k_tie on the
        // neighbour's Δf (0-based column 4)
        assert_eq!(model.a[(2, 0)], 1.0);
        assert_eq!(model.a[(2, 4)], -1.0);
        assert_eq!(model.a[(6, 4)], 1.0);
        assert_eq!(model.a[(6, 0)], -1.0);
    }

    #[test]
    fn six_chain_off_diagonal_block_count() {
        let g = InterconnectionGraph::chain(6).unwrap();
        let model = assemble_network(&AreaParams::nominal(), &g, false);
        assert_eq!(model.a.nrows(), 24);
        let mut off_block_nonzeros = 0;
        for bi in 0..6 {
            for bj in 0..6 {
                if bi == bj {
                    continue;
                }
                off_block_nonzeros += model
                    .a
                    .view((4 * bi, 4 * bj), (4, 4))
                    .iter()
                    .filter(|&&v| v != 0.0)
                    .count();
            }
        }
        assert_eq!(off_block_nonzeros, 10);
    }

    #[test]
    fn decoupled_network_is_block_diagonal() {
        let g = InterconnectionGraph::chain(3).unwrap();
        let p = AreaParams::new(10.0, 1.0, 0.05, 0.4, 0.0).unwrap();
        let model = assemble_network(&p, &g, false);
        for bi in 0..3 {
            for bj in 0..3 {
                if bi != bj {
                    assert!(model.a.view((4 * bi, 4 * bj), (4, 4)).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn ace_rows_sit_in_their_blocks() {
        let g = InterconnectionGraph::chain(3).unwrap();
        let p = AreaParams::nominal();
        let model = assemble_network(&p, &g, false);
        for i in 0..3 {
            let row = 4 * i + 3;
            for j in 0..12 {
                let expected = if j == 4 * i {
                    p.bias
                } else if j == 4 * i + 2 {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(model.a[(row, j)], expected);
            }
        }
    }

    #[test]
    fn tie_rows_conserve_their_sum() {
        let g = InterconnectionGraph::chain(4).unwrap();
        let model = assemble_network(&AreaParams::nominal(), &g, false);
        // Σ_i ΔṖ_tie,i = (Σ_i row_tie,i) · x must vanish for every state.
        let mut total = DVector::<f64>::zeros(16).transpose();
        for i in 0..4 {
            total += model.a.row(4 * i + 2);
        }
        assert!(total.iter().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn euler_discretization() {
        let g = InterconnectionGraph::new(1, &[]).unwrap();
        let model = assemble_network(&AreaParams::nominal(), &g, false);
        let zero = ContinuousModel {
            a: DMatrix::zeros(4, 4),
            b_u: model.b_u.clone(),
            b_w: model.b_w.clone(),
            c: model.c.clone(),
            structure: StateStructure::default(),
        };
        let d = discretize(&zero, 0.01, DiscretizationMethod::Euler).unwrap();
        assert_eq!(d.a_d, DMatrix::identity(4, 4));
    }

    #[test]
    fn scalar_discretizations() {
        let scalar = ContinuousModel {
            a: DMatrix::from_element(1, 1, -1.0),
            b_u: DMatrix::zeros(1, 1),
            b_w: DMatrix::zeros(1, 1),
            c: DMatrix::identity(1, 1),
            structure: StateStructure::default(),
        };
        let euler = discretize(&scalar, 0.01, DiscretizationMethod::Euler).unwrap();
        assert_abs_diff_eq!(euler.a_d[(0, 0)], 0.99, epsilon = 1e-15);
        let exact = discretize(&scalar, 0.01, DiscretizationMethod::Exact).unwrap();
        assert_abs_diff_eq!(exact.a_d[(0, 0)], (-0.01f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn euler_and_exact_agree_to_second_order() {
        let g = InterconnectionGraph::chain(3).unwrap();
        let model = assemble_network(&AreaParams::nominal(), &g, false);
        let dt = 1e-3;
        let euler = discretize(&model, dt, DiscretizationMethod::Euler).unwrap();
        let exact = discretize(&model, dt, DiscretizationMethod::Exact).unwrap();
        let diff = (&euler.a_d - &exact.a_d).abs().max();
        let a_norm = model.a.abs().max() * model.a.nrows() as f64;
        assert!(diff <= a_norm * a_norm * dt * dt);
        let bd_diff = (&euler.b_wd - &exact.b_wd).abs().max();
        assert!(bd_diff <= a_norm * model.b_w.abs().max() * dt * dt);
    }

    #[test]
    fn perturbation_modes() {
        let p = AreaParams::nominal();
        let mut rng = crate::rng::stream(1, crate::rng::Domain::Perturbation, 0, 0);
        let same = perturb_parameters(&p, 0.0, PerturbMode::UniformScale, &mut rng).unwrap();
        assert_eq!(same, p);

        let scaled = perturb_parameters(&p, 0.2, PerturbMode::UniformScale, &mut rng).unwrap();
        assert_abs_diff_eq!(scaled.inertia, 12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(scaled.droop, 0.06, epsilon = 1e-12);
        // bias re-derived, not scaled: D' + 1/R_d' = 1.2 + 1/0.06
        assert_abs_diff_eq!(scaled.bias, 1.2 + 1.0 / 0.06, epsilon = 1e-12);

        let signed = perturb_parameters(&p, 0.15, PerturbMode::RandomSign, &mut rng).unwrap();
        for (nominal, got) in [
            (p.inertia, signed.inertia),
            (p.damping, signed.damping),
            (p.droop, signed.droop),
            (p.gov_turbine_t, signed.gov_turbine_t),
            (p.k_tie, signed.k_tie),
        ] {
            let ratio = got / nominal;
            assert!(
                (ratio - 0.85).abs() < 1e-12 || (ratio - 1.15).abs() < 1e-12,
                "ratio {ratio}"
            );
        }
        assert!(perturb_parameters(&p, 1.0, PerturbMode::UniformScale, &mut rng).is_err());
    }

    #[test]
    fn gaussian_sampling_degenerate_and_moments() {
        let zero = GaussianNoise::new(DVector::zeros(3), DMatrix::zeros(3, 3)).unwrap();
        let mut rng = crate::rng::stream(2, crate::rng::Domain::Rollout, 0, 0);
        assert_eq!(
            sample_disturbance(&DisturbanceModel::Gaussian(zero), 0, &mut rng).unwrap(),
            DVector::zeros(3)
        );

        let mut cov = DMatrix::identity(2, 2);
        cov[(0, 1)] = 0.5;
        cov[(1, 0)] = 0.5;
        let g = GaussianNoise::new(DVector::from_vec(vec![1.0, -1.0]), cov.clone()).unwrap();
        let mut acc = DMatrix::zeros(2, 2);
        let mut mean = DVector::zeros(2);
        let n = 200_000;
        for _ in 0..n {
            let w = g.sample(&mut rng);
            mean += &w;
            acc += (&w - g.mean()) * (&w - g.mean()).transpose();
        }
        mean /= n as f64;
        acc /= n as f64;
        assert_abs_diff_eq!(mean[0], 1.0, epsilon = 0.02);
        assert_abs_diff_eq!(mean[1], -1.0, epsilon = 0.02);
        assert_abs_diff_eq!(acc[(0, 1)], 0.5, epsilon = 0.02);

        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianNoise::new(DVector::zeros(2), bad).is_err());
    }

    #[test]
    fn scenario_disturbance_is_deterministic_sum() {
        let scenario = Scenario::new(
            20.0,
            0.01,
            vec![LoadStep { area: 3, onset_s: 3.0, magnitude_pu: 0.1, offset_s: None }],
            None,
            3,
        )
        .unwrap();
        let model = DisturbanceModel::StepScenario(scenario);
        let mut rng = crate::rng::stream(3, crate::rng::Domain::Scenario, 0, 0);
        let at_5s = sample_disturbance(&model, 500, &mut rng).unwrap();
        assert_eq!(at_5s.as_slice(), &[0.0, 0.0, 0.1]);
        let at_1s = sample_disturbance(&model, 100, &mut rng).unwrap();
        assert_eq!(at_1s.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn trace_disturbance_replays_and_exhausts() {
        let rows: Vec<DVector<f64>> =
            (0..5).map(|i| DVector::from_element(2, i as f64)).collect();
        let model = DisturbanceModel::Trace(DisturbanceTrace::new(rows).unwrap());
        let mut rng = crate::rng::stream(4, crate::rng::Domain::Rollout, 0, 0);
        let row = sample_disturbance(&model, 2, &mut rng).unwrap();
        assert_eq!(row.as_slice(), &[2.0, 2.0]);
        assert!(matches!(
            sample_disturbance(&model, 5, &mut rng),
            Err(Error::TraceExhausted { step: 5, rows: 5 })
        ));
    }
}
