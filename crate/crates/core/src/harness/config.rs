//! Experiment configuration: a single JSON file with sections for the graph,
//! physical parameters, cost weights, discretization, disturbance, training
//! hyperparameters, scenario, and robustness protocol. Validation collects
//! every violated constraint before failing so a bad config is fixed in one
//! round trip.

use crate::error::{Error, Result};
use crate::harness::{LoadStep, Scenario};
use crate::lfc::{
    assemble_network, discretize, AreaParams, DiscretizationMethod, DiscreteModel,
    DisturbanceModel, GaussianNoise, PerturbMode,
};
use crate::risk::{CostSpec, EvalStrategy, NoiseStats};
use crate::sgdmax::{BacktrackConfig, StructuredGain, TrainConfig};
use crate::topology::{build_structure_pattern, InterconnectionGraph, StructurePattern};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use std::path::{Path, PathBuf};

/// Square matrix given as a scalar multiple of identity, a diagonal, or a
/// full row-major matrix.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Diag(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    fn build(&self, dim: usize, name: &str, problems: &mut Vec<String>) -> DMatrix<f64> {
        match self {
            MatrixSpec::Scalar(s) => DMatrix::identity(dim, dim) * *s,
            MatrixSpec::Diag(d) => {
                if d.len() != dim {
                    problems.push(format!("{name}: diagonal has {} entries, need {dim}", d.len()));
                    return DMatrix::zeros(dim, dim);
                }
                DMatrix::from_diagonal(&DVector::from_vec(d.clone()))
            }
            MatrixSpec::Full(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    problems.push(format!("{name}: need a {dim}x{dim} matrix"));
                    return DMatrix::zeros(dim, dim);
                }
                DMatrix::from_fn(dim, dim, |i, j| rows[i][j])
            }
        }
    }
}

/// Vector given as a scalar (constant vector) or explicit entries.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Scalar(f64),
    List(Vec<f64>),
}

impl VectorSpec {
    fn build(&self, dim: usize, name: &str, problems: &mut Vec<String>) -> DVector<f64> {
        match self {
            VectorSpec::Scalar(s) => DVector::from_element(dim, *s),
            VectorSpec::List(v) => {
                if v.len() != dim {
                    problems.push(format!("{name}: has {} entries, need {dim}", v.len()));
                    return DVector::zeros(dim);
                }
                DVector::from_vec(v.clone())
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphSection {
    n_areas: usize,
    edges: Vec<[usize; 2]>,
    #[serde(default)]
    include_frequency: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AreaSection {
    inertia: f64,
    damping: f64,
    droop: f64,
    gov_turbine_t: f64,
    k_tie: f64,
    bias: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostSection {
    #[serde(rename = "Q", alias = "q")]
    q: MatrixSpec,
    #[serde(rename = "R", alias = "r")]
    r: MatrixSpec,
    delta: f64,
    #[serde(rename = "Lambda", alias = "lambda")]
    lambda: f64,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum MethodName {
    Euler,
    Exact,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiscretizationSection {
    dt: f64,
    method: MethodName,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum DisturbanceSection {
    /// I.i.d. gaussian load deviation per area.
    Gaussian { mean: Option<VectorSpec>, covariance: MatrixSpec },
    /// Replay the scenario's deterministic steps (plus its background noise).
    Scenario,
    /// Replay a recorded trace CSV (header area_1..area_N).
    Trace { path: PathBuf },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BacktrackSection {
    enabled: Option<bool>,
    shrink: Option<f64>,
    max_tries: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EvaluatorName {
    MonteCarlo,
    Lyapunov,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    eta: f64,
    r: f64,
    #[serde(rename = "M", alias = "samples")]
    samples: usize,
    #[serde(rename = "J", alias = "iterations")]
    iterations: usize,
    seed: u64,
    horizon: usize,
    burn_in: usize,
    n_rollouts: usize,
    backtrack: Option<BacktrackSection>,
    evaluator: Option<EvaluatorName>,
    epsilon: Option<f64>,
    snapshot_every: Option<usize>,
    crn: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepSection {
    area: usize,
    onset_s: f64,
    magnitude_pu: f64,
    offset_s: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackgroundSection {
    mean: Option<VectorSpec>,
    covariance: MatrixSpec,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioSection {
    duration_s: f64,
    steps: Vec<StepSection>,
    background: Option<BackgroundSection>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ModeName {
    UniformScale,
    RandomSign,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RobustnessSection {
    fractions: Vec<f64>,
    mode: ModeName,
    n_draws: Option<usize>,
    settling_band_hz: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    graph: GraphSection,
    area_params: AreaSection,
    cost: CostSection,
    discretization: DiscretizationSection,
    disturbance: DisturbanceSection,
    train: TrainSection,
    scenario: Option<ScenarioSection>,
    robustness: Option<RobustnessSection>,
    output_dir: Option<PathBuf>,
}

/// Robustness protocol resolved from config.
#[derive(Clone, Debug)]
pub struct RobustnessPlan {
    /// Perturbation magnitudes, sorted ascending.
    pub fractions: Vec<f64>,
    pub mode: PerturbMode,
    pub n_draws: usize,
    pub settling_band_hz: f64,
}

/// Everything a run needs, resolved and validated from one config file.
pub struct Experiment {
    pub graph: InterconnectionGraph,
    pub params: AreaParams,
    pub include_frequency: bool,
    pub dt: f64,
    pub method: DiscretizationMethod,
    /// The emulator model the controller is trained on.
    pub model: DiscreteModel,
    pub spec: CostSpec,
    pub pattern: StructurePattern,
    pub disturbance: DisturbanceModel,
    /// Load-noise moments mapped to the state space, matching `disturbance`.
    pub stats: NoiseStats,
    pub train: TrainConfig,
    pub scenario: Scenario,
    pub robustness: RobustnessPlan,
    pub output_dir: PathBuf,
    pub master_seed: u64,
}

impl Experiment {
    pub fn zero_gain(&self) -> StructuredGain {
        StructuredGain::zeros(self.pattern.clone())
    }
}

/// Default settling band (Hz) used when the config does not override it.
pub const DEFAULT_SETTLING_BAND_HZ: f64 = 0.01;

/// Parses and validates a config file, resolving the full experiment context.
/// `seed_override` and `out_override` implement the CLI's --seed and --out.
pub fn load_experiment(
    path: &Path,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
) -> Result<Experiment> {
    let text = std::fs::read_to_string(path)?;
    let file: ConfigFile = serde_json::from_str(&text).map_err(|e| {
        Error::InvalidConfig(vec![format!("{}: {e}", path.display())])
    })?;
    build_experiment(file, path, seed_override, out_override)
}

fn build_experiment(
    file: ConfigFile,
    path: &Path,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
) -> Result<Experiment> {
    let mut problems = Vec::new();
    let n = file.graph.n_areas;

    // graph
    let edge_pairs: Vec<(usize, usize)> =
        file.graph.edges.iter().map(|e| (e[0], e[1])).collect();
    let graph = match InterconnectionGraph::new(n, &edge_pairs) {
        Ok(g) => Some(g),
        Err(e) => {
            problems.push(format!("graph: {e}"));
            None
        }
    };

    // physical parameters
    let a = &file.area_params;
    let params = match match a.bias {
        Some(bias) => {
            AreaParams::with_explicit_bias(a.inertia, a.damping, a.droop, a.gov_turbine_t, a.k_tie, bias)
        }
        None => AreaParams::new(a.inertia, a.damping, a.droop, a.gov_turbine_t, a.k_tie),
    } {
        Ok(p) => Some(p),
        Err(e) => {
            problems.push(format!("area_params: {e}"));
            None
        }
    };

    // cost
    let q = file.cost.q.build(n, "cost.Q", &mut problems);
    let r_u = file.cost.r.build(n, "cost.R", &mut problems);
    let spec = match CostSpec::new(q, r_u, file.cost.delta, file.cost.lambda) {
        Ok(s) => Some(s),
        Err(e) => {
            problems.push(format!("cost: {e}"));
            None
        }
    };

    // discretization
    let dt = file.discretization.dt;
    if !(dt > 0.0) || !dt.is_finite() {
        problems.push(format!("discretization.dt must be positive, got {dt}"));
    }
    let method = match file.discretization.method {
        MethodName::Euler => DiscretizationMethod::Euler,
        MethodName::Exact => DiscretizationMethod::Exact,
    };

    // train scalars (full validation happens in TrainConfig::validate)
    let master_seed = seed_override.unwrap_or(file.train.seed);
    let strategy = match file.train.evaluator.unwrap_or(EvaluatorName::MonteCarlo) {
        EvaluatorName::MonteCarlo => EvalStrategy::MonteCarlo {
            horizon: file.train.horizon,
            burn_in: file.train.burn_in,
            n_rollouts: file.train.n_rollouts,
        },
        EvaluatorName::Lyapunov => EvalStrategy::Lyapunov,
    };
    let bt_defaults = BacktrackConfig::default();
    let backtrack = match &file.train.backtrack {
        Some(b) => BacktrackConfig {
            enabled: b.enabled.unwrap_or(bt_defaults.enabled),
            shrink: b.shrink.unwrap_or(bt_defaults.shrink),
            max_tries: b.max_tries.unwrap_or(bt_defaults.max_tries),
        },
        None => bt_defaults,
    };
    let train = TrainConfig {
        eta: file.train.eta,
        r: file.train.r,
        samples_per_iter: file.train.samples,
        iterations: file.train.iterations,
        epsilon: file.train.epsilon.unwrap_or(0.0),
        strategy,
        master_seed,
        backtrack,
        snapshot_every: file.train.snapshot_every,
        crn: file.train.crn.unwrap_or(false),
    };
    if let Err(Error::InvalidConfig(train_problems)) = train.validate() {
        problems.extend(train_problems.into_iter().map(|p| format!("train: {p}")));
    }

    // robustness plan
    let robustness = match &file.robustness {
        Some(r) => {
            let mut fractions = r.fractions.clone();
            if fractions.is_empty() {
                problems.push("robustness.fractions must not be empty".into());
            }
            for f in &fractions {
                if !(0.0..1.0).contains(f) {
                    problems.push(format!("robustness fraction {f} must lie in [0,1)"));
                }
            }
            fractions.sort_by(|x, y| x.total_cmp(y));
            let mode = match r.mode {
                ModeName::UniformScale => PerturbMode::UniformScale,
                ModeName::RandomSign => PerturbMode::RandomSign,
            };
            let n_draws = r.n_draws.unwrap_or(match mode {
                PerturbMode::UniformScale => 1,
                PerturbMode::RandomSign => 100,
            });
            if n_draws == 0 {
                problems.push("robustness.n_draws must be ≥ 1".into());
            }
            let band = r.settling_band_hz.unwrap_or(DEFAULT_SETTLING_BAND_HZ);
            if !(band > 0.0) {
                problems.push(format!("robustness.settling_band_hz must be > 0, got {band}"));
            }
            RobustnessPlan { fractions, mode, n_draws, settling_band_hz: band }
        }
        None => RobustnessPlan {
            fractions: vec![0.10, 0.15, 0.20],
            mode: PerturbMode::UniformScale,
            n_draws: 1,
            settling_band_hz: DEFAULT_SETTLING_BAND_HZ,
        },
    };

    let (graph, params, spec) = match (graph, params, spec) {
        (Some(g), Some(p), Some(s)) if problems.is_empty() => (g, p, s),
        _ => return Err(Error::InvalidConfig(problems)),
    };

    // model
    let continuous = assemble_network(&params, &graph, file.graph.include_frequency);
    let model = discretize(&continuous, dt, method)?;
    let pattern = build_structure_pattern(&graph);

    // scenario (defaults to staggered 0.1 p.u. steps over 20 s)
    let scenario = match &file.scenario {
        Some(s) => {
            let steps = s
                .steps
                .iter()
                .map(|st| LoadStep {
                    area: st.area,
                    onset_s: st.onset_s,
                    magnitude_pu: st.magnitude_pu,
                    offset_s: st.offset_s,
                })
                .collect();
            let background = match &s.background {
                Some(b) => {
                    let mean = b
                        .mean
                        .as_ref()
                        .map(|m| m.build(n, "scenario.background.mean", &mut problems))
                        .unwrap_or_else(|| DVector::zeros(n));
                    let cov = b.covariance.build(n, "scenario.background.covariance", &mut problems);
                    match GaussianNoise::new(mean, cov) {
                        Ok(g) => Some(g),
                        Err(e) => {
                            problems.push(format!("scenario.background: {e}"));
                            None
                        }
                    }
                }
                None => None,
            };
            Scenario::new(s.duration_s, dt, steps, background, n)
        }
        None => Scenario::staggered_default(n, 20.0, dt),
    };
    let scenario = match scenario {
        Ok(s) => s,
        Err(e) => {
            problems.push(format!("scenario: {e}"));
            return Err(Error::InvalidConfig(problems));
        }
    };

    // disturbance + its state-space moments
    let (disturbance, stats) = match &file.disturbance {
        DisturbanceSection::Gaussian { mean, covariance } => {
            let mean = mean
                .as_ref()
                .map(|m| m.build(n, "disturbance.mean", &mut problems))
                .unwrap_or_else(|| DVector::zeros(n));
            let cov = covariance.build(n, "disturbance.covariance", &mut problems);
            match GaussianNoise::new(mean, cov) {
                Ok(g) => {
                    let stats = NoiseStats::for_gaussian_load(&model, &g, spec.q(), spec.delta())?;
                    (DisturbanceModel::Gaussian(g), stats)
                }
                Err(e) => {
                    problems.push(format!("disturbance: {e}"));
                    return Err(Error::InvalidConfig(problems));
                }
            }
        }
        DisturbanceSection::Scenario => {
            // moments come from the background noise; zero if none is set
            let background = file
                .scenario
                .as_ref()
                .and_then(|s| s.background.as_ref())
                .map(|b| {
                    let mean = b
                        .mean
                        .as_ref()
                        .map(|m| m.build(n, "scenario.background.mean", &mut problems))
                        .unwrap_or_else(|| DVector::zeros(n));
                    let cov = b.covariance.build(n, "scenario.background.covariance", &mut problems);
                    GaussianNoise::new(mean, cov)
                })
                .transpose()?
                .unwrap_or_else(|| GaussianNoise::zero(n));
            let stats = NoiseStats::for_gaussian_load(&model, &background, spec.q(), spec.delta())?;
            (DisturbanceModel::StepScenario(scenario.clone()), stats)
        }
        DisturbanceSection::Trace { path: trace_path } => {
            let resolved = if trace_path.is_relative() {
                path.parent().map(|d| d.join(trace_path)).unwrap_or_else(|| trace_path.clone())
            } else {
                trace_path.clone()
            };
            let trace = crate::harness::io::read_disturbance_trace(&resolved, n)?;
            let q_c = model.c.transpose() * spec.q() * &model.c;
            let mapped: Vec<DVector<f64>> =
                trace.rows().iter().map(|w| &model.b_wd * w).collect();
            let stats = crate::risk::estimate_noise_stats(&mapped, &q_c, spec.delta())?;
            (DisturbanceModel::Trace(trace), stats)
        }
    };

    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }

    let output_dir = out_override
        .or(file.output_dir)
        .unwrap_or_else(|| PathBuf::from("out"));

    Ok(Experiment {
        graph,
        params,
        include_frequency: file.graph.include_frequency,
        dt,
        method,
        model,
        spec,
        pattern,
        disturbance,
        stats,
        train,
        scenario,
        robustness,
        output_dir,
        master_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn minimal_config() -> serde_json::Value {
        serde_json::json!({
            "graph": {"n_areas": 2, "edges": [[1, 2]]},
            "area_params": {
                "inertia": 10.0, "damping": 1.0, "droop": 0.05,
                "gov_turbine_t": 0.4, "k_tie": 1.0
            },
            "cost": {"Q": 1.0, "R": 0.1, "delta": 5.0, "Lambda": 100.0},
            "discretization": {"dt": 0.01, "method": "exact"},
            "disturbance": {"type": "gaussian", "covariance": 0.01},
            "train": {
                "eta": 1e-4, "r": 0.1, "M": 10, "J": 5, "seed": 7,
                "horizon": 500, "burn_in": 50, "n_rollouts": 1
            }
        })
    }

    fn write_config(value: &serde_json::Value) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "{value}").unwrap();
        f
    }

    #[test]
    fn minimal_config_resolves_defaults() {
        let f = write_config(&minimal_config());
        let exp = load_experiment(f.path(), None, None).unwrap();
        assert_eq!(exp.graph.n_areas(), 2);
        assert_eq!(exp.model.n_states(), 8);
        assert_eq!(exp.pattern.n_nonzero(), 4);
        assert_eq!(exp.master_seed, 7);
        assert_eq!(exp.scenario.duration_s(), 20.0);
        assert_eq!(exp.scenario.steps().len(), 2);
        assert_eq!(exp.robustness.fractions, vec![0.10, 0.15, 0.20]);
        assert_eq!(exp.robustness.n_draws, 1);
        assert_eq!(exp.output_dir, PathBuf::from("out"));
        assert!(matches!(exp.train.strategy, EvalStrategy::MonteCarlo { horizon: 500, .. }));
    }

    #[test]
    fn overrides_win() {
        let f = write_config(&minimal_config());
        let exp =
            load_experiment(f.path(), Some(99), Some(PathBuf::from("elsewhere"))).unwrap();
        assert_eq!(exp.master_seed, 99);
        assert_eq!(exp.train.master_seed, 99);
        assert_eq!(exp.output_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn violations_are_collected_together() {
        let mut v = minimal_config();
        v["area_params"]["inertia"] = serde_json::json!(-1.0);
        v["cost"]["delta"] = serde_json::json!(-2.0);
        v["train"]["eta"] = serde_json::json!(-1e-4);
        v["robustness"] =
            serde_json::json!({"fractions": [], "mode": "uniform_scale"});
        let f = write_config(&v);
        match load_experiment(f.path(), None, None) {
            Err(Error::InvalidConfig(problems)) => {
                let text = problems.join("\n");
                assert!(text.contains("area_params"), "{text}");
                assert!(text.contains("cost"), "{text}");
                assert!(text.contains("train"), "{text}");
                assert!(text.contains("fractions"), "{text}");
                assert!(problems.len() >= 4);
            }
            Err(other) => panic!("expected InvalidConfig, got {other}"),
            Ok(_) => panic!("expected InvalidConfig, config was accepted"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = minimal_config();
        v["train"]["learning_rate"] = serde_json::json!(0.1);
        let f = write_config(&v);
        assert!(matches!(
            load_experiment(f.path(), None, None),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn matrix_specs_build_all_forms() {
        let mut v = minimal_config();
        v["cost"]["Q"] = serde_json::json!([2.0, 3.0]);
        v["cost"]["R"] = serde_json::json!([[0.5, 0.0], [0.0, 0.5]]);
        let f = write_config(&v);
        let exp = load_experiment(f.path(), None, None).unwrap();
        assert_eq!(exp.spec.q()[(1, 1)], 3.0);
        assert_eq!(exp.spec.r_u()[(0, 0)], 0.5);
    }

    #[test]
    fn explicit_scenario_and_lyapunov_evaluator() {
        let mut v = minimal_config();
        v["scenario"] = serde_json::json!({
            "duration_s": 10.0,
            "steps": [{"area": 1, "onset_s": 2.0, "magnitude_pu": 0.1}]
        });
        v["train"]["evaluator"] = serde_json::json!("lyapunov");
        let f = write_config(&v);
        let exp = load_experiment(f.path(), None, None).unwrap();
        assert_eq!(exp.scenario.steps().len(), 1);
        assert_eq!(exp.train.strategy, EvalStrategy::Lyapunov);
    }
}
