//! Closed-loop simulation, settling metrics, emulator-to-physical transfer,
//! parameter-robustness sweeps, and the experiment driver behind the CLI.

use crate::error::{Error, Result};
use crate::harness::config::{load_experiment, Experiment, RobustnessPlan};
use crate::harness::io;
use crate::harness::Scenario;
use crate::lfc::{
    assemble_network, discretize, perturb_parameters, AreaParams, DiscretizationMethod,
    DiscreteModel, GaussianNoise, PerturbMode,
};
use crate::risk::{
    estimate_noise_stats, lyapunov_evaluate, max_oracle, mc_evaluate, CostSpec, GainEvaluation,
    NoiseStats, PolicyEvaluator, OVERFLOW_GUARD,
};
use crate::rng::{stream, Domain};
use crate::sgdmax::{train, StructuredGain};
use crate::topology::InterconnectionGraph;
use nalgebra::DVector;
use rand::Rng;
use serde::Serialize;
use std::path::PathBuf;

/// A recorded closed-loop run: aligned series of states, outputs, controls,
/// and load disturbances, one entry per time step starting at t = 0.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub dt: f64,
    /// Full network state x_t, 4 entries per area.
    pub states: Vec<DVector<f64>>,
    /// Measured outputs y_t = C x_t.
    pub outputs: Vec<DVector<f64>>,
    /// Applied controls u_t = -K y_t.
    pub controls: Vec<DVector<f64>>,
    /// Per-area load disturbances w_t.
    pub loads: Vec<DVector<f64>>,
    /// True when the state overflowed and the run was cut short.
    pub divergent: bool,
    pub seed: u64,
    pub model_hash: u64,
    pub gain_hash: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, t: usize) -> f64 {
        t as f64 * self.dt
    }

    pub fn n_areas(&self) -> usize {
        self.states.first().map_or(0, |x| x.len() / 4)
    }

    /// Frequency-deviation series of a 1-based area.
    pub fn frequency_deviation(&self, area: usize) -> Result<Vec<f64>> {
        let n = self.n_areas();
        if area == 0 || area > n {
            return Err(Error::InvalidParameter(format!(
                "area {area} out of range 1..={n}"
            )));
        }
        Ok(self.states.iter().map(|x| x[4 * (area - 1)]).collect())
    }
}

/// Simulates x_{t+1} = A_d x_t + B_ud u_t + B_wd w_t from x_0 = 0 under the
/// scenario's load schedule, recording every step. State overflow truncates
/// the run and flags it divergent instead of failing.
pub fn simulate_closed_loop(
    model: &DiscreteModel,
    gain: &StructuredGain,
    scenario: &Scenario,
    seed: u64,
) -> Result<Trajectory> {
    let k = gain.matrix();
    if k.nrows() != model.n_controls() || k.ncols() != model.n_outputs() {
        return Err(Error::ShapeMismatch(format!(
            "gain is {}x{}, model wants {}x{}",
            k.nrows(),
            k.ncols(),
            model.n_controls(),
            model.n_outputs()
        )));
    }
    if scenario.n_areas() != model.n_disturbances() {
        return Err(Error::ShapeMismatch(format!(
            "scenario drives {} areas, model has {} disturbance inputs",
            scenario.n_areas(),
            model.n_disturbances()
        )));
    }
    if scenario.dt() != model.dt {
        return Err(Error::InvalidParameter(format!(
            "scenario dt {} does not match model dt {}",
            scenario.dt(),
            model.dt
        )));
    }

    let t_steps = scenario.n_time_steps();
    let mut rng = stream(seed, Domain::Scenario, 0, 0);
    let mut x: DVector<f64> = DVector::zeros(model.n_states());
    let mut states = Vec::with_capacity(t_steps);
    let mut outputs = Vec::with_capacity(t_steps);
    let mut controls = Vec::with_capacity(t_steps);
    let mut loads = Vec::with_capacity(t_steps);
    let mut divergent = false;
    for t in 0..t_steps {
        if x.amax() > OVERFLOW_GUARD || x.iter().any(|v| !v.is_finite()) {
            divergent = true;
            break;
        }
        let y: DVector<f64> = &model.c * &x;
        let u: DVector<f64> = -(k * &y);
        let w = scenario.load_at_step(t, &mut rng);
        let next: DVector<f64> = &model.a_d * &x + &model.b_ud * &u + &model.b_wd * &w;
        states.push(x);
        outputs.push(y);
        controls.push(u);
        loads.push(w);
        x = next;
    }
    Ok(Trajectory {
        dt: model.dt,
        states,
        outputs,
        controls,
        loads,
        divergent,
        seed,
        model_hash: io::hash_matrices(&[&model.a_d, &model.b_ud, &model.b_wd, &model.c]),
        gain_hash: io::hash_matrices(&[gain.matrix()]),
    })
}

/// Peak frequency deviation and settling time of one area.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SettlingMetrics {
    /// max_t |delta_f(t)|.
    pub peak_hz: f64,
    /// First instant after which |delta_f| stays inside the band for the rest
    /// of the run; the scenario duration when it never does.
    pub settling_s: f64,
    pub settled: bool,
}

/// Scans a 1-based area's frequency deviation for its peak and the last time
/// it leaves the +-band_hz band. Divergent trajectories have no metrics.
pub fn settling_metrics(traj: &Trajectory, band_hz: f64, area: usize) -> Result<SettlingMetrics> {
    if traj.divergent {
        return Err(Error::Numerical(
            "trajectory diverged; settling metrics are undefined".into(),
        ));
    }
    if !(band_hz > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "settling band must be positive, got {band_hz}"
        )));
    }
    let series = traj.frequency_deviation(area)?;
    if series.is_empty() {
        return Err(Error::InvalidParameter("empty trajectory".into()));
    }
    let peak_hz = series.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let duration = traj.len() as f64 * traj.dt;
    let last_violation = series.iter().rposition(|v| v.abs() > band_hz);
    let (settling_s, settled) = match last_violation {
        None => (0.0, true),
        Some(i) if i + 1 == series.len() => (duration, false),
        Some(i) => (traj.time(i + 1), true),
    };
    Ok(SettlingMetrics { peak_hz, settling_s, settled })
}

/// Result of exercising a gain on a (possibly perturbed) physical model.
#[derive(Clone, Debug)]
pub struct TransferOutcome {
    /// Scenario trajectory simulated on the physical dynamics.
    pub trajectory: Trajectory,
    /// Exact closed-loop evaluation on the physical dynamics under the given
    /// load noise; an unstable gain yields the infinite-cost sentinel.
    pub evaluation: GainEvaluation,
}

/// Evaluates a gain trained against `emulator` on `physical` dynamics with
/// the same interface: m controls, p outputs, N load inputs, equal dt.
pub fn transfer_eval(
    emulator: &DiscreteModel,
    physical: &DiscreteModel,
    gain: &StructuredGain,
    spec: &CostSpec,
    load: &GaussianNoise,
    scenario: &Scenario,
    seed: u64,
) -> Result<TransferOutcome> {
    if emulator.n_states() != physical.n_states()
        || emulator.n_controls() != physical.n_controls()
        || emulator.n_outputs() != physical.n_outputs()
        || emulator.n_disturbances() != physical.n_disturbances()
    {
        return Err(Error::ShapeMismatch(
            "emulator and physical models expose different interfaces".into(),
        ));
    }
    if emulator.dt != physical.dt {
        return Err(Error::InvalidParameter(format!(
            "emulator dt {} does not match physical dt {}",
            emulator.dt, physical.dt
        )));
    }
    let stats = NoiseStats::for_gaussian_load(physical, load, spec.q(), spec.delta())?;
    let evaluation = match lyapunov_evaluate(physical, gain, spec, &stats) {
        Ok(eval) => eval,
        Err(Error::UnstablePolicy { spectral_radius }) => {
            GainEvaluation::unstable_sentinel(spectral_radius, stats.delta_bar())
        }
        Err(e) => return Err(e),
    };
    let trajectory = simulate_closed_loop(physical, gain, scenario, seed)?;
    Ok(TransferOutcome { trajectory, evaluation })
}

/// min/mean/max of a non-empty sample.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SummaryStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl SummaryStats {
    fn over(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Some(Self { min, mean, max })
    }
}

/// Aggregated outcomes for one perturbation fraction.
#[derive(Clone, Debug, Serialize)]
pub struct RobustnessCase {
    pub fraction: f64,
    pub mode: String,
    pub n_draws: usize,
    /// Draws whose closed loop stayed strictly stable.
    pub stable_count: usize,
    /// Draws whose simulated trajectory overflowed.
    pub divergent_count: usize,
    /// Draws where every area re-entered the settling band for good.
    pub settled_count: usize,
    /// Worst-area peak |delta_f| per non-divergent draw.
    pub peak_freq_hz: Option<SummaryStats>,
    /// Worst-area settling time per fully settled draw.
    pub settling_s: Option<SummaryStats>,
}

/// One robustness sweep: fractions ascending, one case per fraction.
#[derive(Clone, Debug, Serialize)]
pub struct RobustnessReport {
    pub settling_band_hz: f64,
    pub cases: Vec<RobustnessCase>,
}

fn mode_name(mode: PerturbMode) -> &'static str {
    match mode {
        PerturbMode::UniformScale => "uniform_scale",
        PerturbMode::RandomSign => "random_sign",
    }
}

/// How the plant is assembled; the emulator uses the nominal parameters and
/// each robustness draw rebuilds it from perturbed ones.
#[derive(Clone, Debug)]
pub struct PlantSpec<'a> {
    pub graph: &'a InterconnectionGraph,
    pub include_frequency: bool,
    pub dt: f64,
    pub method: DiscretizationMethod,
}

impl PlantSpec<'_> {
    pub fn build(&self, params: &AreaParams) -> Result<DiscreteModel> {
        let continuous = assemble_network(params, self.graph, self.include_frequency);
        discretize(&continuous, self.dt, self.method)
    }
}

/// Perturbs the physical parameters at each fraction, rebuilds the plant, and
/// measures how the fixed gain carries over. Draw `d` at fraction index `f`
/// uses the deterministic streams (master_seed, Perturbation, f, d) for the
/// parameters and (master_seed, Scenario, f, d) for the simulation seed.
#[allow(clippy::too_many_arguments)]
pub fn robustness_sweep(
    nominal: &AreaParams,
    plant: &PlantSpec<'_>,
    gain: &StructuredGain,
    spec: &CostSpec,
    load: &GaussianNoise,
    plan: &RobustnessPlan,
    scenario: &Scenario,
    master_seed: u64,
) -> Result<RobustnessReport> {
    if plan.fractions.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidParameter(
            "robustness fractions must be sorted ascending".into(),
        ));
    }
    let emulator = plant.build(nominal)?;
    let mut cases = Vec::with_capacity(plan.fractions.len());
    for (fi, &fraction) in plan.fractions.iter().enumerate() {
        let mut stable_count = 0;
        let mut divergent_count = 0;
        let mut settled_count = 0;
        let mut peaks = Vec::new();
        let mut settlings = Vec::new();
        for draw in 0..plan.n_draws {
            let mut rng = stream(master_seed, Domain::Perturbation, fi as u64, draw as u64);
            let perturbed = perturb_parameters(nominal, fraction, plan.mode, &mut rng)?;
            let physical = plant.build(&perturbed)?;
            let sim_seed =
                stream(master_seed, Domain::Scenario, fi as u64, draw as u64).gen::<u64>();
            let outcome =
                transfer_eval(&emulator, &physical, gain, spec, load, scenario, sim_seed)?;
            if outcome.evaluation.stable {
                stable_count += 1;
            }
            if outcome.trajectory.divergent {
                divergent_count += 1;
                continue;
            }
            let mut worst_peak = 0.0_f64;
            let mut worst_settling = 0.0_f64;
            let mut all_settled = true;
            for area in 1..=outcome.trajectory.n_areas() {
                let m = settling_metrics(&outcome.trajectory, plan.settling_band_hz, area)?;
                worst_peak = worst_peak.max(m.peak_hz);
                worst_settling = worst_settling.max(m.settling_s);
                all_settled &= m.settled;
            }
            peaks.push(worst_peak);
            if all_settled {
                settled_count += 1;
                settlings.push(worst_settling);
            }
        }
        cases.push(RobustnessCase {
            fraction,
            mode: mode_name(plan.mode).to_string(),
            n_draws: plan.n_draws,
            stable_count,
            divergent_count,
            settled_count,
            peak_freq_hz: SummaryStats::over(&peaks),
            settling_s: SummaryStats::over(&settlings),
        });
    }
    Ok(RobustnessReport { settling_band_hz: plan.settling_band_hz, cases })
}

/// What the CLI asked for.
#[derive(Clone, Debug)]
pub enum CommandKind {
    /// Learn a gain, write train_log.csv, K_final.json, and any snapshots.
    Train,
    /// Run the scenario with a gain and write trajectory.csv.
    Simulate { gain: Option<PathBuf> },
    /// Exact and sampled cost/risk of a gain, written to eval_cost.json.
    EvalCost { gain: Option<PathBuf> },
    /// Parameter-perturbation sweep, written to robustness.json.
    Robustness { gain: Option<PathBuf> },
    /// Noise-moment estimation from a recorded trace.
    Stats { trace: PathBuf },
}

#[derive(Clone, Debug)]
pub struct Invocation {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub kind: CommandKind,
}

fn resolve_gain(exp: &Experiment, path: &Option<PathBuf>) -> Result<StructuredGain> {
    match path {
        Some(p) => {
            let gain = io::read_gain_json(p)?;
            if gain.pattern().rows() != exp.pattern.rows()
                || gain.pattern().cols() != exp.pattern.cols()
            {
                return Err(Error::ShapeMismatch(format!(
                    "gain {} is {}x{}, experiment wants {}x{}",
                    p.display(),
                    gain.pattern().rows(),
                    gain.pattern().cols(),
                    exp.pattern.rows(),
                    exp.pattern.cols()
                )));
            }
            Ok(gain)
        }
        None => {
            println!("no --gain given; using the zero gain");
            Ok(exp.zero_gain())
        }
    }
}

fn feasibility_word(eval: &GainEvaluation) -> &'static str {
    if !eval.stable {
        "unstable"
    } else if eval.is_feasible() {
        "feasible"
    } else {
        "infeasible"
    }
}

fn print_evaluation(label: &str, eval: &GainEvaluation) {
    println!(
        "  {label:<12} r0 {:>13.6e}  rc {:>13.6e}  delta_bar {:>13.6e}  rho {:>8.5}  [{}]",
        eval.r0,
        eval.rc,
        eval.delta_bar,
        eval.spectral_radius,
        feasibility_word(eval)
    );
}

/// Runs one CLI invocation end to end: load + validate config, execute the
/// subcommand, write artifacts under the output directory, print a summary.
pub fn run_experiment(inv: &Invocation) -> Result<()> {
    let exp = load_experiment(&inv.config, inv.seed, inv.out.clone())?;
    std::fs::create_dir_all(&exp.output_dir)?;
    match &inv.kind {
        CommandKind::Train => {
            let k0 = exp.zero_gain();
            let (k_final, log) =
                train(&exp.model, &k0, &exp.train, &exp.spec, &exp.stats, &exp.disturbance)?;
            let log_path = exp.output_dir.join("train_log.csv");
            io::write_train_log_csv(&log_path, &log)?;
            let gain_path = exp.output_dir.join("K_final.json");
            io::write_gain_json(&gain_path, &k_final)?;
            for (iter, snapshot) in &log.snapshots {
                let snap_path = exp.output_dir.join(format!("K_snapshot_{iter:05}.json"));
                io::write_gain_json(&snap_path, snapshot)?;
            }
            println!(
                "trained {} iterations on a {}-area network (seed {})",
                log.records.len(),
                exp.graph.n_areas(),
                exp.master_seed
            );
            if let (Some(first), Some(last)) = (log.records.first(), log.records.last()) {
                println!(
                    "  r0 {:.6e} -> {:.6e}   rc {:.6e} -> {:.6e}   rho {:.5} -> {:.5}",
                    first.r0, last.r0, first.rc, last.rc, first.spectral_radius,
                    last.spectral_radius
                );
            }
            let eval = lyapunov_evaluate(&exp.model, &k_final, &exp.spec, &exp.stats)?;
            print_evaluation("final", &eval);
            println!("wrote {}", log_path.display());
            println!("wrote {}", gain_path.display());
        }
        CommandKind::Simulate { gain } => {
            let k = resolve_gain(&exp, gain)?;
            let traj = simulate_closed_loop(&exp.model, &k, &exp.scenario, exp.master_seed)?;
            let path = exp.output_dir.join("trajectory.csv");
            io::write_trajectory_csv(&path, &traj)?;
            println!(
                "simulated {:.1} s ({} steps){}",
                traj.len() as f64 * traj.dt,
                traj.len(),
                if traj.divergent { "  DIVERGED" } else { "" }
            );
            if !traj.divergent {
                let band = exp.robustness.settling_band_hz;
                println!("  area   peak |df| (Hz)   settling (s) at +-{band}");
                for area in 1..=exp.graph.n_areas() {
                    let m = settling_metrics(&traj, band, area)?;
                    println!(
                        "  {area:>4}   {:>14.6}   {:>12.2}{}",
                        m.peak_hz,
                        m.settling_s,
                        if m.settled { "" } else { "  (never)" }
                    );
                }
            }
            println!("wrote {}", path.display());
        }
        CommandKind::EvalCost { gain } => {
            let k = resolve_gain(&exp, gain)?;
            let exact = match lyapunov_evaluate(&exp.model, &k, &exp.spec, &exp.stats) {
                Ok(eval) => eval,
                Err(Error::UnstablePolicy { spectral_radius }) => {
                    GainEvaluation::unstable_sentinel(spectral_radius, exp.stats.delta_bar())
                }
                Err(e) => return Err(e),
            };
            let (horizon, burn_in, n_rollouts) = match exp.train.strategy {
                crate::risk::EvalStrategy::MonteCarlo { horizon, burn_in, n_rollouts } => {
                    (horizon, burn_in, n_rollouts)
                }
                crate::risk::EvalStrategy::Lyapunov => (20_000, 1_000, 4),
            };
            let sampled = mc_evaluate(
                &exp.model,
                &k,
                &exp.spec,
                &exp.stats,
                horizon,
                burn_in,
                &exp.disturbance,
                exp.master_seed,
                n_rollouts,
            )?;
            println!("closed-loop cost and risk:");
            print_evaluation("exact", &exact);
            print_evaluation("sampled", &sampled);
            let lambda = max_oracle(&exact, &exp.stats, &exp.spec);
            println!("  active multiplier: {lambda}");
            let path = exp.output_dir.join("eval_cost.json");
            let value = serde_json::json!({
                "exact": evaluation_json(&exact),
                "sampled": evaluation_json(&sampled),
                "horizon": horizon,
                "burn_in": burn_in,
                "n_rollouts": n_rollouts,
                "seed": exp.master_seed,
            });
            let mut text = serde_json::to_string_pretty(&value)?;
            text.push('\n');
            std::fs::write(&path, text)?;
            println!("wrote {}", path.display());
        }
        CommandKind::Robustness { gain } => {
            let k = resolve_gain(&exp, gain)?;
            let load = exp
                .disturbance
                .gaussian()
                .cloned()
                .unwrap_or_else(|| GaussianNoise::zero(exp.graph.n_areas()));
            let plant = PlantSpec {
                graph: &exp.graph,
                include_frequency: exp.include_frequency,
                dt: exp.dt,
                method: exp.method,
            };
            let report = robustness_sweep(
                &exp.params,
                &plant,
                &k,
                &exp.spec,
                &load,
                &exp.robustness,
                &exp.scenario,
                exp.master_seed,
            )?;
            println!(
                "robustness sweep ({}, {} draws, band +-{} Hz):",
                mode_name(exp.robustness.mode),
                exp.robustness.n_draws,
                report.settling_band_hz
            );
            println!("  fraction   stable   settled   peak |df| (max)   settling (max)");
            for case in &report.cases {
                println!(
                    "  {:>8.2}   {:>3}/{:<3}  {:>3}/{:<3}  {:>15}   {:>14}",
                    case.fraction,
                    case.stable_count,
                    case.n_draws,
                    case.settled_count,
                    case.n_draws,
                    case.peak_freq_hz
                        .map_or_else(|| "-".into(), |s| format!("{:.6}", s.max)),
                    case.settling_s
                        .map_or_else(|| "-".into(), |s| format!("{:.2}", s.max)),
                );
            }
            let path = exp.output_dir.join("robustness.json");
            io::write_robustness_json(&path, &report)?;
            println!("wrote {}", path.display());
        }
        CommandKind::Stats { trace } => {
            let raw = io::read_disturbance_trace(trace, exp.graph.n_areas())?;
            let q_c = exp.model.c.transpose() * exp.spec.q() * &exp.model.c;
            let mapped: Vec<DVector<f64>> =
                raw.rows().iter().map(|w| &exp.model.b_wd * w).collect();
            let stats = estimate_noise_stats(&mapped, &q_c, exp.spec.delta())?;
            println!(
                "estimated state-space noise moments from {} samples:",
                raw.rows().len()
            );
            println!("  |mean|     {:>12.6e}", stats.w_bar().norm());
            println!("  tr(cov)    {:>12.6e}", stats.w().trace());
            println!("  |M3|       {:>12.6e}", stats.m3().norm());
            println!("  m4         {:>12.6e}", stats.m4());
            println!("  delta_bar  {:>12.6e}", stats.delta_bar());
            let path = exp.output_dir.join("noise_stats.json");
            io::write_noise_stats_json(&path, &stats, raw.rows().len())?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn evaluation_json(eval: &GainEvaluation) -> serde_json::Value {
    serde_json::json!({
        "r0": eval.r0,
        "rc": eval.rc,
        "delta_bar": eval.delta_bar,
        "stable": eval.stable,
        "spectral_radius": eval.spectral_radius,
    })
}

/// Quick stability probe used by tests and calibration: exact evaluation that
/// reports instability through the sentinel instead of an error.
pub fn evaluate_or_sentinel(
    model: &DiscreteModel,
    gain: &StructuredGain,
    spec: &CostSpec,
    stats: &NoiseStats,
) -> Result<GainEvaluation> {
    let evaluator = PolicyEvaluator::new(model, spec, stats)?;
    match evaluator.lyapunov(gain.matrix()) {
        Ok(eval) => Ok(eval),
        Err(Error::UnstablePolicy { spectral_radius }) => {
            Ok(GainEvaluation::unstable_sentinel(spectral_radius, stats.delta_bar()))
        }
        Err(e) => Err(e),
    }
}
