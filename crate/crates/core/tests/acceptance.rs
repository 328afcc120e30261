//! Acceptance gate: every project-level requirement checked end to end, one
//! printed pass/fail line per criterion (run with --nocapture to see them on
//! success). The 6-area training artifact is shared across the criteria that
//! exercise it.

use nalgebra::{DMatrix, DVector};
use p2p_lfc::harness::{
    load_experiment, robustness_sweep, settling_metrics, simulate_closed_loop, Experiment,
    PlantSpec,
};
use p2p_lfc::lfc::{
    assemble_network, discretize, AreaParams, DiscretizationMethod, DiscreteModel,
    DisturbanceModel, GaussianNoise,
};
use p2p_lfc::risk::{
    estimate_noise_stats, lyapunov_evaluate, max_oracle, mc_evaluate, mc_risk_original, CostSpec,
    EvalStrategy, GainEvaluation, NoiseStats, PolicyEvaluator,
};
use p2p_lfc::rng::{stream, Domain};
use p2p_lfc::sgdmax::{
    sample_structured_direction, train, zopg, BacktrackConfig, StructuredGain, TrainConfig,
    TrainLog, ZopgOutcome,
};
use p2p_lfc::topology::{build_structure_pattern, InterconnectionGraph, StructurePattern};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

fn nominal_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/nominal.json")
}

fn chain_plant(n: usize, dt: f64) -> (InterconnectionGraph, AreaParams, DiscreteModel) {
    let graph = InterconnectionGraph::chain(n).unwrap();
    let params = AreaParams::nominal();
    let model =
        discretize(&assemble_network(&params, &graph, false), dt, DiscretizationMethod::Exact)
            .unwrap();
    (graph, params, model)
}

fn default_cost(n: usize, delta: f64) -> CostSpec {
    CostSpec::new(DMatrix::identity(n, n), DMatrix::identity(n, n) * 0.1, delta, 100.0).unwrap()
}

fn load_cov(n: usize, var: f64) -> GaussianNoise {
    GaussianNoise::new(DVector::zeros(n), DMatrix::identity(n, n) * var).unwrap()
}

fn patterned_gain(pattern: &StructurePattern, diag: f64, off: f64) -> StructuredGain {
    let values = DMatrix::from_fn(pattern.rows(), pattern.cols(), |i, j| {
        if !pattern.mask()[(i, j)] {
            0.0
        } else if i == j {
            diag
        } else {
            off
        }
    });
    StructuredGain::new(values, pattern.clone()).unwrap()
}

struct TrainedArtifact {
    exp: Experiment,
    k_final: StructuredGain,
    log: TrainLog,
    initial: GainEvaluation,
}

static TRAINED: OnceLock<TrainedArtifact> = OnceLock::new();

/// Trains once on the shipped nominal 6-area config; criteria 6, 7, 8, and 11
/// all read this artifact.
fn trained() -> &'static TrainedArtifact {
    TRAINED.get_or_init(|| {
        let exp = load_experiment(&nominal_config_path(), None, None)
            .expect("nominal config must load");
        let k0 = exp.zero_gain();
        let initial = lyapunov_evaluate(&exp.model, &k0, &exp.spec, &exp.stats)
            .expect("zero gain must be stabilizing on the nominal plant");
        let (k_final, log) =
            train(&exp.model, &k0, &exp.train, &exp.spec, &exp.stats, &exp.disturbance)
                .expect("nominal training must run");
        TrainedArtifact { exp, k_final, log, initial }
    })
}

fn criterion_01_sampled_costs_match_exact() -> String {
    let (graph, _, model) = chain_plant(3, 0.1);
    let spec = default_cost(3, 5.0);
    let load = load_cov(3, 2.5e-3);
    let stats = NoiseStats::for_gaussian_load(&model, &load, spec.q(), spec.delta()).unwrap();
    let k = patterned_gain(&build_structure_pattern(&graph), 0.3, 0.09);
    let exact = lyapunov_evaluate(&model, &k, &spec, &stats).unwrap();
    assert!(exact.stable, "test gain must be stabilizing");
    let t0 = Instant::now();
    let mc = mc_evaluate(
        &model,
        &k,
        &spec,
        &stats,
        200_000,
        1_000,
        &DisturbanceModel::Gaussian(load),
        7,
        4,
    )
    .unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let r0_rel = (mc.r0 - exact.r0).abs() / exact.r0;
    let rc_rel = (mc.rc - exact.rc).abs() / exact.rc;
    assert!(r0_rel <= 0.05, "r0 relative error {r0_rel:.4} exceeds 0.05");
    assert!(rc_rel <= 0.05, "rc relative error {rc_rel:.4} exceeds 0.05");
    assert!(elapsed < 60.0, "evaluation took {elapsed:.1} s, budget is 60 s");
    format!("r0 rel {r0_rel:.4}, rc rel {rc_rel:.4}, {elapsed:.1} s")
}

fn criterion_02_noise_moment_estimates() -> String {
    let (_, _, model) = chain_plant(2, 0.1);
    let spec = default_cost(2, 5.0);
    let load = load_cov(2, 2.5e-3);
    let truth = NoiseStats::for_gaussian_load(&model, &load, spec.q(), spec.delta()).unwrap();
    let q_c = model.c.transpose() * spec.q() * &model.c;
    let mut rng = stream(2, Domain::Probe, 0, 0);
    let samples: Vec<DVector<f64>> =
        (0..1_000_000).map(|_| &model.b_wd * load.sample(&mut rng)).collect();
    let est = estimate_noise_stats(&samples, &q_c, spec.delta()).unwrap();
    let m3_bound = 0.02 * truth.w().norm() * q_c.trace();
    let m4_truth = truth.m4();
    let m3_norm = est.m3().norm();
    let m4_rel = (est.m4() - m4_truth).abs() / m4_truth;
    assert!(
        m3_norm <= m3_bound,
        "third-moment norm {m3_norm:.3e} exceeds bound {m3_bound:.3e}"
    );
    assert!(m4_rel <= 0.03, "fourth-moment relative error {m4_rel:.4} exceeds 0.03");
    format!("|M3| {m3_norm:.2e} <= {m3_bound:.2e}, m4 rel {m4_rel:.4}")
}

fn criterion_03_reformulated_constraint_agrees() -> String {
    let (graph, _, model) = chain_plant(2, 0.1);
    let spec = default_cost(2, 8.7e-9);
    let load = load_cov(2, 2.5e-3);
    let stats = NoiseStats::for_gaussian_load(&model, &load, spec.q(), spec.delta()).unwrap();
    let pattern = build_structure_pattern(&graph);
    let disturbance = DisturbanceModel::Gaussian(load);
    let mut rng = stream(17, Domain::Probe, 0, 0);
    let mut checked = 0u32;
    let mut feasible = 0u32;
    let mut attempts = 0u32;
    while checked < 20 {
        attempts += 1;
        assert!(attempts < 2_000, "could not sample 20 qualifying gains");
        let u = sample_structured_direction(&pattern, &mut rng);
        let k = StructuredGain::from_dense(&(u * 2.0), pattern.clone()).unwrap();
        let eval = match lyapunov_evaluate(&model, &k, &spec, &stats) {
            Ok(e) if e.stable => e,
            _ => continue,
        };
        // keep only gains at least 10% away from the risk boundary
        if (eval.rc - stats.delta_bar()).abs() / stats.delta_bar() < 0.1 {
            continue;
        }
        let original = mc_risk_original(
            &model,
            &k,
            &spec,
            200_000,
            1_000,
            &disturbance,
            1_000 + u64::from(checked),
        )
        .unwrap();
        let reformulated_ok = eval.rc <= stats.delta_bar();
        let original_ok = original <= spec.delta();
        assert!(
            reformulated_ok == original_ok,
            "predicates disagree: rc {} vs delta_bar {} but original {} vs delta {}",
            eval.rc,
            stats.delta_bar(),
            original,
            spec.delta()
        );
        checked += 1;
        if reformulated_ok {
            feasible += 1;
        }
    }
    format!("20/20 agree ({feasible} feasible, {} infeasible)", checked - feasible)
}

fn criterion_04_zopg_aligns_with_finite_differences() -> String {
    let (graph, _, model) = chain_plant(2, 0.1);
    let spec = CostSpec::new(
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2) * 1e4,
        1e9,
        100.0,
    )
    .unwrap();
    let load = load_cov(2, 2.5e-3);
    let stats = NoiseStats::for_gaussian_load(&model, &load, spec.q(), spec.delta()).unwrap();
    let pattern = build_structure_pattern(&graph);
    let evaluator = PolicyEvaluator::new(&model, &spec, &stats).unwrap();
    let disturbance = DisturbanceModel::Gaussian(load);
    let k = patterned_gain(&pattern, 0.03, 0.012);

    let h = 1e-4;
    let mut fd = DMatrix::zeros(2, 2);
    for (i, j) in pattern.support() {
        let mut plus = k.matrix().clone();
        plus[(i, j)] += h;
        let mut minus = k.matrix().clone();
        minus[(i, j)] -= h;
        let lp = lyapunov_evaluate(
            &model,
            &StructuredGain::new(plus, pattern.clone()).unwrap(),
            &spec,
            &stats,
        )
        .unwrap();
        let lm = lyapunov_evaluate(
            &model,
            &StructuredGain::new(minus, pattern.clone()).unwrap(),
            &spec,
            &stats,
        )
        .unwrap();
        let phi_p = lp.lagrangian_at(max_oracle(&lp, &stats, &spec));
        let phi_m = lm.lagrangian_at(max_oracle(&lm, &stats, &spec));
        fd[(i, j)] = (phi_p - phi_m) / (2.0 * h);
    }

    let mut avg = DMatrix::zeros(2, 2);
    let samples = 2_000u64;
    for s in 0..samples {
        let mut dir_rng = stream(99, Domain::Direction, 0, s);
        let u = sample_structured_direction(&pattern, &mut dir_rng);
        match zopg(
            &evaluator,
            &k,
            &u,
            0.01,
            &spec,
            &stats,
            EvalStrategy::Lyapunov,
            &disturbance,
            0,
        )
        .unwrap()
        {
            ZopgOutcome::Gradient { gradient, .. } => avg += gradient,
            ZopgOutcome::Unstable => panic!("perturbed gain must stay stabilizing"),
        }
    }
    avg /= samples as f64;
    let cosine = avg.dot(&fd) / (avg.norm() * fd.norm());
    assert!(cosine >= 0.9, "cosine similarity {cosine:.4} below 0.9");
    format!("cosine {cosine:.4} over {samples} samples")
}

fn criterion_05_training_matches_brute_force() -> String {
    let (graph, _, model) = chain_plant(1, 0.1);
    // budget far above any reachable rc, so the multiplier stays at zero and
    // the constraint is disabled
    let spec = default_cost(1, 1e12);
    let load = load_cov(1, 2.5e-3);
    let stats = NoiseStats::for_gaussian_load(&model, &load, spec.q(), spec.delta()).unwrap();
    let pattern = build_structure_pattern(&graph);

    let mut best_r0 = f64::INFINITY;
    let mut best_k = f64::NAN;
    let mut kv = -1.0;
    while kv <= 20.0 {
        let k = StructuredGain::new(DMatrix::from_element(1, 1, kv), pattern.clone()).unwrap();
        if let Ok(e) = lyapunov_evaluate(&model, &k, &spec, &stats) {
            if e.r0 < best_r0 {
                best_r0 = e.r0;
                best_k = kv;
            }
        }
        kv += 1e-4;
    }

    let config = TrainConfig {
        eta: 22.0,
        r: 0.05,
        samples_per_iter: 50,
        iterations: 4_500,
        epsilon: 0.0,
        strategy: EvalStrategy::Lyapunov,
        master_seed: 5,
        backtrack: BacktrackConfig::default(),
        snapshot_every: None,
        crn: false,
    };
    let (k_trained, log) = train(
        &model,
        &StructuredGain::zeros(pattern),
        &config,
        &spec,
        &stats,
        &DisturbanceModel::Gaussian(load),
    )
    .unwrap();
    assert!(log.records.len() <= 5_000, "used more than 5000 iterations");
    let active = log.records.iter().filter(|rec| rec.lambda != 0.0).count();
    assert!(active == 0, "constraint activated on {active} iterations; it must stay disabled");
    let k_learned = k_trained.matrix()[(0, 0)];
    let gain_gap = (k_learned - best_k).abs() / best_k.abs();
    assert!(
        gain_gap <= 0.05,
        "trained gain {k_learned:.4} vs brute-force {best_k:.4}: gap {gain_gap:.4}"
    );
    let final_r0 = log.records.last().unwrap().r0;
    format!(
        "gain gap {:.4} (k {:.4} vs grid {:.4}, r0 {:.4e} vs {:.4e}, {} iterations)",
        gain_gap,
        k_learned,
        best_k,
        final_r0,
        best_r0,
        log.records.len()
    )
}

fn criterion_06_training_descends_and_stays_stable() -> String {
    let art = trained();
    let log = &art.log;
    assert!(!log.records.is_empty(), "training produced no records");
    let final_r0 = log.records.last().unwrap().r0;
    assert!(
        final_r0 < art.initial.r0,
        "final r0 {final_r0:.6e} is not below initial {:.6e}",
        art.initial.r0
    );
    let tail = &log.records[log.records.len() * 9 / 10..];
    let tail_min = tail.iter().map(|r| r.r0).fold(f64::INFINITY, f64::min);
    let tail_max = tail.iter().map(|r| r.r0).fold(f64::NEG_INFINITY, f64::max);
    let spread = (tail_max - tail_min) / tail_min;
    assert!(spread < 0.05, "last-10% r0 spread {spread:.4} exceeds 0.05");
    let unstable = log.records.iter().filter(|r| r.spectral_radius >= 1.0).count();
    assert!(unstable == 0, "{unstable} logged iterates were not stabilizing");
    format!(
        "r0 {:.6e} -> {final_r0:.6e}, tail spread {spread:.5}, {} stable iterates",
        art.initial.r0,
        log.records.len()
    )
}

fn criterion_07_step_response_settles() -> String {
    let art = trained();
    let exp = &art.exp;
    let traj = simulate_closed_loop(&exp.model, &art.k_final, &exp.scenario, exp.master_seed)
        .unwrap();
    assert!(!traj.divergent, "nominal step response diverged");
    let f3 = traj.frequency_deviation(3).unwrap();
    let (peak_idx, peak) = f3
        .iter()
        .enumerate()
        .map(|(i, v)| (i, v.abs()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let onset_s = 3.0;
    assert!(peak > 0.0, "area 3 never responds to the step");
    assert!(
        traj.time(peak_idx) >= onset_s,
        "area 3 peak at {:.2} s precedes the {onset_s} s onset",
        traj.time(peak_idx)
    );
    let m = settling_metrics(&traj, 0.01, 3).unwrap();
    assert!(
        m.settled && m.settling_s < 20.0,
        "area 3 does not re-enter the +-0.01 Hz band before 20 s (settling {:.2} s)",
        m.settling_s
    );
    let f2_peak = traj
        .frequency_deviation(2)
        .unwrap()
        .iter()
        .fold(0.0_f64, |mx, v| mx.max(v.abs()));
    assert!(f2_peak > 0.0, "area 2 shows no response to area 3's step");
    format!(
        "peak {:.4} Hz at {:.1} s, settled {:.1} s, area-2 peak {:.5} Hz",
        peak,
        traj.time(peak_idx),
        m.settling_s,
        f2_peak
    )
}

fn criterion_08_parameter_robustness() -> String {
    let art = trained();
    let exp = &art.exp;
    let plant = PlantSpec {
        graph: &exp.graph,
        include_frequency: exp.include_frequency,
        dt: exp.dt,
        method: exp.method,
    };
    let load = exp.disturbance.gaussian().cloned().unwrap();
    let report = robustness_sweep(
        &exp.params,
        &plant,
        &art.k_final,
        &exp.spec,
        &load,
        &exp.robustness,
        &exp.scenario,
        exp.master_seed,
    )
    .unwrap();
    assert_eq!(report.cases.len(), 3, "expected the 10/15/20% sweep");
    for case in &report.cases[..2] {
        assert_eq!(
            case.stable_count, case.n_draws,
            "{}% sweep: {}/{} stable",
            case.fraction * 100.0,
            case.stable_count,
            case.n_draws
        );
        assert_eq!(
            case.settled_count, case.n_draws,
            "{}% sweep: {}/{} re-settled",
            case.fraction * 100.0,
            case.settled_count,
            case.n_draws
        );
    }
    let worst = &report.cases[2];
    assert_eq!(worst.fraction, 0.20);
    assert_eq!(worst.n_draws, exp.robustness.n_draws, "20% case must be executed");
    format!(
        "10%/15% stable and re-settled; 20% reported: {}/{} stable, {}/{} settled",
        worst.stable_count, worst.n_draws, worst.settled_count, worst.n_draws
    )
}

fn criterion_09_multiplier_is_bang_bang() -> String {
    let (graph, _, model) = chain_plant(2, 0.1);
    let spec = default_cost(2, 8.7e-9);
    let load = load_cov(2, 2.5e-3);
    let stats = NoiseStats::for_gaussian_load(&model, &load, spec.q(), spec.delta()).unwrap();
    let evaluator = PolicyEvaluator::new(&model, &spec, &stats).unwrap();
    let pattern = build_structure_pattern(&graph);
    let mut rng = stream(9, Domain::Probe, 0, 0);
    let mut zeros = 0u32;
    let mut maxed = 0u32;
    for _ in 0..1_000 {
        let u = sample_structured_direction(&pattern, &mut rng);
        let scale = 10f64.powf(rand::Rng::gen_range(&mut rng, -2.0..2.0));
        let k = StructuredGain::from_dense(&(u * scale), pattern.clone()).unwrap();
        let eval = match evaluator.lyapunov(k.matrix()) {
            Ok(e) => e,
            Err(p2p_lfc::error::Error::UnstablePolicy { spectral_radius }) => {
                GainEvaluation::unstable_sentinel(spectral_radius, stats.delta_bar())
            }
            Err(e) => panic!("evaluation failed: {e}"),
        };
        let lambda = max_oracle(&eval, &stats, &spec);
        assert!(
            lambda == 0.0 || lambda == spec.lambda_max(),
            "multiplier {lambda} is not an endpoint of [0, {}]",
            spec.lambda_max()
        );
        if lambda == 0.0 {
            zeros += 1;
        } else {
            maxed += 1;
        }
    }
    format!("1000 evaluations: {zeros} at 0, {maxed} at Lambda")
}

fn criterion_10_training_is_reproducible() -> String {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("repro.json");
    let config = serde_json::json!({
        "graph": {"n_areas": 3, "edges": [[1, 2], [2, 3]]},
        "area_params": {
            "inertia": 10.0, "damping": 1.0, "droop": 0.05,
            "gov_turbine_t": 0.4, "k_tie": 1.0
        },
        "cost": {"Q": 1.0, "R": 0.1, "delta": 5.0, "Lambda": 100.0},
        "discretization": {"dt": 0.1, "method": "exact"},
        "disturbance": {"type": "gaussian", "covariance": 0.0025},
        "train": {
            "eta": 1e-4, "r": 0.1, "M": 20, "J": 40, "seed": 123,
            "horizon": 300, "burn_in": 30, "n_rollouts": 1,
            "snapshot_every": 10
        }
    });
    std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let run = |out: &Path| {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_p2p-lfc"))
            .args(["train", "--config"])
            .arg(&config_path)
            .arg("--out")
            .arg(out)
            .output()
            .expect("binary must launch");
        assert!(
            status.status.success(),
            "train run failed: {}",
            String::from_utf8_lossy(&status.stderr)
        );
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run(&out_a);
    run(&out_b);
    let mut compared = Vec::new();
    for name in ["train_log.csv", "K_final.json"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert!(a == b, "{name} differs between identical runs");
        compared.push(format!("{name} ({} bytes)", a.len()));
    }
    format!("byte-identical: {}", compared.join(", "))
}

fn criterion_11_snapshots_respect_structure() -> String {
    let art = trained();
    assert!(!art.log.snapshots.is_empty(), "training produced no snapshots");
    let mask = art.exp.pattern.mask().clone();
    let mut checked_entries = 0usize;
    for (iter, snapshot) in &art.log.snapshots {
        let m = snapshot.matrix();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if !mask[(i, j)] {
                    assert!(
                        m[(i, j)] == 0.0,
                        "snapshot at iteration {iter} has {} in masked-out entry ({i},{j})",
                        m[(i, j)]
                    );
                    checked_entries += 1;
                }
            }
        }
    }
    let k = art.k_final.matrix();
    for i in 0..k.nrows() {
        for j in 0..k.ncols() {
            if !mask[(i, j)] {
                assert!(k[(i, j)] == 0.0, "final gain has nonzero masked-out entry");
            }
        }
    }
    format!(
        "{} snapshots, {checked_entries} masked-out entries all exactly zero",
        art.log.snapshots.len()
    )
}

#[test]
fn acceptance() {
    let criteria: Vec<(&str, fn() -> String)> = vec![
        ("sampled costs match exact evaluation", criterion_01_sampled_costs_match_exact),
        ("noise-moment estimates hit tolerances", criterion_02_noise_moment_estimates),
        ("reformulated risk agrees with original", criterion_03_reformulated_constraint_agrees),
        ("gradient estimate aligns with finite differences", criterion_04_zopg_aligns_with_finite_differences),
        ("training matches 1-D brute force", criterion_05_training_matches_brute_force),
        ("6-area training descends, iterates stable", criterion_06_training_descends_and_stays_stable),
        ("step response peaks then settles", criterion_07_step_response_settles),
        ("gain survives parameter perturbations", criterion_08_parameter_robustness),
        ("multiplier oracle is bang-bang", criterion_09_multiplier_is_bang_bang),
        ("training runs are byte-reproducible", criterion_10_training_is_reproducible),
        ("snapshots respect the structure mask", criterion_11_snapshots_respect_structure),
    ];
    let mut failures = Vec::new();
    for (idx, (name, run)) in criteria.iter().enumerate() {
        match catch_unwind(AssertUnwindSafe(run)) {
            Ok(detail) => println!("[ACCEPTANCE] {:02} {name}: PASS ({detail})", idx + 1),
            Err(payload) => {
                let msg = payload
                    .downcast_ref::<String>()
                    .map(String::as_str)
                    .or_else(|| payload.downcast_ref::<&str>().copied())
                    .unwrap_or("panic without message");
                println!("[ACCEPTANCE] {:02} {name}: FAIL ({msg})", idx + 1);
                failures.push(format!("{:02} {name}", idx + 1));
            }
        }
    }
    assert!(failures.is_empty(), "acceptance criteria failed: {}", failures.join("; "));
}
