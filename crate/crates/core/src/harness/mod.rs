//! Experiment harness: scenarios, closed-loop simulation, settling metrics,
//! emulator-to-physical transfer, robustness sweeps, and the file formats the
//! command-line front end reads and writes.

use crate::error::{Error, Result};
use crate::lfc::GaussianNoise;
use nalgebra::DVector;
use rand::Rng;

pub mod config;
pub mod io;
pub mod runner;

pub use config::{load_experiment, Experiment, MatrixSpec, RobustnessPlan, VectorSpec};
pub use runner::{
    robustness_sweep, run_experiment, settling_metrics, simulate_closed_loop, transfer_eval,
    CommandKind, Invocation, PlantSpec, RobustnessCase, RobustnessReport, SettlingMetrics,
    SummaryStats, Trajectory, TransferOutcome,
};

/// One deterministic load step: `magnitude_pu` added to area `area`'s load
/// from `onset_s` until `offset_s` (or forever when absent).
#[derive(Clone, Debug, PartialEq)]
pub struct LoadStep {
    /// 1-based area index.
    pub area: usize,
    pub onset_s: f64,
    pub magnitude_pu: f64,
    pub offset_s: Option<f64>,
}

/// Deterministic load-step schedule with optional gaussian background noise.
#[derive(Clone, Debug)]
pub struct Scenario {
    duration_s: f64,
    dt: f64,
    steps: Vec<LoadStep>,
    background: Option<GaussianNoise>,
    n_areas: usize,
}

impl Scenario {
    pub fn new(
        duration_s: f64,
        dt: f64,
        steps: Vec<LoadStep>,
        background: Option<GaussianNoise>,
        n_areas: usize,
    ) -> Result<Self> {
        if !(duration_s > 0.0) || !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "scenario needs positive duration and dt, got {duration_s} s / {dt} s"
            )));
        }
        if n_areas == 0 {
            return Err(Error::InvalidParameter("scenario needs at least one area".into()));
        }
        for step in &steps {
            if step.area == 0 || step.area > n_areas {
                return Err(Error::InvalidParameter(format!(
                    "load step area {} outside 1..={n_areas}",
                    step.area
                )));
            }
            if !(0.0..=duration_s).contains(&step.onset_s) {
                return Err(Error::InvalidParameter(format!(
                    "load step onset {} s outside scenario window 0..={duration_s} s",
                    step.onset_s
                )));
            }
            if let Some(off) = step.offset_s {
                if off <= step.onset_s {
                    return Err(Error::InvalidParameter(format!(
                        "load step offset {off} s must come after onset {} s",
                        step.onset_s
                    )));
                }
            }
        }
        if let Some(bg) = &background {
            if bg.dim() != n_areas {
                return Err(Error::ShapeMismatch(format!(
                    "background noise dimension {} vs {n_areas} areas",
                    bg.dim()
                )));
            }
        }
        Ok(Self { duration_s, dt, steps, background, n_areas })
    }

    /// One persistent 0.1 p.u. step per area, onsets evenly staggered across
    /// the scenario window.
    pub fn staggered_default(n_areas: usize, duration_s: f64, dt: f64) -> Result<Self> {
        let steps = (1..=n_areas)
            .map(|area| LoadStep {
                area,
                onset_s: duration_s * area as f64 / (n_areas as f64 + 1.0),
                magnitude_pu: 0.1,
                offset_s: None,
            })
            .collect();
        Self::new(duration_s, dt, steps, None, n_areas)
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_s
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_areas(&self) -> usize {
        self.n_areas
    }

    pub fn steps(&self) -> &[LoadStep] {
        &self.steps
    }

    pub fn n_time_steps(&self) -> usize {
        (self.duration_s / self.dt).round() as usize
    }

    /// Load vector at discrete step `t` (time t·dt): sum of active steps plus
    /// one background draw when background noise is configured.
    pub fn load_at_step<R: Rng>(&self, t: usize, rng: &mut R) -> DVector<f64> {
        let time = t as f64 * self.dt;
        let mut w = DVector::zeros(self.n_areas);
        for step in &self.steps {
            let active = time >= step.onset_s && step.offset_s.map_or(true, |off| time < off);
            if active {
                w[step.area - 1] += step.magnitude_pu;
            }
        }
        if let Some(bg) = &self.background {
            w += bg.sample(rng);
        }
        w
    }
}
