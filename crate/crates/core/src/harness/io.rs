//! On-disk artifact formats: trajectory and training-log CSVs, gain JSON,
//! robustness reports, noise-moment summaries, and disturbance trace input.
//! Float columns use Rust's shortest round-trip formatting, so identical runs
//! produce byte-identical files.

use crate::error::{Error, Result};
use crate::harness::runner::{RobustnessReport, Trajectory};
use crate::lfc::DisturbanceTrace;
use crate::risk::NoiseStats;
use crate::sgdmax::{StructuredGain, TrainLog};
use crate::topology::StructurePattern;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// FNV-1a over the matrix dimensions and entry bytes; used to stamp
/// trajectories with the model and gain they came from.
pub fn hash_matrices(matrices: &[&DMatrix<f64>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: [u8; 8]| {
        for b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for m in matrices {
        eat((m.nrows() as u64).to_le_bytes());
        eat((m.ncols() as u64).to_le_bytes());
        for x in m.iter() {
            eat(x.to_le_bytes());
        }
    }
    h
}

/// Writes one row per recorded step: t, then per-area delta_f, delta_p_g,
/// delta_p_tie, z, then the control inputs, then the load disturbances.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let n_areas = traj.n_areas();
    let mut text = String::from("t");
    for j in 1..=n_areas {
        write!(text, ",delta_f_{j},delta_p_g_{j},delta_p_tie_{j},z_{j}").unwrap();
    }
    for j in 1..=traj.controls.first().map_or(n_areas, |u| u.len()) {
        write!(text, ",u_{j}").unwrap();
    }
    for j in 1..=traj.loads.first().map_or(n_areas, |w| w.len()) {
        write!(text, ",w_{j}").unwrap();
    }
    text.push('\n');
    for t in 0..traj.len() {
        write!(text, "{}", traj.time(t)).unwrap();
        for x in traj.states[t].iter() {
            write!(text, ",{x}").unwrap();
        }
        for u in traj.controls[t].iter() {
            write!(text, ",{u}").unwrap();
        }
        for w in traj.loads[t].iter() {
            write!(text, ",{w}").unwrap();
        }
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// One row per training iteration; elapsed_s counts simulated plant seconds,
/// not wall time, so reruns of the same seed reproduce the file exactly.
pub fn write_train_log_csv(path: &Path, log: &TrainLog) -> Result<()> {
    let mut text = String::from("iter,r0,rc,lambda,grad_norm,spectral_radius,elapsed_s\n");
    for rec in &log.records {
        writeln!(
            text,
            "{},{},{},{},{},{},{}",
            rec.iter, rec.r0, rec.rc, rec.lambda, rec.grad_norm, rec.spectral_radius,
            rec.sim_elapsed_s
        )
        .unwrap();
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GainFile {
    rows: usize,
    cols: usize,
    mask: Vec<Vec<bool>>,
    values: Vec<Vec<f64>>,
}

pub fn write_gain_json(path: &Path, gain: &StructuredGain) -> Result<()> {
    let m = gain.matrix();
    let mask = gain.pattern().mask();
    let file = GainFile {
        rows: m.nrows(),
        cols: m.ncols(),
        mask: (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| mask[(i, j)]).collect())
            .collect(),
        values: (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_gain_json(path: &Path) -> Result<StructuredGain> {
    let text = std::fs::read_to_string(path)?;
    let file: GainFile = serde_json::from_str(&text)?;
    if file.mask.len() != file.rows
        || file.values.len() != file.rows
        || file.mask.iter().any(|r| r.len() != file.cols)
        || file.values.iter().any(|r| r.len() != file.cols)
    {
        return Err(Error::ShapeMismatch(format!(
            "{}: mask/values do not match declared {}x{}",
            path.display(),
            file.rows,
            file.cols
        )));
    }
    let mask = DMatrix::from_fn(file.rows, file.cols, |i, j| file.mask[i][j]);
    let values = DMatrix::from_fn(file.rows, file.cols, |i, j| file.values[i][j]);
    let pattern = StructurePattern::new(mask)?;
    StructuredGain::new(values, pattern)
}

pub fn write_robustness_json(path: &Path, report: &RobustnessReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a load-disturbance trace: header `area_1,...,area_N`, one row of
/// per-area load deviations per sample.
pub fn read_disturbance_trace(path: &Path, n_areas: usize) -> Result<DisturbanceTrace> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| {
        Error::InvalidParameter(format!("{}: empty trace file", path.display()))
    })?;
    let expected: Vec<String> = (1..=n_areas).map(|j| format!("area_{j}")).collect();
    let got: Vec<&str> = header.split(',').map(str::trim).collect();
    if got != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::InvalidParameter(format!(
            "{}: header must be {}, got {header:?}",
            path.display(),
            expected.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(n_areas);
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|e| {
                Error::InvalidParameter(format!(
                    "{}:{}: bad number {field:?}: {e}",
                    path.display(),
                    idx + 1
                ))
            })?;
            row.push(v);
        }
        if row.len() != n_areas {
            return Err(Error::InvalidParameter(format!(
                "{}:{}: expected {n_areas} columns, got {}",
                path.display(),
                idx + 1,
                row.len()
            )));
        }
        rows.push(DVector::from_vec(row));
    }
    DisturbanceTrace::new(rows)
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Summary of estimated state-space noise moments for the `stats` command.
pub fn write_noise_stats_json(path: &Path, stats: &NoiseStats, n_samples: usize) -> Result<()> {
    let value = serde_json::json!({
        "n_samples": n_samples,
        "mean": stats.w_bar().iter().copied().collect::<Vec<f64>>(),
        "covariance": matrix_rows(stats.w()),
        "third_moment": stats.m3().iter().copied().collect::<Vec<f64>>(),
        "fourth_moment": stats.m4(),
        "delta_bar": stats.delta_bar(),
    });
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sgdmax::TrainRecord;

    fn small_trajectory() -> Trajectory {
        let x = |v: [f64; 8]| DVector::from_row_slice(&v);
        Trajectory {
            dt: 0.5,
            states: vec![x([0.0; 8]), x([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])],
            outputs: vec![DVector::zeros(4), DVector::zeros(4)],
            controls: vec![DVector::from_row_slice(&[1.0, -1.0]); 2],
            loads: vec![DVector::from_row_slice(&[0.25, 0.0]); 2],
            divergent: false,
            seed: 3,
            model_hash: 1,
            gain_hash: 2,
        }
    }

    #[test]
    fn trajectory_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        write_trajectory_csv(&path, &small_trajectory()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[0],
            "t,delta_f_1,delta_p_g_1,delta_p_tie_1,z_1,\
             delta_f_2,delta_p_g_2,delta_p_tie_2,z_2,u_1,u_2,w_1,w_2"
        );
        assert_eq!(lines[1], "0,0,0,0,0,0,0,0,0,1,-1,0.25,0");
        assert!(lines[2].starts_with("0.5,0.1,0.2,"));
    }

    #[test]
    fn train_log_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let log = TrainLog {
            records: vec![TrainRecord {
                iter: 0,
                r0: 1.5,
                rc: 0.25,
                lambda: 0.0,
                grad_norm: 0.125,
                spectral_radius: 0.5,
                sim_elapsed_s: 100.0,
                wall_elapsed_s: 123.456,
            }],
            snapshots: Vec::new(),
        };
        write_train_log_csv(&path, &log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "iter,r0,rc,lambda,grad_norm,spectral_radius,elapsed_s\n0,1.5,0.25,0,0.125,0.5,100\n"
        );
    }

    #[test]
    fn gain_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.json");
        let mask = DMatrix::from_fn(2, 3, |i, j| i == 0 || j == 2);
        let pattern = StructurePattern::new(mask).unwrap();
        let mut values = DMatrix::zeros(2, 3);
        values[(0, 0)] = 1.25;
        values[(0, 2)] = -0.5;
        values[(1, 2)] = 3.0;
        let gain = StructuredGain::new(values, pattern).unwrap();
        write_gain_json(&path, &gain).unwrap();
        let back = read_gain_json(&path).unwrap();
        assert_eq!(back.matrix(), gain.matrix());
        assert_eq!(back.pattern().mask(), gain.pattern().mask());
    }

    #[test]
    fn gain_json_rejects_value_outside_mask() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.json");
        std::fs::write(
            &path,
            r#"{"rows":1,"cols":2,"mask":[[true,false]],"values":[[1.0,0.5]]}"#,
        )
        .unwrap();
        assert!(read_gain_json(&path).is_err());
    }

    #[test]
    fn trace_reader_checks_header_and_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        std::fs::write(&path, "area_1,area_2\n0.1,0.2\n-0.3,0.4\n").unwrap();
        let trace = read_disturbance_trace(&path, 2).unwrap();
        assert_eq!(trace.rows().len(), 2);
        assert_eq!(trace.rows()[1][0], -0.3);

        std::fs::write(&path, "load_1,load_2\n0.1,0.2\n").unwrap();
        assert!(read_disturbance_trace(&path, 2).is_err());

        std::fs::write(&path, "area_1,area_2\n0.1\n").unwrap();
        assert!(read_disturbance_trace(&path, 2).is_err());
    }

    #[test]
    fn matrix_hash_separates_layouts() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 4.0]);
        assert_ne!(hash_matrices(&[&a]), hash_matrices(&[&b]));
        assert_eq!(hash_matrices(&[&a]), hash_matrices(&[&a.clone()]));
    }
}
