//! Evaluation metrics computed from trajectory logs.

use serde::{Deserialize, Serialize};

use crate::env::should_terminate;
use crate::sim::{RobotModel, NUM_LEGS};
use crate::terrain::Terrain;
use crate::trajectory::TrajectoryRow;

/// Seconds after each command change left out of the tracking error.
pub const COMMAND_TRANSIENT: f64 = 0.2;
/// Below this mean horizontal speed the cost of transport is undefined.
pub const MIN_COT_SPEED: f64 = 0.05;
pub const PPI_SAMPLES: usize = 200;

/// Base velocity `[v_x, v_y, omega_z]` in the yaw-aligned frame the command
/// is expressed in.
pub fn heading_velocity(row: &TrajectoryRow) -> [f64; 3] {
    let q = row.orientation();
    let yaw = q.euler_angles().2;
    let (s, c) = yaw.sin_cos();
    let [vx, vy, _] = row.linear_velocity;
    let w = q * nalgebra::Vector3::from(row.angular_velocity);
    [c * vx + s * vy, -s * vx + c * vy, w.z]
}

/// RMS of the planar velocity error norm and of the yaw-rate error, skipping
/// [`COMMAND_TRANSIENT`] seconds after the start and after every change of
/// command. Returns `(0, 0)` when no rows qualify.
pub fn tracking_errors(rows: &[TrajectoryRow]) -> (f64, f64) {
    let Some(first) = rows.first() else {
        return (0.0, 0.0);
    };
    let mut switch_time = first.time;
    let mut prev_cmd = first.command;
    let (mut lin, mut ang, mut n) = (0.0, 0.0, 0usize);
    for row in rows {
        if row.command != prev_cmd {
            switch_time = row.time;
            prev_cmd = row.command;
        }
        if row.time - switch_time < COMMAND_TRANSIENT - 1e-9 {
            continue;
        }
        let v = heading_velocity(row);
        let c = row.command;
        lin += (v[0] - c[0]).powi(2) + (v[1] - c[1]).powi(2);
        ang += (v[2] - c[2]).powi(2);
        n += 1;
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        ((lin / n as f64).sqrt(), (ang / n as f64).sqrt())
    }
}

/// Mean positive joint power over `m g v`, with `v` the mean horizontal
/// speed. `None` when the robot barely moves.
pub fn cost_of_transport(rows: &[TrajectoryRow], model: &RobotModel, gravity: f64) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let power: f64 = rows
        .iter()
        .map(|r| {
            r.torques
                .iter()
                .zip(&r.joint_velocities)
                .map(|(t, w)| (t * w).max(0.0))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    let speed = rows
        .iter()
        .map(|r| r.linear_velocity[0].hypot(r.linear_velocity[1]))
        .sum::<f64>()
        / n;
    if speed < MIN_COT_SPEED {
        None
    } else {
        Some(power / (model.base_mass * gravity * speed))
    }
}

/// Zero mean and unit max-abs per axis over all resampled points.
fn normalize(cycles: &mut [Vec<[f64; 2]>]) {
    let count = (cycles.len() * PPI_SAMPLES) as f64;
    for axis in 0..2 {
        let mean = cycles.iter().flatten().map(|p| p[axis]).sum::<f64>() / count;
        let peak = cycles
            .iter()
            .flatten()
            .fold(0.0f64, |m, p| m.max((p[axis] - mean).abs()));
        for p in cycles.iter_mut().flatten() {
            p[axis] -= mean;
            if peak > 0.0 {
                p[axis] /= peak;
            }
        }
    }
}

fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    let i = times.partition_point(|x| *x <= t);
    if i == 0 {
        return values[0];
    }
    if i >= times.len() {
        return values[times.len() - 1];
    }
    let (t0, t1) = (times[i - 1], times[i]);
    let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
    values[i - 1] + w * (values[i] - values[i - 1])
}

/// Per-cycle portraits resampled to [`PPI_SAMPLES`] points.
fn cycles(times: &[f64], angle: &[f64], velocity: &[f64], period: f64) -> Vec<Vec<[f64; 2]>> {
    let t0 = times[0];
    let span = times[times.len() - 1] - t0;
    let n = ((span + 1e-9) / period).floor() as usize;
    (0..n)
        .map(|c| {
            (0..PPI_SAMPLES)
                .map(|k| {
                    let t = t0 + (c as f64 + k as f64 / PPI_SAMPLES as f64) * period;
                    [interpolate(times, angle, t), interpolate(times, velocity, t)]
                })
                .collect()
        })
        .collect()
}

/// Distance between two knees' (angle, velocity) portraits over the whole
/// gait cycles in the log, minimized over all cyclic phase shifts. Each axis
/// is normalized to zero mean and unit max-abs first.
pub fn portrait_distance(
    times: &[f64],
    left: (&[f64], &[f64]),
    right: (&[f64], &[f64]),
    period: f64,
) -> f64 {
    let mut l = cycles(times, left.0, left.1, period);
    let mut r = cycles(times, right.0, right.1, period);
    if l.is_empty() {
        return f64::NAN;
    }
    normalize(&mut l);
    normalize(&mut r);
    let count = (l.len() * PPI_SAMPLES) as f64;
    (0..PPI_SAMPLES)
        .map(|shift| {
            let mut total = 0.0;
            for (lc, rc) in l.iter().zip(&r) {
                for k in 0..PPI_SAMPLES {
                    let a = lc[k];
                    let b = rc[(k + shift) % PPI_SAMPLES];
                    total += (a[0] - b[0]).hypot(a[1] - b[1]);
                }
            }
            total / count
        })
        .fold(f64::INFINITY, f64::min)
}

/// Phase-portrait index: mean over the front and rear leg pairs of the
/// left/right knee portrait distance. Zero iff the pairs' portraits coincide
/// up to a phase shift; `NaN` if the log is shorter than one gait cycle.
pub fn phase_portrait_index(rows: &[TrajectoryRow], period: f64) -> f64 {
    if rows.len() < 2 {
        return f64::NAN;
    }
    let times: Vec<f64> = rows.iter().map(|r| r.time).collect();
    let knee = |leg: usize| -> (Vec<f64>, Vec<f64>) {
        let j = 3 * leg + 2;
        (
            rows.iter().map(|r| r.joint_angles[j]).collect(),
            rows.iter().map(|r| r.joint_velocities[j]).collect(),
        )
    };
    let pairs = [(1, 0), (3, 2)];
    pairs
        .iter()
        .map(|(left, right)| {
            let (la, lv) = knee(*left);
            let (ra, rv) = knee(*right);
            portrait_distance(&times, (&la, &lv), (&ra, &rv), period)
        })
        .sum::<f64>()
        / pairs.len() as f64
}

/// Time of the first terminating row (or the last row's time) and whether
/// the base passed `finish_x` before any termination.
pub fn survival_and_success(
    rows: &[TrajectoryRow],
    model: &RobotModel,
    terrain: &Terrain,
    finish_x: Option<f64>,
) -> (f64, bool) {
    let mut crossed = finish_x.is_none();
    for row in rows {
        if should_terminate(&row.state(), model, terrain) {
            return (row.time, false);
        }
        if let Some(x) = finish_x {
            crossed |= row.position[0] >= x;
        }
    }
    (rows.last().map_or(0.0, |r| r.time), crossed)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveTimeStats {
    pub mean_us: f64,
    pub p99_us: f64,
}

impl SolveTimeStats {
    pub fn from_samples(us: &[f64]) -> Self {
        if us.is_empty() {
            return Self::default();
        }
        let mut sorted = us.to_vec();
        sorted.sort_by(f64::total_cmp);
        let idx = ((0.99 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
        Self {
            mean_us: us.iter().sum::<f64>() / us.len() as f64,
            p99_us: sorted[idx],
        }
    }
}

/// Metrics for one evaluated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub controller: String,
    pub terrain: String,
    pub terrain_factor: f64,
    pub seed: u64,
    pub episode_length: f64,
    pub tracking_error_linear: f64,
    pub tracking_error_angular: f64,
    pub survival_time: f64,
    pub success: bool,
    /// `NaN` when undefined (robot too slow).
    pub cot: f64,
    pub ppi: f64,
    pub solve_mean_us: f64,
    pub solve_p99_us: f64,
}

impl EvalReport {
    pub const HEADER: [&'static str; 13] = [
        "controller",
        "terrain",
        "terrain_factor",
        "seed",
        "episode_length",
        "tracking_error_linear",
        "tracking_error_angular",
        "survival_time",
        "success",
        "cot",
        "ppi",
        "solve_mean_us",
        "solve_p99_us",
    ];

    #[allow(clippy::too_many_arguments)]
    pub fn from_log(
        controller: &str,
        seed: u64,
        rows: &[TrajectoryRow],
        model: &RobotModel,
        gravity: f64,
        terrain: &Terrain,
        finish_x: Option<f64>,
        gait_period: f64,
        episode_length: f64,
        solve_times: &SolveTimeStats,
    ) -> Self {
        let (lin, ang) = tracking_errors(rows);
        let (survival, success) = survival_and_success(rows, model, terrain, finish_x);
        Self {
            controller: controller.to_string(),
            terrain: terrain.kind.to_string(),
            terrain_factor: terrain.terrain_factor,
            seed,
            episode_length,
            tracking_error_linear: lin,
            tracking_error_angular: ang,
            survival_time: survival.min(episode_length),
            success,
            cot: cost_of_transport(rows, model, gravity).unwrap_or(f64::NAN),
            ppi: phase_portrait_index(rows, gait_period),
            solve_mean_us: solve_times.mean_us,
            solve_p99_us: solve_times.p99_us,
        }
    }

    pub fn record(&self) -> Vec<String> {
        vec![
            self.controller.clone(),
            self.terrain.clone(),
            self.terrain_factor.to_string(),
            self.seed.to_string(),
            self.episode_length.to_string(),
            self.tracking_error_linear.to_string(),
            self.tracking_error_angular.to_string(),
            self.survival_time.to_string(),
            (self.success as u8).to_string(),
            self.cot.to_string(),
            self.ppi.to_string(),
            self.solve_mean_us.to_string(),
            self.solve_p99_us.to_string(),
        ]
    }
}

/// Fixed-width text table of reports.
/// Parse a report CSV written with [`EvalReport::HEADER`].
pub fn read_reports<R: std::io::Read>(r: R) -> crate::Result<Vec<EvalReport>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| crate::Error::Format(format!("report column `{name}` missing")))
    };
    let idx: Vec<usize> = EvalReport::HEADER.iter().map(|n| col(n)).collect::<crate::Result<_>>()?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |k: usize| rec.get(idx[k]).unwrap_or("");
        let num = |k: usize| {
            field(k).parse::<f64>().map_err(|_| {
                crate::Error::Format(format!("bad value `{}` in column `{}`", field(k), EvalReport::HEADER[k]))
            })
        };
        out.push(EvalReport {
            controller: field(0).to_string(),
            terrain: field(1).to_string(),
            terrain_factor: num(2)?,
            seed: field(3)
                .parse()
                .map_err(|_| crate::Error::Format(format!("bad value `{}` in column `seed`", field(3))))?,
            episode_length: num(4)?,
            tracking_error_linear: num(5)?,
            tracking_error_angular: num(6)?,
            survival_time: num(7)?,
            success: num(8)? != 0.0,
            cot: num(9)?,
            ppi: num(10)?,
            solve_mean_us: num(11)?,
            solve_p99_us: num(12)?,
        });
    }
    Ok(out)
}

pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = format!(
        "{:<12} {:<9} {:>6} {:>5} {:>8} {:>8} {:>8} {:>5} {:>7} {:>7}\n",
        "controller", "terrain", "factor", "seed", "lin_err", "ang_err", "survive", "ok", "cot", "ppi"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<12} {:<9} {:>6.3} {:>5} {:>8.4} {:>8.4} {:>8.2} {:>5} {:>7.3} {:>7.3}\n",
            r.controller,
            r.terrain,
            r.terrain_factor,
            r.seed,
            r.tracking_error_linear,
            r.tracking_error_angular,
            r.survival_time,
            r.success,
            r.cot,
            r.ppi
        ));
    }
    out
}

/// Knee indices of the left/right legs, for callers plotting portraits.
pub fn knee_joint(leg: usize) -> usize {
    debug_assert!(leg < NUM_LEGS);
    3 * leg + 2
}
