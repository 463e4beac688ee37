//! Per-control-tick trajectory log (57 columns): time, base position,
//! orientation quaternion `(w, x, y, z)`, world linear velocity, body
//! angular velocity, 12 joint angles, 12 joint velocities, 12 torques,
//! 4 contact flags and the 3 command components.

use std::io::{Read, Write};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::sim::{ContactState, RobotState, LEG_NAMES, NUM_JOINTS, NUM_LEGS};

pub const NUM_COLUMNS: usize = 57;

const JOINT_NAMES: [&str; 3] = ["abd", "hip", "knee"];

pub fn header() -> Vec<String> {
    let mut h: Vec<String> = ["time", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for prefix in ["q", "dq", "tau"] {
        for leg in LEG_NAMES {
            for joint in JOINT_NAMES {
                h.push(format!("{prefix}_{leg}_{joint}"));
            }
        }
    }
    for leg in LEG_NAMES {
        h.push(format!("contact_{leg}"));
    }
    h.extend(["cmd_vx", "cmd_vy", "cmd_wz"].iter().map(|s| s.to_string()));
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub time: f64,
    pub position: [f64; 3],
    /// `(w, x, y, z)`.
    pub orientation: [f64; 4],
    pub linear_velocity: [f64; 3],
    pub angular_velocity: [f64; 3],
    pub joint_angles: [f64; NUM_JOINTS],
    pub joint_velocities: [f64; NUM_JOINTS],
    pub torques: [f64; NUM_JOINTS],
    pub contacts: [bool; NUM_LEGS],
    pub command: [f64; 3],
}

impl TrajectoryRow {
    pub fn capture(
        time: f64,
        s: &RobotState,
        torques: &[f64; NUM_JOINTS],
        contacts: &ContactState,
        command: &[f64; 3],
    ) -> Self {
        let q = s.base_orientation.quaternion();
        Self {
            time,
            position: s.base_position.into(),
            orientation: [q.w, q.i, q.j, q.k],
            linear_velocity: s.base_linear_velocity.into(),
            angular_velocity: s.base_angular_velocity.into(),
            joint_angles: s.joint_angles,
            joint_velocities: s.joint_velocities,
            torques: *torques,
            contacts: contacts.flags(),
            command: *command,
        }
    }

    pub fn orientation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.orientation;
        UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z))
    }

    /// Reconstruct the simulator state this row was captured from.
    pub fn state(&self) -> RobotState {
        RobotState {
            base_position: Vector3::from(self.position),
            base_orientation: self.orientation(),
            base_linear_velocity: Vector3::from(self.linear_velocity),
            base_angular_velocity: Vector3::from(self.angular_velocity),
            joint_angles: self.joint_angles,
            joint_velocities: self.joint_velocities,
            time: self.time,
        }
    }

    fn values(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(NUM_COLUMNS);
        v.push(self.time);
        v.extend_from_slice(&self.position);
        v.extend_from_slice(&self.orientation);
        v.extend_from_slice(&self.linear_velocity);
        v.extend_from_slice(&self.angular_velocity);
        v.extend_from_slice(&self.joint_angles);
        v.extend_from_slice(&self.joint_velocities);
        v.extend_from_slice(&self.torques);
        v.extend(self.contacts.iter().map(|c| if *c { 1.0 } else { 0.0 }));
        v.extend_from_slice(&self.command);
        v
    }

    fn from_values(v: &[f64]) -> Self {
        let arr = |off: usize| -> [f64; NUM_JOINTS] { v[off..off + NUM_JOINTS].try_into().unwrap() };
        Self {
            time: v[0],
            position: [v[1], v[2], v[3]],
            orientation: [v[4], v[5], v[6], v[7]],
            linear_velocity: [v[8], v[9], v[10]],
            angular_velocity: [v[11], v[12], v[13]],
            joint_angles: arr(14),
            joint_velocities: arr(26),
            torques: arr(38),
            contacts: [v[50] != 0.0, v[51] != 0.0, v[52] != 0.0, v[53] != 0.0],
            command: [v[54], v[55], v[56]],
        }
    }
}

/// Floats are written with Rust's shortest round-trip formatting, so a log
/// read back is bit-identical to the rows written.
pub fn write_csv<W: Write>(rows: &[TrajectoryRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header())?;
    for row in rows {
        out.write_record(row.values().iter().map(|v| v.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<TrajectoryRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let expected = header();
    let got = rdr.headers()?.clone();
    if got.len() != NUM_COLUMNS {
        return Err(Error::Dimension {
            what: "trajectory columns",
            expected: NUM_COLUMNS,
            got: got.len(),
        });
    }
    for (e, g) in expected.iter().zip(got.iter()) {
        if e != g {
            return Err(Error::Format(format!("trajectory column `{g}` where `{e}` expected")));
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .zip(expected.iter())
            .map(|(s, name)| {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad value `{s}` in column `{name}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(TrajectoryRow::from_values(&vals));
    }
    Ok(rows)
}

pub fn write_file(path: &std::path::Path, rows: &[TrajectoryRow]) -> Result<()> {
    write_csv(rows, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<TrajectoryRow>> {
    read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
}
