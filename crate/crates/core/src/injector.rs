//! Open-loop velocity playback from a time/speed CSV, gated on `/execute`.

use std::path::PathBuf;

use thiserror::Error;

use crate::msgbus::{Bus, BusError, PublisherHandle, Schema, Twist};

/// Parameter that opens the playback gate.
pub const EXECUTE_PARAM: &str = "/execute";

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("trajectory file is empty")]
    EmptyFile,
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("time is not strictly increasing at row {row}")]
    NonMonotonicTime { row: usize },
    #[error("row {row}, column {column:?}: cannot parse {value:?} as a number")]
    UnparseableNumber { row: usize, column: String, value: String },
    #[error("malformed CSV at row {row}: {message}")]
    Malformed { row: usize, message: String },
}

/// Speed profile with times rebased to start at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    speeds: Vec<f64>,
    pub time_col: String,
    pub vel_col: String,
}

impl Trajectory {
    /// Build from in-memory samples. Times must be strictly increasing.
    pub fn from_samples(samples: &[(f64, f64)]) -> Result<Self, TrajectoryError> {
        let mut traj = Trajectory {
            times: Vec::with_capacity(samples.len()),
            speeds: Vec::with_capacity(samples.len()),
            time_col: "Time".into(),
            vel_col: "speed".into(),
        };
        for (i, &(t, v)) in samples.iter().enumerate() {
            traj.push(i + 1, t, v)?;
        }
        traj.finish()
    }

    fn push(&mut self, row: usize, t: f64, v: f64) -> Result<(), TrajectoryError> {
        if !t.is_finite() {
            return Err(TrajectoryError::UnparseableNumber {
                row,
                column: self.time_col.clone(),
                value: t.to_string(),
            });
        }
        if !v.is_finite() {
            return Err(TrajectoryError::UnparseableNumber {
                row,
                column: self.vel_col.clone(),
                value: v.to_string(),
            });
        }
        if self.times.last().is_some_and(|&prev| t <= prev) {
            return Err(TrajectoryError::NonMonotonicTime { row });
        }
        if v < 0.0 {
            log::warn!("row {row}: negative speed {v} clamped to 0");
        }
        self.times.push(t);
        self.speeds.push(v.max(0.0));
        Ok(())
    }

    fn finish(mut self) -> Result<Self, TrajectoryError> {
        let Some(&t0) = self.times.first() else {
            return Err(TrajectoryError::EmptyFile);
        };
        for t in &mut self.times {
            *t -= t0;
        }
        Ok(self)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn speeds(&self) -> &[f64] {
        &self.speeds
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }
}

/// Parse a headed CSV, picking the named time and speed columns. Extra
/// columns are ignored. Row numbers in errors count data rows from 1.
pub fn load_trajectory(csv_text: &str, time_col: &str, vel_col: &str) -> Result<Trajectory, TrajectoryError> {
    if csv_text.trim().is_empty() {
        return Err(TrajectoryError::EmptyFile);
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(csv_text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| TrajectoryError::Malformed { row: 0, message: e.to_string() })?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| TrajectoryError::MissingColumn(name.to_owned()))
    };
    let ti = find(time_col)?;
    let vi = find(vel_col)?;

    let mut traj = Trajectory {
        times: Vec::new(),
        speeds: Vec::new(),
        time_col: time_col.to_owned(),
        vel_col: vel_col.to_owned(),
    };
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| TrajectoryError::Malformed { row, message: e.to_string() })?;
        let field = |idx: usize, column: &str| -> Result<f64, TrajectoryError> {
            let raw = record.get(idx).unwrap_or("");
            raw.parse::<f64>().map_err(|_| TrajectoryError::UnparseableNumber {
                row,
                column: column.to_owned(),
                value: raw.to_owned(),
            })
        };
        let t = field(ti, time_col)?;
        let v = field(vi, vel_col)?;
        traj.push(row, t, v)?;
    }
    traj.finish()
}

/// Linear interpolation, holding the first and last samples outside the range.
pub fn sample_velocity(traj: &Trajectory, t_rel: f64) -> f64 {
    let times = traj.times();
    let speeds = traj.speeds();
    let last = times.len() - 1;
    if t_rel <= times[0] {
        return speeds[0];
    }
    if t_rel >= times[last] {
        return speeds[last];
    }
    // First index with time > t_rel; 1..=last here.
    let hi = times.partition_point(|&t| t <= t_rel);
    let lo = hi - 1;
    if times[lo] == t_rel {
        return speeds[lo];
    }
    let frac = (t_rel - times[lo]) / (times[hi] - times[lo]);
    speeds[lo] + frac * (speeds[hi] - speeds[lo])
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectorParams {
    pub csvfile: Option<PathBuf>,
    pub time_col: String,
    pub vel_col: String,
    pub robot: String,
    pub str_angle: f64,
}

pub struct InjectorNode {
    params: InjectorParams,
    traj: Trajectory,
    gate_time: Option<f64>,
    cmd_pub: PublisherHandle,
}

impl InjectorNode {
    pub fn new(bus: &mut Bus, params: InjectorParams, traj: Trajectory) -> Result<Self, BusError> {
        let cmd_pub = bus.advertise(&format!("/{}/cmd_vel", params.robot), Schema::Twist)?;
        Ok(InjectorNode {
            params,
            traj,
            gate_time: None,
            cmd_pub,
        })
    }

    pub fn robot(&self) -> &str {
        &self.params.robot
    }

    pub fn gate_time(&self) -> Option<f64> {
        self.gate_time
    }

    /// Publishes zero speed until `/execute` is true, then the trajectory
    /// relative to the tick the gate was first seen open.
    pub fn step(&mut self, bus: &mut Bus, t: f64) -> Result<f64, BusError> {
        let open = bus.get_param(EXECUTE_PARAM).and_then(|p| p.as_bool()) == Some(true);
        let speed = if open {
            let gate = *self.gate_time.get_or_insert(t);
            sample_velocity(&self.traj, (t - gate).max(0.0))
        } else {
            0.0
        };
        bus.publish(
            self.cmd_pub,
            Twist {
                linear_x: speed,
                angular_z: self.params.str_angle,
                ..Default::default()
            },
            t,
        )?;
        Ok(speed)
    }
}
