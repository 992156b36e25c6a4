//! Forward lidar headway and relative-velocity reconstruction.
//!
//! Headway is the bumper-to-bumper gap to the nearest vehicle inside the
//! forward cone. Relative velocity is the backward difference of successive
//! headway samples, so `rel_vel + v_ego` recovers the leader's speed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::msgbus::{Bus, BusError, PublisherHandle, Scalar, Schema, Twist};
use crate::vehicle::{Fleet, VehicleId, VehicleState};

#[derive(Debug, Error, PartialEq)]
pub enum PerceptionError {
    #[error("invalid lidar parameter: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarConfig {
    pub range_max: f64,
    /// Cone half-angle about the ego heading (rad).
    pub half_fov: f64,
    /// Body length of the sensing vehicle, for the bumper gap.
    pub ego_length: f64,
    /// Standard deviation of additive Gaussian headway noise; 0 disables it.
    pub noise_std: f64,
    /// Optional first-order low-pass on rel_vel, `y = a*raw + (1-a)*y_prev`.
    pub lowpass_alpha: Option<f64>,
}

impl Default for LidarConfig {
    fn default() -> Self {
        LidarConfig {
            range_max: 80.0,
            half_fov: 0.4,
            ego_length: 4.5,
            noise_std: 0.0,
            lowpass_alpha: None,
        }
    }
}

impl LidarConfig {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        let bad = |m: String| Err(PerceptionError::InvalidConfig(m));
        if !(self.range_max.is_finite() && self.range_max > 0.0) {
            return bad(format!("range_max must be > 0, got {}", self.range_max));
        }
        if !(self.half_fov > 0.0 && self.half_fov <= std::f64::consts::FRAC_PI_2) {
            return bad(format!("half_fov must be in (0, pi/2], got {}", self.half_fov));
        }
        if !(self.ego_length.is_finite() && self.ego_length > 0.0) {
            return bad(format!("ego_length must be > 0, got {}", self.ego_length));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if let Some(a) = self.lowpass_alpha {
            if !(a > 0.0 && a <= 1.0) {
                return bad(format!("lowpass_alpha must be in (0, 1], got {a}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadwayMeasurement {
    pub h: f64,
    pub valid: bool,
    pub target: Option<VehicleId>,
}

impl HeadwayMeasurement {
    pub fn none(cfg: &LidarConfig) -> Self {
        HeadwayMeasurement {
            h: cfg.range_max,
            valid: false,
            target: None,
        }
    }
}

/// A vehicle the sensor may see.
#[derive(Debug, Clone, Copy)]
pub struct Target {
    pub id: VehicleId,
    pub state: VehicleState,
    pub length: f64,
}

pub fn sense_headway(ego: &VehicleState, others: &[Target], cfg: &LidarConfig) -> HeadwayMeasurement {
    let (sin, cos) = ego.yaw.sin_cos();
    let mut best: Option<(f64, VehicleId)> = None;
    for other in others {
        let dx = other.state.x - ego.x;
        let dy = other.state.y - ego.y;
        let ahead = dx * cos + dy * sin;
        if ahead <= 0.0 {
            continue;
        }
        let lateral = dy * cos - dx * sin;
        if lateral.atan2(ahead).abs() > cfg.half_fov {
            continue;
        }
        // Overlapping bodies report contact.
        let gap = (dx.hypot(dy) - other.length / 2.0 - cfg.ego_length / 2.0).max(0.0);
        if gap > cfg.range_max {
            continue;
        }
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, other.id));
        }
    }
    match best {
        Some((h, id)) => HeadwayMeasurement {
            h,
            valid: true,
            target: Some(id),
        },
        None => HeadwayMeasurement::none(cfg),
    }
}

/// Memory for the backward-difference estimator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Differentiator {
    pub h_prev: Option<f64>,
    pub valid_prev: bool,
    filtered: f64,
}

impl Differentiator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns dh/dt for this sample. Zero on invalid samples and on the
    /// first sample after (re)acquisition.
    pub fn update(&mut self, meas: &HeadwayMeasurement, dt: f64, lowpass_alpha: Option<f64>) -> f64 {
        if !meas.valid {
            *self = Differentiator::default();
            return 0.0;
        }
        let raw = match self.h_prev {
            Some(prev) => (meas.h - prev) / dt,
            None => 0.0,
        };
        self.h_prev = Some(meas.h);
        self.valid_prev = true;
        self.filtered = match lowpass_alpha {
            Some(a) => a * raw + (1.0 - a) * self.filtered,
            None => raw,
        };
        self.filtered
    }
}

pub fn update_rel_vel(state: Differentiator, meas: &HeadwayMeasurement, dt: f64) -> (f64, Differentiator) {
    let mut next = state;
    let rel_vel = next.update(meas, dt, None);
    (rel_vel, next)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Lidar node for one vehicle: publishes `/<robot>/lead_dist` and
/// `/<robot>/rel_vel` every tick.
pub struct PerceptionNode {
    robot: String,
    ego: VehicleId,
    cfg: LidarConfig,
    diff: Differentiator,
    noise: Option<(Normal<f64>, ChaCha8Rng)>,
    lead_pub: PublisherHandle,
    rel_pub: PublisherHandle,
    last: HeadwayMeasurement,
}

impl PerceptionNode {
    pub fn new(bus: &mut Bus, robot: &str, ego: VehicleId, cfg: LidarConfig, seed: u64) -> Result<Self, BusError> {
        let lead_pub = bus.advertise(&format!("/{robot}/lead_dist"), Schema::Scalar)?;
        let rel_pub = bus.advertise(&format!("/{robot}/rel_vel"), Schema::Twist)?;
        // Per-robot stream so declaration order does not change the draws.
        let noise = (cfg.noise_std > 0.0).then(|| {
            (
                Normal::new(0.0, cfg.noise_std).expect("validated std"),
                ChaCha8Rng::seed_from_u64(seed ^ fnv1a(robot)),
            )
        });
        Ok(PerceptionNode {
            robot: robot.to_owned(),
            ego,
            cfg,
            diff: Differentiator::new(),
            noise,
            lead_pub,
            rel_pub,
            last: HeadwayMeasurement::none(&cfg),
        })
    }

    pub fn robot(&self) -> &str {
        &self.robot
    }

    pub fn config(&self) -> &LidarConfig {
        &self.cfg
    }

    pub fn last_measurement(&self) -> HeadwayMeasurement {
        self.last
    }

    pub fn step(&mut self, bus: &mut Bus, fleet: &Fleet, dt: f64, t: f64) -> Result<(), BusError> {
        let ego = fleet.get(self.ego).state();
        let others: Vec<Target> = fleet
            .iter()
            .filter(|(id, _)| *id != self.ego)
            .map(|(id, v)| Target {
                id,
                state: v.state(),
                length: v.dynamics.length,
            })
            .collect();
        let mut meas = sense_headway(&ego, &others, &self.cfg);
        if meas.valid {
            if let Some((dist, rng)) = self.noise.as_mut() {
                meas.h = (meas.h + dist.sample(rng)).clamp(0.0, self.cfg.range_max);
            }
        }
        let rel_vel = self.diff.update(&meas, dt, self.cfg.lowpass_alpha);
        self.last = meas;
        publish_perception(bus, self.lead_pub, self.rel_pub, &meas, rel_vel, t)
    }
}

pub fn publish_perception(
    bus: &mut Bus,
    lead_pub: PublisherHandle,
    rel_pub: PublisherHandle,
    meas: &HeadwayMeasurement,
    rel_vel: f64,
    t: f64,
) -> Result<(), BusError> {
    bus.publish(lead_pub, Scalar { data: meas.h }, t)?;
    bus.publish(
        rel_pub,
        Twist {
            linear_z: rel_vel,
            ..Default::default()
        },
        t,
    )
}
