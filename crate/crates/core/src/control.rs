//! Threshold velocity follower and the acceleration-integrator adapter.

use thiserror::Error;

use crate::msgbus::{Bus, BusError, PublisherHandle, Schema, SubscriberHandle, Twist};

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("non-finite controller input")]
    NonFiniteInput,
    #[error("invalid controller parameter: {0}")]
    InvalidParams(String),
}

/// Reference speed used when neither the scenario nor the parameter store
/// provides one.
pub const DEFAULT_REFERENCE_SPEED: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerParams {
    /// Desired ego speed (m/s).
    pub r: f64,
    /// Switching headway (m).
    pub gap_ref: f64,
    pub gain: f64,
    /// Half-width of the band around `gap_ref` treated as "at the gap".
    pub deadband: f64,
    pub v_max: f64,
}

impl Default for ControllerParams {
    fn default() -> Self {
        ControllerParams {
            r: DEFAULT_REFERENCE_SPEED,
            gap_ref: 30.0,
            gain: 0.5,
            deadband: 0.1,
            v_max: 40.0,
        }
    }
}

impl ControllerParams {
    pub fn validate(&self) -> Result<(), ControlError> {
        let check = |ok: bool, what: &str, v: f64| {
            if ok && v.is_finite() {
                Ok(())
            } else {
                Err(ControlError::InvalidParams(format!("{what} out of range: {v}")))
            }
        };
        check(self.r >= 0.0, "r", self.r)?;
        check(self.gap_ref > 0.0, "gap_ref", self.gap_ref)?;
        check(self.gain >= 0.0, "gain", self.gain)?;
        check(self.deadband >= 0.0, "deadband", self.deadband)?;
        check(self.v_max > 0.0, "v_max", self.v_max)
    }
}

/// The follower law. The leader speed is reconstructed as `rel_vel + v_ego`;
/// above the gap band the ego is pushed faster, below it slower, inside it
/// the reference is commanded unchanged. Output is clamped to `[0, v_max]`.
pub fn compute_command(h: f64, rel_vel: f64, v_ego: f64, p: &ControllerParams) -> Result<f64, ControlError> {
    if !(h.is_finite() && rel_vel.is_finite() && v_ego.is_finite()) {
        return Err(ControlError::NonFiniteInput);
    }
    let v_lead = rel_vel + v_ego;
    let raw = if h > p.gap_ref + p.deadband {
        p.r + p.gain * v_lead
    } else if h < p.gap_ref - p.deadband {
        p.r - p.gain * v_lead
    } else {
        p.r
    };
    Ok(raw.clamp(0.0, p.v_max))
}

/// Euler integrator turning an acceleration command into a speed command.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccelIntegrator {
    pub v_state: f64,
    pub v_max: f64,
}

impl AccelIntegrator {
    pub fn new(v0: f64, v_max: f64) -> Self {
        AccelIntegrator { v_state: v0, v_max }
    }

    pub fn step(&mut self, a_cmd: f64, dt: f64) -> Result<f64, ControlError> {
        self.v_state = integrate_acceleration(a_cmd, self.v_state, dt, self.v_max)?;
        Ok(self.v_state)
    }
}

pub fn integrate_acceleration(a_cmd: f64, v_state: f64, dt: f64, v_max: f64) -> Result<f64, ControlError> {
    if !(a_cmd.is_finite() && v_state.is_finite() && dt.is_finite()) {
        return Err(ControlError::NonFiniteInput);
    }
    Ok((v_state + a_cmd * dt).clamp(0.0, v_max))
}

/// Latest-value caches of the controller inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerInputs {
    pub h: f64,
    pub rel_vel: f64,
    pub v_ego: f64,
}

pub struct ControllerNode {
    robot: String,
    params: ControllerParams,
    inputs: ControllerInputs,
    lead_sub: SubscriberHandle,
    rel_sub: SubscriberHandle,
    vel_sub: SubscriberHandle,
    cmd_pub: PublisherHandle,
}

impl ControllerNode {
    /// Reads `/<robot>/r` from the parameter store, falling back to
    /// `params.r`. `range_max` is the headway assumed before the first
    /// lidar sample arrives.
    pub fn new(bus: &mut Bus, robot: &str, mut params: ControllerParams, range_max: f64) -> Result<Self, BusError> {
        if let Some(r) = bus.get_param(&format!("/{robot}/r")).and_then(|p| p.as_f64()) {
            params.r = r;
        }
        let id = format!("{robot}/controller");
        Ok(ControllerNode {
            robot: robot.to_owned(),
            params,
            inputs: ControllerInputs {
                h: range_max,
                rel_vel: 0.0,
                v_ego: 0.0,
            },
            lead_sub: bus.subscribe(&format!("/{robot}/lead_dist"), &id)?,
            rel_sub: bus.subscribe(&format!("/{robot}/rel_vel"), &id)?,
            vel_sub: bus.subscribe(&format!("/{robot}/vel"), &id)?,
            cmd_pub: bus.advertise(&format!("/{robot}/cmd_vel"), Schema::Twist)?,
        })
    }

    pub fn robot(&self) -> &str {
        &self.robot
    }

    pub fn params(&self) -> &ControllerParams {
        &self.params
    }

    pub fn inputs(&self) -> ControllerInputs {
        self.inputs
    }

    /// Publishes exactly one command.
    pub fn step(&mut self, bus: &mut Bus, t: f64) -> Result<f64, BusError> {
        if let Some(s) = bus.take_latest(self.lead_sub).and_then(|s| s.msg.as_scalar().copied()) {
            self.inputs.h = s.data;
        }
        if let Some(tw) = bus.take_latest(self.rel_sub).and_then(|s| s.msg.as_twist().copied()) {
            self.inputs.rel_vel = tw.linear_z;
        }
        if let Some(tw) = bus.take_latest(self.vel_sub).and_then(|s| s.msg.as_twist().copied()) {
            self.inputs.v_ego = tw.linear_x;
        }
        let ControllerInputs { h, rel_vel, v_ego } = self.inputs;
        // Bus messages are finite, so this only fails on a corrupted cache.
        let v_cmd = compute_command(h.max(0.0), rel_vel, v_ego, &self.params).unwrap_or(0.0);
        bus.publish(self.cmd_pub, Twist::speed(v_cmd), t)?;
        Ok(v_cmd)
    }
}
