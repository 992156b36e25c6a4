//! Vehicle plant: first-order speed lag plus planar bicycle kinematics.

use std::f64::consts::{PI, TAU};

use thiserror::Error;

use crate::msgbus::{Bus, BusError, PublisherHandle, Schema, SubscriberHandle, Twist};

#[derive(Debug, Error, PartialEq)]
pub enum VehicleError {
    #[error("a vehicle named {0:?} is already spawned")]
    DuplicateName(String),
    #[error("non-finite command rejected for {0}")]
    NonFiniteCommand(String),
    #[error("invalid vehicle parameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Bus(#[from] BusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VehicleId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleConfig {
    pub name: String,
    pub x0: f64,
    pub y0: f64,
    pub yaw0: f64,
    pub laser_sensor: bool,
    /// Rate (Hz) at which speed is published on `/<name>/vel`.
    pub update_rate: f64,
    /// Initial longitudinal speed. Spawned vehicles normally start at rest.
    pub v0: f64,
}

impl VehicleConfig {
    pub fn at(name: &str, x0: f64) -> Self {
        VehicleConfig {
            name: name.to_owned(),
            x0,
            y0: 0.0,
            yaw0: 0.0,
            laser_sensor: false,
            update_rate: 20.0,
            v0: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsParams {
    /// Speed-lag time constant (s).
    pub tau: f64,
    pub length: f64,
    pub wheelbase: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        DynamicsParams {
            tau: 0.5,
            length: 4.5,
            wheelbase: 2.6,
        }
    }
}

impl DynamicsParams {
    pub fn validate(&self) -> Result<(), VehicleError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.tau) {
            return Err(VehicleError::InvalidParams(format!("tau must be > 0, got {}", self.tau)));
        }
        if !ok(self.length) {
            return Err(VehicleError::InvalidParams(format!("length must be > 0, got {}", self.length)));
        }
        if !ok(self.wheelbase) || self.wheelbase > self.length {
            return Err(VehicleError::InvalidParams(format!(
                "wheelbase must be in (0, length], got {}",
                self.wheelbase
            )));
        }
        Ok(())
    }
}

/// Command held between messages (zero-order hold).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeldCommand {
    pub speed: f64,
    pub steering: f64,
}

pub fn normalize_yaw(yaw: f64) -> f64 {
    if yaw > -PI && yaw <= PI {
        return yaw;
    }
    let a = yaw.rem_euclid(TAU);
    if a > PI {
        a - TAU
    } else {
        a
    }
}

/// One fixed step. The speed lag is advanced with its exact solution under a
/// held command, `v_cmd + (v - v_cmd) * exp(-dt / tau)`; the pose is then
/// advanced by explicit Euler using the updated speed.
pub fn step_dynamics(state: VehicleState, cmd: HeldCommand, dynamics: &DynamicsParams, dt: f64) -> VehicleState {
    let decay = (-dt / dynamics.tau).exp();
    let v = (cmd.speed + (state.v - cmd.speed) * decay).max(0.0);
    let yaw = normalize_yaw(state.yaw + (v / dynamics.wheelbase) * cmd.steering.tan() * dt);
    VehicleState {
        x: state.x + v * yaw.cos() * dt,
        y: state.y + v * yaw.sin() * dt,
        yaw,
        v,
    }
}

/// Ticks between speed publications: round(1 / (rate * dt)), at least one.
pub fn publish_cadence(update_rate: f64, dt: f64) -> u64 {
    ((1.0 / (update_rate * dt)).round() as u64).max(1)
}

#[derive(Debug)]
pub struct Vehicle {
    pub config: VehicleConfig,
    pub dynamics: DynamicsParams,
    state: VehicleState,
    command: HeldCommand,
    vel_pub: PublisherHandle,
    cmd_sub: SubscriberHandle,
}

impl Vehicle {
    pub fn state(&self) -> VehicleState {
        self.state
    }

    pub fn command(&self) -> HeldCommand {
        self.command
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn apply_command(&mut self, cmd: &Twist) -> Result<(), VehicleError> {
        if !cmd.linear_x.is_finite() || !cmd.angular_z.is_finite() {
            return Err(VehicleError::NonFiniteCommand(self.config.name.clone()));
        }
        self.command = HeldCommand {
            speed: cmd.linear_x.max(0.0),
            steering: cmd.angular_z,
        };
        Ok(())
    }

    pub fn step_dynamics(&mut self, dt: f64) -> VehicleState {
        self.state = step_dynamics(self.state, self.command, &self.dynamics, dt);
        self.state
    }

    pub fn publish_state(&self, bus: &mut Bus, t: f64) -> Result<(), BusError> {
        bus.publish(self.vel_pub, Twist::speed(self.state.v), t)
    }

    /// Plant node tick: consume delivered commands, integrate, publish speed
    /// on the configured cadence.
    pub fn node_step(&mut self, bus: &mut Bus, tick: u64, dt: f64, t: f64) -> Result<(), BusError> {
        for stamped in bus.take(self.cmd_sub) {
            if let Some(cmd) = stamped.msg.as_twist() {
                if let Err(e) = self.apply_command(cmd) {
                    log::warn!("{e}; keeping previous command");
                }
            }
        }
        self.step_dynamics(dt);
        if tick.is_multiple_of(publish_cadence(self.config.update_rate, dt)) {
            self.publish_state(bus, t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct Fleet {
    vehicles: Vec<Vehicle>,
}

impl Fleet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Spawn at the configured pose with speed `v0`, holding `v0` as the
    /// command until the first message arrives. Advertises
    /// `/<name>/vel` and subscribes to `/<name>/cmd_vel`.
    pub fn spawn(&mut self, bus: &mut Bus, config: VehicleConfig, dynamics: DynamicsParams) -> Result<VehicleId, VehicleError> {
        if self.vehicles.iter().any(|v| v.config.name == config.name) {
            return Err(VehicleError::DuplicateName(config.name));
        }
        dynamics.validate()?;
        if !(config.update_rate.is_finite() && config.update_rate > 0.0) {
            return Err(VehicleError::InvalidParams(format!(
                "update_rate must be > 0, got {}",
                config.update_rate
            )));
        }
        let vel_pub = bus.advertise(&format!("/{}/vel", config.name), Schema::Twist)?;
        let cmd_sub = bus.subscribe(&format!("/{}/cmd_vel", config.name), &format!("{}/plant", config.name))?;
        let state = VehicleState {
            x: config.x0,
            y: config.y0,
            yaw: normalize_yaw(config.yaw0),
            v: config.v0.max(0.0),
        };
        self.vehicles.push(Vehicle {
            config,
            dynamics,
            state,
            command: HeldCommand {
                speed: state.v,
                steering: 0.0,
            },
            vel_pub,
            cmd_sub,
        });
        Ok(VehicleId(self.vehicles.len() - 1))
    }

    pub fn get(&self, id: VehicleId) -> &Vehicle {
        &self.vehicles[id.0]
    }

    pub fn get_mut(&mut self, id: VehicleId) -> &mut Vehicle {
        &mut self.vehicles[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<VehicleId> {
        self.vehicles.iter().position(|v| v.config.name == name).map(VehicleId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (VehicleId, &Vehicle)> {
        self.vehicles.iter().enumerate().map(|(i, v)| (VehicleId(i), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Vehicle> {
        self.vehicles.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.vehicles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }
}
