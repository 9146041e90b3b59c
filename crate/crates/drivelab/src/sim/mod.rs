//! Deterministic 2D driving world.
//!
//! A [`WorldState`] owns everything needed to advance the simulation:
//! the immutable town map, weather, agents (ego first), traffic lights,
//! NPC navigation state, the infraction detector and a seeded RNG.
//! Advancing two equal states with equal controls yields bit-identical
//! successors.

pub mod map;
pub mod render;
pub mod scenario;
pub mod weather;
mod world;

pub use map::{TownMap, TownParams, Waypoint};
pub use weather::WeatherParams;
pub use world::{
    create_world, create_world_on_map, IntentParams, PhysicsParams, StopIntentions, WorldState,
};

use crate::geom::{OrientedRect, Vec2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Low-level driving control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub brake: f64,
    pub gas: f64,
    pub steer: f64,
}

impl Control {
    pub fn new(brake: f64, gas: f64, steer: f64) -> Self {
        Control { brake, gas, steer }
    }

    pub const COAST: Control = Control { brake: 0.0, gas: 0.0, steer: 0.0 };

    pub fn is_finite(&self) -> bool {
        self.brake.is_finite() && self.gas.is_finite() && self.steer.is_finite()
    }

    pub fn clamped(&self) -> Control {
        Control {
            brake: self.brake.clamp(0.0, 1.0),
            gas: self.gas.clamp(0.0, 1.0),
            steer: self.steer.clamp(-1.0, 1.0),
        }
    }
}

/// High-level turning command. The discriminant order is a serialization
/// contract shared with the command-branch heads of every policy network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Command {
    Follow = 0,
    Left = 1,
    Right = 2,
    Straight = 3,
}

impl Command {
    pub const ALL: [Command; 4] = [Command::Follow, Command::Left, Command::Right, Command::Straight];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Command> {
        Command::ALL.get(i).copied()
    }
}

impl std::fmt::Display for Command {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Command::Follow => "follow",
            Command::Left => "left",
            Command::Right => "right",
            Command::Straight => "straight",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentKind {
    Ego,
    Vehicle,
    Pedestrian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub kind: AgentKind,
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub half_len: f64,
    pub half_wid: f64,
}

impl AgentState {
    pub fn footprint(&self) -> OrientedRect {
        OrientedRect::new(self.position, self.heading, self.half_len, self.half_wid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfractionKind {
    CollisionVehicle,
    CollisionPedestrian,
    CollisionStatic,
    RedLight,
    OppositeLane,
    Sidewalk,
    Overtime,
}

impl InfractionKind {
    pub fn is_collision(self) -> bool {
        matches!(
            self,
            InfractionKind::CollisionVehicle
                | InfractionKind::CollisionPedestrian
                | InfractionKind::CollisionStatic
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfractionEvent {
    pub kind: InfractionKind,
    pub time: f64,
    pub position: Vec2,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("map capacity exceeded for {kind}: requested {requested}, available {available}")]
    Capacity { kind: &'static str, requested: usize, available: usize },
    #[error("non-finite control values rejected")]
    InvalidControl,
    #[error("ego off route: lateral deviation {lateral:.2} m exceeds tolerance {tolerance:.2} m")]
    OffRoute { lateral: f64, tolerance: f64 },
    #[error("route planning failed: {0}")]
    Planning(String),
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
}
