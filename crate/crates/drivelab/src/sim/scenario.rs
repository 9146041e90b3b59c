//! Scripted infraction scenarios.
//!
//! A scenario pins the map seed, agent placements, light phases and the ego
//! control sequence, plus the expected infraction events. The corpus under
//! `scenarios/` is the ground truth the detector is checked against.

use super::weather::WeatherParams;
use super::{create_world, Control, InfractionEvent, InfractionKind, SimError, WorldState};
use crate::geom::Vec2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EgoPlacement {
    pub lane: usize,
    pub s: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VehiclePlacement {
    pub lane: usize,
    pub s: f64,
    pub speed: f64,
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PedPlacement {
    pub from: [f64; 2],
    pub to: [f64; 2],
}

/// Run-length encoded control segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlSpan {
    pub steps: usize,
    pub brake: f64,
    pub gas: f64,
    pub steer: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpectedEvent {
    pub kind: InfractionKind,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub map_seed: u64,
    pub rng_seed: u64,
    /// All lights share this phase offset.
    pub light_offset: f64,
    pub ego: EgoPlacement,
    #[serde(default)]
    pub vehicles: Vec<VehiclePlacement>,
    #[serde(default)]
    pub pedestrians: Vec<PedPlacement>,
    pub controls: Vec<ControlSpan>,
    pub dt: f64,
    /// Optional overtime check: goal point and deadline.
    #[serde(default)]
    pub goal: Option<[f64; 2]>,
    #[serde(default)]
    pub timeout_secs: Option<f64>,
    pub expected: Vec<ExpectedEvent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub name: String,
    pub events: Vec<InfractionEvent>,
    pub counts: BTreeMap<InfractionKind, usize>,
    pub passed: bool,
}

impl Scenario {
    pub fn load(path: &Path) -> std::io::Result<Scenario> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())
    }

    pub fn build_world(&self) -> Result<WorldState, SimError> {
        let mut world = create_world(self.map_seed, WeatherParams::identity(), 0, 0, self.rng_seed)?;
        world.set_light_offsets(self.light_offset);
        let lane = &world.map.lanes[self.ego.lane];
        let pos = lane.poly.eval(self.ego.s);
        let heading = lane.heading;
        world.set_ego_pose(pos, heading, self.ego.speed);
        for v in &self.vehicles {
            world.spawn_vehicle(v.lane, v.s, v.speed, v.frozen);
        }
        for p in &self.pedestrians {
            world.spawn_pedestrian_at(Vec2::new(p.from[0], p.from[1]), Vec2::new(p.to[0], p.to[1]));
        }
        Ok(world)
    }

    /// Execute the control script and compare detector output against the
    /// expected event counts.
    pub fn run(&self) -> Result<ScenarioOutcome, SimError> {
        let mut world = self.build_world()?;
        let mut events: Vec<InfractionEvent> = Vec::new();
        let mut reached = false;
        'outer: for span in &self.controls {
            let ctl = Control::new(span.brake, span.gas, span.steer);
            for _ in 0..span.steps {
                events.extend(world.step(ctl, self.dt)?);
                if let Some(goal) = self.goal {
                    if world.ego().position.dist(Vec2::new(goal[0], goal[1])) < 2.0 {
                        reached = true;
                        break 'outer;
                    }
                }
                if let Some(t) = self.timeout_secs {
                    if world.clock >= t {
                        break 'outer;
                    }
                }
            }
        }
        if let (Some(_), Some(t)) = (self.goal, self.timeout_secs) {
            if !reached && world.clock >= t {
                events.push(InfractionEvent {
                    kind: InfractionKind::Overtime,
                    time: world.clock,
                    position: world.ego().position,
                });
            }
        }

        let mut counts: BTreeMap<InfractionKind, usize> = BTreeMap::new();
        for e in &events {
            *counts.entry(e.kind).or_insert(0) += 1;
        }
        let mut want: BTreeMap<InfractionKind, usize> = BTreeMap::new();
        for e in &self.expected {
            *want.entry(e.kind).or_insert(0) += e.count;
        }
        want.retain(|_, c| *c > 0);
        let passed = counts == want;
        Ok(ScenarioOutcome { name: self.name.clone(), events, counts, passed })
    }
}

impl InfractionKind {
    fn order(self) -> u8 {
        match self {
            InfractionKind::CollisionVehicle => 0,
            InfractionKind::CollisionPedestrian => 1,
            InfractionKind::CollisionStatic => 2,
            InfractionKind::RedLight => 3,
            InfractionKind::OppositeLane => 4,
            InfractionKind::Sidewalk => 5,
            InfractionKind::Overtime => 6,
        }
    }
}

impl Ord for InfractionKind {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.order().cmp(&other.order())
    }
}

impl PartialOrd for InfractionKind {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Run every `*.json` scenario in a directory, sorted by file name.
pub fn run_corpus(dir: &Path) -> anyhow::Result<Vec<ScenarioOutcome>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let sc = Scenario::load(&p)?;
        out.push(sc.run()?);
    }
    Ok(out)
}
