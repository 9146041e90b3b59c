//! World construction, dynamics and infraction detection.

use super::map::{ConnId, LaneId, TownMap, TownParams};
use super::weather::WeatherParams;
use super::{AgentKind, AgentState, Command, Control, InfractionEvent, InfractionKind, SimError};
use crate::geom::{OrientedRect, Vec2};
use crate::route::Route;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::sync::Arc;

/// Ego and NPC dynamics constants plus infraction thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams {
    pub accel_max: f64,
    pub brake_max: f64,
    pub drag: f64,
    pub speed_max: f64,
    /// Maximum path curvature at full steer, 1/m.
    pub curvature_max: f64,
    pub ego_half_len: f64,
    pub ego_half_wid: f64,
    pub npc_cruise: f64,
    /// Deceleration used for NPC allowed-speed curves.
    pub npc_curve_decel: f64,
    pub npc_stop_offset: f64,
    pub npc_gap: f64,
    pub npc_scan: f64,
    pub ped_speed: f64,
    /// Probability per second of starting a crossing while near an anchor.
    pub ped_cross_prob: f64,
    pub ped_half: f64,
    /// Footprint area fraction and dwell time for lane-side infractions.
    pub area_fraction: f64,
    pub dwell_secs: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        PhysicsParams {
            accel_max: 3.0,
            brake_max: 6.0,
            drag: 0.30,
            speed_max: 10.0,
            curvature_max: 0.22,
            ego_half_len: 1.8,
            ego_half_wid: 0.8,
            npc_cruise: 5.0,
            npc_curve_decel: 2.5,
            npc_stop_offset: 1.0,
            npc_gap: 2.5,
            npc_scan: 12.0,
            ped_speed: 1.2,
            ped_cross_prob: 0.02,
            ped_half: 0.4,
            area_fraction: 0.5,
            dwell_secs: 0.5,
        }
    }
}

/// Stop-intention formula constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentParams {
    /// Saturation distance: intention hits 0 at this hazard distance.
    pub d_max: f64,
    /// Corridor sampling step along the route, meters.
    pub sample_step: f64,
}

impl Default for IntentParams {
    fn default() -> Self {
        IntentParams { d_max: 15.0, sample_step: 0.25 }
    }
}

/// Braking-urgency triple: vehicles, pedestrians, red lights; each in [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopIntentions {
    pub vehicle: f64,
    pub pedestrian: f64,
    pub red_light: f64,
}

impl StopIntentions {
    pub const ZERO: StopIntentions = StopIntentions { vehicle: 0.0, pedestrian: 0.0, red_light: 0.0 };

    pub fn max(&self) -> f64 {
        self.vehicle.max(self.pedestrian).max(self.red_light)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.vehicle, self.pedestrian, self.red_light]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LightPhase {
    Red,
    Green,
}

/// One traffic light controller per lit intersection; phase is a pure
/// function of the clock and the staggered offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficLight {
    pub intersection: usize,
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
enum NavSeg {
    Lane(LaneId),
    Conn(ConnId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum NpcNav {
    Ego,
    Vehicle { seg: NavSeg, s: f64, variant: usize, frozen: bool },
    Ped(PedWalk),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PedWalk {
    loop_id: usize,
    s: f64,
    dir: f64,
    crossing: Option<CrossState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CrossState {
    from: Vec2,
    to: Vec2,
    progress: f64,
    target_loop: usize,
    target_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
struct DetectorState {
    collision_active: HashSet<usize>,
    static_active: HashSet<usize>,
    red_crossed: HashSet<(usize, usize)>,
    opposite_secs: f64,
    opposite_fired: bool,
    sidewalk_secs: f64,
    sidewalk_fired: bool,
    prev_ego_pos: Vec2,
    pub crossings_green: u32,
    pub crossings_red: u32,
}

#[derive(Debug, Clone)]
pub struct WorldState {
    pub map: Arc<TownMap>,
    pub weather: WeatherParams,
    /// Agents, ego first.
    pub agents: Vec<AgentState>,
    pub lights: Vec<TrafficLight>,
    pub clock: f64,
    pub physics: PhysicsParams,
    pub intent: IntentParams,
    rng: ChaCha8Rng,
    nav: Vec<NpcNav>,
    detect: DetectorState,
}

impl PartialEq for WorldState {
    fn eq(&self, other: &Self) -> bool {
        *self.map == *other.map
            && self.weather == other.weather
            && self.agents == other.agents
            && self.lights == other.lights
            && self.clock == other.clock
            && self.physics == other.physics
            && self.intent == other.intent
            && self.rng == other.rng
            && self.nav == other.nav
            && self.detect == other.detect
    }
}

/// Build a world on a freshly generated map. See [`create_world_on_map`]
/// for the variant that shares a cached map.
pub fn create_world(
    map_seed: u64,
    weather: WeatherParams,
    n_vehicles: usize,
    n_pedestrians: usize,
    rng_seed: u64,
) -> Result<WorldState, SimError> {
    let map = Arc::new(TownMap::generate(map_seed, TownParams::default()));
    create_world_on_map(map, weather, n_vehicles, n_pedestrians, rng_seed)
}

pub fn create_world_on_map(
    map: Arc<TownMap>,
    weather: WeatherParams,
    n_vehicles: usize,
    n_pedestrians: usize,
    rng_seed: u64,
) -> Result<WorldState, SimError> {
    let physics = PhysicsParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    // Vehicle spawn slots: along-lane positions clear of the lane ends.
    let mut slots: Vec<(LaneId, f64)> = Vec::new();
    for lane in &map.lanes {
        let len = lane.poly.length();
        let mut s = 12.0;
        while s < len - 12.0 {
            slots.push((lane.id, s));
            s += 14.0;
        }
    }
    slots.shuffle(&mut rng);
    if n_vehicles + 1 > slots.len() {
        return Err(SimError::Capacity {
            kind: "vehicles",
            requested: n_vehicles,
            available: slots.len().saturating_sub(1),
        });
    }

    let mut agents = Vec::with_capacity(1 + n_vehicles + n_pedestrians);
    let mut nav = Vec::with_capacity(agents.capacity());

    let (ego_lane, ego_s) = slots[0];
    let lane = &map.lanes[ego_lane];
    agents.push(AgentState {
        kind: AgentKind::Ego,
        position: lane.poly.eval(ego_s),
        heading: lane.heading,
        speed: 0.0,
        half_len: physics.ego_half_len,
        half_wid: physics.ego_half_wid,
    });
    nav.push(NpcNav::Ego);

    for k in 0..n_vehicles {
        let (lane_id, s) = slots[k + 1];
        let lane = &map.lanes[lane_id];
        let variant = rng.gen_range(0..map.palette.vehicle_variants.len());
        agents.push(AgentState {
            kind: AgentKind::Vehicle,
            position: lane.poly.eval(s),
            heading: lane.heading,
            speed: 0.0,
            half_len: physics.ego_half_len,
            half_wid: physics.ego_half_wid,
        });
        nav.push(NpcNav::Vehicle { seg: NavSeg::Lane(lane_id), s, variant, frozen: false });
    }

    // Pedestrian slots along the sidewalk loops.
    let mut ped_slots: Vec<(usize, f64)> = Vec::new();
    for (li, lp) in map.sidewalk_loops.iter().enumerate() {
        let mut s = 3.0;
        while s < lp.length() - 3.0 {
            ped_slots.push((li, s));
            s += 9.0;
        }
    }
    ped_slots.shuffle(&mut rng);
    if n_pedestrians > ped_slots.len() {
        return Err(SimError::Capacity {
            kind: "pedestrians",
            requested: n_pedestrians,
            available: ped_slots.len(),
        });
    }
    for k in 0..n_pedestrians {
        let (loop_id, s) = ped_slots[k];
        let lp = &map.sidewalk_loops[loop_id];
        let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        agents.push(AgentState {
            kind: AgentKind::Pedestrian,
            position: lp.eval(s),
            heading: lp.heading_at(s),
            speed: physics.ped_speed,
            half_len: physics.ped_half,
            half_wid: physics.ped_half,
        });
        nav.push(NpcNav::Ped(PedWalk { loop_id, s, dir, crossing: None }));
    }

    let cycle = 2.0 * map.params.light_green_secs;
    let lights = (0..map.intersections.len())
        .map(|i| TrafficLight { intersection: i, offset: rng.gen_range(0.0..cycle) })
        .collect();

    let prev_ego = agents[0].position;
    Ok(WorldState {
        map,
        weather,
        agents,
        lights,
        clock: 0.0,
        physics,
        intent: IntentParams::default(),
        rng,
        nav,
        detect: DetectorState { prev_ego_pos: prev_ego, ..Default::default() },
    })
}

impl WorldState {
    pub fn ego(&self) -> &AgentState {
        &self.agents[0]
    }

    /// Reposition the ego (route starts, scripted scenarios).
    pub fn set_ego_pose(&mut self, position: Vec2, heading: f64, speed: f64) {
        self.agents[0].position = position;
        self.agents[0].heading = heading;
        self.agents[0].speed = speed;
        self.detect.prev_ego_pos = position;
    }

    /// Place an NPC vehicle at an explicit lane position (scenarios).
    pub fn spawn_vehicle_at(&mut self, lane: LaneId, s: f64, speed: f64) {
        self.spawn_vehicle(lane, s, speed, false);
    }

    /// Scenario helper: a frozen vehicle ignores NPC logic and stays put.
    pub fn spawn_vehicle(&mut self, lane: LaneId, s: f64, speed: f64, frozen: bool) {
        let l = &self.map.lanes[lane];
        self.agents.push(AgentState {
            kind: AgentKind::Vehicle,
            position: l.poly.eval(s),
            heading: l.heading,
            speed,
            half_len: self.physics.ego_half_len,
            half_wid: self.physics.ego_half_wid,
        });
        self.nav.push(NpcNav::Vehicle { seg: NavSeg::Lane(lane), s, variant: 0, frozen });
    }

    /// Place a pedestrian at an explicit world position walking a fixed
    /// straight path (scenarios); it stops at the far end.
    pub fn spawn_pedestrian_at(&mut self, from: Vec2, to: Vec2) {
        let heading = (to - from).heading();
        self.agents.push(AgentState {
            kind: AgentKind::Pedestrian,
            position: from,
            heading,
            speed: self.physics.ped_speed,
            half_len: self.physics.ped_half,
            half_wid: self.physics.ped_half,
        });
        self.nav.push(NpcNav::Ped(PedWalk {
            loop_id: usize::MAX,
            s: 0.0,
            dir: 1.0,
            crossing: Some(CrossState {
                from,
                to,
                progress: 0.0,
                target_loop: usize::MAX,
                target_s: 0.0,
            }),
        }));
    }

    /// Drop NPC agents spawned within `radius` of a point; used to clear
    /// the ego's starting area before an episode.
    pub fn remove_agents_near(&mut self, pos: Vec2, radius: f64) {
        let keep: Vec<bool> = self
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| i == 0 || a.position.dist(pos) > radius)
            .collect();
        let mut agents = Vec::with_capacity(self.agents.len());
        let mut nav = Vec::with_capacity(self.nav.len());
        for (i, k) in keep.iter().enumerate() {
            if *k {
                agents.push(self.agents[i].clone());
                nav.push(self.nav[i].clone());
            }
        }
        self.agents = agents;
        self.nav = nav;
    }

    /// Vehicle palette variant for rendering; ego uses variant 0.
    pub fn vehicle_variant(&self, idx: usize) -> usize {
        match &self.nav[idx] {
            NpcNav::Vehicle { variant, .. } => *variant,
            _ => 0,
        }
    }

    /// Override all light offsets (scenarios want pinned phases).
    pub fn set_light_offsets(&mut self, offset: f64) {
        for l in &mut self.lights {
            l.offset = offset;
        }
    }

    /// Phase of the light governing `axis` at intersection `idx`.
    pub fn light_phase(&self, intersection_idx: usize, axis: super::map::RoadAxis) -> LightPhase {
        let light = &self.lights[intersection_idx];
        let g = self.map.params.light_green_secs;
        let t = (self.clock + light.offset).rem_euclid(2.0 * g);
        let ns_green = t < g;
        match axis {
            super::map::RoadAxis::NorthSouth => {
                if ns_green {
                    LightPhase::Green
                } else {
                    LightPhase::Red
                }
            }
            super::map::RoadAxis::EastWest => {
                if ns_green {
                    LightPhase::Red
                } else {
                    LightPhase::Green
                }
            }
        }
    }

    /// Seconds until the axis' current green ends; `None` while red.
    pub fn green_time_left(&self, intersection_idx: usize, axis: super::map::RoadAxis) -> Option<f64> {
        if self.light_phase(intersection_idx, axis) != LightPhase::Green {
            return None;
        }
        let light = &self.lights[intersection_idx];
        let g = self.map.params.light_green_secs;
        let t = (self.clock + light.offset).rem_euclid(2.0 * g);
        Some(if t < g { g - t } else { 2.0 * g - t })
    }

    /// Counters for the traffic-light success metric.
    pub fn light_crossings(&self) -> (u32, u32) {
        (self.detect.crossings_green, self.detect.crossings_red)
    }

    /// Advance the world by `dt` under the given ego control. Returns all
    /// infractions that come into existence during this step.
    pub fn step(&mut self, ego_control: Control, dt: f64) -> Result<Vec<InfractionEvent>, SimError> {
        if dt <= 0.0 {
            return Err(SimError::BadStep(dt));
        }
        if !ego_control.is_finite() {
            return Err(SimError::InvalidControl);
        }
        let ctl = ego_control.clamped();
        let ph = self.physics.clone();

        self.detect.prev_ego_pos = self.agents[0].position;

        // Ego: curvature-steered unicycle.
        {
            let ego = &mut self.agents[0];
            let dv = (ctl.gas * ph.accel_max - ctl.brake * ph.brake_max - ph.drag * ego.speed) * dt;
            ego.speed = (ego.speed + dv).clamp(0.0, ph.speed_max);
            let kappa = ctl.steer * ph.curvature_max;
            ego.heading = crate::geom::wrap_angle(ego.heading + ego.speed * kappa * dt);
            let dir = Vec2::from_heading(ego.heading);
            ego.position = ego.position + dir.scale(ego.speed * dt);
        }

        self.step_npc_vehicles(dt);
        self.step_pedestrians(dt);
        self.clock += dt;

        Ok(self.detect_infractions(dt))
    }

    fn step_npc_vehicles(&mut self, dt: f64) {
        let ph = self.physics.clone();
        let map = Arc::clone(&self.map);
        for idx in 0..self.agents.len() {
            let (seg, s, variant) = match self.nav[idx] {
                NpcNav::Vehicle { seg, s, variant, frozen } => {
                    if frozen {
                        continue;
                    }
                    (seg, s, variant)
                }
                _ => continue,
            };
            let poly = match seg {
                NavSeg::Lane(l) => &map.lanes[l].poly,
                NavSeg::Conn(c) => &map.conns[c].poly,
            };
            let seg_len = poly.length();
            let mut v_target = ph.npc_cruise;

            // Red light: cap speed by the stop curve toward the lane end.
            if let NavSeg::Lane(l) = seg {
                let lane = &map.lanes[l];
                if let Some(ii) = map.node_intersection[lane.to_node] {
                    let axis = map.roads[lane.road].axis;
                    let d_stop = (seg_len - s - ph.npc_stop_offset).max(0.0);
                    if self.light_phase(ii, axis) == LightPhase::Red {
                        v_target = v_target.min((2.0 * ph.npc_curve_decel * d_stop).sqrt());
                    }
                }
            }

            // Yield at intersection entry: hold while another vehicle is in
            // the box.
            if let NavSeg::Lane(l) = seg {
                let lane = &map.lanes[l];
                if seg_len - s < 1.0 {
                    let center = map.node_pos[lane.to_node];
                    let ihs = map.params.intersection_half;
                    let occupied = self.agents.iter().enumerate().any(|(j, a)| {
                        j != idx
                            && matches!(a.kind, AgentKind::Vehicle | AgentKind::Ego)
                            && (a.position.x - center.x).abs() <= ihs
                            && (a.position.y - center.y).abs() <= ihs
                    });
                    if occupied {
                        v_target = 0.0;
                    }
                }
            }

            // Agent ahead along the forward path.
            let gap = self.forward_gap(idx, seg, s, ph.npc_scan);
            if let Some(g) = gap {
                v_target = v_target.min((2.0 * ph.npc_curve_decel * (g - ph.npc_gap).max(0.0)).sqrt());
            }

            let a = &mut self.agents[idx];
            if a.speed > v_target {
                a.speed = (a.speed - ph.brake_max * dt).max(v_target).max(0.0);
            } else {
                a.speed = (a.speed + ph.accel_max * dt).min(v_target);
            }
            let mut new_s = s + a.speed * dt;
            let mut new_seg = seg;

            if new_s >= seg_len {
                match seg {
                    NavSeg::Lane(l) => {
                        // Hold at a red line; otherwise pick a connector.
                        let lane = &map.lanes[l];
                        let held = map.node_intersection[lane.to_node].is_some_and(|ii| {
                            self.light_phase(ii, map.roads[lane.road].axis) == LightPhase::Red
                        });
                        if held {
                            new_s = seg_len - ph.npc_stop_offset * 0.5;
                            self.agents[idx].speed = 0.0;
                        } else {
                            let outs = &map.lane_out[l];
                            let pick = outs[self.rng.gen_range(0..outs.len())];
                            new_seg = NavSeg::Conn(pick);
                            new_s -= seg_len;
                        }
                    }
                    NavSeg::Conn(c) => {
                        new_seg = NavSeg::Lane(map.conns[c].to_lane);
                        new_s -= seg_len;
                    }
                }
            }
            let poly = match new_seg {
                NavSeg::Lane(l) => &map.lanes[l].poly,
                NavSeg::Conn(c) => &map.conns[c].poly,
            };
            let a = &mut self.agents[idx];
            a.position = poly.eval(new_s);
            a.heading = poly.heading_at(new_s.min(poly.length() - 1e-6));
            self.nav[idx] = NpcNav::Vehicle { seg: new_seg, s: new_s, variant, frozen: false };
        }
    }

    /// Distance along the NPC's forward path to the nearest blocking agent.
    fn forward_gap(&self, idx: usize, seg: NavSeg, s: f64, scan: f64) -> Option<f64> {
        let map = &self.map;
        let mut best: Option<f64> = None;
        let mut d = 0.0;
        let mut cur = seg;
        let mut cur_s = s;
        while d < scan {
            let poly = match cur {
                NavSeg::Lane(l) => &map.lanes[l].poly,
                NavSeg::Conn(c) => &map.conns[c].poly,
            };
            let p = poly.eval(cur_s);
            for (j, a) in self.agents.iter().enumerate() {
                if j == idx {
                    continue;
                }
                if a.footprint().distance_to_point(p) <= 1.4 {
                    let cand = d;
                    best = Some(best.map_or(cand, |b: f64| b.min(cand)));
                }
            }
            if best.is_some() {
                break;
            }
            d += 1.0;
            cur_s += 1.0;
            let len = poly.length();
            if cur_s >= len {
                match cur {
                    NavSeg::Lane(l) => {
                        // Scan continues into the straightest connector.
                        let outs = &map.lane_out[l];
                        match outs.iter().find(|&&c| map.conns[c].turn == super::map::TurnKind::Straight) {
                            Some(&c) => {
                                cur = NavSeg::Conn(c);
                                cur_s -= len;
                            }
                            None => break,
                        }
                    }
                    NavSeg::Conn(c) => {
                        cur = NavSeg::Lane(map.conns[c].to_lane);
                        cur_s -= len;
                    }
                }
            }
        }
        best
    }

    fn step_pedestrians(&mut self, dt: f64) {
        let map = Arc::clone(&self.map);
        let ph = self.physics.clone();
        for idx in 0..self.agents.len() {
            let walk = match &self.nav[idx] {
                NpcNav::Ped(w) => w.clone(),
                _ => continue,
            };
            let mut walk = walk;
            if let Some(cross) = &mut walk.crossing {
                let total = cross.from.dist(cross.to);
                if self.agents[idx].speed > 0.0 {
                    cross.progress += ph.ped_speed * dt;
                }
                if cross.progress >= total {
                    if cross.target_loop == usize::MAX {
                        // Scripted path: stop at the far end.
                        let to = cross.to;
                        cross.progress = total;
                        let a = &mut self.agents[idx];
                        a.position = to;
                        a.speed = 0.0;
                    } else {
                        walk.loop_id = cross.target_loop;
                        walk.s = cross.target_s;
                        walk.crossing = None;
                        let lp = &map.sidewalk_loops[walk.loop_id];
                        let a = &mut self.agents[idx];
                        a.position = lp.eval(walk.s);
                        a.heading = lp.heading_at(walk.s);
                    }
                } else {
                    let t = cross.progress / total;
                    let a = &mut self.agents[idx];
                    a.position = cross.from + (cross.to - cross.from).scale(t);
                    a.heading = (cross.to - cross.from).heading();
                }
                self.nav[idx] = NpcNav::Ped(walk);
                continue;
            }

            let lp = &map.sidewalk_loops[walk.loop_id];
            let len = lp.length();
            walk.s = (walk.s + walk.dir * ph.ped_speed * dt).rem_euclid(len);

            // Near a crossing anchor: roll a per-second crossing trial.
            let pos = lp.eval(walk.s);
            let mut started = false;
            for anchor in &map.crossing_anchors {
                let (here_loop, here_s, there_loop, there_s) = if anchor.loop_a == walk.loop_id {
                    (anchor.loop_a, anchor.s_a, anchor.loop_b, anchor.s_b)
                } else if anchor.loop_b == walk.loop_id {
                    (anchor.loop_b, anchor.s_b, anchor.loop_a, anchor.s_a)
                } else {
                    continue;
                };
                let anchor_pos = map.sidewalk_loops[here_loop].eval(here_s);
                if anchor_pos.dist(pos) < 2.0 && self.rng.gen_bool((ph.ped_cross_prob * dt).clamp(0.0, 1.0)) {
                    let target_pos = map.sidewalk_loops[there_loop].eval(there_s);
                    walk.crossing = Some(CrossState {
                        from: pos,
                        to: target_pos,
                        progress: 0.0,
                        target_loop: there_loop,
                        target_s: there_s,
                    });
                    started = true;
                    break;
                }
            }
            if !started {
                let a = &mut self.agents[idx];
                a.position = pos;
                let h = lp.heading_at(walk.s);
                a.heading = if walk.dir > 0.0 { h } else { crate::geom::wrap_angle(h + std::f64::consts::PI) };
            } else {
                let a = &mut self.agents[idx];
                a.position = pos;
            }
            self.nav[idx] = NpcNav::Ped(walk);
        }
    }

    fn detect_infractions(&mut self, dt: f64) -> Vec<InfractionEvent> {
        let mut events = Vec::new();
        let ego = self.agents[0].clone();
        let rect = ego.footprint();
        let map = Arc::clone(&self.map);
        let ph = self.physics.clone();

        // Agent collisions, rising edge per agent while overlap persists.
        for j in 1..self.agents.len() {
            let overlap = rect.overlaps(&self.agents[j].footprint());
            let active = self.detect.collision_active.contains(&j);
            if overlap && !active {
                self.detect.collision_active.insert(j);
                let kind = match self.agents[j].kind {
                    AgentKind::Vehicle => InfractionKind::CollisionVehicle,
                    AgentKind::Pedestrian => InfractionKind::CollisionPedestrian,
                    AgentKind::Ego => unreachable!("single ego"),
                };
                events.push(InfractionEvent { kind, time: self.clock, position: ego.position });
            } else if !overlap && active {
                self.detect.collision_active.remove(&j);
            }
        }

        // Static collisions against buildings.
        for (bi, b) in map.buildings.iter().enumerate() {
            let brect = OrientedRect::new(b.center(), 0.0, (b.max.x - b.min.x) / 2.0, (b.max.y - b.min.y) / 2.0);
            let overlap = rect.overlaps(&brect);
            let active = self.detect.static_active.contains(&bi);
            if overlap && !active {
                self.detect.static_active.insert(bi);
                events.push(InfractionEvent {
                    kind: InfractionKind::CollisionStatic,
                    time: self.clock,
                    position: ego.position,
                });
            } else if !overlap && active {
                self.detect.static_active.remove(&bi);
            }
        }

        // Stop-line crossings: what phase, and red-light infractions.
        let prev = self.detect.prev_ego_pos;
        for (ii, inter) in map.intersections.iter().enumerate() {
            if inter.center.dist(ego.position) > map.params.intersection_half + 12.0 {
                continue;
            }
            for (ai, app) in inter.approaches.iter().enumerate() {
                let d_prev = (prev - app.stop_point).dot(app.dir_into);
                let d_cur = (ego.position - app.stop_point).dot(app.dir_into);
                if !(d_prev < 0.0 && d_cur >= 0.0) {
                    continue;
                }
                let lat = (ego.position - app.road_center).dot(app.dir_into.perp());
                if lat.abs() > map.params.lane_width {
                    continue;
                }
                let red = self.light_phase(ii, app.axis) == LightPhase::Red;
                if red {
                    self.detect.crossings_red += 1;
                    if !self.detect.red_crossed.contains(&(ii, ai)) {
                        self.detect.red_crossed.insert((ii, ai));
                        events.push(InfractionEvent {
                            kind: InfractionKind::RedLight,
                            time: self.clock,
                            position: ego.position,
                        });
                    }
                } else {
                    self.detect.crossings_green += 1;
                }
            }
        }

        // Opposite lane: majority of the footprint over the opposing lane,
        // sustained; intersection boxes are neutral ground.
        let opp_frac = rect.area_fraction_where(10, 4, |p| {
            map.road_frame_at(p).is_some_and(|(_, u, lat)| {
                let dir = Vec2::from_heading(ego.heading);
                let own_right = dir.dot(u) >= 0.0;
                if own_right {
                    lat > 0.0
                } else {
                    lat < 0.0
                }
            })
        });
        let (fired, secs) = debounce(
            opp_frac > ph.area_fraction,
            self.detect.opposite_fired,
            self.detect.opposite_secs,
            dt,
            ph.dwell_secs,
        );
        if fired && !self.detect.opposite_fired {
            events.push(InfractionEvent {
                kind: InfractionKind::OppositeLane,
                time: self.clock,
                position: ego.position,
            });
        }
        self.detect.opposite_fired = fired;
        self.detect.opposite_secs = secs;

        // Sidewalk, same debounce.
        let side_frac = rect.area_fraction_where(10, 4, |p| {
            !map.in_intersection_box(p) && map.sidewalk_at(p)
        });
        let (fired, secs) = debounce(
            side_frac > ph.area_fraction,
            self.detect.sidewalk_fired,
            self.detect.sidewalk_secs,
            dt,
            ph.dwell_secs,
        );
        if fired && !self.detect.sidewalk_fired {
            events.push(InfractionEvent {
                kind: InfractionKind::Sidewalk,
                time: self.clock,
                position: ego.position,
            });
        }
        self.detect.sidewalk_fired = fired;
        self.detect.sidewalk_secs = secs;

        events
    }

    /// Stop intentions for the ego along its route.
    ///
    /// The corridor is the route centerline sampled every `sample_step`
    /// meters ahead of the ego projection, out to `d_max`. A hazard at the
    /// k-th sample yields intention `1 - d_k / d_max`; vehicles use a
    /// half-lane corridor, pedestrians a full-lane corridor. The red-light
    /// term uses the along-route distance to the next uncrossed stop line
    /// while that light is red.
    pub fn compute_stop_intentions(&self, route: &Route) -> StopIntentions {
        let ip = &self.intent;
        let lw = self.map.params.lane_width;
        let ego = self.ego();
        let (ego_s, _) = route.poly.project(ego.position);

        let n_steps = (ip.d_max / ip.sample_step).round() as usize;
        let mut vehicle = 0.0f64;
        let mut pedestrian = 0.0f64;
        'outer_v: for k in 0..=n_steps {
            let d = k as f64 * ip.sample_step;
            let s = ego_s + d;
            if s > route.poly.length() {
                break;
            }
            let p = route.poly.eval(s);
            for (j, a) in self.agents.iter().enumerate() {
                if j == 0 || a.kind != AgentKind::Vehicle {
                    continue;
                }
                if a.footprint().distance_to_point(p) <= lw / 2.0 {
                    vehicle = (1.0 - d / ip.d_max).clamp(0.0, 1.0);
                    break 'outer_v;
                }
            }
        }
        'outer_p: for k in 0..=n_steps {
            let d = k as f64 * ip.sample_step;
            let s = ego_s + d;
            if s > route.poly.length() {
                break;
            }
            let p = route.poly.eval(s);
            for (j, a) in self.agents.iter().enumerate() {
                if j == 0 || a.kind != AgentKind::Pedestrian {
                    continue;
                }
                if a.footprint().distance_to_point(p) <= lw {
                    pedestrian = (1.0 - d / ip.d_max).clamp(0.0, 1.0);
                    break 'outer_p;
                }
            }
        }

        let mut red_light = 0.0f64;
        for stop in &route.lit_stops {
            if stop.s_stop + 1e-9 < ego_s {
                continue;
            }
            let inter_idx = stop.intersection_idx;
            let axis = self.map.intersections[inter_idx].approaches[stop.approach_idx].axis;
            if self.light_phase(inter_idx, axis) == LightPhase::Red {
                let d = stop.s_stop - ego_s;
                red_light = (1.0 - d / ip.d_max).clamp(0.0, 1.0);
            }
            break;
        }

        StopIntentions { vehicle, pedestrian, red_light }
    }

    /// High-level command for the ego on its route: a turn command inside
    /// the approach zone of each lit intersection, `follow` elsewhere.
    pub fn high_level_command(&self, route: &Route) -> Result<Command, SimError> {
        let ego = self.ego();
        let (ego_s, lat) = route.poly.project(ego.position);
        let tolerance = 5.0;
        if lat > tolerance {
            return Err(SimError::OffRoute { lateral: lat, tolerance });
        }
        for step in &route.turn_plan {
            if ego_s >= step.s_stop - route.command_zone && ego_s <= step.s_exit {
                return Ok(match step.turn {
                    super::map::TurnKind::Left => Command::Left,
                    super::map::TurnKind::Right => Command::Right,
                    super::map::TurnKind::Straight => Command::Straight,
                });
            }
        }
        Ok(Command::Follow)
    }
}

fn debounce(active: bool, fired: bool, secs: f64, dt: f64, dwell: f64) -> (bool, f64) {
    if !active {
        return (false, 0.0);
    }
    let secs = secs + dt;
    if secs >= dwell {
        (true, secs)
    } else {
        (fired, secs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clear() -> WeatherParams {
        WeatherParams::identity()
    }

    #[test]
    fn empty_world_has_single_agent() {
        let w = create_world(1, clear(), 0, 0, 7).unwrap();
        assert_eq!(w.agents.len(), 1);
        assert_eq!(w.agents[0].kind, AgentKind::Ego);
    }

    #[test]
    fn creation_is_deterministic() {
        let a = create_world(1, clear(), 5, 8, 7).unwrap();
        let b = create_world(1, clear(), 5, 8, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_map_seeds_change_road_graph() {
        let a = create_world(1, clear(), 0, 0, 7).unwrap();
        let b = create_world(2, clear(), 0, 0, 7).unwrap();
        assert_ne!(a.map.graph_signature(), b.map.graph_signature());
    }

    #[test]
    fn capacity_error_on_absurd_population() {
        let err = create_world(1, clear(), 100_000, 0, 7).unwrap_err();
        assert!(matches!(err, SimError::Capacity { kind: "vehicles", .. }));
        let err = create_world(1, clear(), 0, 100_000, 7).unwrap_err();
        assert!(matches!(err, SimError::Capacity { kind: "pedestrians", .. }));
    }

    #[test]
    fn braking_at_rest_keeps_speed_zero() {
        let mut w = create_world(1, clear(), 0, 0, 7).unwrap();
        let events = w.step(Control::new(1.0, 0.0, 0.0), 0.1).unwrap();
        assert_eq!(w.ego().speed, 0.0);
        assert!(events.is_empty());
    }

    #[test]
    fn non_finite_control_rejected() {
        let mut w = create_world(1, clear(), 0, 0, 7).unwrap();
        let err = w.step(Control::new(f64::NAN, 0.0, 0.0), 0.1).unwrap_err();
        assert!(matches!(err, SimError::InvalidControl));
    }

    #[test]
    fn stepping_is_deterministic() {
        let mut a = create_world(1, clear(), 5, 8, 7).unwrap();
        let mut b = create_world(1, clear(), 5, 8, 7).unwrap();
        for k in 0..200 {
            let ctl = Control::new(0.0, 0.5, if k % 20 < 10 { 0.1 } else { -0.1 });
            let ea = a.step(ctl, 0.1).unwrap();
            let eb = b.step(ctl, 0.1).unwrap();
            assert_eq!(ea, eb);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn npc_stops_before_red_line() {
        let mut w = create_world(1, clear(), 0, 0, 7).unwrap();
        // Pick a lane feeding a lit intersection and plant an NPC 3 m out.
        let lane_id = w
            .map
            .lanes
            .iter()
            .find(|l| w.map.node_intersection[l.to_node].is_some())
            .map(|l| l.id)
            .expect("some lane ends at a lit intersection");
        let lane_len = w.map.lanes[lane_id].poly.length();
        w.spawn_vehicle_at(lane_id, lane_len - 3.0, w.physics.npc_cruise);
        // Force the light red for this lane's axis for a long stretch.
        let ii = w.map.node_intersection[w.map.lanes[lane_id].to_node].unwrap();
        let axis = w.map.roads[w.map.lanes[lane_id].road].axis;
        for off in 0..200 {
            w.set_light_offsets(off as f64 * 0.1);
            if w.light_phase(ii, axis) == LightPhase::Red {
                break;
            }
        }
        assert_eq!(w.light_phase(ii, axis), LightPhase::Red);
        let start_speed = w.agents[1].speed;
        let mut speeds = vec![start_speed];
        for _ in 0..30 {
            w.step(Control::COAST, 0.1).unwrap();
            speeds.push(w.agents[1].speed);
            // Red stays on: freeze the clock effect by re-pinning offsets.
            if w.light_phase(ii, axis) != LightPhase::Red {
                w.set_light_offsets(w.lights[ii].offset + w.map.params.light_green_secs);
            }
        }
        let end_speed = *speeds.last().unwrap();
        assert!(end_speed < 0.3, "NPC should be nearly stopped, got {end_speed}");
        // And it held short of the stop line.
        if let NpcNav::Vehicle { s, .. } = w.nav[1] {
            assert!(s < lane_len, "NPC crossed the line: s={s} len={lane_len}");
        } else {
            panic!("nav changed kind");
        }
    }
}
