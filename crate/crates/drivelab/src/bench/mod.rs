//! Closed-loop evaluation: route suites over towns, weathers and traffic
//! levels, episode execution with timeout and off-route detection, the
//! four scoring protocols, and report aggregation.

pub mod policy;
pub mod report;

pub use policy::{build_policy, DrivingPolicy, Method, OraclePolicy, PolicyContext};
pub use report::{write_episode_logs, ReportRow, ReportTable};

use crate::route::{random_route, Route};
use crate::sim::map::{TownMap, TownParams};
use crate::sim::render::render_both;
use crate::sim::weather::WeatherParams;
use crate::sim::{create_world_on_map, InfractionEvent, InfractionKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::str::FromStr;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteName {
    CarlaOld,
    Nocrash,
    TrafficLight,
    TrafficSchool,
}

impl SuiteName {
    pub fn name(&self) -> &'static str {
        match self {
            SuiteName::CarlaOld => "carla_old",
            SuiteName::Nocrash => "nocrash",
            SuiteName::TrafficLight => "traffic_light",
            SuiteName::TrafficSchool => "traffic_school",
        }
    }
}

impl FromStr for SuiteName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "carla_old" => Ok(SuiteName::CarlaOld),
            "nocrash" => Ok(SuiteName::Nocrash),
            "traffic_light" => Ok(SuiteName::TrafficLight),
            "traffic_school" => Ok(SuiteName::TrafficSchool),
            _ => Err(format!("unknown suite '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficLevel {
    Empty,
    Regular,
    Dense,
}

impl TrafficLevel {
    pub fn name(&self) -> &'static str {
        match self {
            TrafficLevel::Empty => "empty",
            TrafficLevel::Regular => "regular",
            TrafficLevel::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Training,
    NewWeather,
    NewTown,
    NewTownWeather,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 4] = [
        ConditionKind::Training,
        ConditionKind::NewWeather,
        ConditionKind::NewTown,
        ConditionKind::NewTownWeather,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ConditionKind::Training => "training",
            ConditionKind::NewWeather => "new_weather",
            ConditionKind::NewTown => "new_town",
            ConditionKind::NewTownWeather => "new_town_weather",
        }
    }

    pub fn uses_new_town(&self) -> bool {
        matches!(self, ConditionKind::NewTown | ConditionKind::NewTownWeather)
    }

    pub fn uses_new_weather(&self) -> bool {
        matches!(self, ConditionKind::NewWeather | ConditionKind::NewTownWeather)
    }
}

impl FromStr for ConditionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        ConditionKind::ALL
            .iter()
            .find(|c| c.name() == s)
            .copied()
            .ok_or_else(|| format!("unknown condition '{s}'"))
    }
}

/// Full evaluation recipe: which cells to run and their parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSuite {
    pub name: SuiteName,
    pub train_town_seed: u64,
    pub new_town_seed: u64,
    pub conditions: Vec<ConditionKind>,
    pub levels: Vec<TrafficLevel>,
    pub routes_per_condition: usize,
    pub repetitions: usize,
    pub timeout_factor: f64,
    /// (vehicles, pedestrians) per traffic level.
    pub regular_population: (usize, usize),
    pub dense_population: (usize, usize),
    pub target_speed: f64,
    pub arrival_tolerance: f64,
    pub off_route_lateral: f64,
    pub off_route_secs: f64,
    pub seed: u64,
}

impl BenchmarkSuite {
    pub fn new(name: SuiteName) -> Self {
        let levels = match name {
            // Traffic-light success is measured in the empty setting.
            SuiteName::TrafficLight => vec![TrafficLevel::Empty],
            _ => vec![TrafficLevel::Empty, TrafficLevel::Regular, TrafficLevel::Dense],
        };
        BenchmarkSuite {
            name,
            train_town_seed: 1,
            new_town_seed: 2,
            conditions: ConditionKind::ALL.to_vec(),
            levels,
            routes_per_condition: 25,
            repetitions: 3,
            timeout_factor: 2.0,
            regular_population: (8, 12),
            dense_population: (16, 24),
            target_speed: 6.0,
            arrival_tolerance: 2.0,
            off_route_lateral: 5.0,
            off_route_secs: 3.0,
            seed: 1000,
        }
    }

    pub fn population(&self, level: TrafficLevel) -> (usize, usize) {
        match level {
            TrafficLevel::Empty => (0, 0),
            TrafficLevel::Regular => self.regular_population,
            TrafficLevel::Dense => self.dense_population,
        }
    }

    pub fn town_seed(&self, c: ConditionKind) -> u64 {
        if c.uses_new_town() {
            self.new_town_seed
        } else {
            self.train_town_seed
        }
    }

    pub fn weathers(&self, c: ConditionKind) -> Vec<WeatherParams> {
        if c.uses_new_weather() {
            WeatherParams::test_set()
        } else {
            WeatherParams::train_set()
        }
    }

    /// Routes for one condition; shared across suites by construction
    /// (derived from the suite seed and town seed only).
    pub fn routes(&self, map: &TownMap, condition: ConditionKind) -> Vec<Route> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ map.layout_seed.wrapping_mul(0x2545_f491));
        let _ = condition;
        (0..self.routes_per_condition)
            .map(|_| random_route(map, &mut rng, 150.0, 450.0, true).expect("route generation"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    pub carla_old: bool,
    pub nocrash: bool,
    pub traffic_school: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub suite: String,
    pub condition: String,
    pub traffic_level: String,
    pub repetition: usize,
    pub route_id: usize,
    pub weather: String,
    pub method: String,
    pub reached: bool,
    pub elapsed: f64,
    pub infractions: Vec<InfractionEvent>,
    pub lights_crossed_green: u32,
    pub lights_crossed_red: u32,
    pub verdicts: Verdicts,
    pub diagnostic: Option<String>,
    pub config_hash: String,
}

impl EpisodeResult {
    pub fn has(&self, kind: InfractionKind) -> bool {
        self.infractions.iter().any(|e| e.kind == kind)
    }
}

/// CARLA-old protocol: destination reached within the time limit;
/// collisions and rule violations are not penalized.
pub fn score_carla_old(r: &EpisodeResult) -> bool {
    r.reached && !r.has(InfractionKind::Overtime)
}

/// NoCrash protocol: reached in time without any collision.
pub fn score_nocrash(r: &EpisodeResult) -> bool {
    score_carla_old(r) && !r.infractions.iter().any(|e| e.kind.is_collision())
}

/// Traffic-school protocol: NoCrash plus no red-light, opposite-lane or
/// sidewalk infraction.
pub fn score_traffic_school(r: &EpisodeResult) -> bool {
    score_nocrash(r)
        && !r.has(InfractionKind::RedLight)
        && !r.has(InfractionKind::OppositeLane)
        && !r.has(InfractionKind::Sidewalk)
}

/// Percentage of traffic-light crossings made on green, pooled over the
/// given episodes; `None` when no light was crossed at all.
pub fn score_traffic_light(results: &[&EpisodeResult]) -> Option<f64> {
    let green: u32 = results.iter().map(|r| r.lights_crossed_green).sum();
    let red: u32 = results.iter().map(|r| r.lights_crossed_red).sum();
    if green + red == 0 {
        None
    } else {
        Some(100.0 * green as f64 / (green + red) as f64)
    }
}

fn mix(parts: &[u64]) -> u64 {
    let mut x = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        x ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    }
    x
}

pub struct EpisodeSpec<'a> {
    pub suite: &'a BenchmarkSuite,
    pub condition: ConditionKind,
    pub level: TrafficLevel,
    pub repetition: usize,
    pub route_id: usize,
    pub route: &'a Route,
    pub map: Arc<TownMap>,
    pub weather: WeatherParams,
    pub method: &'a str,
    pub config_hash: &'a str,
}

/// Run one closed-loop episode at 10 FPS.
pub fn run_episode(policy: &mut dyn DrivingPolicy, spec: &EpisodeSpec<'_>) -> EpisodeResult {
    let dt = 0.1;
    let suite = spec.suite;
    let (nv, np) = suite.population(spec.level);
    let ep_seed = mix(&[
        suite.seed,
        spec.map.layout_seed,
        spec.level as u64,
        spec.repetition as u64,
        spec.route_id as u64,
    ]);
    let mut result = EpisodeResult {
        suite: suite.name.name().into(),
        condition: spec.condition.name().into(),
        traffic_level: spec.level.name().into(),
        repetition: spec.repetition,
        route_id: spec.route_id,
        weather: spec.weather.name.clone(),
        method: spec.method.into(),
        reached: false,
        elapsed: 0.0,
        infractions: Vec::new(),
        lights_crossed_green: 0,
        lights_crossed_red: 0,
        verdicts: Verdicts { carla_old: false, nocrash: false, traffic_school: false },
        diagnostic: None,
        config_hash: spec.config_hash.into(),
    };

    let mut world = match create_world_on_map(Arc::clone(&spec.map), spec.weather.clone(), nv, np, ep_seed) {
        Ok(w) => w,
        Err(e) => {
            result.diagnostic = Some(format!("world creation failed: {e}"));
            return result;
        }
    };
    let route = spec.route;
    world.set_ego_pose(route.poly.eval(0.0), route.poly.heading_at(0.0), 0.0);
    world.remove_agents_near(route.poly.eval(0.0), 12.0);

    let timeout = route.nominal_length / suite.target_speed * suite.timeout_factor;
    let goal = route.goal_pos();
    let mut last_command = crate::sim::Command::Follow;
    let mut off_route_time = 0.0f64;

    loop {
        // Command; off-route errors are fatal only when sustained.
        let command = match world.high_level_command(route) {
            Ok(c) => {
                off_route_time = 0.0;
                c
            }
            Err(_) => {
                off_route_time += dt;
                if off_route_time >= suite.off_route_secs {
                    result.diagnostic = Some("off_route".into());
                    break;
                }
                last_command
            }
        };
        last_command = command;

        let (image, seg, speed) = if policy.needs_image() || policy.needs_annotations() {
            let (img, seg, speed) = render_both(&world);
            (Some(img), Some(seg), speed)
        } else {
            (None, None, world.ego().speed)
        };
        let intentions = policy.needs_annotations().then(|| world.compute_stop_intentions(route));

        let ctx = PolicyContext {
            world: &world,
            route,
            command,
            speed,
            image: image.as_ref(),
            seg: seg.as_ref(),
            intentions,
        };
        let control = match policy.act(&ctx) {
            Ok(c) if c.is_finite() => c,
            Ok(_) | Err(_) => {
                result.diagnostic = Some("policy emitted invalid control".into());
                break;
            }
        };
        match world.step(control, dt) {
            Ok(events) => result.infractions.extend(events),
            Err(e) => {
                result.diagnostic = Some(format!("step failed: {e}"));
                break;
            }
        }

        if world.ego().position.dist(goal) < suite.arrival_tolerance {
            result.reached = true;
            break;
        }
        if world.clock >= timeout {
            result.infractions.push(InfractionEvent {
                kind: InfractionKind::Overtime,
                time: world.clock,
                position: world.ego().position,
            });
            break;
        }
    }

    result.elapsed = world.clock;
    let (g, r) = world.light_crossings();
    result.lights_crossed_green = g;
    result.lights_crossed_red = r;
    result.verdicts = Verdicts {
        carla_old: score_carla_old(&result),
        nocrash: score_nocrash(&result),
        traffic_school: score_traffic_school(&result),
    };
    result
}

/// Run the full grid of a suite for one policy; episodes run in parallel
/// on cloned policies and the output order is fixed.
pub fn run_suite(
    policy: &dyn DrivingPolicy,
    suite: &BenchmarkSuite,
    method: &str,
    config_hash: &str,
) -> Vec<EpisodeResult> {
    let mut jobs: Vec<(ConditionKind, TrafficLevel, usize, usize)> = Vec::new();
    for &c in &suite.conditions {
        for &l in &suite.levels {
            for rep in 0..suite.repetitions {
                for route_id in 0..suite.routes_per_condition {
                    jobs.push((c, l, rep, route_id));
                }
            }
        }
    }
    // Maps and routes per condition, built once.
    let mut ctx: std::collections::HashMap<ConditionKind, (Arc<TownMap>, Vec<Route>, Vec<WeatherParams>)> =
        std::collections::HashMap::new();
    for &c in &suite.conditions {
        let map = Arc::new(TownMap::generate(suite.town_seed(c), TownParams::default()));
        let routes = suite.routes(&map, c);
        let weathers = suite.weathers(c);
        ctx.insert(c, (map, routes, weathers));
    }

    let mut results: Vec<EpisodeResult> = jobs
        .par_iter()
        .map(|&(c, l, rep, route_id)| {
            let (map, routes, weathers) = &ctx[&c];
            let weather = weathers[route_id % weathers.len()].clone();
            let spec = EpisodeSpec {
                suite,
                condition: c,
                level: l,
                repetition: rep,
                route_id,
                route: &routes[route_id],
                map: Arc::clone(map),
                weather,
                method,
                config_hash,
            };
            let mut p = policy.clone_box();
            run_episode(p.as_mut(), &spec)
        })
        .collect();
    results.sort_by(|a, b| {
        (a.condition.clone(), a.traffic_level.clone(), a.repetition, a.route_id).cmp(&(
            b.condition.clone(),
            b.traffic_level.clone(),
            b.repetition,
            b.route_id,
        ))
    });
    results
}

/// Aggregate per-(condition, level) success over repetitions into
/// mean +- population std.
pub fn aggregate(results: &[EpisodeResult], suite: SuiteName) -> ReportTable {
    report::aggregate(results, suite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec2;

    fn dummy(reached: bool, kinds: &[InfractionKind]) -> EpisodeResult {
        EpisodeResult {
            suite: "nocrash".into(),
            condition: "training".into(),
            traffic_level: "empty".into(),
            repetition: 0,
            route_id: 0,
            weather: "Clear Noon".into(),
            method: "oracle".into(),
            reached,
            elapsed: 10.0,
            infractions: kinds
                .iter()
                .map(|&kind| InfractionEvent { kind, time: 1.0, position: Vec2::ZERO })
                .collect(),
            lights_crossed_green: 0,
            lights_crossed_red: 0,
            verdicts: Verdicts { carla_old: false, nocrash: false, traffic_school: false },
            diagnostic: None,
            config_hash: String::new(),
        }
    }

    #[test]
    fn carla_old_ignores_crashes_and_red_lights() {
        let r = dummy(true, &[InfractionKind::CollisionVehicle, InfractionKind::CollisionVehicle]);
        assert!(score_carla_old(&r));
        let r = dummy(true, &[InfractionKind::RedLight]);
        assert!(score_carla_old(&r));
        let r = dummy(false, &[InfractionKind::Overtime]);
        assert!(!score_carla_old(&r));
    }

    #[test]
    fn nocrash_allows_red_light_but_not_collisions() {
        let r = dummy(true, &[InfractionKind::RedLight]);
        assert!(score_nocrash(&r));
        let r = dummy(true, &[InfractionKind::CollisionPedestrian]);
        assert!(!score_nocrash(&r));
        let r = dummy(false, &[]);
        assert!(!score_nocrash(&r));
    }

    #[test]
    fn traffic_school_is_strictest() {
        let clean = dummy(true, &[]);
        assert!(score_traffic_school(&clean) && score_nocrash(&clean) && score_carla_old(&clean));
        let red = dummy(true, &[InfractionKind::RedLight]);
        assert!(!score_traffic_school(&red));
        assert!(score_nocrash(&red));
        let opp = dummy(true, &[InfractionKind::OppositeLane]);
        assert!(!score_traffic_school(&opp));
        let side = dummy(true, &[InfractionKind::Sidewalk]);
        assert!(!score_traffic_school(&side));
    }

    #[test]
    fn traffic_light_percentage_and_degenerate_denominator() {
        let mut a = dummy(true, &[]);
        a.lights_crossed_green = 9;
        a.lights_crossed_red = 1;
        assert_eq!(score_traffic_light(&[&a]), Some(90.0));
        let b = dummy(true, &[]);
        assert_eq!(score_traffic_light(&[&b]), None);
    }

    /// Strictness chain over arbitrary event sets.
    #[test]
    fn strictness_chain_property() {
        use InfractionKind::*;
        let kinds = [
            CollisionVehicle,
            CollisionPedestrian,
            CollisionStatic,
            RedLight,
            OppositeLane,
            Sidewalk,
            Overtime,
        ];
        for mask in 0..128u32 {
            for reached in [false, true] {
                let set: Vec<InfractionKind> =
                    kinds.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, k)| *k).collect();
                let r = dummy(reached, &set);
                if score_traffic_school(&r) {
                    assert!(score_nocrash(&r));
                }
                if score_nocrash(&r) {
                    assert!(score_carla_old(&r));
                }
            }
        }
    }
}
