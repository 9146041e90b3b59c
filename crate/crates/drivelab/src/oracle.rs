//! Rule-based expert driver with full world access.
//!
//! Steering is pure pursuit toward a lookahead point on the route.
//! Longitudinal control is deliberately binary: full brake whenever any
//! stop intention exceeds the threshold, proportional gas toward a
//! scheduled target speed otherwise. The schedule slows for turns and for
//! traffic-light approaches, and uses the light timer (the expert can see
//! all world state) to coast instead of committing when the green is about
//! to end, so stopping always happens through the intention rule.

use crate::geom::wrap_angle;
use crate::route::Route;
use crate::sim::{Command, Control, SimError, WorldState};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    pub lookahead: f64,
    pub target_speed: f64,
    pub turn_speed: f64,
    pub approach_speed: f64,
    /// Light-approach logic engages within this distance of a stop line.
    pub approach_dist: f64,
    pub brake_threshold: f64,
    /// Extra green time demanded beyond the predicted clearing time.
    pub commit_margin: f64,
    pub gas_gain: f64,
    pub off_route_tolerance: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            lookahead: 4.0,
            target_speed: 6.0,
            turn_speed: 3.5,
            approach_speed: 4.0,
            approach_dist: 16.0,
            brake_threshold: 0.5,
            commit_margin: 0.5,
            gas_gain: 0.5,
            off_route_tolerance: 5.0,
        }
    }
}

/// Expert control for the ego on `route`. Deterministic in (world, route).
pub fn oracle_control(world: &WorldState, route: &Route) -> Result<Control, SimError> {
    oracle_control_with(world, route, &OracleParams::default())
}

pub fn oracle_control_with(
    world: &WorldState,
    route: &Route,
    p: &OracleParams,
) -> Result<Control, SimError> {
    let ego = world.ego();
    let (ego_s, lateral) = route.poly.project(ego.position);
    if lateral > p.off_route_tolerance {
        return Err(SimError::OffRoute { lateral, tolerance: p.off_route_tolerance });
    }

    // Pure pursuit steering.
    let target = route.poly.eval(ego_s + p.lookahead);
    let to_target = target - ego.position;
    let angle = wrap_angle(to_target.heading() - ego.heading);
    let kappa = 2.0 * angle.sin() / p.lookahead;
    let steer = (kappa / world.physics.curvature_max).clamp(-1.0, 1.0);

    // Binary braking on the stop intentions.
    let intentions = world.compute_stop_intentions(route);
    if intentions.max() > p.brake_threshold {
        return Ok(Control::new(1.0, 0.0, steer));
    }

    // Target-speed schedule.
    let mut target_speed = p.target_speed;
    if world.high_level_command(route)? != Command::Follow {
        target_speed = target_speed.min(p.turn_speed);
    }
    if let Some(stop) = route.lit_stops.iter().find(|st| st.s_stop + 1e-9 >= ego_s) {
        let d = stop.s_stop - ego_s;
        if d <= p.approach_dist {
            target_speed = target_speed.min(p.approach_speed);
            let inter = &world.map.intersections[stop.intersection_idx];
            let axis = inter.approaches[stop.approach_idx].axis;
            match world.green_time_left(stop.intersection_idx, axis) {
                Some(green_left) => {
                    let clear_time = (d + 4.0) / p.approach_speed.max(0.5);
                    if green_left < clear_time + p.commit_margin {
                        // Green ends too soon: coast and let the red-light
                        // intention finish the stop.
                        target_speed = 0.0;
                    }
                }
                None => {
                    // Red but still beyond the intention range: coast in.
                    target_speed = 0.0;
                }
            }
        }
    }

    let gas = (p.gas_gain * (target_speed - ego.speed)).clamp(0.0, 1.0);
    Ok(Control::new(0.0, gas, steer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::route::random_route;
    use crate::sim::{create_world, WeatherParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn straight_empty_lane_gives_gentle_gas() {
        let mut world = create_world(1, WeatherParams::identity(), 0, 0, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let route = random_route(&world.map, &mut rng, 150.0, 400.0, false).unwrap();
        world.set_ego_pose(route.poly.eval(0.0), route.poly.heading_at(0.0), 3.0);
        // Drive a few steps on the straight part and check the contract.
        for _ in 0..5 {
            let ctl = oracle_control(&world, &route).unwrap();
            world.step(ctl, 0.1).unwrap();
        }
        let ctl = oracle_control(&world, &route).unwrap();
        let (ego_s, _) = route.poly.project(world.ego().position);
        let near_light = route.lit_stops.iter().any(|s| (s.s_stop - ego_s).abs() < 20.0);
        if !near_light {
            assert_eq!(ctl.brake, 0.0);
            assert!(ctl.gas > 0.0);
            assert!(ctl.steer.abs() < 0.05, "steer {}", ctl.steer);
        }
    }

    #[test]
    fn oracle_is_deterministic() {
        let mut world = create_world(1, WeatherParams::identity(), 3, 4, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let route = random_route(&world.map, &mut rng, 150.0, 400.0, true).unwrap();
        world.set_ego_pose(route.poly.eval(0.0), route.poly.heading_at(0.0), 0.0);
        let a = oracle_control(&world, &route).unwrap();
        let b = oracle_control(&world, &route).unwrap();
        assert_eq!(a, b);
    }
}
