//! Lane-graph route planning.

use crate::geom::{Polyline, Vec2};
use crate::sim::map::{LaneId, TownMap, TurnKind, Waypoint};
use crate::sim::SimError;
use petgraph::graph::{DiGraph, NodeIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One lit intersection traversal on a route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnStep {
    pub node: usize,
    pub turn: TurnKind,
    /// Arc length of the stop line along the route.
    pub s_stop: f64,
    /// Arc length where the route leaves the intersection.
    pub s_exit: f64,
}

/// Stop line of a lit intersection along the route, for red-light gating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LitStop {
    pub intersection_idx: usize,
    pub approach_idx: usize,
    pub s_stop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub lanes: Vec<LaneId>,
    pub poly: Polyline,
    pub turn_plan: Vec<TurnStep>,
    pub lit_stops: Vec<LitStop>,
    pub start: Waypoint,
    pub goal: Waypoint,
    pub nominal_length: f64,
    /// Turn commands activate this far before each stop line.
    pub command_zone: f64,
}

impl Route {
    pub fn goal_pos(&self) -> Vec2 {
        *self.poly.points.last().unwrap()
    }
}

/// Shortest lane-graph path from `start` to `goal` with a derived turn plan.
pub fn plan_route(map: &TownMap, start: Waypoint, goal: Waypoint) -> Result<Route, SimError> {
    if start.lane == goal.lane && (goal.s - start.s).abs() < 1e-9 {
        return Err(SimError::Planning("start equals goal".into()));
    }

    // Same lane, goal downstream: trivial single-segment route.
    if start.lane == goal.lane && goal.s > start.s {
        let lane = &map.lanes[start.lane];
        let poly = Polyline::new(vec![lane.poly.eval(start.s), lane.poly.eval(goal.s)]);
        return Ok(Route {
            lanes: vec![start.lane],
            nominal_length: poly.length(),
            poly,
            turn_plan: Vec::new(),
            lit_stops: Vec::new(),
            start,
            goal,
            command_zone: 8.0,
        });
    }

    // Lane-level graph: edge from lane to lane through each connector.
    let mut graph: DiGraph<LaneId, (f64, usize)> = DiGraph::new();
    let idx: Vec<NodeIndex> = (0..map.lanes.len()).map(|l| graph.add_node(l)).collect();
    for conn in &map.conns {
        let w = conn.poly.length() + map.lanes[conn.to_lane].poly.length();
        graph.add_edge(idx[conn.from_lane], idx[conn.to_lane], (w, conn.id));
    }
    let goal_pos = map.lanes[goal.lane].poly.eval(goal.s);
    let path = petgraph::algo::astar(
        &graph,
        idx[start.lane],
        |n| n == idx[goal.lane],
        |e| e.weight().0,
        |n| {
            let lane = &map.lanes[graph[n]];
            lane.poly.points.last().unwrap().dist(goal_pos)
        },
    );
    let (_, nodes) = path.ok_or_else(|| SimError::Planning("goal unreachable from start".into()))?;
    let lane_seq: Vec<LaneId> = nodes.iter().map(|n| graph[*n]).collect();

    // Recover the connector between consecutive lanes.
    let mut conn_seq = Vec::new();
    for w in lane_seq.windows(2) {
        let conn = map
            .conns
            .iter()
            .find(|c| c.from_lane == w[0] && c.to_lane == w[1])
            .expect("path edge has a connector");
        conn_seq.push(conn.id);
    }

    // Stitch the dense polyline and record stop/exit arc lengths.
    let mut pts: Vec<Vec2> = Vec::new();
    let push = |pts: &mut Vec<Vec2>, p: Vec2| {
        if pts.last().map_or(true, |q| q.dist(p) > 1e-9) {
            pts.push(p);
        }
    };
    let first_lane = &map.lanes[lane_seq[0]];
    push(&mut pts, first_lane.poly.eval(start.s));
    push(&mut pts, *first_lane.poly.points.last().unwrap());

    let mut turn_plan = Vec::new();
    let mut lit_stops = Vec::new();
    let mut arc = pts.windows(2).map(|w| w[0].dist(w[1])).sum::<f64>();

    for (i, &conn_id) in conn_seq.iter().enumerate() {
        let conn = &map.conns[conn_id];
        let s_stop = arc;
        for p in &conn.poly.points[1..] {
            let prev = *pts.last().unwrap();
            push(&mut pts, *p);
            arc += prev.dist(*p);
        }
        let s_exit = arc;
        if let Some(ii) = map.node_intersection[conn.node] {
            let lane_in = lane_seq[i];
            let approach_idx = map.intersections[ii]
                .approaches
                .iter()
                .position(|a| a.lane_in == lane_in)
                .expect("incoming lane has an approach");
            turn_plan.push(TurnStep { node: conn.node, turn: conn.turn, s_stop, s_exit });
            lit_stops.push(LitStop { intersection_idx: ii, approach_idx, s_stop });
        }
        let lane = &map.lanes[conn.to_lane];
        let is_last = i + 1 == conn_seq.len();
        let end = if is_last { lane.poly.eval(goal.s) } else { *lane.poly.points.last().unwrap() };
        let prev = *pts.last().unwrap();
        push(&mut pts, end);
        arc += prev.dist(end);
    }

    let poly = Polyline::new(pts);
    Ok(Route {
        lanes: lane_seq,
        nominal_length: poly.length(),
        poly,
        turn_plan,
        lit_stops,
        start,
        goal,
        command_zone: 8.0,
    })
}

/// Draw a random route with length in `[min_len, max_len]`, optionally
/// required to cross at least one lit intersection.
pub fn random_route(
    map: &TownMap,
    rng: &mut impl Rng,
    min_len: f64,
    max_len: f64,
    require_lit: bool,
) -> Option<Route> {
    let wps = map.sample_waypoints(6.0);
    for _ in 0..400 {
        let a = wps[rng.gen_range(0..wps.len())];
        let b = wps[rng.gen_range(0..wps.len())];
        if let Ok(r) = plan_route(map, a, b) {
            if r.nominal_length >= min_len
                && r.nominal_length <= max_len
                && (!require_lit || !r.turn_plan.is_empty())
            {
                return Some(r);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::map::{GridLayout, TownParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_map() -> TownMap {
        TownMap::generate(1, TownParams::default())
    }

    #[test]
    fn adjacent_waypoints_one_segment_no_turns() {
        let map = test_map();
        let lane = &map.lanes[0];
        let a = Waypoint { lane: 0, s: 5.0, pos: lane.poly.eval(5.0), heading: lane.heading };
        let b = Waypoint { lane: 0, s: 11.0, pos: lane.poly.eval(11.0), heading: lane.heading };
        let r = plan_route(&map, a, b).unwrap();
        assert_eq!(r.lanes, vec![0]);
        assert!(r.turn_plan.is_empty());
        assert!((r.nominal_length - 6.0).abs() < 1e-9);
    }

    #[test]
    fn identical_start_goal_is_error() {
        let map = test_map();
        let lane = &map.lanes[0];
        let a = Waypoint { lane: 0, s: 5.0, pos: lane.poly.eval(5.0), heading: lane.heading };
        assert!(plan_route(&map, a, a).is_err());
    }

    #[test]
    fn disconnected_components_planning_error() {
        // A 4x1 strip with the middle edge removed: two road components.
        let layout = GridLayout { nx: 4, ny: 1, removed_edges: vec![(1, 2)], palette_seed: 0 };
        let map = TownMap::from_layout(99, &layout, TownParams::default());
        let left_lane = map.lanes.iter().find(|l| l.from_node == 0 && l.to_node == 1).unwrap();
        let right_lane = map.lanes.iter().find(|l| l.from_node == 2 && l.to_node == 3).unwrap();
        let a = Waypoint { lane: left_lane.id, s: 5.0, pos: left_lane.poly.eval(5.0), heading: left_lane.heading };
        let b = Waypoint { lane: right_lane.id, s: 5.0, pos: right_lane.poly.eval(5.0), heading: right_lane.heading };
        assert!(matches!(plan_route(&map, a, b), Err(SimError::Planning(_))));
    }

    #[test]
    fn turn_plan_matches_connector_turns() {
        let map = test_map();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_route(&map, &mut rng, 150.0, 400.0, true).expect("route found");
        assert!(!r.turn_plan.is_empty());
        for step in &r.turn_plan {
            assert!(step.s_exit > step.s_stop);
            assert!(map.node_intersection[step.node].is_some());
        }
        // lit stop arcs are increasing
        for w in r.lit_stops.windows(2) {
            assert!(w[0].s_stop < w[1].s_stop);
        }
    }

    #[test]
    fn route_polyline_monotone_and_consistent() {
        let map = test_map();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random_route(&map, &mut rng, 150.0, 400.0, false).expect("route found");
        assert!((r.nominal_length - r.poly.length()).abs() < 1e-9);
        assert!(r.poly.points.len() >= 2);
    }
}
