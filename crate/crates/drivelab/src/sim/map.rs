//! Procedural town maps: a grid road network with per-direction lanes,
//! connector arcs, traffic-light intersections, sidewalks, crossings and
//! buildings, plus a rasterized static surface grid used by the renderer.

use crate::geom::{Aabb, Polyline, Vec2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type LaneId = usize;
pub type ConnId = usize;
pub type NodeId = usize;

/// Static surface codes stored in the rasterized grid.
pub const SURF_GRASS: u8 = 0;
pub const SURF_BUILDING: u8 = 1;
pub const SURF_ROAD: u8 = 2;
pub const SURF_SIDEWALK: u8 = 3;
pub const SURF_MARKING: u8 = 4;
pub const SURF_CROSSING: u8 = 5;

/// Six-class segmentation ids.
pub const CLASS_NUISANCE: u8 = 0;
pub const CLASS_ROAD: u8 = 1;
pub const CLASS_ROADLINE_SIDEWALK: u8 = 2;
pub const CLASS_VEHICLE: u8 = 3;
pub const CLASS_PEDESTRIAN: u8 = 4;
pub const CLASS_TRAFFIC_SIGN: u8 = 5;
pub const NUM_CLASSES: usize = 6;

pub fn surface_class(surf: u8) -> u8 {
    match surf {
        SURF_ROAD => CLASS_ROAD,
        SURF_SIDEWALK | SURF_MARKING | SURF_CROSSING => CLASS_ROADLINE_SIDEWALK,
        _ => CLASS_NUISANCE,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TownParams {
    /// Grid spacing between adjacent intersections, meters.
    pub block: f64,
    /// Width of one lane; roads carry one lane per direction.
    pub lane_width: f64,
    /// Sidewalk strip width on each road side.
    pub sidewalk_width: f64,
    /// Distance from an intersection center to its stop lines.
    pub intersection_half: f64,
    /// Static raster resolution, meters per cell.
    pub grid_res: f64,
    /// Fraction of interior road edges the generator tries to remove.
    pub edge_removal: f64,
    /// Traffic light green time per axis; the cycle is twice this.
    pub light_green_secs: f64,
}

impl Default for TownParams {
    fn default() -> Self {
        TownParams {
            block: 80.0,
            lane_width: 4.0,
            sidewalk_width: 6.0,
            intersection_half: 7.0,
            grid_res: 0.25,
            edge_removal: 0.25,
            light_green_secs: 10.0,
        }
    }
}

/// One directed lane of a road. `poly` runs from the upstream intersection
/// boundary to the stop point at the downstream boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: LaneId,
    pub road: usize,
    pub from_node: NodeId,
    pub to_node: NodeId,
    pub poly: Polyline,
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TurnKind {
    Left,
    Right,
    Straight,
}

/// Curved path through an intersection from one lane's end to another
/// lane's start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Connector {
    pub id: ConnId,
    pub from_lane: LaneId,
    pub to_lane: LaneId,
    pub node: NodeId,
    pub turn: TurnKind,
    pub poly: Polyline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoadAxis {
    EastWest,
    NorthSouth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub a: NodeId,
    pub b: NodeId,
    pub axis: RoadAxis,
}

/// One approach of a lit intersection: the incoming lane, its stop point
/// and the axis that decides the light phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Approach {
    pub lane_in: LaneId,
    /// Stop point: the incoming lane's end, on the lane centerline.
    pub stop_point: Vec2,
    /// Unit direction pointing into the intersection.
    pub dir_into: Vec2,
    /// Center of the road at the stop line (between both lanes).
    pub road_center: Vec2,
    pub axis: RoadAxis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub node: NodeId,
    pub center: Vec2,
    pub approaches: Vec<Approach>,
}

/// Pedestrian crossing: anchors on two sidewalk loops joined by a straight
/// path across the road.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingAnchor {
    pub loop_a: usize,
    pub s_a: f64,
    pub loop_b: usize,
    pub s_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub grass: [f32; 3],
    pub building: [f32; 3],
    pub road: [f32; 3],
    pub sidewalk: [f32; 3],
    pub marking: [f32; 3],
    pub crossing: [f32; 3],
    pub light_red: [f32; 3],
    pub light_green: [f32; 3],
    pub vehicle_variants: Vec<[f32; 3]>,
    pub pedestrian: [f32; 3],
    /// Per-surface texture amplitude.
    pub texture_amp: [f32; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticGrid {
    pub origin: Vec2,
    pub res: f64,
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl StaticGrid {
    pub fn surface_at(&self, p: Vec2) -> u8 {
        let cx = ((p.x - self.origin.x) / self.res).floor();
        let cy = ((p.y - self.origin.y) / self.res).floor();
        if cx < 0.0 || cy < 0.0 {
            return SURF_GRASS;
        }
        let (cx, cy) = (cx as usize, cy as usize);
        if cx >= self.w || cy >= self.h {
            return SURF_GRASS;
        }
        self.data[cy * self.w + cx]
    }

    fn fill_rect(&mut self, min: Vec2, max: Vec2, code: u8) {
        let x0 = (((min.x - self.origin.x) / self.res).floor().max(0.0)) as usize;
        let y0 = (((min.y - self.origin.y) / self.res).floor().max(0.0)) as usize;
        let x1 = (((max.x - self.origin.x) / self.res).ceil()).min(self.w as f64) as usize;
        let y1 = (((max.y - self.origin.y) / self.res).ceil()).min(self.h as f64) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                self.data[y * self.w + x] = code;
            }
        }
    }
}

/// Explicit layout recipe; `TownMap::generate` draws one from a seed, and
/// tests can hand-build small layouts directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridLayout {
    pub nx: usize,
    pub ny: usize,
    /// Interior edges removed from the full grid, as node-id pairs (a < b).
    pub removed_edges: Vec<(NodeId, NodeId)>,
    pub palette_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TownMap {
    pub layout_seed: u64,
    pub params: TownParams,
    pub nx: usize,
    pub ny: usize,
    pub node_pos: Vec<Vec2>,
    pub roads: Vec<Road>,
    pub lanes: Vec<Lane>,
    pub conns: Vec<Connector>,
    /// Outgoing connectors per lane.
    pub lane_out: Vec<Vec<ConnId>>,
    /// Lit intersections (grid degree >= 3) with stop lines and lights.
    pub intersections: Vec<Intersection>,
    /// Index into `intersections` per node, if lit.
    pub node_intersection: Vec<Option<usize>>,
    pub sidewalk_loops: Vec<Polyline>,
    pub crossing_anchors: Vec<CrossingAnchor>,
    pub buildings: Vec<Aabb>,
    pub palette: Palette,
    pub texture_seed: u64,
    pub grid: StaticGrid,
    pub bounds: Aabb,
}

/// A position on the lane graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub lane: LaneId,
    pub s: f64,
    pub pos: Vec2,
    pub heading: f64,
}

fn node_id(nx: usize, i: usize, j: usize) -> NodeId {
    j * nx + i
}

impl GridLayout {
    pub fn from_seed(seed: u64) -> GridLayout {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746f_776e);
        let nx = rng.gen_range(4..=5);
        let ny = rng.gen_range(4..=5);
        // Candidate removals: interior edges only, so the ring road always
        // exists and every node keeps degree >= 2.
        let mut candidates: Vec<(NodeId, NodeId)> = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                if i + 1 < nx && j > 0 && j + 1 < ny {
                    candidates.push((node_id(nx, i, j), node_id(nx, i + 1, j)));
                }
                if j + 1 < ny && i > 0 && i + 1 < nx {
                    candidates.push((node_id(nx, i, j), node_id(nx, i, j + 1)));
                }
            }
        }
        candidates.shuffle(&mut rng);
        let mut degree = vec![0usize; nx * ny];
        let mut edges: Vec<(NodeId, NodeId)> = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                if i + 1 < nx {
                    edges.push((node_id(nx, i, j), node_id(nx, i + 1, j)));
                }
                if j + 1 < ny {
                    edges.push((node_id(nx, i, j), node_id(nx, i, j + 1)));
                }
            }
        }
        for &(a, b) in &edges {
            degree[a] += 1;
            degree[b] += 1;
        }
        let target = (candidates.len() as f64 * 0.45).round() as usize;
        let mut removed = Vec::new();
        for &(a, b) in candidates.iter() {
            if removed.len() >= target {
                break;
            }
            if degree[a] > 2 && degree[b] > 2 {
                // Check connectivity without this edge.
                let kept: Vec<(NodeId, NodeId)> = edges
                    .iter()
                    .cloned()
                    .filter(|e| !removed.contains(e) && *e != (a, b))
                    .collect();
                if is_connected(nx * ny, &kept) {
                    removed.push((a, b));
                    degree[a] -= 1;
                    degree[b] -= 1;
                }
            }
        }
        GridLayout { nx, ny, removed_edges: removed, palette_seed: seed ^ 0x70a1 }
    }
}

fn is_connected(n: usize, edges: &[(NodeId, NodeId)]) -> bool {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                stack.push(v);
            }
        }
    }
    count == n
}

fn make_palette(seed: u64) -> Palette {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |base: [f32; 3], amt: f32| -> [f32; 3] {
        [
            (base[0] + rng.gen_range(-amt..amt)).clamp(0.02, 0.98),
            (base[1] + rng.gen_range(-amt..amt)).clamp(0.02, 0.98),
            (base[2] + rng.gen_range(-amt..amt)).clamp(0.02, 0.98),
        ]
    };
    let grass = jitter([0.22, 0.42, 0.16], 0.10);
    let building = jitter([0.45, 0.40, 0.38], 0.14);
    let road = jitter([0.32, 0.32, 0.34], 0.08);
    let sidewalk = jitter([0.58, 0.56, 0.52], 0.08);
    let marking = jitter([0.88, 0.86, 0.70], 0.06);
    let crossing = jitter([0.80, 0.80, 0.80], 0.05);
    // Vehicle color families stay recognizable across towns; only the shade
    // drifts with the palette seed.
    let families: [[f32; 3]; 6] = [
        [0.16, 0.16, 0.18],
        [0.85, 0.85, 0.88],
        [0.70, 0.12, 0.10],
        [0.12, 0.25, 0.62],
        [0.10, 0.50, 0.48],
        [0.78, 0.62, 0.12],
    ];
    let vehicle_variants = families.iter().map(|f| jitter(*f, 0.05)).collect();
    let pedestrian = jitter([0.85, 0.45, 0.20], 0.06);
    Palette {
        grass,
        building,
        road,
        sidewalk,
        marking,
        crossing,
        light_red: [0.92, 0.08, 0.08],
        light_green: [0.06, 0.85, 0.22],
        vehicle_variants,
        pedestrian,
        texture_amp: [0.10, 0.06, 0.035, 0.04, 0.02, 0.02],
    }
}

impl TownMap {
    pub fn generate(layout_seed: u64, params: TownParams) -> TownMap {
        let layout = GridLayout::from_seed(layout_seed);
        TownMap::from_layout(layout_seed, &layout, params)
    }

    pub fn from_layout(layout_seed: u64, layout: &GridLayout, params: TownParams) -> TownMap {
        let nx = layout.nx;
        let ny = layout.ny;
        let block = params.block;
        let margin = 30.0;
        let node_pos: Vec<Vec2> = (0..nx * ny)
            .map(|id| {
                let i = id % nx;
                let j = id / nx;
                Vec2::new(margin + i as f64 * block, margin + j as f64 * block)
            })
            .collect();

        // Road set: full grid minus removed interior edges.
        let mut roads = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                if i + 1 < nx {
                    let e = (node_id(nx, i, j), node_id(nx, i + 1, j));
                    if !layout.removed_edges.contains(&e) {
                        roads.push(Road { a: e.0, b: e.1, axis: RoadAxis::EastWest });
                    }
                }
                if j + 1 < ny {
                    let e = (node_id(nx, i, j), node_id(nx, i, j + 1));
                    if !layout.removed_edges.contains(&e) {
                        roads.push(Road { a: e.0, b: e.1, axis: RoadAxis::NorthSouth });
                    }
                }
            }
        }
        let mut degree = vec![0usize; nx * ny];
        for r in &roads {
            degree[r.a] += 1;
            degree[r.b] += 1;
        }

        // Directed lanes, offset to the right of the travel direction.
        let lw = params.lane_width;
        let ihs = params.intersection_half;
        let mut lanes: Vec<Lane> = Vec::new();
        for (ri, r) in roads.iter().enumerate() {
            for (from, to) in [(r.a, r.b), (r.b, r.a)] {
                let u = (node_pos[to] - node_pos[from]).normalized();
                let right = u.perp().scale(-lw / 2.0);
                let start = node_pos[from] + u.scale(ihs) + right;
                let end = node_pos[to] + u.scale(-ihs) + right;
                lanes.push(Lane {
                    id: lanes.len(),
                    road: ri,
                    from_node: from,
                    to_node: to,
                    poly: Polyline::new(vec![start, end]),
                    heading: u.heading(),
                });
            }
        }

        // Connectors: from every lane ending at a node to every lane leaving
        // it on a different road. Quadratic Bezier through the tangent
        // intersection keeps the path G1.
        let mut conns: Vec<Connector> = Vec::new();
        let mut lane_out = vec![Vec::new(); lanes.len()];
        for li in 0..lanes.len() {
            let node = lanes[li].to_node;
            for lo in 0..lanes.len() {
                if lanes[lo].from_node != node || lanes[lo].road == lanes[li].road {
                    continue;
                }
                let p_in = *lanes[li].poly.points.last().unwrap();
                let p_out = lanes[lo].poly.points[0];
                let d_in = Vec2::from_heading(lanes[li].heading);
                let d_out = Vec2::from_heading(lanes[lo].heading);
                let turn = classify_turn(lanes[li].heading, lanes[lo].heading);
                let poly = bezier_connector(p_in, d_in, p_out, d_out);
                lane_out[li].push(conns.len());
                conns.push(Connector { id: conns.len(), from_lane: li, to_lane: lo, node, turn, poly });
            }
        }

        // Lit intersections at degree >= 3 nodes.
        let mut intersections = Vec::new();
        let mut node_intersection = vec![None; nx * ny];
        for node in 0..nx * ny {
            if degree[node] < 3 {
                continue;
            }
            let mut approaches = Vec::new();
            for lane in &lanes {
                if lane.to_node == node {
                    let stop_point = *lane.poly.points.last().unwrap();
                    let dir_into = Vec2::from_heading(lane.heading);
                    let road_center = stop_point - dir_into.perp().scale(-lw / 2.0);
                    let axis = roads[lane.road].axis;
                    approaches.push(Approach { lane_in: lane.id, stop_point, dir_into, road_center, axis });
                }
            }
            node_intersection[node] = Some(intersections.len());
            intersections.push(Intersection { node, center: node_pos[node], approaches });
        }

        // Sidewalk loops per grid cell; pedestrians walk these rectangles.
        let walk_off = lw + params.sidewalk_width / 2.0;
        let mut sidewalk_loops = Vec::new();
        let mut cell_loop = vec![vec![usize::MAX; ny.saturating_sub(1)]; nx.saturating_sub(1)];
        for i in 0..nx.saturating_sub(1) {
            for j in 0..ny.saturating_sub(1) {
                let p00 = node_pos[node_id(nx, i, j)];
                let p11 = node_pos[node_id(nx, i + 1, j + 1)];
                let min = Vec2::new(p00.x + walk_off, p00.y + walk_off);
                let max = Vec2::new(p11.x - walk_off, p11.y - walk_off);
                cell_loop[i][j] = sidewalk_loops.len();
                sidewalk_loops.push(Polyline::new(vec![
                    Vec2::new(min.x, min.y),
                    Vec2::new(max.x, min.y),
                    Vec2::new(max.x, max.y),
                    Vec2::new(min.x, max.y),
                    Vec2::new(min.x, min.y),
                ]));
            }
        }

        // Crossing anchors: between vertically/horizontally adjacent cells,
        // across the shared road, near the lit intersections.
        let mut crossing_anchors = Vec::new();
        for i in 0..nx.saturating_sub(1) {
            for j in 0..ny.saturating_sub(1) {
                let la = cell_loop[i][j];
                // Cell to the right shares a NS road between nodes (i+1, j..j+1).
                if i + 2 < nx {
                    let lb = cell_loop[i + 1][j];
                    let e = (node_id(nx, i + 1, j), node_id(nx, i + 1, j + 1));
                    if roads.iter().any(|r| (r.a, r.b) == e) {
                        let cross_y = node_pos[e.0].y + ihs + 2.0;
                        let ax = node_pos[e.0].x - walk_off;
                        let bx = node_pos[e.0].x + walk_off;
                        let pa = Vec2::new(ax, cross_y);
                        let pb = Vec2::new(bx, cross_y);
                        let (s_a, _) = sidewalk_loops[la].project(pa);
                        let (s_b, _) = sidewalk_loops[lb].project(pb);
                        crossing_anchors.push(CrossingAnchor { loop_a: la, s_a, loop_b: lb, s_b });
                    }
                }
                // Cell above shares an EW road between nodes (i..i+1, j+1).
                if j + 2 < ny {
                    let lb = cell_loop[i][j + 1];
                    let e = (node_id(nx, i, j + 1), node_id(nx, i + 1, j + 1));
                    if roads.iter().any(|r| (r.a, r.b) == e) {
                        let cross_x = node_pos[e.0].x + ihs + 2.0;
                        let ay = node_pos[e.0].y - walk_off;
                        let by = node_pos[e.0].y + walk_off;
                        let pa = Vec2::new(cross_x, ay);
                        let pb = Vec2::new(cross_x, by);
                        let (s_a, _) = sidewalk_loops[la].project(pa);
                        let (s_b, _) = sidewalk_loops[lb].project(pb);
                        crossing_anchors.push(CrossingAnchor { loop_a: la, s_a, loop_b: lb, s_b });
                    }
                }
            }
        }

        // Buildings: a few axis-aligned blocks per cell, inset from roads.
        let mut brng = ChaCha8Rng::seed_from_u64(layout.palette_seed ^ 0xb11d);
        let inset = lw + params.sidewalk_width + 2.0;
        let mut buildings = Vec::new();
        for i in 0..nx.saturating_sub(1) {
            for j in 0..ny.saturating_sub(1) {
                let p00 = node_pos[node_id(nx, i, j)];
                let lo = Vec2::new(p00.x + inset, p00.y + inset);
                let hi = Vec2::new(p00.x + block - inset, p00.y + block - inset);
                let n_b = brng.gen_range(2..=3);
                for _ in 0..n_b {
                    let w = brng.gen_range(10.0..22.0);
                    let h = brng.gen_range(10.0..22.0);
                    let x = brng.gen_range(lo.x..(hi.x - w).max(lo.x + 0.1));
                    let y = brng.gen_range(lo.y..(hi.y - h).max(lo.y + 0.1));
                    buildings.push(Aabb::new(Vec2::new(x, y), Vec2::new(x + w, y + h)));
                }
            }
        }

        let palette = make_palette(layout.palette_seed);
        let bounds = Aabb::new(
            Vec2::ZERO,
            Vec2::new(2.0 * margin + (nx - 1) as f64 * block, 2.0 * margin + (ny - 1) as f64 * block),
        );

        let mut map = TownMap {
            layout_seed,
            params,
            nx,
            ny,
            node_pos,
            roads,
            lanes,
            conns,
            lane_out,
            intersections,
            node_intersection,
            sidewalk_loops,
            crossing_anchors,
            buildings,
            palette,
            texture_seed: layout.palette_seed ^ 0x7e97,
            grid: StaticGrid { origin: Vec2::ZERO, res: 0.0, w: 0, h: 0, data: Vec::new() },
            bounds,
        };
        map.rasterize_static();
        map
    }

    fn rasterize_static(&mut self) {
        let res = self.params.grid_res;
        let w = (self.bounds.max.x / res).ceil() as usize;
        let h = (self.bounds.max.y / res).ceil() as usize;
        let mut grid = StaticGrid { origin: Vec2::ZERO, res, w, h, data: vec![SURF_GRASS; w * h] };
        let lw = self.params.lane_width;
        let sw = self.params.sidewalk_width;
        let ihs = self.params.intersection_half;

        // Sidewalk strips along roads, then road surfaces over them.
        for r in &self.roads {
            let (a, b) = (self.node_pos[r.a], self.node_pos[r.b]);
            let u = (b - a).normalized();
            let n = u.perp();
            for side in [-1.0, 1.0] {
                let c0 = a + n.scale(side * (lw + sw / 2.0));
                let c1 = b + n.scale(side * (lw + sw / 2.0));
                let min = Vec2::new(c0.x.min(c1.x) - sw / 2.0, c0.y.min(c1.y) - sw / 2.0);
                let max = Vec2::new(c0.x.max(c1.x) + sw / 2.0, c0.y.max(c1.y) + sw / 2.0);
                grid.fill_rect(min, max, SURF_SIDEWALK);
            }
        }
        // Sidewalk pads at intersection corners.
        for node in 0..self.node_pos.len() {
            let p = self.node_pos[node];
            grid.fill_rect(
                Vec2::new(p.x - lw - sw, p.y - lw - sw),
                Vec2::new(p.x + lw + sw, p.y + lw + sw),
                SURF_SIDEWALK,
            );
        }
        for r in &self.roads {
            let (a, b) = (self.node_pos[r.a], self.node_pos[r.b]);
            let min = Vec2::new(a.x.min(b.x) - lw, a.y.min(b.y) - lw);
            let max = Vec2::new(a.x.max(b.x) + lw, a.y.max(b.y) + lw);
            grid.fill_rect(min, max, SURF_ROAD);
        }
        // Center line: dashed marking along each road, skipping intersections.
        for r in &self.roads {
            let (a, b) = (self.node_pos[r.a], self.node_pos[r.b]);
            let u = (b - a).normalized();
            let len = a.dist(b);
            let mut s = ihs;
            while s + 1.5 < len - ihs {
                let p0 = a + u.scale(s);
                let p1 = a + u.scale(s + 1.5);
                let min = Vec2::new(p0.x.min(p1.x) - 0.2, p0.y.min(p1.y) - 0.2);
                let max = Vec2::new(p0.x.max(p1.x) + 0.2, p0.y.max(p1.y) + 0.2);
                grid.fill_rect(min, max, SURF_MARKING);
                s += 3.0;
            }
        }
        // Pedestrian crossings just outside lit intersections.
        for inter in &self.intersections {
            for app in &inter.approaches {
                let c = app.road_center - app.dir_into.scale(2.0);
                let n = app.dir_into.perp();
                let half_across = lw;
                let min = Vec2::new(
                    (c.x - n.x.abs() * half_across) - app.dir_into.x.abs() * 0.7,
                    (c.y - n.y.abs() * half_across) - app.dir_into.y.abs() * 0.7,
                );
                let max = Vec2::new(
                    (c.x + n.x.abs() * half_across) + app.dir_into.x.abs() * 0.7,
                    (c.y + n.y.abs() * half_across) + app.dir_into.y.abs() * 0.7,
                );
                grid.fill_rect(min, max, SURF_CROSSING);
            }
        }
        // Buildings.
        for b in &self.buildings {
            grid.fill_rect(b.min, b.max, SURF_BUILDING);
        }
        self.grid = grid;
    }

    pub fn surface_at(&self, p: Vec2) -> u8 {
        self.grid.surface_at(p)
    }

    /// True when `p` lies inside the box of any intersection node
    /// (lit or pass-through); used to suspend lane-side infraction checks.
    pub fn in_intersection_box(&self, p: Vec2) -> bool {
        let ihs = self.params.intersection_half;
        self.node_pos
            .iter()
            .any(|c| (p.x - c.x).abs() <= ihs && (p.y - c.y).abs() <= ihs)
    }

    /// Road-frame query: returns (road index, along a->b unit, signed
    /// lateral with +left of a->b) for the nearest road within the road
    /// surface, skipping intersection boxes.
    pub fn road_frame_at(&self, p: Vec2) -> Option<(usize, Vec2, f64)> {
        if self.in_intersection_box(p) {
            return None;
        }
        let lw = self.params.lane_width;
        for (ri, r) in self.roads.iter().enumerate() {
            let (a, b) = (self.node_pos[r.a], self.node_pos[r.b]);
            let u = (b - a).normalized();
            let rel = p - a;
            let along = rel.dot(u);
            let lat = rel.dot(u.perp());
            if along >= 0.0 && along <= a.dist(b) && lat.abs() <= lw {
                return Some((ri, u, lat));
            }
        }
        None
    }

    pub fn sidewalk_at(&self, p: Vec2) -> bool {
        self.surface_at(p) == SURF_SIDEWALK
    }

    /// Sample waypoints along every lane at the given spacing.
    pub fn sample_waypoints(&self, spacing: f64) -> Vec<Waypoint> {
        let mut out = Vec::new();
        for lane in &self.lanes {
            let len = lane.poly.length();
            let mut s = 2.0;
            while s < len - 2.0 {
                out.push(Waypoint { lane: lane.id, s, pos: lane.poly.eval(s), heading: lane.heading });
                s += spacing;
            }
        }
        out
    }

    /// Signature invariant under graph isomorphism; two maps with different
    /// signatures are guaranteed non-isomorphic.
    pub fn graph_signature(&self) -> (usize, usize, Vec<usize>) {
        let mut degree = vec![0usize; self.node_pos.len()];
        for r in &self.roads {
            degree[r.a] += 1;
            degree[r.b] += 1;
        }
        degree.sort_unstable();
        (self.node_pos.len(), self.roads.len(), degree)
    }
}

fn classify_turn(h_in: f64, h_out: f64) -> TurnKind {
    let d = crate::geom::wrap_angle(h_out - h_in);
    if d > std::f64::consts::FRAC_PI_4 {
        TurnKind::Left
    } else if d < -std::f64::consts::FRAC_PI_4 {
        TurnKind::Right
    } else {
        TurnKind::Straight
    }
}

fn bezier_connector(p_in: Vec2, d_in: Vec2, p_out: Vec2, d_out: Vec2) -> Polyline {
    let cross = d_in.cross(d_out);
    if cross.abs() < 1e-9 {
        return Polyline::new(vec![p_in, p_out]);
    }
    // Control point: intersection of the entry and exit tangent lines.
    let rel = p_out - p_in;
    let t = rel.cross(d_out) / cross;
    let ctrl = p_in + d_in.scale(t);
    let mut pts = Vec::with_capacity(11);
    for k in 0..=10 {
        let u = k as f64 / 10.0;
        let a = p_in + (ctrl - p_in).scale(u);
        let b = ctrl + (p_out - ctrl).scale(u);
        pts.push(a + (b - a).scale(u));
    }
    Polyline::new(pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_map_is_well_formed() {
        let map = TownMap::generate(1, TownParams::default());
        assert!(map.roads.len() >= 10);
        assert_eq!(map.lanes.len(), map.roads.len() * 2);
        // Every lane ends somewhere with at least one outgoing connector.
        for lane in &map.lanes {
            assert!(
                !map.lane_out[lane.id].is_empty(),
                "lane {} has no outgoing connector",
                lane.id
            );
        }
        // Every lit intersection approach has exactly one stop point, and
        // each approach maps to a distinct incoming lane.
        for inter in &map.intersections {
            let mut lanes_in: Vec<LaneId> = inter.approaches.iter().map(|a| a.lane_in).collect();
            lanes_in.sort_unstable();
            lanes_in.dedup();
            assert_eq!(lanes_in.len(), inter.approaches.len());
            assert!(inter.approaches.len() >= 3);
        }
    }

    #[test]
    fn distinct_seeds_give_non_isomorphic_graphs() {
        let a = TownMap::generate(1, TownParams::default());
        let b = TownMap::generate(2, TownParams::default());
        assert_ne!(a.graph_signature(), b.graph_signature());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = TownMap::generate(7, TownParams::default());
        let b = TownMap::generate(7, TownParams::default());
        assert_eq!(a, b);
    }

    #[test]
    fn surfaces_painted_in_expected_places() {
        let map = TownMap::generate(1, TownParams::default());
        // Midpoint of the first road, on the right lane center: road surface.
        let r = &map.roads[0];
        let mid = (map.node_pos[r.a] + (map.node_pos[r.b] - map.node_pos[r.a]).scale(0.5)) + Vec2::new(0.0, -2.0);
        assert_eq!(map.surface_at(mid), SURF_ROAD);
        // Far corner: grass.
        assert_eq!(map.surface_at(Vec2::new(1.0, 1.0)), SURF_GRASS);
    }

    #[test]
    fn connector_turns_classified() {
        let map = TownMap::generate(1, TownParams::default());
        let mut kinds: Vec<TurnKind> = map.conns.iter().map(|c| c.turn).collect();
        kinds.dedup();
        assert!(map.conns.iter().any(|c| c.turn == TurnKind::Left));
        assert!(map.conns.iter().any(|c| c.turn == TurnKind::Right));
        assert!(map.conns.iter().any(|c| c.turn == TurnKind::Straight));
    }
}
