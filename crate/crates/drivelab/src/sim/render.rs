//! Ego-centric rendering: an 88x200 top-down strip with the long axis
//! pointing ahead of the vehicle. The image pass applies the photometric
//! weather nuisances; the segmentation pass reads the same geometry and is
//! weather-blind by construction.

use super::map::{
    surface_class, CLASS_PEDESTRIAN, CLASS_TRAFFIC_SIGN, CLASS_VEHICLE, NUM_CLASSES, SURF_BUILDING,
    SURF_CROSSING, SURF_GRASS, SURF_MARKING, SURF_ROAD, SURF_SIDEWALK,
};
use super::world::LightPhase;
use super::{AgentKind, WorldState};
use crate::geom::{OrientedRect, Vec2};
use serde::{Deserialize, Serialize};

pub const IMG_H: usize = 88;
pub const IMG_W: usize = 200;
/// Meters per pixel.
pub const IMG_RES: f64 = 0.2;
/// Distance behind the ego center covered by the strip.
pub const IMG_BACK: f64 = 5.0;

/// 8-bit RGB observation, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsImage {
    pub data: Vec<u8>,
}

impl ObsImage {
    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let i = (r * IMG_W + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Values in [0,1]; exact inverse of the stored quantization.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 255.0).collect()
    }
}

/// Per-pixel 6-class labels, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegMask {
    pub labels: Vec<u8>,
}

impl SegMask {
    pub fn label(&self, r: usize, c: usize) -> u8 {
        self.labels[r * IMG_W + c]
    }

    pub fn one_hot_f32(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; NUM_CLASSES * IMG_H * IMG_W];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize * IMG_H * IMG_W + i] = 1.0;
        }
        out
    }
}

/// Pixel center in the ego frame: +x ahead, +y left.
pub fn pixel_local(r: usize, c: usize) -> Vec2 {
    Vec2::new(
        (c as f64 + 0.5) * IMG_RES - IMG_BACK,
        (IMG_H as f64 / 2.0 - r as f64 - 0.5) * IMG_RES,
    )
}

/// World position seen by pixel (r, c).
pub fn pixel_world(world: &WorldState, r: usize, c: usize) -> Vec2 {
    let ego = world.ego();
    ego.position + pixel_local(r, c).rotated(ego.heading)
}

fn hash64(a: u64, b: u64, c: u64) -> u64 {
    let mut x = a
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(c.wrapping_mul(0x94d0_49bb_1331_11eb));
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    x
}

fn unit_f32(h: u64) -> f32 {
    (h >> 40) as f32 / (1u64 << 24) as f32
}

/// Deterministic value noise in [-1, 1] keyed on a 0.5 m world cell.
fn texture(world_seed: u64, p: Vec2) -> f32 {
    let cx = (p.x / 0.5).floor() as i64 as u64;
    let cy = (p.y / 0.5).floor() as i64 as u64;
    unit_f32(hash64(cx, cy, world_seed)) * 2.0 - 1.0
}

/// Approximately standard-normal noise from four uniforms.
fn gauss(h1: u64, h2: u64) -> f32 {
    let u = unit_f32(h1) + unit_f32(h2) + unit_f32(h1.rotate_left(17)) + unit_f32(h2.rotate_left(29));
    (u - 2.0) / 0.577_350_3
}

struct Frame {
    classes: Vec<u8>,
    colors: Vec<[f32; 3]>,
}

fn render_core(world: &WorldState) -> Frame {
    let map = &world.map;
    let pal = &map.palette;
    let mut classes = vec![0u8; IMG_H * IMG_W];
    let mut colors = vec![[0f32; 3]; IMG_H * IMG_W];

    // Stop bands near the ego, with their live phase color.
    let ego = world.ego();
    let mut bands: Vec<(OrientedRect, [f32; 3])> = Vec::new();
    for (ii, inter) in map.intersections.iter().enumerate() {
        if inter.center.dist(ego.position) > 60.0 {
            continue;
        }
        for app in &inter.approaches {
            let center = app.stop_point - app.dir_into.scale(0.6);
            let rect = OrientedRect::new(center, app.dir_into.heading(), 0.5, map.params.lane_width / 2.0);
            let color = match world.light_phase(ii, app.axis) {
                LightPhase::Red => pal.light_red,
                LightPhase::Green => pal.light_green,
            };
            bands.push((rect, color));
        }
    }
    // Agents near the ego; painter order vehicles (and ego) then pedestrians.
    let mut vehicles: Vec<(OrientedRect, [f32; 3])> = Vec::new();
    let mut peds: Vec<OrientedRect> = Vec::new();
    for (i, a) in world.agents.iter().enumerate() {
        if a.position.dist(ego.position) > 60.0 {
            continue;
        }
        match a.kind {
            AgentKind::Ego | AgentKind::Vehicle => {
                let variant = world.vehicle_variant(i) % pal.vehicle_variants.len();
                vehicles.push((a.footprint(), pal.vehicle_variants[variant]));
            }
            AgentKind::Pedestrian => peds.push(a.footprint()),
        }
    }

    for r in 0..IMG_H {
        for c in 0..IMG_W {
            let idx = r * IMG_W + c;
            let p = ego.position + pixel_local(r, c).rotated(ego.heading);
            let surf = map.surface_at(p);
            let (base, amp) = match surf {
                SURF_GRASS => (pal.grass, pal.texture_amp[0]),
                SURF_BUILDING => (pal.building, pal.texture_amp[1]),
                SURF_ROAD => (pal.road, pal.texture_amp[2]),
                SURF_SIDEWALK => (pal.sidewalk, pal.texture_amp[3]),
                SURF_MARKING => (pal.marking, pal.texture_amp[4]),
                SURF_CROSSING => (pal.crossing, pal.texture_amp[5]),
                _ => (pal.grass, 0.0),
            };
            let mut class = surface_class(surf);
            let t = 1.0 + amp * texture(map.texture_seed, p);
            let mut color = [base[0] * t, base[1] * t, base[2] * t];

            for (rect, bc) in &bands {
                if rect.contains(p) {
                    class = CLASS_TRAFFIC_SIGN;
                    color = *bc;
                    break;
                }
            }
            for (rect, vc) in &vehicles {
                if rect.contains(p) {
                    class = CLASS_VEHICLE;
                    color = *vc;
                    break;
                }
            }
            for rect in &peds {
                if rect.contains(p) {
                    class = CLASS_PEDESTRIAN;
                    color = pal.pedestrian;
                    break;
                }
            }
            classes[idx] = class;
            colors[idx] = color;
        }
    }
    Frame { classes, colors }
}

/// Render the RGB observation with weather applied; returns the image and
/// the ego speed measurement.
pub fn render_observation(world: &WorldState) -> (ObsImage, f64) {
    let frame = render_core(world);
    (apply_weather(world, frame.colors), world.ego().speed)
}

/// Render ground-truth segmentation. Same camera frame as the observation;
/// weather never reaches this path.
pub fn render_segmentation(world: &WorldState) -> SegMask {
    let frame = render_core(world);
    SegMask { labels: frame.classes }
}

/// One shared geometry pass for collectors that need both outputs.
pub fn render_both(world: &WorldState) -> (ObsImage, SegMask, f64) {
    let frame = render_core(world);
    let img = apply_weather(world, frame.colors);
    (img, SegMask { labels: frame.classes }, world.ego().speed)
}

fn apply_weather(world: &WorldState, colors: Vec<[f32; 3]>) -> ObsImage {
    let w = &world.weather;
    let clock_bits = world.clock.to_bits();
    let mut data = Vec::with_capacity(IMG_H * IMG_W * 3);

    // Rain streaks: short bright diagonals at hashed positions.
    let mut rain = vec![0.0f32; IMG_H * IMG_W];
    for k in 0..w.rain_density {
        let h = hash64(k as u64 + 1, clock_bits, 0xfa11);
        let r0 = (h % IMG_H as u64) as i64;
        let c0 = ((h >> 16) % IMG_W as u64) as i64;
        let len = 4 + (h >> 32) % 6;
        for t in 0..len {
            let r = r0 + t as i64;
            let c = c0 + (t / 2) as i64;
            if r >= 0 && (r as usize) < IMG_H && c >= 0 && (c as usize) < IMG_W {
                rain[r as usize * IMG_W + c as usize] = 0.75;
            }
        }
    }

    for idx in 0..IMG_H * IMG_W {
        let c = colors[idx];
        for ch in 0..3 {
            let mut v = c[ch] * w.tint[ch] as f32 + w.brightness as f32;
            if w.noise_sigma > 0.0 {
                let h1 = hash64(idx as u64, clock_bits, 0x5eed + ch as u64);
                let h2 = hash64(idx as u64 ^ 0xabcd, clock_bits, 0x17 + ch as u64);
                v += w.noise_sigma as f32 * gauss(h1, h2);
            }
            let rv = rain[idx];
            if rv > 0.0 {
                v = v * 0.45 + rv;
            }
            data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    ObsImage { data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{create_world, Control, WeatherParams};

    #[test]
    fn identity_weather_is_pure_function_of_geometry() {
        let w = create_world(1, WeatherParams::identity(), 3, 4, 7).unwrap();
        let (a, speed_a) = render_observation(&w);
        let (b, speed_b) = render_observation(&w);
        assert_eq!(a, b);
        assert_eq!(speed_a, speed_b);
    }

    #[test]
    fn weather_changes_image_but_not_segmentation() {
        let mut wa = create_world(1, WeatherParams::train_set()[0].clone(), 3, 4, 7).unwrap();
        let mut wb = wa.clone();
        wb.weather = WeatherParams::train_set()[1].clone();
        for _ in 0..5 {
            wa.step(Control::new(0.0, 0.6, 0.0), 0.1).unwrap();
            wb.step(Control::new(0.0, 0.6, 0.0), 0.1).unwrap();
        }
        let (ia, _) = render_observation(&wa);
        let (ib, _) = render_observation(&wb);
        assert_ne!(ia, ib, "different weather must change the image");
        assert_eq!(render_segmentation(&wa), render_segmentation(&wb));
    }

    #[test]
    fn all_labels_within_six_classes() {
        let w = create_world(1, WeatherParams::identity(), 5, 8, 7).unwrap();
        let seg = render_segmentation(&w);
        assert!(seg.labels.iter().all(|&l| l < NUM_CLASSES as u8));
    }

    #[test]
    fn vehicle_pixel_takes_vehicle_palette_color() {
        let mut w = create_world(1, WeatherParams::identity(), 0, 0, 7).unwrap();
        // Plant an NPC 8 m directly ahead of the ego on the same heading.
        let ego = w.ego().clone();
        let lane = w.map.lanes.iter().find(|l| {
            let (_, d) = l.poly.project(ego.position);
            d < 0.5 && (l.heading - ego.heading).abs() < 1e-6
        });
        let lane = lane.expect("ego starts on a lane").id;
        let (s, _) = w.map.lanes[lane].poly.project(ego.position);
        w.spawn_vehicle_at(lane, s + 8.0, 0.0);
        let npc_pos = w.agents[1].position;

        // Geometric projection oracle: invert the camera transform by hand.
        let rel = (npc_pos - ego.position).rotated(-ego.heading);
        let c = ((rel.x + IMG_BACK) / IMG_RES - 0.5).round() as usize;
        let r = (IMG_H as f64 / 2.0 - 0.5 - rel.y / IMG_RES).round() as usize;

        let (img, _) = render_observation(&w);
        let seg = render_segmentation(&w);
        assert_eq!(seg.label(r, c), CLASS_VEHICLE);
        let variant = w.vehicle_variant(1);
        let expect = w.map.palette.vehicle_variants[variant];
        let px = img.pixel(r, c);
        for ch in 0..3 {
            let want = (expect[ch].clamp(0.0, 1.0) * 255.0).round() as u8;
            assert_eq!(px[ch], want);
        }
    }

    #[test]
    fn pedestrian_overrides_road_in_painter_order() {
        let mut w = create_world(1, WeatherParams::identity(), 0, 0, 7).unwrap();
        let ego = w.ego().clone();
        // Walk a pedestrian across the lane directly ahead.
        let ahead = ego.position + crate::geom::Vec2::from_heading(ego.heading).scale(6.0);
        let side = crate::geom::Vec2::from_heading(ego.heading).perp().scale(10.0);
        w.spawn_pedestrian_at(ahead, ahead + side);
        let seg = render_segmentation(&w);
        let rel = (ahead - ego.position).rotated(-ego.heading);
        let c = ((rel.x + IMG_BACK) / IMG_RES - 0.5).round() as usize;
        let r = (IMG_H as f64 / 2.0 - 0.5 - rel.y / IMG_RES).round() as usize;
        assert_eq!(seg.label(r, c), CLASS_PEDESTRIAN);
    }
}
