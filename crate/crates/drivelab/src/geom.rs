//! 2D geometry primitives shared by the simulator, oracle and benchmarks.

use serde::{Deserialize, Serialize};

/// 2D point / vector in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn from_heading(theta: f64) -> Self {
        Vec2::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product; positive when `o` is to the left.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn scale(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n > 0.0 {
            self.scale(1.0 / n)
        } else {
            Vec2::ZERO
        }
    }

    /// Rotate by `theta` radians counter-clockwise.
    pub fn rotated(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Perpendicular vector (90 degrees counter-clockwise).
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn heading(self) -> f64 {
        self.y.atan2(self.x)
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * std::f64::consts::PI);
    if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    } else if a <= -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

/// Oriented rectangle: center, heading of the long axis, half extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedRect {
    pub center: Vec2,
    pub heading: f64,
    /// Half length along the heading axis.
    pub half_len: f64,
    /// Half width across the heading axis.
    pub half_wid: f64,
}

impl OrientedRect {
    pub fn new(center: Vec2, heading: f64, half_len: f64, half_wid: f64) -> Self {
        OrientedRect { center, heading, half_len, half_wid }
    }

    /// Map a world point into the rectangle's local frame
    /// (x along heading, y across).
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        (p - self.center).rotated(-self.heading)
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= self.half_len && l.y.abs() <= self.half_wid
    }

    /// Exact Euclidean distance from a point to the rectangle (0 inside).
    pub fn distance_to_point(&self, p: Vec2) -> f64 {
        let l = self.to_local(p);
        let dx = (l.x.abs() - self.half_len).max(0.0);
        let dy = (l.y.abs() - self.half_wid).max(0.0);
        (dx * dx + dy * dy).sqrt()
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let f = Vec2::from_heading(self.heading).scale(self.half_len);
        let s = Vec2::from_heading(self.heading).perp().scale(self.half_wid);
        [
            self.center + f + s,
            self.center + f - s,
            self.center - f - s,
            self.center - f + s,
        ]
    }

    /// Separating-axis overlap test against another oriented rectangle.
    pub fn overlaps(&self, other: &OrientedRect) -> bool {
        let axes = [
            Vec2::from_heading(self.heading),
            Vec2::from_heading(self.heading).perp(),
            Vec2::from_heading(other.heading),
            Vec2::from_heading(other.heading).perp(),
        ];
        let ca = self.corners();
        let cb = other.corners();
        for ax in axes {
            let pa: Vec<f64> = ca.iter().map(|c| c.dot(ax)).collect();
            let pb: Vec<f64> = cb.iter().map(|c| c.dot(ax)).collect();
            let (min_a, max_a) = (pa.iter().cloned().fold(f64::INFINITY, f64::min), pa.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            let (min_b, max_b) = (pb.iter().cloned().fold(f64::INFINITY, f64::min), pb.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            if max_a < min_b || max_b < min_a {
                return false;
            }
        }
        true
    }

    /// Fraction of this rectangle's area covered by `pred`, estimated on a
    /// fixed deterministic sample grid.
    pub fn area_fraction_where(&self, nx: usize, ny: usize, mut pred: impl FnMut(Vec2) -> bool) -> f64 {
        let mut hit = 0usize;
        for i in 0..nx {
            for j in 0..ny {
                let fx = (i as f64 + 0.5) / nx as f64 * 2.0 - 1.0;
                let fy = (j as f64 + 0.5) / ny as f64 * 2.0 - 1.0;
                let p = self.center
                    + Vec2::from_heading(self.heading).scale(fx * self.half_len)
                    + Vec2::from_heading(self.heading).perp().scale(fy * self.half_wid);
                if pred(p) {
                    hit += 1;
                }
            }
        }
        hit as f64 / (nx * ny) as f64
    }
}

/// Axis-aligned rectangle, used for buildings and sidewalk strips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec2,
    pub max: Vec2,
}

impl Aabb {
    pub fn new(min: Vec2, max: Vec2) -> Self {
        Aabb { min, max }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new((self.min.x + self.max.x) * 0.5, (self.min.y + self.max.y) * 0.5)
    }
}

/// Polyline with precomputed cumulative arc length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<Vec2>,
    cum: Vec<f64>,
}

impl Polyline {
    pub fn new(points: Vec<Vec2>) -> Self {
        assert!(points.len() >= 2, "polyline needs at least two points");
        let mut cum = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in points.windows(2) {
            acc += w[0].dist(w[1]);
            cum.push(acc);
        }
        Polyline { points, cum }
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Point at arc length `s` (clamped to the ends).
    pub fn eval(&self, s: f64) -> Vec2 {
        let s = s.clamp(0.0, self.length());
        let idx = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        let idx = idx.min(self.points.len() - 2);
        let seg = self.cum[idx + 1] - self.cum[idx];
        if seg <= 0.0 {
            return self.points[idx];
        }
        let t = (s - self.cum[idx]) / seg;
        let a = self.points[idx];
        let b = self.points[idx + 1];
        a + (b - a).scale(t)
    }

    /// Tangent heading at arc length `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.length());
        let idx = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        let idx = idx.min(self.points.len() - 2);
        (self.points[idx + 1] - self.points[idx]).heading()
    }

    /// Project a point onto the polyline; returns (arc length, distance).
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        let mut best_s = 0.0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.points.len() - 1 {
            let a = self.points[i];
            let b = self.points[i + 1];
            let ab = b - a;
            let len2 = ab.dot(ab);
            let t = if len2 > 0.0 { ((p - a).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let q = a + ab.scale(t);
            let d = p.dist(q);
            if d < best_d {
                best_d = d;
                best_s = self.cum[i] + ab.norm() * t;
            }
        }
        (best_s, best_d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_distance_inside_is_zero() {
        let r = OrientedRect::new(Vec2::new(1.0, 2.0), 0.3, 2.0, 1.0);
        assert_eq!(r.distance_to_point(Vec2::new(1.0, 2.0)), 0.0);
    }

    #[test]
    fn rect_distance_axis_aligned() {
        let r = OrientedRect::new(Vec2::ZERO, 0.0, 2.0, 1.0);
        assert!((r.distance_to_point(Vec2::new(5.0, 0.0)) - 3.0).abs() < 1e-12);
        assert!((r.distance_to_point(Vec2::new(0.0, -4.0)) - 3.0).abs() < 1e-12);
        // corner
        let d = r.distance_to_point(Vec2::new(3.0, 2.0));
        assert!((d - (1.0f64 + 1.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rect_overlap_detects_rotation() {
        let a = OrientedRect::new(Vec2::ZERO, 0.0, 2.0, 1.0);
        let b = OrientedRect::new(Vec2::new(2.8, 0.0), std::f64::consts::FRAC_PI_4, 1.5, 0.5);
        assert!(a.overlaps(&b));
        let c = OrientedRect::new(Vec2::new(6.0, 0.0), 0.0, 1.0, 1.0);
        assert!(!a.overlaps(&c));
    }

    #[test]
    fn polyline_eval_and_project() {
        let pl = Polyline::new(vec![Vec2::ZERO, Vec2::new(10.0, 0.0), Vec2::new(10.0, 5.0)]);
        assert!((pl.length() - 15.0).abs() < 1e-12);
        let p = pl.eval(12.0);
        assert!((p.x - 10.0).abs() < 1e-12 && (p.y - 2.0).abs() < 1e-12);
        let (s, d) = pl.project(Vec2::new(4.0, 1.0));
        assert!((s - 4.0).abs() < 1e-12);
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        for k in -10..10 {
            let a = wrap_angle(0.5 + k as f64 * std::f64::consts::PI);
            assert!(a > -std::f64::consts::PI - 1e-12 && a <= std::f64::consts::PI + 1e-12);
        }
    }
}
