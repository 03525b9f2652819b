//! Planar geometry: poses, oriented rectangles, polygons and polylines.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

/// Wrap an angle into (−π, π].
pub fn normalize_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid may return exactly 2π for tiny negative inputs.
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn rotate(self, angle: f64) -> Point {
        let (s, c) = angle.sin_cos();
        Point::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn unit(angle: f64) -> Point {
        let (s, c) = angle.sin_cos();
        Point::new(c, s)
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

/// Planar pose. Heading is kept in (−π, π].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite()
    }

    /// Express `local` (given in this pose's frame) in the parent frame.
    pub fn compose(&self, local: &Pose) -> Pose {
        let p = self.position() + local.position().rotate(self.heading);
        Pose::new(p.x, p.y, self.heading + local.heading)
    }

    /// Express `world` (given in the parent frame) in this pose's frame.
    pub fn relative(&self, world: &Pose) -> Pose {
        let p = (world.position() - self.position()).rotate(-self.heading);
        Pose::new(p.x, p.y, world.heading - self.heading)
    }

    pub fn transform_point(&self, local: Point) -> Point {
        self.position() + local.rotate(self.heading)
    }
}

/// Rectangle centred on a pose, extents given as half length (along heading)
/// and half width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedRect {
    pub center: Point,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedRect {
    pub fn new(pose: &Pose, half_length: f64, half_width: f64) -> Self {
        Self {
            center: pose.position(),
            heading: pose.heading,
            half_length,
            half_width,
        }
    }

    /// Corners in counter-clockwise order starting front-left.
    pub fn corners(&self) -> [Point; 4] {
        let f = Point::unit(self.heading) * self.half_length;
        let l = Point::unit(self.heading + PI / 2.0) * self.half_width;
        let c = self.center;
        [c + f + l, c - f + l, c - f - l, c + f - l]
    }

    pub fn bounding_radius(&self) -> f64 {
        self.half_length.hypot(self.half_width)
    }

    /// Closed-set intersection test by the separating axis theorem; touching
    /// rectangles count as intersecting.
    pub fn intersects(&self, other: &OrientedRect) -> bool {
        let r = self.bounding_radius() + other.bounding_radius();
        if (self.center - other.center).norm_sq() > r * r {
            return false;
        }
        let axes = [
            Point::unit(self.heading),
            Point::unit(self.heading + PI / 2.0),
            Point::unit(other.heading),
            Point::unit(other.heading + PI / 2.0),
        ];
        let d = other.center - self.center;
        for axis in axes {
            let ra = self.projected_radius(axis);
            let rb = other.projected_radius(axis);
            if d.dot(axis).abs() > ra + rb {
                return false;
            }
        }
        true
    }

    fn projected_radius(&self, axis: Point) -> f64 {
        let f = Point::unit(self.heading);
        let l = Point::unit(self.heading + PI / 2.0);
        self.half_length * f.dot(axis).abs() + self.half_width * l.dot(axis).abs()
    }
}

/// Simple polygon with an edge index bucketed by y for fast point queries.
#[derive(Debug, Clone)]
pub struct Polygon {
    vertices: Vec<Point>,
    y_min: f64,
    bucket_height: f64,
    buckets: Vec<Vec<u32>>,
}

impl PartialEq for Polygon {
    fn eq(&self, other: &Self) -> bool {
        self.vertices == other.vertices
    }
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Self {
        let n = vertices.len();
        let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in &vertices {
            y_min = y_min.min(v.y);
            y_max = y_max.max(v.y);
        }
        let n_buckets = (n / 2).clamp(1, 512);
        let span = (y_max - y_min).max(1e-9);
        let bucket_height = span / n_buckets as f64;
        let mut buckets = vec![Vec::new(); n_buckets];
        if n >= 3 {
            for i in 0..n {
                let a = vertices[i];
                let b = vertices[(i + 1) % n];
                let lo = ((a.y.min(b.y) - y_min) / bucket_height).floor() as isize;
                let hi = ((a.y.max(b.y) - y_min) / bucket_height).floor() as isize;
                for bkt in lo.max(0)..=hi.min(n_buckets as isize - 1) {
                    buckets[bkt as usize].push(i as u32);
                }
            }
        }
        Self {
            vertices,
            y_min,
            bucket_height,
            buckets,
        }
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    /// Shoelace area; positive for counter-clockwise vertex order.
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| self.vertices[i].cross(self.vertices[(i + 1) % n]))
            .sum::<f64>()
            * 0.5
    }

    /// Even-odd crossing test with a +x ray (half-open edge rule).
    pub fn contains(&self, p: Point) -> bool {
        if self.vertices.len() < 3 || self.buckets.is_empty() {
            return false;
        }
        let b = ((p.y - self.y_min) / self.bucket_height).floor();
        if b < 0.0 || b >= self.buckets.len() as f64 {
            return false;
        }
        let n = self.vertices.len();
        let mut inside = false;
        for &i in &self.buckets[b as usize] {
            let a = self.vertices[i as usize];
            let c = self.vertices[(i as usize + 1) % n];
            if (a.y > p.y) != (c.y > p.y) {
                let x_cross = a.x + (p.y - a.y) / (c.y - a.y) * (c.x - a.x);
                if p.x < x_cross {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// No two non-adjacent edges intersect and no vertex is repeated.
    pub fn is_simple(&self) -> bool {
        let v = &self.vertices;
        let n = v.len();
        if n < 3 {
            return false;
        }
        for i in 0..n {
            let (a, b) = (v[i], v[(i + 1) % n]);
            for j in (i + 1)..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                let (c, d) = (v[j], v[(j + 1) % n]);
                if segments_intersect(a, b, c, d) {
                    return false;
                }
            }
        }
        true
    }
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b - a).cross(c - a)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed segment intersection.
pub fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// Polyline with cumulative arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<Point>,
    cumulative: Vec<f64>,
}

impl Polyline {
    pub fn new(points: Vec<Point>) -> Self {
        let mut cumulative = Vec::with_capacity(points.len());
        let mut s = 0.0;
        for (i, p) in points.iter().enumerate() {
            if i > 0 {
                s += (*p - points[i - 1]).norm();
            }
            cumulative.push(s);
        }
        Self { points, cumulative }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Arc length of the closest point on the polyline; ties resolve to the
    /// smaller arc length.
    pub fn project(&self, p: Point) -> f64 {
        if self.points.len() < 2 {
            return 0.0;
        }
        let mut best_d = f64::INFINITY;
        let mut best_s = 0.0;
        for i in 0..self.points.len() - 1 {
            let a = self.points[i];
            let ab = self.points[i + 1] - a;
            let len_sq = ab.norm_sq();
            let t = if len_sq > 0.0 {
                ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let d = (a + ab * t - p).norm_sq();
            if d < best_d {
                best_d = d;
                best_s = self.cumulative[i] + t * len_sq.sqrt();
            }
        }
        best_s
    }

    /// Point and tangent heading at arc length `s` (clamped to the ends).
    pub fn sample(&self, s: f64) -> (Point, f64) {
        let n = self.points.len();
        if n == 1 {
            return (self.points[0], 0.0);
        }
        let s = s.clamp(0.0, self.length());
        let i = match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        };
        let a = self.points[i];
        let b = self.points[i + 1];
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let t = if seg > 0.0 {
            (s - self.cumulative[i]) / seg
        } else {
            0.0
        };
        let d = b - a;
        (a + d * t, d.y.atan2(d.x))
    }
}
