//! Synthetic 2D driving world: scenario generation, constant-velocity agents
//! and the degraded raster observation the student sees.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{normalize_angle, OrientedRect, Point, Polygon, Polyline, Pose};

/// Rectangle half extents in the body frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub half_length: f64,
    pub half_width: f64,
}

impl Footprint {
    pub const EGO: Footprint = Footprint {
        half_length: 2.2,
        half_width: 0.95,
    };

    pub fn rect_at(&self, pose: &Pose) -> OrientedRect {
        OrientedRect::new(pose, self.half_length, self.half_width)
    }

    pub fn corners_at(&self, pose: &Pose) -> [Point; 4] {
        self.rect_at(pose).corners()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>, dt: f64) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::config("trajectory needs at least one pose"));
        }
        if !(dt > 0.0) {
            return Err(Error::config(format!("trajectory dt must be > 0, got {dt}")));
        }
        if poses.iter().any(|p| !p.is_finite()) {
            return Err(Error::config("trajectory contains non-finite poses"));
        }
        Ok(Self { poses, dt })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.poses.len() as f64 * self.dt
    }

    /// Map every pose from `frame`-local coordinates into the parent frame.
    pub fn to_world(&self, frame: &Pose) -> Trajectory {
        Trajectory {
            poses: self.poses.iter().map(|p| frame.compose(p)).collect(),
            dt: self.dt,
        }
    }

    /// Map every pose from the parent frame into `frame`-local coordinates.
    pub fn to_local(&self, frame: &Pose) -> Trajectory {
        Trajectory {
            poses: self.poses.iter().map(|p| frame.relative(p)).collect(),
            dt: self.dt,
        }
    }

    /// Stationary trajectory of `h` copies of `pose`.
    pub fn stationary(pose: Pose, h: usize, dt: f64) -> Trajectory {
        Trajectory {
            poses: vec![pose; h],
            dt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub initial_pose: Pose,
    /// Signed speed along the initial heading, m/s.
    pub velocity: f64,
    pub footprint: Footprint,
}

impl Agent {
    pub fn rect_at(&self, t: f64) -> OrientedRect {
        self.footprint.rect_at(&agent_pose_at(self, t))
    }
}

/// Constant-velocity motion along the initial heading.
pub fn agent_pose_at(agent: &Agent, t: f64) -> Pose {
    let p = agent.initial_pose;
    let d = agent.velocity * t;
    Pose {
        x: p.x + d * p.heading.cos(),
        y: p.y + d * p.heading.sin(),
        heading: p.heading,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoStart {
    pub pose: Pose,
    pub speed: f64,
}

mod polygon_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Polygon, s: S) -> std::result::Result<S::Ok, S::Error> {
        p.vertices().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Polygon, D::Error> {
        Ok(Polygon::new(Vec::<Point>::deserialize(d)?))
    }
}

mod polyline_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Polyline, s: S) -> std::result::Result<S::Ok, S::Error> {
        p.points().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Polyline, D::Error> {
        Ok(Polyline::new(Vec::<Point>::deserialize(d)?))
    }
}

/// Ground-truth world: what the rule-based teacher sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    /// Counter-clockwise simple polygon.
    #[serde(with = "polygon_serde")]
    pub drivable_area: Polygon,
    #[serde(with = "polyline_serde")]
    pub route_centerline: Polyline,
    pub agents: Vec<Agent>,
    pub ego_start: EgoStart,
    pub expert_trajectory: Trajectory,
}

/// Inclusive numeric range, written in config files as `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl From<[f64; 2]> for Range {
    fn from([min, max]: [f64; 2]) -> Self {
        Range { min, max }
    }
}

impl From<Range> for [f64; 2] {
    fn from(r: Range) -> Self {
        [r.min, r.max]
    }
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..=self.max)
        } else {
            self.min
        }
    }

    pub(crate) fn validate(&self, name: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.min > self.max {
            return Err(Error::config(format!(
                "{name}: invalid range [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub horizon_steps: usize,
    pub dt: f64,
    pub road_width: Range,
    pub max_curvature: f64,
    /// Number of constant-curvature pieces ahead of the ego.
    pub curvature_segments: usize,
    pub segment_length: Range,
    /// Cap on accumulated heading change along the route, radians.
    pub max_total_turn: f64,
    pub route_behind: f64,
    pub route_ahead: f64,
    pub agent_count: [usize; 2],
    pub agent_speed: Range,
    pub stationary_agent_prob: f64,
    pub oncoming_agent_prob: f64,
    pub ego_speed: Range,
    pub speed_limit: Range,
    pub lateral_offset_max: f64,
    pub heading_error_max: f64,
    pub ego_footprint: Footprint,
    /// Extra clearance kept between agents and the expert when placing agents.
    pub agent_expert_margin: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            horizon_steps: 40,
            dt: 0.1,
            road_width: Range::new(7.0, 10.0),
            max_curvature: 0.05,
            curvature_segments: 3,
            segment_length: Range::new(15.0, 40.0),
            max_total_turn: PI / 2.0,
            route_behind: 40.0,
            route_ahead: 120.0,
            agent_count: [0, 5],
            agent_speed: Range::new(0.0, 8.0),
            stationary_agent_prob: 0.3,
            oncoming_agent_prob: 0.25,
            ego_speed: Range::new(2.0, 12.0),
            speed_limit: Range::new(6.0, 14.0),
            lateral_offset_max: 0.8,
            heading_error_max: 0.12,
            ego_footprint: Footprint::EGO,
            agent_expert_margin: 0.3,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_steps <= 1 {
            return Err(Error::config(format!(
                "horizon_steps must be > 1, got {}",
                self.horizon_steps
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("dt must be positive"));
        }
        self.road_width.validate("road_width")?;
        if !(self.road_width.min > 0.0) {
            return Err(Error::config(format!(
                "road width must be positive, got {}",
                self.road_width.min
            )));
        }
        if self.road_width.min <= 2.0 * self.ego_footprint.half_width {
            return Err(Error::config("road narrower than the ego vehicle"));
        }
        if !(self.max_curvature >= 0.0) || self.max_curvature * self.road_width.max >= 1.0 {
            return Err(Error::config(
                "max_curvature must be >= 0 and keep the road edge radius positive",
            ));
        }
        self.segment_length.validate("segment_length")?;
        if !(self.segment_length.min > 0.0) {
            return Err(Error::config("segment_length must be positive"));
        }
        self.agent_speed.validate("agent_speed")?;
        self.ego_speed.validate("ego_speed")?;
        self.speed_limit.validate("speed_limit")?;
        if self.ego_speed.min < 0.0 || self.speed_limit.min <= 0.0 {
            return Err(Error::config("speeds must be non-negative"));
        }
        if self.agent_count[0] > self.agent_count[1] {
            return Err(Error::config("agent_count min exceeds max"));
        }
        if !(self.route_behind > 0.0 && self.route_ahead > 0.0) {
            return Err(Error::config("route extents must be positive"));
        }
        let needed = self.speed_limit.max.max(self.ego_speed.max) * self.dt * self.horizon_steps as f64;
        if self.route_ahead < needed + 10.0 {
            return Err(Error::config(format!(
                "route_ahead {} too short for the horizon (needs {:.1})",
                self.route_ahead,
                needed + 10.0
            )));
        }
        if self.ego_footprint.half_length <= 0.0 || self.ego_footprint.half_width <= 0.0 {
            return Err(Error::config("ego footprint extents must be positive"));
        }
        for (name, p) in [
            ("stationary_agent_prob", self.stationary_agent_prob),
            ("oncoming_agent_prob", self.oncoming_agent_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0,1]")));
            }
        }
        Ok(())
    }
}

/// Expert controller limits; kept well inside the comfort limits.
const EXPERT_ACCEL: f64 = 1.2;
const EXPERT_DECEL: f64 = 1.8;
const EXPERT_JERK: f64 = 2.0;
const EXPERT_LAT_ACCEL: f64 = 1.8;
const EXPERT_YAW_RATE: f64 = 0.8;
const EXPERT_SUBSTEPS: usize = 10;
const ROUTE_SPACING: f64 = 1.0;
const MAX_ATTEMPTS: usize = 200;

struct RoadSketch {
    center: Vec<Point>,
    curvature: Vec<f64>,
    half_width: f64,
}

fn build_road(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> RoadSketch {
    let width = cfg.road_width.sample(rng);
    let n_behind = (cfg.route_behind / ROUTE_SPACING).ceil() as usize;
    let n_ahead = (cfg.route_ahead / ROUTE_SPACING).ceil() as usize;

    // Curvature profile ahead: piecewise constant, total turn capped.
    let mut pieces = Vec::new();
    let mut remaining = cfg.route_ahead;
    for i in 0..cfg.curvature_segments.max(1) {
        let len = if i + 1 == cfg.curvature_segments.max(1) {
            remaining
        } else {
            cfg.segment_length.sample(rng).min(remaining)
        };
        let kappa = if cfg.max_curvature > 0.0 {
            rng.gen_range(-cfg.max_curvature..=cfg.max_curvature)
        } else {
            0.0
        };
        pieces.push((len, kappa));
        remaining -= len;
        if remaining <= 0.0 {
            break;
        }
    }

    let mut center = Vec::with_capacity(n_behind + n_ahead + 1);
    let mut curvature = Vec::with_capacity(n_behind + n_ahead + 1);
    for i in 0..n_behind {
        center.push(Point::new(-((n_behind - i) as f64) * ROUTE_SPACING, 0.0));
        curvature.push(0.0);
    }
    let mut p = Point::new(0.0, 0.0);
    let mut heading = 0.0f64;
    center.push(p);
    curvature.push(pieces[0].1);
    let mut piece = 0;
    let mut piece_end = pieces[0].0;
    let mut s = 0.0;
    for _ in 0..n_ahead {
        while s >= piece_end && piece + 1 < pieces.len() {
            piece += 1;
            piece_end += pieces[piece].0;
        }
        let mut kappa = pieces[piece].1;
        if (heading + kappa * ROUTE_SPACING).abs() > cfg.max_total_turn {
            kappa = 0.0;
        }
        // Midpoint heading keeps the chord on the arc.
        let mid = heading + 0.5 * kappa * ROUTE_SPACING;
        p = p + Point::unit(mid) * ROUTE_SPACING;
        heading += kappa * ROUTE_SPACING;
        s += ROUTE_SPACING;
        center.push(p);
        curvature.push(kappa);
    }
    RoadSketch {
        center,
        curvature,
        half_width: width / 2.0,
    }
}

fn road_polygon(road: &RoadSketch) -> Vec<Point> {
    let n = road.center.len();
    let normal_at = |i: usize| {
        let a = road.center[i.saturating_sub(1)];
        let b = road.center[(i + 1).min(n - 1)];
        let d = b - a;
        Point::unit(d.y.atan2(d.x) + PI / 2.0)
    };
    // Every other centerline sample; always keep both ends.
    let mut idx: Vec<usize> = (0..n).step_by(2).collect();
    if *idx.last().unwrap() != n - 1 {
        idx.push(n - 1);
    }
    let mut verts = Vec::with_capacity(idx.len() * 2);
    for &i in &idx {
        verts.push(road.center[i] - normal_at(i) * road.half_width);
    }
    for &i in idx.iter().rev() {
        verts.push(road.center[i] + normal_at(i) * road.half_width);
    }
    verts
}

/// Pure-pursuit follower along the centerline with a jerk-limited speed profile.
fn pure_pursuit_expert(
    cfg: &WorldConfig,
    road: &RoadSketch,
    route: &Polyline,
    start: &Pose,
    v0: f64,
    speed_limit: f64,
) -> Vec<Pose> {
    let h = cfg.horizon_steps;
    let sub_dt = cfg.dt / EXPERT_SUBSTEPS as f64;
    let origin_index = (cfg.route_behind / ROUTE_SPACING).ceil();
    let curvature_ahead = |s: f64, dist: f64| -> f64 {
        let i0 = ((s / ROUTE_SPACING) + origin_index).floor().max(0.0) as usize;
        let i1 = (((s + dist) / ROUTE_SPACING) + origin_index).ceil() as usize;
        road.curvature[i0.min(road.curvature.len() - 1)..=i1.min(road.curvature.len() - 1)]
            .iter()
            .fold(0.0f64, |m, k| m.max(k.abs()))
    };

    let (mut x, mut y, mut heading) = (start.x, start.y, start.heading);
    let mut v = v0;
    let mut a = 0.0f64;
    let mut poses = Vec::with_capacity(h);
    poses.push(Pose::new(x, y, heading));
    for step in 1..h * EXPERT_SUBSTEPS {
        let pos = Point::new(x, y);
        // Route arc length measured from the ego start (route origin at s=0).
        let s_abs = route.project(pos);
        let s = s_abs - origin_index * ROUTE_SPACING;
        let lookahead = (0.9 * v).max(5.0);
        let (target, _) = route.sample(s_abs + lookahead);
        let alpha = normalize_angle((target - pos).y.atan2((target - pos).x) - heading);
        let kappa_cmd = 2.0 * alpha.sin() / lookahead;
        let yaw_rate = (v * kappa_cmd).clamp(-EXPERT_YAW_RATE, EXPERT_YAW_RATE);

        let k_max = curvature_ahead(s, 2.0 * v + 10.0);
        let v_curve = if k_max > 1e-9 {
            (EXPERT_LAT_ACCEL / k_max).sqrt()
        } else {
            f64::INFINITY
        };
        let v_target = speed_limit.min(v_curve);
        let a_des = ((v_target - v) / 1.5).clamp(-EXPERT_DECEL, EXPERT_ACCEL);
        a += (a_des - a).clamp(-EXPERT_JERK * sub_dt, EXPERT_JERK * sub_dt);
        if v <= 0.0 && a < 0.0 {
            a = 0.0;
        }
        v = (v + a * sub_dt).max(0.0);

        x += v * heading.cos() * sub_dt;
        y += v * heading.sin() * sub_dt;
        heading = normalize_angle(heading + yaw_rate * sub_dt);
        if step % EXPERT_SUBSTEPS == 0 {
            poses.push(Pose::new(x, y, heading));
        }
    }
    poses
}

pub(crate) fn footprint_inside(area: &Polygon, footprint: &Footprint, pose: &Pose) -> bool {
    footprint
        .corners_at(pose)
        .iter()
        .all(|c| area.contains(*c))
}

fn place_agents(
    cfg: &WorldConfig,
    rng: &mut ChaCha8Rng,
    route: &Polyline,
    half_width: f64,
    start: &Pose,
    expert: &[Pose],
) -> Vec<Agent> {
    let [lo, hi] = cfg.agent_count;
    let n = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let origin = cfg.route_behind;
    let ego_rect = OrientedRect::new(
        start,
        cfg.ego_footprint.half_length + 1.0,
        cfg.ego_footprint.half_width + 0.5,
    );
    let margin = cfg.agent_expert_margin;
    let expert_rects: Vec<OrientedRect> = expert
        .iter()
        .map(|p| {
            OrientedRect::new(
                p,
                cfg.ego_footprint.half_length + margin,
                cfg.ego_footprint.half_width + margin,
            )
        })
        .collect();

    let mut agents: Vec<Agent> = Vec::with_capacity(n);
    for _ in 0..n {
        for _attempt in 0..20 {
            let s = rng.gen_range(-15.0..=70.0);
            let lateral = rng.gen_range(-(half_width + 1.0)..=(half_width + 1.0));
            let (c, tangent) = route.sample(origin + s);
            let oncoming = rng.gen_bool(cfg.oncoming_agent_prob);
            let heading = tangent + if oncoming { PI } else { 0.0 } + rng.gen_range(-0.05..=0.05);
            let speed = if rng.gen_bool(cfg.stationary_agent_prob) {
                0.0
            } else {
                cfg.agent_speed.sample(rng)
            };
            let footprint = Footprint {
                half_length: rng.gen_range(2.0..=2.6),
                half_width: rng.gen_range(0.85..=1.05),
            };
            let pos = c + Point::unit(tangent + PI / 2.0) * lateral;
            let agent = Agent {
                initial_pose: Pose::new(pos.x, pos.y, heading),
                velocity: speed,
                footprint,
            };
            let r0 = agent.rect_at(0.0);
            if r0.intersects(&ego_rect) || agents.iter().any(|o| o.rect_at(0.0).intersects(&r0)) {
                continue;
            }
            let hits_expert = expert_rects
                .iter()
                .enumerate()
                .any(|(j, er)| agent.rect_at(j as f64 * cfg.dt).intersects(er));
            if hits_expert {
                continue;
            }
            agents.push(agent);
            break;
        }
    }
    agents
}

/// Deterministic scenario for `seed`. Invalid draws (expert leaving the road,
/// self-intersecting road) are rejected and redrawn from the same stream.
pub fn generate_scenario(seed: u64, cfg: &WorldConfig) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let road = build_road(cfg, &mut rng);
        let polygon = Polygon::new(road_polygon(&road));
        let route = Polyline::new(road.center.clone());
        if !polygon.is_simple() || polygon.signed_area() <= 0.0 {
            continue;
        }
        let lateral = rng.gen_range(-cfg.lateral_offset_max..=cfg.lateral_offset_max);
        let heading_err = rng.gen_range(-cfg.heading_error_max..=cfg.heading_error_max);
        let start_local = Pose::new(0.0, lateral, heading_err);
        let v0 = cfg.ego_speed.sample(&mut rng);
        let limit = cfg.speed_limit.sample(&mut rng);
        let expert = pure_pursuit_expert(cfg, &road, &route, &start_local, v0, limit);
        let inside = expert.iter().all(|p| {
            polygon.contains(p.position()) && footprint_inside(&polygon, &cfg.ego_footprint, p)
        });
        if !inside || expert.iter().any(|p| !p.is_finite()) {
            continue;
        }
        let agents = place_agents(cfg, &mut rng, &route, road.half_width, &start_local, &expert);

        // Random placement of the whole scene in the global frame.
        let frame = Pose::new(
            rng.gen_range(-500.0..=500.0),
            rng.gen_range(-500.0..=500.0),
            rng.gen_range(-PI..=PI),
        );
        let map_point = |p: &Point| frame.transform_point(*p);
        let area = Polygon::new(polygon.vertices().iter().map(map_point).collect());
        let centerline = Polyline::new(route.points().iter().map(map_point).collect());
        let agents = agents
            .into_iter()
            .map(|a| Agent {
                initial_pose: frame.compose(&a.initial_pose),
                ..a
            })
            .collect();
        let expert = Trajectory::new(expert, cfg.dt)?.to_world(&frame);
        // Recheck after the rigid transform: rounding can move a corner.
        if !expert
            .poses
            .iter()
            .all(|p| footprint_inside(&area, &cfg.ego_footprint, p))
        {
            continue;
        }
        return Ok(Scenario {
            id: format!("scn-{seed:010}"),
            drivable_area: area,
            route_centerline: centerline,
            agents,
            ego_start: EgoStart {
                pose: expert.poses[0],
                speed: v0,
            },
            expert_trajectory: expert,
        });
    }
    Err(Error::config(format!(
        "no valid scenario for seed {seed} after {MAX_ATTEMPTS} attempts; loosen the world config"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub grid_size: usize,
    pub cell_size: f64,
    /// Per-cell dropout probability.
    pub dropout: f64,
    /// Half-width of the additive uniform noise.
    pub additive: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            grid_size: 32,
            cell_size: 2.5,
            dropout: 0.3,
            additive: 0.2,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 16 {
            return Err(Error::config("raster grid size must be >= 16"));
        }
        if !(self.cell_size > 0.0) {
            return Err(Error::config("raster cell size must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.dropout) || !(self.additive >= 0.0) {
            return Err(Error::config("noise dropout must lie in [0,1], additive >= 0"));
        }
        Ok(())
    }

    /// Ego-frame coordinates of cell (row, col): rows run along the ego
    /// heading, columns to the ego's left.
    pub fn cell_center(&self, row: usize, col: usize) -> Point {
        let half = self.grid_size as f64 / 2.0;
        Point::new(
            (row as f64 - half + 0.5) * self.cell_size,
            (col as f64 - half + 0.5) * self.cell_size,
        )
    }

    /// Cell containing an ego-frame point, if it falls on the grid.
    pub fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        let half = self.grid_size as f64 / 2.0;
        let r = (p.x / self.cell_size + half).floor();
        let c = (p.y / self.cell_size + half).floor();
        let g = self.grid_size as f64;
        (r >= 0.0 && r < g && c >= 0.0 && c < g).then(|| (r as usize, c as usize))
    }
}

pub const EGO_STATUS_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub grid_size: usize,
    pub cell_size: f64,
    /// Channel-major, then row-major: `[channel][row][col]`.
    pub bev_raster: Vec<f64>,
    /// (speed, yaw rate, route heading error, signed lateral offset).
    pub ego_status: [f64; EGO_STATUS_DIM],
}

impl Observation {
    pub const CHANNELS: usize = 2;

    pub fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.grid_size + row) * self.grid_size + col
    }

    pub fn value(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.bev_raster[self.index(channel, row, col)]
    }
}

/// Ego status derived from the scenario's start state and route.
pub fn ego_status(scenario: &Scenario) -> [f64; EGO_STATUS_DIM] {
    let ego = scenario.ego_start.pose;
    let expert = &scenario.expert_trajectory;
    let yaw_rate = if expert.len() > 1 {
        normalize_angle(expert.poses[1].heading - ego.heading) / expert.dt
    } else {
        0.0
    };
    let route = &scenario.route_centerline;
    let s = route.project(ego.position());
    let (c, tangent) = route.sample(s);
    let offset = (ego.position() - c).dot(Point::unit(tangent + PI / 2.0));
    [
        scenario.ego_start.speed,
        yaw_rate,
        normalize_angle(ego.heading - tangent),
        offset,
    ]
}

/// Ego-centred, ego-aligned two-channel raster with dropout and additive noise.
pub fn render_observation(scenario: &Scenario, noise: &NoiseConfig, seed: u64) -> Observation {
    let g = noise.grid_size;
    let ego = scenario.ego_start.pose;
    let mut raster = vec![0.0; Observation::CHANNELS * g * g];
    for row in 0..g {
        for col in 0..g {
            let local = noise.cell_center(row, col);
            let world = ego.transform_point(local);
            if scenario.drivable_area.contains(world) {
                raster[row * g + col] = 1.0;
            }
            let occupied = scenario.agents.iter().any(|a| {
                let rel = (world - a.initial_pose.position()).rotate(-a.initial_pose.heading);
                rel.x.abs() <= a.footprint.half_length && rel.y.abs() <= a.footprint.half_width
            });
            if occupied {
                raster[g * g + row * g + col] = 1.0;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in raster.iter_mut() {
        // Draw both variates unconditionally so the stream layout is fixed.
        let drop: f64 = rng.gen();
        let jitter: f64 = rng.gen::<f64>() * 2.0 - 1.0;
        if drop < noise.dropout {
            *v = 0.0;
        }
        *v = (*v + jitter * noise.additive).clamp(0.0, 1.0);
    }
    Observation {
        grid_size: g,
        cell_size: noise.cell_size,
        bev_raster: raster,
        ego_status: ego_status(scenario),
    }
}

pub fn write_scenarios(path: &Path, scenarios: &[Scenario]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in scenarios {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scenarios(path: &Path) -> Result<Vec<Scenario>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Scenario = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig::default();
        let a = generate_scenario(7, &cfg).unwrap();
        let b = generate_scenario(7, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_scenario(8, &cfg).unwrap();
        assert_ne!(a.id, c.id);
    }

    #[test]
    fn zero_agent_range_yields_no_agents() {
        let cfg = WorldConfig {
            agent_count: [0, 0],
            ..WorldConfig::default()
        };
        for seed in 0..20 {
            assert!(generate_scenario(seed, &cfg).unwrap().agents.is_empty());
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_width = WorldConfig {
            road_width: Range::new(0.0, 5.0),
            ..WorldConfig::default()
        };
        assert!(matches!(generate_scenario(1, &bad_width), Err(Error::Config(_))));
        let bad_h = WorldConfig {
            horizon_steps: 1,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_scenario(1, &bad_h), Err(Error::Config(_))));
    }

    #[test]
    fn scenario_invariants_hold() {
        let cfg = WorldConfig::default();
        for seed in 0..50 {
            let s = generate_scenario(seed, &cfg).unwrap();
            assert!(s.drivable_area.is_simple());
            assert!(s.drivable_area.signed_area() > 0.0);
            assert_eq!(s.expert_trajectory.len(), cfg.horizon_steps);
            assert!((s.expert_trajectory.horizon() - 4.0).abs() < 1e-12);
            assert_eq!(s.ego_start.pose, s.expert_trajectory.poses[0]);
            for p in &s.expert_trajectory.poses {
                assert!(s.drivable_area.contains(p.position()));
                assert!(p.heading > -PI && p.heading <= PI);
            }
        }
    }

    #[test]
    fn agent_motion_is_constant_velocity() {
        let agent = Agent {
            initial_pose: Pose::new(1.0, 2.0, 0.0),
            velocity: 2.0,
            footprint: Footprint {
                half_length: 2.0,
                half_width: 1.0,
            },
        };
        assert_eq!(agent_pose_at(&agent, 0.0), agent.initial_pose);
        let p = agent_pose_at(&agent, 1.5);
        assert!((p.x - 4.0).abs() < 1e-12);
        assert_eq!(p.y, 2.0);
        let still = Agent {
            velocity: 0.0,
            ..agent.clone()
        };
        assert_eq!(agent_pose_at(&still, 12.3), still.initial_pose);
    }

    #[test]
    fn observation_values_and_determinism() {
        let cfg = WorldConfig::default();
        let noise = NoiseConfig::default();
        let s = generate_scenario(3, &cfg).unwrap();
        let a = render_observation(&s, &noise, 11);
        let b = render_observation(&s, &noise, 11);
        assert_eq!(a, b);
        assert_eq!(a.bev_raster.len(), 2 * noise.grid_size * noise.grid_size);
        assert!(a.bev_raster.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.ego_status.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn full_dropout_clears_agent_channel() {
        let cfg = WorldConfig {
            agent_count: [4, 4],
            ..WorldConfig::default()
        };
        let noise = NoiseConfig {
            dropout: 1.0,
            additive: 0.0,
            ..NoiseConfig::default()
        };
        let s = generate_scenario(5, &cfg).unwrap();
        let o = render_observation(&s, &noise, 1);
        assert!(o.bev_raster.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clean_raster_marks_agent_cells() {
        let cfg = WorldConfig {
            agent_count: [3, 5],
            ..WorldConfig::default()
        };
        let noise = NoiseConfig {
            dropout: 0.0,
            additive: 0.0,
            ..NoiseConfig::default()
        };
        let mut checked = 0;
        for seed in 0..10 {
            let s = generate_scenario(seed, &cfg).unwrap();
            let o = render_observation(&s, &noise, 0);
            let ego = s.ego_start.pose;
            for a in &s.agents {
                let local = ego.relative(&a.initial_pose).position();
                if let Some((r, c)) = noise.cell_of(local) {
                    // Move to the cell centre; only test cells whose centre is
                    // inside the agent rectangle.
                    let centre = ego.transform_point(noise.cell_center(r, c));
                    let rel = (centre - a.initial_pose.position()).rotate(-a.initial_pose.heading);
                    if rel.x.abs() <= a.footprint.half_length && rel.y.abs() <= a.footprint.half_width {
                        assert_eq!(o.value(1, r, c), 1.0);
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 0);
    }
}
