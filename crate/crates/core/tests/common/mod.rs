//! Brute-force reference geometry shared by the integration tests. Nothing
//! here calls into the crate's geometry code.

#![allow(dead_code)]

pub mod gradcheck;

use hydra_plan::metrics::MetricConfig;
use hydra_plan::world::{Agent, Footprint, Scenario, Trajectory};

pub const SUPERSAMPLE: usize = 10;
pub const BOUNDARY: f64 = 0.01;

pub type P = (f64, f64);

fn sub(a: P, b: P) -> P {
    (a.0 - b.0, a.1 - b.1)
}

fn cross(a: P, b: P) -> f64 {
    a.0 * b.1 - a.1 * b.0
}

fn dot(a: P, b: P) -> f64 {
    a.0 * b.0 + a.1 * b.1
}

/// Corners of a box centred at (x, y) with the given heading, counter-clockwise.
pub fn box_corners(x: f64, y: f64, heading: f64, hl: f64, hw: f64) -> [P; 4] {
    let (s, c) = heading.sin_cos();
    let local = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
    local.map(|(lx, ly)| (x + lx * c - ly * s, y + lx * s + ly * c))
}

/// Winding-number point-in-polygon; points on an edge count as inside.
pub fn inside_polygon(poly: &[P], p: P) -> bool {
    let n = poly.len();
    let mut winding = 0i32;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if segment_distance(p, a, b) == 0.0 {
            return true;
        }
        let side = cross(sub(b, a), sub(p, a));
        if a.1 <= p.1 {
            if b.1 > p.1 && side > 0.0 {
                winding += 1;
            }
        } else if b.1 <= p.1 && side < 0.0 {
            winding -= 1;
        }
    }
    winding != 0
}

pub fn segment_distance(p: P, a: P, b: P) -> f64 {
    let ab = sub(b, a);
    let len = dot(ab, ab);
    let t = if len > 0.0 { (dot(sub(p, a), ab) / len).clamp(0.0, 1.0) } else { 0.0 };
    let q = (a.0 + ab.0 * t, a.1 + ab.1 * t);
    (p.0 - q.0).hypot(p.1 - q.1)
}

fn orientation(a: P, b: P, c: P) -> f64 {
    cross(sub(b, a), sub(c, a))
}

fn on_segment(a: P, b: P, p: P) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

pub fn segments_cross(a: P, b: P, c: P, d: P) -> bool {
    let (o1, o2, o3, o4) = (orientation(a, b, c), orientation(a, b, d), orientation(c, d, a), orientation(c, d, b));
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0)) && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0)) {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

/// Exhaustive overlap test: any corner inside the other box or any pair of
/// edges crossing.
pub fn boxes_overlap(a: &[P; 4], b: &[P; 4]) -> bool {
    if a.iter().any(|&p| inside_polygon(b, p)) || b.iter().any(|&p| inside_polygon(a, p)) {
        return true;
    }
    (0..4).any(|i| (0..4).any(|j| segments_cross(a[i], a[(i + 1) % 4], b[j], b[(j + 1) % 4])))
}

/// Separation distance when apart, minus the penetration depth when
/// overlapping (separating-axis).
pub fn signed_clearance(a: &[P; 4], b: &[P; 4]) -> f64 {
    if boxes_overlap(a, b) {
        let mut depth = f64::INFINITY;
        for poly in [a, b] {
            for i in 0..2 {
                let e = sub(poly[i + 1], poly[i]);
                let axis = (-e.1, e.0);
                let norm = axis.0.hypot(axis.1);
                let proj = |q: &[P; 4]| {
                    let v: Vec<f64> = q.iter().map(|p| dot(*p, axis) / norm).collect();
                    (v.iter().cloned().fold(f64::INFINITY, f64::min), v.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                };
                let (a0, a1) = proj(a);
                let (b0, b1) = proj(b);
                depth = depth.min(a1.min(b1) - a0.max(b0));
            }
        }
        -depth
    } else {
        let mut d = f64::INFINITY;
        for i in 0..4 {
            for j in 0..4 {
                d = d.min(segment_distance(a[i], b[j], b[(j + 1) % 4]));
                d = d.min(segment_distance(b[j], a[i], a[(i + 1) % 4]));
            }
        }
        d
    }
}

fn lerp_angle(a: f64, b: f64, f: f64) -> f64 {
    let mut d = b - a;
    while d > std::f64::consts::PI {
        d -= 2.0 * std::f64::consts::PI;
    }
    while d < -std::f64::consts::PI {
        d += 2.0 * std::f64::consts::PI;
    }
    a + d * f
}

/// Pose (x, y, heading) at fractional step `j + m / SUPERSAMPLE`.
fn ego_at(traj: &Trajectory, j: usize, m: usize) -> (f64, f64, f64) {
    let a = traj.poses[j];
    if m == 0 {
        return (a.x, a.y, a.heading);
    }
    let b = traj.poses[j + 1];
    let f = m as f64 / SUPERSAMPLE as f64;
    (a.x + (b.x - a.x) * f, a.y + (b.y - a.y) * f, lerp_angle(a.heading, b.heading, f))
}

fn agent_box(agent: &Agent, t: f64) -> [P; 4] {
    let p = agent.initial_pose;
    let d = agent.velocity * t;
    let (s, c) = p.heading.sin_cos();
    box_corners(p.x + d * c, p.y + d * s, p.heading, agent.footprint.half_length, agent.footprint.half_width)
}

fn ego_box(x: f64, y: f64, h: f64, fp: &Footprint) -> [P; 4] {
    box_corners(x, y, h, fp.half_length, fp.half_width)
}

/// Oracle verdict for one binary metric.
#[derive(Debug, Clone, Copy)]
pub struct Verdict {
    /// Decision at the metric's own sampling instants.
    pub base: bool,
    /// Decision with 10x temporal supersampling.
    pub fine: bool,
    /// Smallest |clearance| seen at the base instants, meters.
    pub min_clearance: f64,
}

impl Verdict {
    pub fn value(&self) -> f64 {
        if self.fine {
            1.0
        } else {
            0.0
        }
    }

    pub fn is_boundary(&self) -> bool {
        self.min_clearance <= BOUNDARY || self.base != self.fine
    }
}

pub fn nc_oracle(s: &Scenario, traj: &Trajectory, cfg: &MetricConfig) -> Verdict {
    let fp = cfg.ego_footprint;
    let dt = traj.dt;
    let n = traj.len();
    let mut base_hit = false;
    let mut fine_hit = false;
    let mut clearance = f64::INFINITY;
    for j in 0..n {
        let steps = if j + 1 < n { SUPERSAMPLE } else { 1 };
        for m in 0..steps {
            let (x, y, h) = ego_at(traj, j, m);
            let t = (j as f64 + m as f64 / SUPERSAMPLE as f64) * dt;
            let e = ego_box(x, y, h, &fp);
            for a in &s.agents {
                let b = agent_box(a, t);
                let hit = boxes_overlap(&e, &b);
                fine_hit |= hit;
                if m == 0 {
                    base_hit |= hit;
                    clearance = clearance.min(signed_clearance(&e, &b).abs());
                }
            }
        }
    }
    Verdict { base: !base_hit, fine: !fine_hit, min_clearance: clearance }
}

/// Distance from `p` to the nearest polygon edge.
fn boundary_distance(poly: &[P], p: P) -> f64 {
    (0..poly.len()).map(|i| segment_distance(p, poly[i], poly[(i + 1) % poly.len()])).fold(f64::INFINITY, f64::min)
}

pub fn dac_oracle(s: &Scenario, traj: &Trajectory, cfg: &MetricConfig) -> Verdict {
    let fp = cfg.ego_footprint;
    let poly: Vec<P> = s.drivable_area.vertices().iter().map(|v| (v.x, v.y)).collect();
    let n = traj.len();
    let mut base_ok = true;
    let mut fine_ok = true;
    let mut clearance = f64::INFINITY;
    for j in 0..n {
        let steps = if j + 1 < n { SUPERSAMPLE } else { 1 };
        for m in 0..steps {
            let (x, y, h) = ego_at(traj, j, m);
            for c in ego_box(x, y, h, &fp) {
                let ok = inside_polygon(&poly, c);
                fine_ok &= ok;
                if m == 0 {
                    base_ok &= ok;
                    clearance = clearance.min(boundary_distance(&poly, c));
                }
            }
        }
    }
    Verdict { base: base_ok, fine: fine_ok, min_clearance: clearance }
}

/// Speed at step j: forward difference, backward at the last step.
fn speed(traj: &Trajectory, j: usize) -> f64 {
    let n = traj.len();
    if n < 2 {
        return 0.0;
    }
    let (a, b) = if j + 1 < n { (j, j + 1) } else { (j - 1, j) };
    let (p, q) = (traj.poses[a], traj.poses[b]);
    (q.x - p.x).hypot(q.y - p.y) / traj.dt
}

pub fn ttc_oracle(s: &Scenario, traj: &Trajectory, cfg: &MetricConfig) -> Verdict {
    let fp = cfg.ego_footprint;
    let dt = traj.dt;
    let fine_dt = dt / SUPERSAMPLE as f64;
    let n_fine = (cfg.ttc_horizon / fine_dt).round() as usize;
    let mut base_hit = false;
    let mut fine_hit = false;
    let mut clearance = f64::INFINITY;
    for j in 0..traj.len() {
        let p = traj.poses[j];
        let v = speed(traj, j);
        let (sn, cs) = p.heading.sin_cos();
        for q in 0..=n_fine {
            let ds = q as f64 * fine_dt;
            let e = ego_box(p.x + v * ds * cs, p.y + v * ds * sn, p.heading, &fp);
            let t = j as f64 * dt + ds;
            let on_base = q % SUPERSAMPLE == 0;
            for a in &s.agents {
                let b = agent_box(a, t);
                let hit = boxes_overlap(&e, &b);
                fine_hit |= hit;
                if on_base {
                    base_hit |= hit;
                    clearance = clearance.min(signed_clearance(&e, &b).abs());
                }
            }
        }
    }
    Verdict { base: !base_hit, fine: !fine_hit, min_clearance: clearance }
}

/// Random (scenario, world-frame trajectory) pair. Mixes kinematic samples
/// from the ego start with shifted and time-warped copies of the expert so
/// that collisions, near misses and road departures all occur.
pub fn random_case(seed: u64) -> (Scenario, Trajectory) {
    use hydra_plan::geom::Pose;
    use hydra_plan::vocab::{sample_trajectories, KinematicConfig};
    use hydra_plan::world::{generate_scenario, WorldConfig};
    use rand::{Rng, SeedableRng};

    let cfg = WorldConfig { agent_count: [1, 8], ..WorldConfig::default() };
    let scenario = generate_scenario(seed, &cfg).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let traj = match rng.gen_range(0..3) {
        0 | 1 => {
            let kin = KinematicConfig { yaw_rate_max: 0.6, ..KinematicConfig::default() };
            sample_trajectories(1, &kin, seed).unwrap().remove(0).to_world(&scenario.ego_start.pose)
        }
        _ => {
            let start = scenario.ego_start.pose;
            let lateral: f64 = rng.gen_range(-4.0..4.0);
            let warp: f64 = rng.gen_range(0.3..1.6);
            let expert = &scenario.expert_trajectory;
            let n = expert.len();
            let poses = (0..n)
                .map(|j| {
                    let s = (j as f64 * warp).min((n - 1) as f64);
                    let i = s.floor() as usize;
                    let f = s - i as f64;
                    let a = expert.poses[i];
                    let b = expert.poses[(i + 1).min(n - 1)];
                    let h = lerp_angle(a.heading, b.heading, f);
                    Pose::new(
                        a.x + (b.x - a.x) * f - lateral * start.heading.sin(),
                        a.y + (b.y - a.y) * f + lateral * start.heading.cos(),
                        h,
                    )
                })
                .collect();
            Trajectory::new(poses, expert.dt).unwrap()
        }
    };
    (scenario, traj)
}

/// A configuration small enough to run the whole pipeline in seconds.
pub fn small_config() -> hydra_plan::train::ExperimentConfig {
    use hydra_plan::model::EnvEncoder;
    use hydra_plan::train::*;
    let mut cfg = ExperimentConfig::default();
    cfg.model_seeds = vec![0, 1];
    cfg.splits = SplitConfig { train: 24, val: 8, test: 10 };
    cfg.vocab.n_samples = 400;
    cfg.vocab.kmeans.k = 16;
    cfg.model.d_model = 8;
    cfg.model.encoder = EnvEncoder::Patch { size: 16 };
    cfg.model.encoder_hidden = vec![8];
    cfg.model.traj_hidden = 8;
    cfg.model.ffn_hidden = 8;
    cfg.optim.epochs = 2;
    cfg.optim.batch_size = 8;
    cfg
}
