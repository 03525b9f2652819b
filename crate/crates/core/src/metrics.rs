//! Rule-based teacher: closed-loop sub-metrics for a trajectory in a world,
//! PDM aggregation, and offline simulation of the whole vocabulary.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{normalize_angle, OrientedRect, Point, Polyline};
use crate::util::{self, put_f64s, put_u32, Reader};
use crate::vocab::Vocabulary;
use crate::world::{Agent, Footprint, Scenario, Trajectory};

pub const NUM_METRICS: usize = 5;
pub const METRIC_NAMES: [&str; NUM_METRICS] = ["nc", "dac", "ttc", "comfort", "ep"];

/// What a teacher needs to know about the world.
pub trait DrivingWorld {
    fn is_drivable(&self, p: Point) -> bool;
    fn agents(&self) -> &[Agent];
    fn route(&self) -> &Polyline;
    /// Trajectory whose route progress normalizes ego progress.
    fn progress_reference(&self) -> &Trajectory;
}

impl DrivingWorld for Scenario {
    fn is_drivable(&self, p: Point) -> bool {
        self.drivable_area.contains(p)
    }

    fn agents(&self) -> &[Agent] {
        &self.agents
    }

    fn route(&self) -> &Polyline {
        &self.route_centerline
    }

    fn progress_reference(&self) -> &Trajectory {
        &self.expert_trajectory
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComfortLimits {
    pub accel_max: f64,
    pub jerk_max: f64,
    pub yaw_rate_max: f64,
}

impl Default for ComfortLimits {
    fn default() -> Self {
        Self {
            accel_max: 2.4,
            jerk_max: 4.0,
            yaw_rate_max: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub ego_footprint: Footprint,
    /// TTC projection horizon, seconds.
    pub ttc_horizon: f64,
    pub comfort: ComfortLimits,
    /// Expert progress below this (meters) makes EP trivially 1.
    pub progress_epsilon: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            ego_footprint: Footprint::EGO,
            ttc_horizon: 1.0,
            comfort: ComfortLimits::default(),
            progress_epsilon: 0.1,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.comfort;
        if !(self.ttc_horizon > 0.0) {
            return Err(Error::config("TTC horizon must be > 0"));
        }
        if !(c.accel_max > 0.0 && c.jerk_max > 0.0 && c.yaw_rate_max > 0.0) {
            return Err(Error::config("comfort limits must be > 0"));
        }
        if self.ego_footprint.half_length <= 0.0 || self.ego_footprint.half_width <= 0.0 {
            return Err(Error::config("ego footprint extents must be positive"));
        }
        Ok(())
    }
}

/// Teacher sub-scores; the first four are 0 or 1, `ep` lies in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubScores {
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub comfort: f64,
    pub ep: f64,
}

impl SubScores {
    pub const PERFECT: SubScores = SubScores {
        nc: 1.0,
        dac: 1.0,
        ttc: 1.0,
        comfort: 1.0,
        ep: 1.0,
    };

    /// Column order (NC, DAC, TTC, C, EP).
    pub fn to_array(self) -> [f64; NUM_METRICS] {
        [self.nc, self.dac, self.ttc, self.comfort, self.ep]
    }

    pub fn from_array(a: [f64; NUM_METRICS]) -> Self {
        Self {
            nc: a[0],
            dac: a[1],
            ttc: a[2],
            comfort: a[3],
            ep: a[4],
        }
    }

    pub fn is_valid(&self) -> bool {
        let binary = |v: f64| v == 0.0 || v == 1.0;
        binary(self.nc)
            && binary(self.dac)
            && binary(self.ttc)
            && binary(self.comfort)
            && (0.0..=1.0).contains(&self.ep)
    }
}

/// PDM score without the driving-direction term.
pub fn pdm_score(s: &SubScores) -> f64 {
    s.nc * s.dac * (5.0 * s.ttc + 2.0 * s.comfort + 5.0 * s.ep) / 12.0
}

fn flag(ok: bool) -> f64 {
    if ok {
        1.0
    } else {
        0.0
    }
}

/// Axis-aligned box as (min, max).
type Aabb = (Point, Point);

fn aabb_of(points: impl Iterator<Item = Point>, pad: f64) -> Aabb {
    let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    (lo - Point::new(pad, pad), hi + Point::new(pad, pad))
}

fn aabb_disjoint(a: &Aabb, b: &Aabb) -> bool {
    a.1.x < b.0.x || b.1.x < a.0.x || a.1.y < b.0.y || b.1.y < a.0.y
}

/// Agents whose swept box over `[0, t_end]` can meet the ego box.
fn candidate_agents<'a>(agents: &'a [Agent], ego_box: &Aabb, t_end: f64) -> Vec<&'a Agent> {
    agents
        .iter()
        .filter(|a| {
            let r = a.footprint.half_length.hypot(a.footprint.half_width);
            let b = aabb_of(
                [a.rect_at(0.0).center, a.rect_at(t_end).center].into_iter(),
                r,
            );
            !aabb_disjoint(ego_box, &b)
        })
        .collect()
}

/// 1 unless the ego footprint overlaps an agent at one of the trajectory's
/// timesteps.
pub fn no_collision(world: &impl DrivingWorld, traj: &Trajectory, cfg: &MetricConfig) -> f64 {
    let fp = cfg.ego_footprint;
    let ego_box = aabb_of(
        traj.poses.iter().map(|p| p.position()),
        fp.half_length.hypot(fp.half_width),
    );
    let t_end = (traj.len() - 1) as f64 * traj.dt;
    let agents = candidate_agents(world.agents(), &ego_box, t_end);
    if agents.is_empty() {
        return 1.0;
    }
    for (j, pose) in traj.poses.iter().enumerate() {
        let ego = fp.rect_at(pose);
        let t = j as f64 * traj.dt;
        if agents.iter().any(|a| a.rect_at(t).intersects(&ego)) {
            return 0.0;
        }
    }
    1.0
}

/// 1 iff all four footprint corners are drivable at every timestep.
pub fn drivable_area_compliance(world: &impl DrivingWorld, traj: &Trajectory, cfg: &MetricConfig) -> f64 {
    let fp = cfg.ego_footprint;
    flag(traj.poses.iter().all(|p| {
        fp.corners_at(p).iter().all(|c| world.is_drivable(*c))
    }))
}

/// Instantaneous speed at each step: forward difference, backward at the end.
pub fn step_speeds(traj: &Trajectory) -> Vec<f64> {
    let n = traj.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut v: Vec<f64> = traj
        .poses
        .windows(2)
        .map(|w| (w[1].position() - w[0].position()).norm() / traj.dt)
        .collect();
    v.push(v[n - 2]);
    v
}

/// Number of projection samples (including the current instant) for `tau`.
pub fn ttc_samples(tau: f64, dt: f64) -> usize {
    (tau / dt).round() as usize + 1
}

/// 1 unless, from some timestep, a constant-speed projection of the ego along
/// its heading over `tau` meets a constant-velocity agent.
pub fn time_to_collision(world: &impl DrivingWorld, traj: &Trajectory, cfg: &MetricConfig) -> f64 {
    let fp = cfg.ego_footprint;
    let dt = traj.dt;
    let tau = cfg.ttc_horizon;
    let n_proj = ttc_samples(tau, dt);
    let speeds = step_speeds(traj);

    let reach = |j: usize| {
        let p = &traj.poses[j];
        p.position() + Point::unit(p.heading) * (speeds[j] * (n_proj - 1) as f64 * dt)
    };
    let ego_box = aabb_of(
        (0..traj.len()).flat_map(|j| [traj.poses[j].position(), reach(j)]),
        fp.half_length.hypot(fp.half_width),
    );
    let t_end = ((traj.len() - 1) + (n_proj - 1)) as f64 * dt;
    let agents = candidate_agents(world.agents(), &ego_box, t_end);
    if agents.is_empty() {
        return 1.0;
    }
    for (j, pose) in traj.poses.iter().enumerate() {
        let dir = Point::unit(pose.heading);
        for s in 0..n_proj {
            let offset = speeds[j] * s as f64 * dt;
            let ego = OrientedRect {
                center: pose.position() + dir * offset,
                heading: pose.heading,
                half_length: fp.half_length,
                half_width: fp.half_width,
            };
            let t = (j + s) as f64 * dt;
            if agents.iter().any(|a| a.rect_at(t).intersects(&ego)) {
                return 0.0;
            }
        }
    }
    1.0
}

/// Finite-difference longitudinal acceleration, jerk and yaw rate.
pub struct Kinematics {
    pub accel: Vec<f64>,
    pub jerk: Vec<f64>,
    pub yaw_rate: Vec<f64>,
}

pub fn finite_difference_kinematics(traj: &Trajectory) -> Kinematics {
    let dt = traj.dt;
    let speeds: Vec<f64> = traj
        .poses
        .windows(2)
        .map(|w| (w[1].position() - w[0].position()).norm() / dt)
        .collect();
    let accel: Vec<f64> = speeds.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    let jerk = accel.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    let yaw_rate = traj
        .poses
        .windows(2)
        .map(|w| normalize_angle(w[1].heading - w[0].heading) / dt)
        .collect();
    Kinematics {
        accel,
        jerk,
        yaw_rate,
    }
}

/// Inclusive comparison with slack for finite-difference rounding.
fn within(value: f64, limit: f64) -> bool {
    value.abs() <= limit + 1e-9 * limit.max(1.0)
}

pub fn comfort(traj: &Trajectory, limits: &ComfortLimits) -> f64 {
    let k = finite_difference_kinematics(traj);
    flag(
        k.accel.iter().all(|&a| within(a, limits.accel_max))
            && k.jerk.iter().all(|&j| within(j, limits.jerk_max))
            && k.yaw_rate.iter().all(|&w| within(w, limits.yaw_rate_max)),
    )
}

fn route_progress(route: &Polyline, traj: &Trajectory) -> f64 {
    let first = traj.poses.first().unwrap().position();
    let last = traj.poses.last().unwrap().position();
    route.project(last) - route.project(first)
}

/// Route progress relative to the reference trajectory, clamped to [0, 1].
pub fn ego_progress(world: &impl DrivingWorld, traj: &Trajectory, cfg: &MetricConfig) -> f64 {
    let route = world.route();
    let reference = route_progress(route, world.progress_reference());
    if reference <= cfg.progress_epsilon {
        return 1.0;
    }
    (route_progress(route, traj) / reference).clamp(0.0, 1.0)
}

/// All five sub-metrics for a trajectory already in the world frame.
pub fn score_trajectory(world: &impl DrivingWorld, traj: &Trajectory, cfg: &MetricConfig) -> SubScores {
    SubScores {
        nc: no_collision(world, traj, cfg),
        dac: drivable_area_compliance(world, traj, cfg),
        ttc: time_to_collision(world, traj, cfg),
        comfort: comfort(traj, &cfg.comfort),
        ep: ego_progress(world, traj, cfg),
    }
}

/// Teacher labels for one scenario, aligned with a vocabulary by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherLabels {
    pub scenario_id: String,
    pub vocab_hash: String,
    pub scores: Vec<SubScores>,
}

impl TeacherLabels {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn pdm(&self) -> Vec<f64> {
        self.scores.iter().map(pdm_score).collect()
    }
}

/// Score every vocabulary entry, mapped from the ego frame into the world by
/// `ego_frame`. Output order follows the vocabulary regardless of scheduling.
pub fn simulate_vocabulary_in<W: DrivingWorld + Sync>(
    world: &W,
    ego_frame: &crate::geom::Pose,
    vocab: &Vocabulary,
    cfg: &MetricConfig,
) -> Vec<SubScores> {
    vocab
        .trajectories()
        .par_iter()
        .map(|t| score_trajectory(world, &t.to_world(ego_frame), cfg))
        .collect()
}

pub fn simulate_vocabulary(scenario: &Scenario, vocab: &Vocabulary, cfg: &MetricConfig) -> TeacherLabels {
    TeacherLabels {
        scenario_id: scenario.id.clone(),
        vocab_hash: vocab.content_hash(),
        scores: simulate_vocabulary_in(scenario, &scenario.ego_start.pose, vocab, cfg),
    }
}

const LABEL_MAGIC: &[u8; 8] = b"HPLABEL\x01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelIndexEntry {
    pub scenario_id: String,
    pub record: usize,
}

/// JSON index accompanying the columnar label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelIndex {
    pub vocab_hash: String,
    pub k: usize,
    pub metrics: Vec<String>,
    pub data_file: String,
    pub data_sha256: String,
    pub records: Vec<LabelIndexEntry>,
}

/// Path of the JSON index for a columnar label file.
pub fn label_index_path(data: &Path) -> std::path::PathBuf {
    data.with_extension("index.json")
}

/// Write labels as a columnar float file (per record: one k-long column per
/// metric) plus a JSON index keyed by scenario id and vocabulary hash.
pub fn write_label_store(path: &Path, labels: &[TeacherLabels]) -> Result<LabelIndex> {
    let (k, vocab_hash) = match labels.first() {
        Some(l) => (l.len(), l.vocab_hash.clone()),
        None => (0, String::new()),
    };
    let mut buf = Vec::with_capacity(16 + labels.len() * k * NUM_METRICS * 8);
    buf.extend_from_slice(LABEL_MAGIC);
    put_u32(&mut buf, k as u32);
    put_u32(&mut buf, labels.len() as u32);
    put_u32(&mut buf, NUM_METRICS as u32);
    let mut records = Vec::with_capacity(labels.len());
    for (r, l) in labels.iter().enumerate() {
        if l.len() != k || l.vocab_hash != vocab_hash {
            return Err(Error::Integrity(format!(
                "label record {} does not match the store's vocabulary",
                l.scenario_id
            )));
        }
        for m in 0..NUM_METRICS {
            let column: Vec<f64> = l.scores.iter().map(|s| s.to_array()[m]).collect();
            put_f64s(&mut buf, &column);
        }
        records.push(LabelIndexEntry {
            scenario_id: l.scenario_id.clone(),
            record: r,
        });
    }
    util::write_file(path, &buf)?;
    let index = LabelIndex {
        vocab_hash,
        k,
        metrics: METRIC_NAMES.iter().map(|s| s.to_string()).collect(),
        data_file: path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        data_sha256: util::sha256_hex(&buf),
        records,
    };
    util::write_file(&label_index_path(path), serde_json::to_string_pretty(&index)?.as_bytes())?;
    Ok(index)
}

/// Read a label store, refusing it if the data hash or the vocabulary hash
/// disagree with the index / expectation.
pub fn read_label_store(path: &Path, expected_vocab_hash: Option<&str>) -> Result<Vec<TeacherLabels>> {
    let index_path = label_index_path(path);
    let index: LabelIndex = serde_json::from_slice(&util::read_file(&index_path)?)
        .map_err(|e| Error::format(&index_path, e.to_string()))?;
    let bytes = util::read_file(path)?;
    if util::sha256_hex(&bytes) != index.data_sha256 {
        return Err(Error::Integrity(format!(
            "label store {} does not match its index hash",
            path.display()
        )));
    }
    if let Some(expected) = expected_vocab_hash {
        if index.vocab_hash != expected {
            return Err(Error::Integrity(format!(
                "labels were simulated for vocabulary {} but {} was supplied",
                index.vocab_hash, expected
            )));
        }
    }
    let mut r = Reader::new(&bytes, path);
    r.expect_magic(LABEL_MAGIC)?;
    let k = r.u32()? as usize;
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    if m != NUM_METRICS || k != index.k || n != index.records.len() {
        return Err(Error::format(path, "header disagrees with index"));
    }
    let mut out = Vec::with_capacity(n);
    for entry in &index.records {
        let columns: Vec<Vec<f64>> = (0..m).map(|_| r.f64s(k)).collect::<Result<_>>()?;
        let scores = (0..k)
            .map(|i| SubScores::from_array(std::array::from_fn(|c| columns[c][i])))
            .collect();
        out.push(TeacherLabels {
            scenario_id: entry.scenario_id.clone(),
            vocab_hash: index.vocab_hash.clone(),
            scores,
        });
    }
    r.finish()?;
    Ok(out)
}
