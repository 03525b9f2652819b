//! Planning vocabulary: random kinematic rollouts clustered with k-means.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{normalize_angle, Pose};
use crate::util::{self, put_f64s, put_u32, Reader};
use crate::world::{Range, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KinematicConfig {
    pub horizon_steps: usize,
    pub dt: f64,
    pub initial_speed: Range,
    pub accel: Range,
    pub yaw_rate_max: f64,
    pub max_speed: f64,
    /// Number of equal-length control pieces over the horizon.
    pub control_segments: usize,
    /// Bound on the rate of change of acceleration, m/s³.
    pub jerk_max: f64,
}

impl Default for KinematicConfig {
    fn default() -> Self {
        Self {
            horizon_steps: 40,
            dt: 0.1,
            initial_speed: Range::new(0.0, 14.0),
            accel: Range::new(-2.4, 2.0),
            yaw_rate_max: 0.35,
            max_speed: 16.0,
            control_segments: 2,
            jerk_max: 3.0,
        }
    }
}

impl KinematicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_steps <= 1 || !(self.dt > 0.0) {
            return Err(Error::config("kinematics need horizon_steps > 1 and dt > 0"));
        }
        self.initial_speed.validate("initial_speed")?;
        self.accel.validate("accel")?;
        if self.initial_speed.min < 0.0 || !(self.yaw_rate_max >= 0.0) || self.max_speed < 0.0 {
            return Err(Error::config("speeds and yaw-rate bound must be non-negative"));
        }
        if self.control_segments == 0 {
            return Err(Error::config("control_segments must be >= 1"));
        }
        if !(self.jerk_max > 0.0) {
            return Err(Error::config("jerk_max must be > 0"));
        }
        Ok(())
    }
}

/// Rollouts from the origin under random piecewise-constant (accel, yaw-rate)
/// commands. Acceleration follows its command at no more than `jerk_max` and
/// eases off before the speed reaches 0 or `max_speed`.
pub fn sample_trajectories(n: usize, kin: &KinematicConfig, seed: u64) -> Result<Vec<Trajectory>> {
    kin.validate()?;
    if n == 0 {
        return Err(Error::config("need at least one trajectory"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = kin.horizon_steps;
    let segs = kin.control_segments;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = kin.initial_speed.sample(&mut rng);
        let controls: Vec<(f64, f64)> = (0..segs)
            .map(|_| {
                let a = kin.accel.sample(&mut rng);
                let w = if kin.yaw_rate_max > 0.0 {
                    rng.gen_range(-kin.yaw_rate_max..=kin.yaw_rate_max)
                } else {
                    0.0
                };
                (a, w)
            })
            .collect();
        let (mut x, mut y, mut heading) = (0.0f64, 0.0f64, 0.0f64);
        let mut poses = Vec::with_capacity(h);
        poses.push(Pose::new(0.0, 0.0, 0.0));
        let dj = kin.jerk_max * kin.dt;
        let mut a = controls[0].0;
        for step in 1..h {
            let (a_cmd, w) = controls[((step - 1) * segs) / (h - 1)];
            a += (a_cmd - a).clamp(-dj, dj);
            a = a.clamp(
                -(kin.jerk_max * v).sqrt(),
                (kin.jerk_max * (kin.max_speed - v).max(0.0)).sqrt(),
            );
            let v_next = (v + a * kin.dt).clamp(0.0, kin.max_speed);
            let mid = heading + 0.5 * w * kin.dt;
            let dist = 0.5 * (v + v_next) * kin.dt;
            x += dist * mid.cos();
            y += dist * mid.sin();
            heading = normalize_angle(heading + w * kin.dt);
            v = v_next;
            poses.push(Pose::new(x, y, heading));
        }
        out.push(Trajectory { poses, dt: kin.dt });
    }
    Ok(out)
}

/// Flatten to `[x0, y0, w*h0, x1, ...]`.
pub fn flatten(traj: &Trajectory, heading_weight: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(traj.len() * 3);
    flatten_into(traj, heading_weight, &mut v);
    v
}

fn flatten_into(traj: &Trajectory, heading_weight: f64, out: &mut Vec<f64>) {
    for p in &traj.poses {
        out.extend_from_slice(&[p.x, p.y, heading_weight * p.heading]);
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fixed planning vocabulary in the ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    trajectories: Vec<Trajectory>,
    heading_weight: f64,
    flat: Vec<f64>,
}

impl Vocabulary {
    pub fn new(trajectories: Vec<Trajectory>, heading_weight: f64) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::config("vocabulary must not be empty"));
        }
        if !(heading_weight > 0.0) {
            return Err(Error::config("heading weight must be > 0"));
        }
        let h = trajectories[0].len();
        let dt = trajectories[0].dt;
        if trajectories.iter().any(|t| t.len() != h || t.dt != dt) {
            return Err(Error::shape("vocabulary entries differ in length or dt"));
        }
        let mut flat = Vec::with_capacity(trajectories.len() * h * 3);
        for t in &trajectories {
            flatten_into(t, heading_weight, &mut flat);
        }
        Ok(Self {
            trajectories,
            heading_weight,
            flat,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn horizon_steps(&self) -> usize {
        self.trajectories[0].len()
    }

    pub fn dt(&self) -> f64 {
        self.trajectories[0].dt
    }

    pub fn heading_weight(&self) -> f64 {
        self.heading_weight
    }

    pub fn dim(&self) -> usize {
        self.horizon_steps() * 3
    }

    pub fn get(&self, i: usize) -> &Trajectory {
        &self.trajectories[i]
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn flat_entry(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.flat[i * d..(i + 1) * d]
    }

    /// Row-major `k × 3H` matrix of flattened entries.
    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    /// Reorder entries; `perm[i]` is the old index of new entry `i`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Vocabulary> {
        Vocabulary::new(
            perm.iter().map(|&i| self.trajectories[i].clone()).collect(),
            self.heading_weight,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + self.flat.len() * 8);
        buf.extend_from_slice(VOCAB_MAGIC);
        put_u32(&mut buf, self.len() as u32);
        put_u32(&mut buf, self.horizon_steps() as u32);
        put_f64s(&mut buf, &[self.dt(), self.heading_weight]);
        for t in &self.trajectories {
            for p in &t.poses {
                put_f64s(&mut buf, &[p.x, p.y, p.heading]);
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.expect_magic(VOCAB_MAGIC)?;
        let k = r.u32()? as usize;
        let h = r.u32()? as usize;
        let dt = r.f64()?;
        let heading_weight = r.f64()?;
        if k == 0 || h == 0 {
            return Err(Error::format(path, "empty vocabulary header"));
        }
        let raw = r.f64s(k * h * 3)?;
        r.finish()?;
        let trajectories = raw
            .chunks_exact(h * 3)
            .map(|row| Trajectory {
                poses: row
                    .chunks_exact(3)
                    .map(|p| Pose {
                        x: p[0],
                        y: p[1],
                        heading: p[2],
                    })
                    .collect(),
                dt,
            })
            .collect();
        Vocabulary::new(trajectories, heading_weight).map_err(|e| Error::format(path, e.to_string()))
    }

    /// SHA-256 of the serialized vocabulary; labels and checkpoints record it.
    pub fn content_hash(&self) -> String {
        util::sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&util::read_file(path)?, path)
    }
}

const VOCAB_MAGIC: &[u8; 8] = b"HPVOCAB\x01";

/// Index of the closest entry in flattened squared L2; ties go to the lowest
/// index.
pub fn nearest_vocab_index(vocab: &Vocabulary, traj: &Trajectory) -> usize {
    let q = flatten(traj, vocab.heading_weight());
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..vocab.len() {
        let d = squared_distance(vocab.flat_entry(i), &q);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    /// Meters per radian when heading is mixed with positions.
    pub heading_weight: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 256,
            max_iters: 50,
            tol: 1e-4,
            seed: 0,
            heading_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    /// Row-major `k × dim` centers in the weighted feature space.
    pub centers: Vec<f64>,
    pub assignments: Vec<usize>,
    /// SSE after each assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
    pub dim: usize,
}

impl KMeansFit {
    pub fn final_sse(&self) -> f64 {
        self.sse_history.last().copied().unwrap_or(0.0)
    }
}

fn count_distinct(data: &[f64], dim: usize) -> usize {
    let mut seen = HashSet::new();
    for row in data.chunks_exact(dim) {
        seen.insert(row.iter().map(|v| v.to_bits()).collect::<Vec<u64>>());
    }
    seen.len()
}

fn nearest_center(row: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (c, center) in centers.chunks_exact(dim).enumerate() {
        // Partial-distance early exit; the comparison order is fixed.
        let mut d = 0.0;
        for (a, b) in row.iter().zip(center) {
            d += (a - b) * (a - b);
            if d >= best.1 {
                break;
            }
        }
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: first center uniform, the rest by D² sampling.
pub fn kmeans_pp_init(data: &[f64], dim: usize, k: usize, seed: u64) -> Result<Vec<f64>> {
    let n = data.len() / dim;
    validate_kmeans_input(data, dim, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centers.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = data
        .chunks_exact(dim)
        .map(|row| squared_distance(row, &centers[..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if target < w {
                        chosen = Some(i);
                        break;
                    }
                    target -= w;
                }
            }
            // Rounding can run past the end; take the last positive weight.
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            return Err(Error::config("ran out of distinct points while seeding"));
        };
        let start = centers.len();
        centers.extend_from_slice(&data[pick * dim..(pick + 1) * dim]);
        for (i, row) in data.chunks_exact(dim).enumerate() {
            let d = squared_distance(row, &centers[start..start + dim]);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    Ok(centers)
}

fn validate_kmeans_input(data: &[f64], dim: usize, k: usize) -> Result<()> {
    if dim == 0 || data.is_empty() || data.len() % dim != 0 {
        return Err(Error::config("k-means needs a non-empty n × dim matrix"));
    }
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    let distinct = count_distinct(data, dim);
    if k > distinct {
        return Err(Error::config(format!(
            "k = {k} exceeds the {distinct} distinct input vectors"
        )));
    }
    Ok(())
}

/// Lloyd iterations from the given centers. Empty clusters take the point of
/// the largest cluster farthest from its center.
pub fn lloyd(data: &[f64], dim: usize, init: Vec<f64>, max_iters: usize, tol: f64) -> Result<KMeansFit> {
    if max_iters == 0 || !(tol >= 0.0) {
        return Err(Error::config("k-means needs max_iters >= 1 and tol >= 0"));
    }
    if dim == 0 || init.is_empty() || init.len() % dim != 0 || data.len() % dim != 0 || data.is_empty() {
        return Err(Error::config("k-means input shapes are inconsistent"));
    }
    let n = data.len() / dim;
    let k = init.len() / dim;
    let mut centers = init;
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let mut sse = 0.0;
        for (i, row) in data.chunks_exact(dim).enumerate() {
            let (c, d) = nearest_center(row, &centers, dim);
            assignments[i] = c;
            dists[i] = d;
            sse += d;
        }
        sse_history.push(sse);

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, row) in data.chunks_exact(dim).enumerate() {
            let c = assignments[i];
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                *s += v;
            }
        }
        let mut new_centers = centers.clone();
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for j in 0..dim {
                    new_centers[c * dim + j] = sums[c * dim + j] * inv;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let largest = (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
                let far = (0..n)
                    .filter(|&i| assignments[i] == largest)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap();
                new_centers[c * dim..(c + 1) * dim].copy_from_slice(&data[far * dim..(far + 1) * dim]);
                assignments[far] = c;
                dists[far] = 0.0;
                counts[largest] -= 1;
                counts[c] = 1;
            }
        }
        let movement = centers
            .chunks_exact(dim)
            .zip(new_centers.chunks_exact(dim))
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0f64, f64::max);
        centers = new_centers;
        if movement < tol {
            break;
        }
    }
    // Final assignment against the returned centers.
    let mut sse = 0.0;
    for (i, row) in data.chunks_exact(dim).enumerate() {
        let (c, d) = nearest_center(row, &centers, dim);
        assignments[i] = c;
        sse += d;
    }
    sse_history.push(sse);
    Ok(KMeansFit {
        centers,
        assignments,
        sse_history,
        iterations,
        dim,
    })
}

/// Cluster flattened trajectories into a `k`-entry vocabulary.
pub fn kmeans_cluster(trajs: &[Trajectory], cfg: &KMeansConfig) -> Result<(Vocabulary, KMeansFit)> {
    if trajs.is_empty() {
        return Err(Error::config("cannot cluster an empty trajectory set"));
    }
    if !(cfg.heading_weight > 0.0) {
        return Err(Error::config("heading weight must be > 0"));
    }
    let h = trajs[0].len();
    let dt = trajs[0].dt;
    if trajs.iter().any(|t| t.len() != h) {
        return Err(Error::shape("trajectories differ in length"));
    }
    let dim = h * 3;
    let mut data = Vec::with_capacity(trajs.len() * dim);
    for t in trajs {
        flatten_into(t, cfg.heading_weight, &mut data);
    }
    let init = kmeans_pp_init(&data, dim, cfg.k, cfg.seed)?;
    let fit = lloyd(&data, dim, init, cfg.max_iters, cfg.tol)?;
    let vocab = centers_to_vocabulary(&fit.centers, dim, dt, cfg.heading_weight)?;
    Ok((vocab, fit))
}

pub fn centers_to_vocabulary(centers: &[f64], dim: usize, dt: f64, heading_weight: f64) -> Result<Vocabulary> {
    let trajectories = centers
        .chunks_exact(dim)
        .map(|row| Trajectory {
            poses: row
                .chunks_exact(3)
                .map(|p| Pose::new(p[0], p[1], p[2] / heading_weight))
                .collect(),
            dt,
        })
        .collect();
    Vocabulary::new(trajectories, heading_weight)
}

/// Provenance written next to a vocabulary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabProvenance {
    pub n_samples: usize,
    pub sample_seed: u64,
    pub kinematics: KinematicConfig,
    pub kmeans: KMeansConfig,
    pub iterations: usize,
    pub final_sse: f64,
    pub content_hash: String,
}

pub fn sidecar_path(vocab_path: &Path) -> std::path::PathBuf {
    let mut p = vocab_path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

/// Sample, cluster, and persist a vocabulary with its provenance sidecar.
pub fn build_vocabulary(
    n: usize,
    kin: &KinematicConfig,
    sample_seed: u64,
    kmeans: &KMeansConfig,
    out: &Path,
) -> Result<(Vocabulary, VocabProvenance)> {
    let trajs = sample_trajectories(n, kin, sample_seed)?;
    let (vocab, fit) = kmeans_cluster(&trajs, kmeans)?;
    vocab.save(out)?;
    let prov = VocabProvenance {
        n_samples: n,
        sample_seed,
        kinematics: kin.clone(),
        kmeans: kmeans.clone(),
        iterations: fit.iterations,
        final_sse: fit.final_sse(),
        content_hash: vocab.content_hash(),
    };
    util::write_file(&sidecar_path(out), serde_json::to_string_pretty(&prov)?.as_bytes())?;
    Ok((vocab, prov))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_kin() -> KinematicConfig {
        KinematicConfig {
            horizon_steps: 8,
            ..KinematicConfig::default()
        }
    }

    #[test]
    fn sampling_shapes_and_bounds() {
        let kin = KinematicConfig::default();
        let trajs = sample_trajectories(5, &kin, 1).unwrap();
        assert_eq!(trajs.len(), 5);
        for t in &trajs {
            assert_eq!(t.len(), 40);
            assert_eq!(t.poses[0], Pose::new(0.0, 0.0, 0.0));
        }
        let many = sample_trajectories(300, &kin, 2).unwrap();
        for t in &many {
            for w in t.poses.windows(2) {
                let dh = normalize_angle(w[1].heading - w[0].heading).abs();
                assert!(dh <= kin.yaw_rate_max * kin.dt + 1e-12);
            }
        }
    }

    #[test]
    fn default_samples_are_comfortable() {
        let limits = crate::metrics::ComfortLimits::default();
        for (i, t) in sample_trajectories(2000, &KinematicConfig::default(), 3).unwrap().iter().enumerate() {
            assert_eq!(crate::metrics::comfort(t, &limits), 1.0, "sample {i}");
        }
    }

    #[test]
    fn zero_controls_stay_at_origin() {
        let kin = KinematicConfig {
            initial_speed: Range::new(0.0, 0.0),
            accel: Range::new(0.0, 0.0),
            yaw_rate_max: 0.0,
            ..KinematicConfig::default()
        };
        for t in sample_trajectories(10, &kin, 3).unwrap() {
            assert!(t.poses.iter().all(|p| *p == Pose::new(0.0, 0.0, 0.0)));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let kin = small_kin();
        assert_eq!(
            sample_trajectories(20, &kin, 9).unwrap(),
            sample_trajectories(20, &kin, 9).unwrap()
        );
    }

    #[test]
    fn k_equal_to_distinct_count_reproduces_inputs() {
        let trajs = sample_trajectories(12, &small_kin(), 4).unwrap();
        let cfg = KMeansConfig {
            k: 12,
            ..KMeansConfig::default()
        };
        let (vocab, fit) = kmeans_cluster(&trajs, &cfg).unwrap();
        assert_eq!(fit.final_sse(), 0.0);
        for t in &trajs {
            let i = nearest_vocab_index(&vocab, t);
            assert_eq!(squared_distance(vocab.flat_entry(i), &flatten(t, 1.0)), 0.0);
        }
    }

    #[test]
    fn k_one_is_the_mean() {
        let trajs = sample_trajectories(30, &small_kin(), 5).unwrap();
        let cfg = KMeansConfig {
            k: 1,
            ..KMeansConfig::default()
        };
        let (vocab, _) = kmeans_cluster(&trajs, &cfg).unwrap();
        let dim = 8 * 3;
        let mut mean = vec![0.0; dim];
        for t in &trajs {
            for (m, v) in mean.iter_mut().zip(flatten(t, 1.0)) {
                *m += v / 30.0;
            }
        }
        for (a, b) in vocab.flat_entry(0).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn too_many_clusters_or_empty_input_is_a_config_error() {
        let mut trajs = sample_trajectories(3, &small_kin(), 6).unwrap();
        trajs.push(trajs[0].clone());
        let cfg = KMeansConfig {
            k: 4,
            ..KMeansConfig::default()
        };
        assert!(matches!(kmeans_cluster(&trajs, &cfg), Err(Error::Config(_))));
        assert!(matches!(kmeans_cluster(&[], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn nearest_index_ties_and_exact_hits() {
        let trajs = sample_trajectories(6, &small_kin(), 7).unwrap();
        let vocab = Vocabulary::new(trajs.clone(), 1.0).unwrap();
        assert_eq!(nearest_vocab_index(&vocab, &trajs[3]), 3);
        let single = Vocabulary::new(vec![trajs[2].clone()], 1.0).unwrap();
        assert_eq!(nearest_vocab_index(&single, &trajs[5]), 0);
        let dup = Vocabulary::new(vec![trajs[1].clone(), trajs[1].clone()], 1.0).unwrap();
        assert_eq!(nearest_vocab_index(&dup, &trajs[1]), 0);
    }

    #[test]
    fn file_round_trip_is_exact() {
        let trajs = sample_trajectories(40, &small_kin(), 8).unwrap();
        let (vocab, _) = kmeans_cluster(
            &trajs,
            &KMeansConfig {
                k: 5,
                heading_weight: 2.0,
                ..KMeansConfig::default()
            },
        )
        .unwrap();
        let bytes = vocab.to_bytes();
        let back = Vocabulary::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.content_hash(), vocab.content_hash());
        assert!(Vocabulary::from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }
}
