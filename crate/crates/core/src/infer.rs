//! Trajectory selection from student scores, confidence-weight search,
//! sub-score ensembling and the regression / post-processing baselines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point, Polyline, Pose};
use crate::metrics::{pdm_score, simulate_vocabulary_in, DrivingWorld, MetricConfig};
use crate::model::{HeadLayout, PredictionBundle, LOG_EPS};
use crate::vocab::Vocabulary;
use crate::world::{Agent, Footprint, Observation, Scenario, Trajectory};

/// Confidence weights of the assembled cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w1: 0.1,
            w2: 1.0,
            w3: 1.0,
            w4: 1.0,
        }
    }
}

impl CostWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.w1, self.w2, self.w3, self.w4]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            w1: a[0],
            w2: a[1],
            w3: a[2],
            w4: a[3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|w| *w > 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::config(format!("cost weights must be finite and > 0, got {self:?}")))
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::config(e.to_string()))?;
        crate::util::write_file(path, text.as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = crate::util::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let w: CostWeights = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        w.validate()?;
        Ok(w)
    }
}

fn ln_clamped(v: f64) -> f64 {
    v.clamp(LOG_EPS, 1.0).ln()
}

/// Per-entry log terms `[log S_im, log S_nc, log S_dac, log(5 S_ttc + 2 S_c + 5 S_ep)]`.
/// For a PDM-only bundle the last term is `log S_pdm` and the middle two are zero.
fn log_terms(bundle: &PredictionBundle) -> Vec<[f64; 4]> {
    (0..bundle.k())
        .map(|i| {
            let im = ln_clamped(bundle.imitation[i]);
            match bundle.heads {
                HeadLayout::MultiTarget => {
                    let r: Vec<f64> = bundle.row(i).iter().map(|s| s.clamp(LOG_EPS, 1.0)).collect();
                    let inner = (5.0 * r[2] + 2.0 * r[3] + 5.0 * r[4]).max(LOG_EPS);
                    [im, r[0].ln(), r[1].ln(), inner.ln()]
                }
                HeadLayout::PdmOnly => [im, 0.0, 0.0, ln_clamped(bundle.metric(i, 0))],
            }
        })
        .collect()
}

fn cost_from_terms(t: &[f64; 4], w: &CostWeights) -> f64 {
    -(w.w1 * t[0] + w.w2 * t[1] + w.w3 * t[2] + w.w4 * t[3])
}

/// Assembled cost per entry; lower is better.
pub fn assemble_cost(bundle: &PredictionBundle, w: &CostWeights) -> Vec<f64> {
    log_terms(bundle).iter().map(|t| cost_from_terms(t, w)).collect()
}

/// First index of the minimum; NaN never wins.
pub fn argmin_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] || v[best].is_nan() {
            best = i;
        }
    }
    best
}

pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] || v[best].is_nan() {
            best = i;
        }
    }
    best
}

pub fn select_index(bundle: &PredictionBundle, w: &CostWeights) -> usize {
    argmin_first(&assemble_cost(bundle, w))
}

pub fn select_trajectory<'v>(bundle: &PredictionBundle, w: &CostWeights, vocab: &'v Vocabulary) -> (usize, &'v Trajectory) {
    let i = select_index(bundle, w);
    (i, vocab.get(i))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Log-spaced points per weight.
    pub points: [usize; 4],
    pub w1: [f64; 2],
    pub w2: [f64; 2],
    pub w3: [f64; 2],
    pub w4: [f64; 2],
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            points: [4; 4],
            w1: [0.01, 0.1],
            w2: [0.1, 1.0],
            w3: [0.1, 1.0],
            w4: [1.0, 10.0],
        }
    }
}

pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| {
                    if i == 0 {
                        lo
                    } else if i == n - 1 {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        for r in [self.w1, self.w2, self.w3, self.w4] {
            if !(r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite()) {
                return Err(Error::config(format!("bad weight range {r:?}")));
            }
        }
        if self.points.contains(&0) {
            return Err(Error::config("every weight needs at least one grid point"));
        }
        Ok(())
    }

    /// All combinations in lexicographic order of (w1, w2, w3, w4).
    pub fn combinations(&self) -> Vec<CostWeights> {
        let axes: Vec<Vec<f64>> = [self.w1, self.w2, self.w3, self.w4]
            .iter()
            .zip(self.points)
            .map(|(r, n)| log_space(r[0], r[1], n))
            .collect();
        let mut out = Vec::new();
        for &a in &axes[0] {
            for &b in &axes[1] {
                for &c in &axes[2] {
                    for &d in &axes[3] {
                        out.push(CostWeights::from_array([a, b, c, d]));
                    }
                }
            }
        }
        out
    }

    pub fn contains(&self, w: &CostWeights) -> bool {
        self.combinations().contains(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub weights: CostWeights,
    pub mean_pdm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: GridPoint,
    pub evaluated: Vec<GridPoint>,
}

/// Mean teacher PDM of the selections made with `w`.
/// `teacher_pdm[s][i]` is the PDM of entry `i` in scenario `s`.
pub fn mean_selected_pdm(bundles: &[PredictionBundle], teacher_pdm: &[Vec<f64>], w: &CostWeights) -> f64 {
    let total: f64 = bundles
        .iter()
        .zip(teacher_pdm)
        .map(|(b, p)| p[select_index(b, w)])
        .sum();
    total / bundles.len().max(1) as f64
}

/// Exhaustive search over the grid for the weights that maximize mean
/// teacher PDM; ties go to the lexicographically first combination.
pub fn grid_search_weights(
    bundles: &[PredictionBundle],
    teacher_pdm: &[Vec<f64>],
    grid: &GridConfig,
) -> Result<GridSearchResult> {
    grid.validate()?;
    if bundles.is_empty() {
        return Err(Error::config("grid search needs a non-empty validation set"));
    }
    if bundles.len() != teacher_pdm.len() || bundles.iter().zip(teacher_pdm).any(|(b, p)| b.k() != p.len()) {
        return Err(Error::shape("validation bundles and teacher labels are misaligned"));
    }
    let terms: Vec<Vec<[f64; 4]>> = bundles.iter().map(log_terms).collect();
    let evaluated: Vec<GridPoint> = grid
        .combinations()
        .into_par_iter()
        .map(|w| {
            let total: f64 = terms
                .iter()
                .zip(teacher_pdm)
                .map(|(t, p)| {
                    let costs: Vec<f64> = t.iter().map(|ti| cost_from_terms(ti, &w)).collect();
                    p[argmin_first(&costs)]
                })
                .sum();
            GridPoint {
                weights: w,
                mean_pdm: total / terms.len() as f64,
            }
        })
        .collect();
    let mut best = 0;
    for (i, g) in evaluated.iter().enumerate() {
        if g.mean_pdm > evaluated[best].mean_pdm {
            best = i;
        }
    }
    Ok(GridSearchResult {
        best: evaluated[best].clone(),
        evaluated,
    })
}

/// Convex combination of several models' outputs for the same observation.
pub fn ensemble_subscores(bundles: &[PredictionBundle], weights: &[f64]) -> Result<PredictionBundle> {
    let first = bundles.first().ok_or_else(|| Error::config("ensemble needs at least one model"))?;
    if bundles.len() != weights.len() {
        return Err(Error::shape(format!("{} bundles but {} weights", bundles.len(), weights.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("ensemble weights must be non-negative and sum to 1"));
    }
    if bundles
        .iter()
        .any(|b| b.heads != first.heads || b.k() != first.k() || b.metric_scores.len() != first.metric_scores.len())
    {
        return Err(Error::shape("ensemble members disagree on vocabulary size or heads"));
    }
    let mut imitation = vec![0.0; first.k()];
    let mut metric_scores = vec![0.0; first.metric_scores.len()];
    for (b, &w) in bundles.iter().zip(weights) {
        for (o, v) in imitation.iter_mut().zip(&b.imitation) {
            *o += w * v;
        }
        for (o, v) in metric_scores.iter_mut().zip(&b.metric_scores) {
            *o += w * v;
        }
    }
    let sum: f64 = imitation.iter().sum();
    imitation.iter_mut().for_each(|p| *p /= sum);
    Ok(PredictionBundle {
        imitation,
        metric_scores,
        heads: first.heads,
    })
}

/// Settings that turn a noisy observation into a predicted perception.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    pub threshold: f64,
    /// When set, an empty drivable cell is filled if at least this many of
    /// its eight neighbours are drivable.
    pub fill_neighbors: Option<usize>,
    /// Points beyond the raster count as drivable.
    pub drivable_off_grid: bool,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            fill_neighbors: None,
            drivable_off_grid: true,
        }
    }
}

/// World model reconstructed from an observation, in the ego frame.
#[derive(Debug, Clone)]
pub struct PredictedPerception {
    grid_size: usize,
    cell_size: f64,
    drivable: Vec<bool>,
    drivable_off_grid: bool,
    agents: Vec<Agent>,
    route: Polyline,
    reference: Trajectory,
}

impl PredictedPerception {
    /// `route` is the navigation route already expressed in the ego frame.
    pub fn from_observation(obs: &Observation, route: Polyline, cfg: &PerceptionConfig) -> Self {
        let g = obs.grid_size;
        let raw: Vec<bool> = (0..g * g).map(|i| obs.bev_raster[i] >= cfg.threshold).collect();
        let mut drivable = raw.clone();
        if let Some(fill) = cfg.fill_neighbors {
            for r in 0..g {
                for c in 0..g {
                    if raw[r * g + c] {
                        continue;
                    }
                    let n = neighbours(g, r, c).filter(|&(nr, nc)| raw[nr * g + nc]).count();
                    drivable[r * g + c] = n >= fill;
                }
            }
        }
        let occupied: Vec<bool> = (0..g * g).map(|i| obs.bev_raster[g * g + i] >= cfg.threshold).collect();
        let agents = blobs(g, &occupied)
            .into_iter()
            .map(|(r0, r1, c0, c1)| {
                let half = g as f64 / 2.0;
                let x0 = (r0 as f64 - half) * obs.cell_size;
                let x1 = (r1 as f64 + 1.0 - half) * obs.cell_size;
                let y0 = (c0 as f64 - half) * obs.cell_size;
                let y1 = (c1 as f64 + 1.0 - half) * obs.cell_size;
                Agent {
                    initial_pose: Pose::new(0.5 * (x0 + x1), 0.5 * (y0 + y1), 0.0),
                    velocity: 0.0,
                    footprint: Footprint {
                        half_length: 0.5 * (x1 - x0),
                        half_width: 0.5 * (y1 - y0),
                    },
                }
            })
            .collect();
        let h = 2;
        Self {
            grid_size: g,
            cell_size: obs.cell_size,
            drivable,
            drivable_off_grid: cfg.drivable_off_grid,
            agents,
            route,
            reference: Trajectory::stationary(Pose::new(0.0, 0.0, 0.0), h, 0.1),
        }
    }

    pub fn with_reference(mut self, reference: Trajectory) -> Self {
        self.reference = reference;
        self
    }

    pub fn perceived_agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn drivable_cells(&self) -> &[bool] {
        &self.drivable
    }
}

fn neighbours(g: usize, r: usize, c: usize) -> impl Iterator<Item = (usize, usize)> {
    let (r, c, g) = (r as isize, c as isize, g as isize);
    (-1..=1)
        .flat_map(move |dr| (-1..=1).map(move |dc| (r + dr, c + dc)))
        .filter(move |&(nr, nc)| (nr, nc) != (r, c) && nr >= 0 && nc >= 0 && nr < g && nc < g)
        .map(|(nr, nc)| (nr as usize, nc as usize))
}

/// Bounding boxes `(row_min, row_max, col_min, col_max)` of 8-connected
/// components, in row-major discovery order.
fn blobs(g: usize, cells: &[bool]) -> Vec<(usize, usize, usize, usize)> {
    let mut seen = vec![false; g * g];
    let mut out = Vec::new();
    for start in 0..g * g {
        if !cells[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / g, i % g);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
            for (nr, nc) in neighbours(g, r, c) {
                let j = nr * g + nc;
                if cells[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        out.push((r0, r1, c0, c1));
    }
    out
}

impl DrivingWorld for PredictedPerception {
    fn is_drivable(&self, p: Point) -> bool {
        let half = self.grid_size as f64 / 2.0;
        let r = (p.x / self.cell_size + half).floor();
        let c = (p.y / self.cell_size + half).floor();
        let g = self.grid_size as f64;
        if r >= 0.0 && r < g && c >= 0.0 && c < g {
            self.drivable[r as usize * self.grid_size + c as usize]
        } else {
            self.drivable_off_grid
        }
    }

    fn agents(&self) -> &[Agent] {
        &self.agents
    }

    fn route(&self) -> &Polyline {
        &self.route
    }

    fn progress_reference(&self) -> &Trajectory {
        &self.reference
    }
}

/// Baseline paradigms used for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Paradigm {
    /// Single-mode imitation: the most likely entry.
    A,
    /// Rule-based post-processing of the candidates on predicted perception.
    B,
}

/// Rule-based selection in an arbitrary world, ego frame given by `frame`:
/// highest PDM, then highest imitation probability, then lowest index.
pub fn post_process_select(
    bundle: &PredictionBundle,
    world: &(impl DrivingWorld + Sync),
    frame: &Pose,
    vocab: &Vocabulary,
    cfg: &MetricConfig,
) -> usize {
    let pdm: Vec<f64> = simulate_vocabulary_in(world, frame, vocab, cfg).iter().map(pdm_score).collect();
    let mut best = 0;
    for i in 1..pdm.len() {
        let better = pdm[i] > pdm[best] || (pdm[i] == pdm[best] && bundle.imitation[i] > bundle.imitation[best]);
        if better {
            best = i;
        }
    }
    best
}

/// Select with a baseline paradigm. Paradigm B only reads the scenario's
/// navigation route; everything else comes from the noisy observation.
pub fn baseline_select(
    mode: Paradigm,
    bundle: &PredictionBundle,
    scenario: &Scenario,
    observation: &Observation,
    vocab: &Vocabulary,
    metric_cfg: &MetricConfig,
    perception_cfg: &PerceptionConfig,
) -> usize {
    let a = argmax_first(&bundle.imitation);
    match mode {
        Paradigm::A => a,
        Paradigm::B => {
            let frame = scenario.ego_start.pose;
            let route = Polyline::new(
                scenario
                    .route_centerline
                    .points()
                    .iter()
                    .map(|p| (*p - frame.position()).rotate(-frame.heading))
                    .collect(),
            );
            let world = PredictedPerception::from_observation(observation, route, perception_cfg)
                .with_reference(vocab.get(a).clone());
            post_process_select(bundle, &world, &Pose::new(0.0, 0.0, 0.0), vocab, metric_cfg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(imitation: Vec<f64>, rows: Vec<[f64; 5]>) -> PredictionBundle {
        PredictionBundle {
            imitation,
            metric_scores: rows.into_iter().flatten().collect(),
            heads: HeadLayout::MultiTarget,
        }
    }

    #[test]
    fn all_ones_cost_is_minus_log_twelve() {
        let b = bundle(vec![1.0, 1.0], vec![[1.0; 5], [1.0; 5]]);
        let c = assemble_cost(&b, &CostWeights { w1: 0.05, w2: 0.3, w3: 0.2, w4: 1.0 });
        for v in c {
            assert!((v + 12f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn nc_collapse_dominates_cost() {
        let b = bundle(vec![0.5, 0.5], vec![[1.0; 5], [0.0, 1.0, 1.0, 1.0, 1.0]]);
        let c = assemble_cost(&b, &CostWeights::default());
        assert!(c[1] > c[0]);
    }

    #[test]
    fn selection_ties_go_to_lowest_index() {
        let rows = vec![[0.9; 5]; 7];
        let mut im = vec![0.1; 7];
        im[2] = 0.2;
        im[5] = 0.2;
        let b = bundle(im, rows);
        assert_eq!(select_index(&b, &CostWeights::default()), 2);
    }

    #[test]
    fn log_space_hits_endpoints() {
        let v = log_space(0.01, 0.1, 4);
        assert_eq!(v[0], 0.01);
        assert_eq!(v[3], 0.1);
        assert!((v[1] - 0.01 * 10f64.powf(1.0 / 3.0)).abs() < 1e-15);
        assert!(GridConfig::default().contains(&CostWeights::default()));
        assert_eq!(GridConfig::default().combinations().len(), 256);
    }

    #[test]
    fn ensemble_quarter_three_quarters() {
        let a = bundle(vec![0.2, 0.8], vec![[0.1, 0.2, 0.3, 0.4, 0.5], [0.9; 5]]);
        let b = bundle(vec![0.6, 0.4], vec![[0.5; 5], [0.3, 0.2, 0.1, 0.7, 0.6]]);
        let e = ensemble_subscores(&[a.clone(), b.clone()], &[0.25, 0.75]).unwrap();
        assert!((e.imitation[0] - (0.25 * 0.2 + 0.75 * 0.6)).abs() < 1e-12);
        for j in 0..10 {
            let want = 0.25 * a.metric_scores[j] + 0.75 * b.metric_scores[j];
            assert!((e.metric_scores[j] - want).abs() < 1e-12);
        }
        assert!(ensemble_subscores(&[a.clone()], &[1.0]).unwrap() == a);
    }

    #[test]
    fn blobs_are_eight_connected() {
        let g = 4;
        let mut cells = vec![false; 16];
        cells[0] = true;
        cells[5] = true;
        cells[15] = true;
        let b = blobs(g, &cells);
        assert_eq!(b, vec![(0, 1, 0, 1), (3, 3, 3, 3)]);
    }
}
