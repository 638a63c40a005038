//! Similarity-based clustering on a spatio-temporal grid and proxy merging
//! with learnable per-member weights.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::divergence_guard;
use crate::error::{Error, Result};
use crate::linalg::dist_sq;
use crate::model::{layout, CameraFrame, Gaussian4D, GaussianCloud, StageTag};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Real;
use crate::splat::{self, LossKind, RenderOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub lambda_app: f64,
    pub tau_sim: f64,
    pub grid_xyz: f64,
    pub grid_t: f64,
    pub growth: f64,
    pub rounds: usize,
    /// Logit optimization steps per round.
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            lambda_app: 1.0,
            tau_sim: -1e-4,
            grid_xyz: 0.1,
            grid_t: 2.0,
            growth: 1.2,
            rounds: 2,
            steps: 100,
            lr: 1e-2,
            seed: 0,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("merge: {what}")));
        if !(self.lambda_app >= 0.0) {
            return bad("lambda_app must be non-negative");
        }
        if !(self.grid_xyz > 0.0) || !(self.grid_t > 0.0) {
            return bad("grid sizes must be positive");
        }
        if !(self.growth > 1.0) {
            return bad("growth must exceed 1");
        }
        if !self.tau_sim.is_finite() || !(self.lr > 0.0) {
            return bad("tau_sim must be finite and lr positive");
        }
        Ok(())
    }

    /// Spatial cell edge of round `m` (0-based).
    pub fn grid_for_round(&self, m: usize) -> f64 {
        self.grid_xyz * self.growth.powi(m as i32)
    }
}

/// `-|Δx|² - λ|Δf|²` over spatial means and colors; 0 for identical
/// Gaussians, more negative the less alike they are.
pub fn similarity<T: Real>(a: &Gaussian4D<T>, b: &Gaussian4D<T>, lambda_app: f64) -> f64 {
    let dx = dist_sq(&a.mean_xyz, &b.mean_xyz).to_f64_lossy();
    let df = dist_sq(&a.color_f, &b.color_f).to_f64_lossy();
    -dx - lambda_app * df
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    /// Deduplicated clusters with subsets removed. These may overlap.
    pub maximal: Vec<Vec<usize>>,
    /// Disjoint clusters actually merged: each Gaussian belongs to the
    /// first maximal cluster containing it; clusters left with fewer than
    /// two members dissolve into singletons.
    pub clusters: Vec<Vec<usize>>,
    /// Gaussians in no merged cluster, ascending.
    pub singletons: Vec<usize>,
    pub logits_x: Vec<Vec<f64>>,
    pub logits_f: Vec<Vec<f64>>,
}

impl ClusterSet {
    /// Builds a set from explicit disjoint clusters with zero logits.
    pub fn from_clusters(n: usize, clusters: Vec<Vec<usize>>) -> Self {
        let mut used = vec![false; n];
        for c in &clusters {
            for &i in c {
                used[i] = true;
            }
        }
        let singletons = (0..n).filter(|&i| !used[i]).collect();
        let logits_x = clusters.iter().map(|c| vec![0.0; c.len()]).collect();
        let logits_f = clusters.iter().map(|c| vec![0.0; c.len()]).collect();
        Self {
            maximal: clusters.clone(),
            clusters,
            singletons,
            logits_x,
            logits_f,
        }
    }

    pub fn output_len(&self) -> usize {
        self.clusters.len() + self.singletons.len()
    }

    pub fn member_count(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    /// Normalized position and color weights of cluster `q`.
    pub fn weights(&self, q: usize) -> (Vec<f64>, Vec<f64>) {
        (normalized(&self.logits_x[q]), normalized(&self.logits_f[q]))
    }

    /// One JSON object per line: cluster id, members and final weights.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            cluster: usize,
            members: &'a [usize],
            weights_x: Vec<f64>,
            weights_f: Vec<f64>,
        }
        for (q, members) in self.clusters.iter().enumerate() {
            let (weights_x, weights_f) = self.weights(q);
            let line = Line {
                cluster: q,
                members,
                weights_x,
                weights_f,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normalized(logits: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let total: f64 = s.iter().sum();
    s.into_iter().map(|v| v / total).collect()
}

fn cell_key<T: Real>(g: &Gaussian4D<T>, grid_xyz: f64, grid_t: f64) -> [i64; 4] {
    let f = |v: T, step: f64| {
        let c = (v.to_f64_lossy() / step).floor();
        c.clamp(i64::MIN as f64, i64::MAX as f64) as i64
    };
    [
        f(g.mean_xyz[0], grid_xyz),
        f(g.mean_xyz[1], grid_xyz),
        f(g.mean_xyz[2], grid_xyz),
        f(g.mean_t, grid_t),
    ]
}

/// Deduplicates and removes clusters contained in another one. The result
/// is sorted by size (descending), then by member list.
pub fn maximal_clusters(candidates: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    let unique: BTreeSet<Vec<usize>> = candidates
        .into_iter()
        .map(|mut c| {
            c.sort_unstable();
            c.dedup();
            c
        })
        .collect();
    let mut sorted: Vec<Vec<usize>> = unique.into_iter().collect();
    sorted.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    let mut kept: Vec<Vec<usize>> = Vec::new();
    for c in sorted {
        let contained = kept
            .iter()
            .any(|k| k.len() > c.len() && c.iter().all(|x| k.binary_search(x).is_ok()));
        if !contained {
            kept.push(c);
        }
    }
    kept
}

/// Groups Gaussians by 4D grid cell and builds the similarity clusters of
/// every cell.
pub fn build_clusters<T: Real>(cloud: &GaussianCloud<T>, cfg: &MergeConfig) -> Result<ClusterSet> {
    build_clusters_with_grid(cloud, cfg, cfg.grid_xyz)
}

pub fn build_clusters_with_grid<T: Real>(
    cloud: &GaussianCloud<T>,
    cfg: &MergeConfig,
    grid_xyz: f64,
) -> Result<ClusterSet> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(grid_xyz > 0.0) {
        return Err(Error::Config("merge: grid size must be positive".into()));
    }
    let gs = cloud.gaussians();
    let mut cells: BTreeMap<[i64; 4], Vec<usize>> = BTreeMap::new();
    for (i, g) in gs.iter().enumerate() {
        cells.entry(cell_key(g, grid_xyz, cfg.grid_t)).or_default().push(i);
    }
    let cell_list: Vec<Vec<usize>> = cells.into_values().collect();
    let per_cell: Vec<Vec<Vec<usize>>> = cell_list
        .par_iter()
        .map(|members| {
            if members.len() < 2 {
                return Vec::new();
            }
            let candidates = members
                .iter()
                .map(|&i| {
                    members
                        .iter()
                        .copied()
                        .filter(|&j| j == i || similarity(&gs[i], &gs[j], cfg.lambda_app) >= cfg.tau_sim)
                        .collect()
                })
                .collect();
            maximal_clusters(candidates).into_iter().filter(|c| c.len() >= 2).collect()
        })
        .collect();
    let maximal: Vec<Vec<usize>> = per_cell.into_iter().flatten().collect();

    let n = cloud.len();
    let mut owner = vec![usize::MAX; n];
    for (q, c) in maximal.iter().enumerate() {
        for &i in c {
            if owner[i] == usize::MAX {
                owner[i] = q;
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); maximal.len()];
    for (i, &q) in owner.iter().enumerate() {
        if q != usize::MAX {
            clusters[q].push(i);
        }
    }
    clusters.retain(|c| c.len() >= 2);
    let mut cs = ClusterSet::from_clusters(n, clusters);
    cs.maximal = maximal;
    Ok(cs)
}

/// Index of the member with the largest position weight (ties: first).
fn representative(weights: &[f64]) -> usize {
    let mut best = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w > weights[best] {
            best = k;
        }
    }
    best
}

/// Replaces each cluster by one proxy: weighted mean position and color,
/// every other attribute copied from the representative member. Output
/// order is clusters first, then singletons.
pub fn merge_proxy<T: Real>(cloud: &GaussianCloud<T>, cs: &ClusterSet) -> Result<GaussianCloud<T>> {
    let gs = cloud.gaussians();
    let mut out = Vec::with_capacity(cs.output_len());
    for (q, members) in cs.clusters.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Internal(format!("cluster {q} is empty")));
        }
        if cs.logits_x[q].len() != members.len() || cs.logits_f[q].len() != members.len() {
            return Err(Error::Internal(format!("cluster {q} logits do not match its members")));
        }
        let (wx, wf) = cs.weights(q);
        let rep = representative(&wx);
        let mut proxy = gs[members[rep]].clone();
        proxy.mean_xyz = [T::zero(); 3];
        proxy.color_f = [T::zero(); 3];
        for (k, &i) in members.iter().enumerate() {
            let (a, b) = (T::lit(wx[k]), T::lit(wf[k]));
            for c in 0..3 {
                proxy.mean_xyz[c] += a * gs[i].mean_xyz[c];
                proxy.color_f[c] += b * gs[i].color_f[c];
            }
        }
        out.push(proxy);
    }
    out.extend(cs.singletons.iter().map(|&i| gs[i].clone()));
    GaussianCloud::with_feature_dim(out, StageTag::Merged, cloud.feature_dim())
}

/// Gradients of the loss on `frame` w.r.t. every logit, laid out as all
/// position logits (cluster order) followed by all color logits.
pub fn logit_gradients<T: Real>(
    cloud: &GaussianCloud<T>,
    cs: &ClusterSet,
    frame: &CameraFrame<T>,
    loss: LossKind,
) -> Result<(f64, Vec<f64>)> {
    let proxy = merge_proxy(cloud, cs)?;
    let (l, grads) = splat::render_backward_with(&proxy, frame, None, loss, &RenderOptions::default())?;
    let pc = proxy.param_count();
    let gs = cloud.gaussians();
    let total = cs.member_count();
    let mut out = vec![0.0; 2 * total];
    let mut off = 0;
    for (q, members) in cs.clusters.iter().enumerate() {
        let row = grads.param_row(q, pc);
        let gx: Vec<f64> = row[layout::MEAN_XYZ].iter().map(|v| v.to_f64_lossy()).collect();
        let gf: Vec<f64> = row[layout::COLOR].iter().map(|v| v.to_f64_lossy()).collect();
        let p = &proxy.gaussians()[q];
        for (lx, g, attr, logits, base) in [
            (true, &gx, p.mean_xyz, &cs.logits_x[q], off),
            (false, &gf, p.color_f, &cs.logits_f[q], total + off),
        ] {
            let s: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
            let sum: f64 = s.iter().sum();
            for (k, &i) in members.iter().enumerate() {
                let member = if lx { gs[i].mean_xyz } else { gs[i].color_f };
                let mut dot = 0.0;
                for c in 0..3 {
                    dot += g[c] * (member[c].to_f64_lossy() - attr[c].to_f64_lossy());
                }
                out[base + k] = s[k] * (1.0 - s[k]) / sum * dot;
            }
        }
        off += members.len();
    }
    Ok((l.to_f64_lossy(), out))
}

fn flat_logits(cs: &ClusterSet) -> Vec<f64> {
    cs.logits_x.iter().chain(&cs.logits_f).flatten().copied().collect()
}

fn set_flat_logits(cs: &mut ClusterSet, flat: &[f64]) {
    let mut it = flat.iter();
    for l in cs.logits_x.iter_mut().chain(cs.logits_f.iter_mut()) {
        for v in l.iter_mut() {
            *v = *it.next().expect("logit vector length");
        }
    }
}

/// Optimizes the merge logits with Adam, one seeded random frame per step.
pub fn optimize_merge<T: Real>(
    cloud: &GaussianCloud<T>,
    cs: &ClusterSet,
    frames: &[CameraFrame<T>],
    steps: usize,
    cfg: &MergeConfig,
) -> Result<(ClusterSet, Vec<f64>)> {
    let mut cs = cs.clone();
    if steps == 0 || cs.clusters.is_empty() {
        return Ok((cs, Vec::new()));
    }
    if frames.is_empty() {
        return Err(Error::Config("merge optimization needs at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = flat_logits(&cs);
    let mut adam = Adam::new(params.len(), AdamConfig::default());
    let mut losses = Vec::with_capacity(steps);
    let mut initial = None;
    for step in 0..steps {
        let frame = &frames[rng.random_range(0..frames.len())];
        let (loss, grad) = logit_gradients(cloud, &cs, frame, LossKind::L1)?;
        let init = *initial.get_or_insert(loss);
        divergence_guard("merge", step, init, loss)?;
        adam.step(&mut params, &grad, &|_| cfg.lr);
        set_flat_logits(&mut cs, &params);
        losses.push(loss);
    }
    Ok((cs, losses))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeRoundReport {
    pub round: usize,
    pub grid_xyz: f64,
    pub maximal_clusters: usize,
    pub merged_clusters: usize,
    pub before: usize,
    pub after: usize,
    pub final_loss: Option<f64>,
}

/// One round: cluster at `grid_xyz`, optimize the logits, materialize.
pub fn merge_round<T: Real>(
    cloud: &GaussianCloud<T>,
    frames: &[CameraFrame<T>],
    cfg: &MergeConfig,
    round: usize,
) -> Result<(GaussianCloud<T>, ClusterSet, MergeRoundReport)> {
    let grid = cfg.grid_for_round(round);
    let cs = build_clusters_with_grid(cloud, cfg, grid)?;
    let round_cfg = MergeConfig {
        seed: cfg.seed.wrapping_add(round as u64),
        ..cfg.clone()
    };
    let (cs, losses) = optimize_merge(cloud, &cs, frames, cfg.steps, &round_cfg)?;
    let merged = merge_proxy(cloud, &cs)?;
    let report = MergeRoundReport {
        round,
        grid_xyz: grid,
        maximal_clusters: cs.maximal.len(),
        merged_clusters: cs.clusters.len(),
        before: cloud.len(),
        after: merged.len(),
        final_loss: losses.last().copied(),
    };
    Ok((merged, cs, report))
}

/// `cfg.rounds` merge rounds with the grid growing by `cfg.growth` each
/// round.
pub fn run_merging_rounds<T: Real>(
    cloud: &GaussianCloud<T>,
    cfg: &MergeConfig,
    frames: &[CameraFrame<T>],
) -> Result<(GaussianCloud<T>, Vec<MergeRoundReport>)> {
    cfg.validate()?;
    let mut current = cloud.clone();
    let mut reports = Vec::with_capacity(cfg.rounds);
    for m in 0..cfg.rounds {
        let (next, _, report) = merge_round(&current, frames, cfg, m)?;
        current = next;
        reports.push(report);
    }
    Ok((current, reports))
}
