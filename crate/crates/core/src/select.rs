//! Gradient-based importance scores, top-k sampling and quantile pruning.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::AppearanceModel;
use crate::error::{Error, Result};
use crate::model::{CameraFrame, GaussianCloud, IndexMap, StageTag};
use crate::scalar::Real;
use crate::splat::{self, LossKind, RenderOptions};

/// Per-Gaussian scores accumulated over a set of frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    /// Sum over frames of the norm of the screen-space position gradient.
    pub s_grad: Vec<f64>,
    /// Signed sum over frames of the temporal-mean gradient.
    pub t_grad: Vec<f64>,
    /// Ranking key `s_grad · |t_grad|`.
    pub sd: Vec<f64>,
    /// `sd` of the last Gaussian kept by [`sample`]; NaN until sampled.
    pub sd_cutoff: f64,
    /// Fingerprint of the cloud the scores were computed on.
    pub cloud_fingerprint: u64,
}

impl ScoreTable {
    pub fn from_parts(s_grad: Vec<f64>, t_grad: Vec<f64>, cloud_fingerprint: u64) -> Self {
        let sd = s_grad.iter().zip(&t_grad).map(|(s, t)| s * t.abs()).collect();
        Self {
            s_grad,
            t_grad,
            sd,
            sd_cutoff: f64::NAN,
            cloud_fingerprint,
        }
    }

    pub fn len(&self) -> usize {
        self.s_grad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_grad.is_empty()
    }

    /// `index,s_grad,t_grad,sd` with a header line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "index,s_grad,t_grad,sd")?;
        for i in 0..self.len() {
            writeln!(w, "{i},{:e},{:e},{:e}", self.s_grad[i], self.t_grad[i], self.sd[i])?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub tau_gs: f64,
    pub quantile_p: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            tau_gs: 0.2,
            quantile_p: 0.8,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_gs > 0.0 && self.tau_gs <= 1.0) {
            return Err(Error::Config(format!("tau_gs must lie in (0, 1], got {}", self.tau_gs)));
        }
        if !(self.quantile_p > 0.0 && self.quantile_p < 1.0) {
            return Err(Error::Config(format!("quantile_p must lie in (0, 1), got {}", self.quantile_p)));
        }
        Ok(())
    }
}

/// Renders every frame and accumulates the static and dynamic scores.
pub fn accumulate_scores<T: Real>(
    cloud: &GaussianCloud<T>,
    frames: &[CameraFrame<T>],
    appearance: Option<&AppearanceModel<T>>,
    loss: LossKind,
) -> Result<ScoreTable> {
    if frames.is_empty() {
        return Err(Error::Config("score accumulation needs at least one frame".into()));
    }
    let per_frame: Vec<Result<(Vec<f64>, Vec<f64>)>> = frames
        .par_iter()
        .enumerate()
        .map(|(j, frame)| {
            let (_, g) = splat::render_backward_with(cloud, frame, appearance, loss, &RenderOptions::default())
                .map_err(|e| Error::Render {
                    frame: j,
                    source: Box::new(e),
                })?;
            let s = g
                .d_loss_d_u
                .iter()
                .map(|u| {
                    let (a, b) = (u[0].to_f64_lossy(), u[1].to_f64_lossy());
                    (a * a + b * b).sqrt()
                })
                .collect();
            let t = g.d_loss_d_t.iter().map(|t| t.to_f64_lossy()).collect();
            Ok((s, t))
        })
        .collect();
    let n = cloud.len();
    let mut s_grad = vec![0.0; n];
    let mut t_grad = vec![0.0; n];
    for r in per_frame {
        let (s, t) = r?;
        for i in 0..n {
            s_grad[i] += s[i];
            t_grad[i] += t[i];
        }
    }
    Ok(ScoreTable::from_parts(s_grad, t_grad, cloud.fingerprint()))
}

fn check_aligned<T: Real>(cloud: &GaussianCloud<T>, scores: &ScoreTable) -> Result<()> {
    if scores.len() != cloud.len() {
        return Err(Error::StaleScores(format!(
            "score table has {} entries, cloud has {}",
            scores.len(),
            cloud.len()
        )));
    }
    Ok(())
}

/// Number of Gaussians kept by [`sample`]: `⌈τ·n⌉`.
pub fn sample_count(tau: f64, n: usize) -> usize {
    ceil_guarded(tau * n as f64)
}

/// `⌈x⌉`, treating values within 1e-9 of an integer as that integer so
/// that e.g. `0.2 · 10` keeps exactly 2.
fn ceil_guarded(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r.max(0.0) as usize
    } else {
        x.ceil().max(0.0) as usize
    }
}

/// Keeps the `⌈τ_GS·n⌉` Gaussians with the largest `sd`; ties go to the
/// lower index and the kept Gaussians stay in their original order.
pub fn sample<T: Real>(
    cloud: &GaussianCloud<T>,
    scores: &mut ScoreTable,
    cfg: &SelectionConfig,
) -> Result<(GaussianCloud<T>, IndexMap)> {
    cfg.validate()?;
    check_aligned(cloud, scores)?;
    let k = sample_count(cfg.tau_gs, cloud.len());
    if k == 0 {
        return Err(Error::EmptySelection);
    }
    let order = top_k(&scores.sd, k);
    scores.sd_cutoff = order.last().map_or(f64::NAN, |&i| scores.sd[i]);
    let mut keep = order;
    keep.sort_unstable();
    Ok(cloud.subset(&keep, StageTag::Sampled))
}

/// Indices of the `k` largest values in descending order (ties: lower
/// index first). NaN ranks lowest.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let key = |i: usize| if values[i].is_nan() { f64::NEG_INFINITY } else { values[i] };
    idx.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Nearest-rank quantile: the ascending-sorted value at 1-based rank
/// `⌈p·n⌉`.
pub fn quantile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ceil_guarded(p * v.len() as f64).clamp(1, v.len());
    Some(v[rank - 1])
}

/// Thresholds `(τ_S, τ_T)` used by [`prune`].
pub fn prune_thresholds(scores: &ScoreTable, p: f64) -> Option<(f64, f64)> {
    Some((quantile(&scores.s_grad, p)?, quantile(&scores.t_grad, p)?))
}

/// Keeps Gaussian `i` iff `s_grad[i] ≥ τ_S` or `t_grad[i] ≥ τ_T`.
///
/// The cloud must come from [`sample`] and the scores must have been
/// recomputed on it.
pub fn prune<T: Real>(
    cloud: &GaussianCloud<T>,
    scores: &ScoreTable,
    cfg: &SelectionConfig,
) -> Result<(GaussianCloud<T>, IndexMap)> {
    cfg.validate()?;
    if cloud.stage() != StageTag::Sampled {
        return Err(Error::Staging(format!(
            "pruning expects a sampled cloud, got {:?}",
            cloud.stage()
        )));
    }
    check_aligned(cloud, scores)?;
    if scores.cloud_fingerprint != cloud.fingerprint() {
        return Err(Error::StaleScores(
            "scores were not computed on this cloud; rescore after sampling".into(),
        ));
    }
    let (tau_s, tau_t) = prune_thresholds(scores, cfg.quantile_p).ok_or(Error::EmptySelection)?;
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| scores.s_grad[i] >= tau_s || scores.t_grad[i] >= tau_t)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptySelection);
    }
    Ok(cloud.subset(&keep, StageTag::Pruned))
}
