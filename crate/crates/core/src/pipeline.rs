//! The full schedule from a pretrained cloud to a packed container.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::appearance::{distill, AppearanceConfig, AppearanceModel, DistillConfig};
use crate::codec::{measure, pack, CompressedModel, ModelParts};
use crate::error::{Error, Result};
use crate::merge::{merge_round, MergeConfig, MergeRoundReport};
use crate::model::{save_ply, CameraFrame, GaussianCloud};
use crate::scalar::Real;
use crate::select::{accumulate_scores, prune, sample, SelectionConfig};
use crate::splat::LossKind;
use crate::svq::{default_layouts, train_svq, ActiveStages, SvqCodebooks, SvqLayout, SvqStage};
use crate::train::{mean_loss, mean_psnr, LearningRates, Trainer};

/// Iteration budget of every stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSchedule {
    pub t_gs: usize,
    pub t_gp: usize,
    pub t_gm: usize,
    pub merge_rounds: usize,
    pub mlp_start: usize,
    pub svq3d_start: usize,
    pub svq4d_start: usize,
    pub total_iters: usize,
}

impl Default for PipelineSchedule {
    fn default() -> Self {
        Self {
            t_gs: 1000,
            t_gp: 1000,
            t_gm: 1000,
            merge_rounds: 2,
            mlp_start: 4000,
            svq3d_start: 9000,
            svq4d_start: 10000,
            total_iters: 12000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MilestoneKind {
    Sample,
    Prune,
    Merge,
    Mlp,
    Svq3d,
    Svq4d,
    End,
}

impl fmt::Display for MilestoneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MilestoneKind::Sample => "sample",
            MilestoneKind::Prune => "prune",
            MilestoneKind::Merge => "merge",
            MilestoneKind::Mlp => "mlp",
            MilestoneKind::Svq3d => "svq3d",
            MilestoneKind::Svq4d => "svq4d",
            MilestoneKind::End => "end",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Milestone {
    pub kind: MilestoneKind,
    pub iteration: usize,
    /// 1-based merge round; 0 for other milestones.
    pub round: usize,
}

impl PipelineSchedule {
    /// Iteration at which the last merge round's optimization ends.
    pub fn merge_end(&self) -> usize {
        self.t_gs + self.t_gp + self.merge_rounds * self.t_gm
    }

    /// Milestones in execution order. Attribute-compression milestones at
    /// or after `total_iters` are not executed and are omitted.
    pub fn milestones(&self) -> Vec<Milestone> {
        let m = |kind, iteration, round| Milestone { kind, iteration, round };
        let mut out = vec![
            m(MilestoneKind::Sample, 0, 0),
            m(MilestoneKind::Prune, self.t_gs, 0),
        ];
        for r in 1..=self.merge_rounds {
            out.push(m(MilestoneKind::Merge, self.t_gs + self.t_gp + (r - 1) * self.t_gm, r));
        }
        for (kind, it) in [
            (MilestoneKind::Mlp, self.mlp_start),
            (MilestoneKind::Svq3d, self.svq3d_start),
            (MilestoneKind::Svq4d, self.svq4d_start),
        ] {
            if it < self.total_iters {
                out.push(m(kind, it, 0));
            }
        }
        out.push(m(MilestoneKind::End, self.total_iters, 0));
        out
    }

    /// Milestones must be non-decreasing in the fixed stage order.
    pub fn validate(&self) -> Result<()> {
        let order = [
            ("merge end", self.merge_end()),
            ("mlp_start", self.mlp_start),
            ("svq3d_start", self.svq3d_start),
            ("svq4d_start", self.svq4d_start),
        ];
        for w in order.windows(2) {
            if w[0].1 > w[1].1 {
                return Err(Error::Config(format!(
                    "schedule: {} ({}) comes after {} ({})",
                    w[0].0, w[0].1, w[1].0, w[1].1
                )));
            }
        }
        if self.total_iters < self.merge_end() {
            return Err(Error::Config(format!(
                "schedule: total_iters ({}) ends before merging does ({})",
                self.total_iters,
                self.merge_end()
            )));
        }
        Ok(())
    }

    /// Same proportions as the default, shrunk to `unit` iterations per
    /// thousand (e.g. 100 gives milestones 0/100/200/300/400/900/1000).
    pub fn scaled(unit: usize) -> Self {
        let d = Self::default();
        let s = |x: usize| x * unit / 1000;
        Self {
            t_gs: s(d.t_gs),
            t_gp: s(d.t_gp),
            t_gm: s(d.t_gm),
            merge_rounds: d.merge_rounds,
            mlp_start: s(d.mlp_start),
            svq3d_start: s(d.svq3d_start),
            svq4d_start: s(d.svq4d_start),
            total_iters: s(d.total_iters),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvqSettings {
    /// Explicit layouts; `None` uses the defaults with `scale_bits`.
    pub layouts: Option<Vec<SvqLayout>>,
    pub scale_bits: u32,
    /// Reassignment period of quantized fine-tuning.
    pub refresh_every: usize,
}

impl Default for SvqSettings {
    fn default() -> Self {
        Self {
            layouts: None,
            scale_bits: 9,
            refresh_every: 100,
        }
    }
}

impl SvqSettings {
    pub fn layouts_for(&self, feature_dim: usize) -> Vec<SvqLayout> {
        self.layouts.clone().unwrap_or_else(|| default_layouts(feature_dim, self.scale_bits))
    }
}

/// Named model sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    L,
    M,
    S,
    T,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "L" => Ok(Preset::L),
            "M" => Ok(Preset::M),
            "S" => Ok(Preset::S),
            "T" => Ok(Preset::T),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected L, M, S or T)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub schedule: PipelineSchedule,
    pub selection: SelectionConfig,
    /// `rounds` and `steps` are taken from the schedule.
    pub merge: MergeConfig,
    pub use_appearance: bool,
    pub appearance: AppearanceConfig,
    pub distill: DistillConfig,
    pub rates: LearningRates,
    pub svq: SvqSettings,
    pub seed: u64,
    /// Writes a PLY and a JSON sidecar after every milestone.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schedule: PipelineSchedule::default(),
            selection: SelectionConfig::default(),
            merge: MergeConfig::default(),
            use_appearance: true,
            appearance: AppearanceConfig::default(),
            distill: DistillConfig::default(),
            rates: LearningRates::default(),
            svq: SvqSettings::default(),
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn preset(p: Preset) -> Self {
        let mut c = Self::default();
        c.apply_preset(p);
        c
    }

    /// Overrides sampling ratio, pruning quantile, spatial scale codebook
    /// size and merge count. Milestones after merging shift by the change
    /// in merge iterations.
    pub fn apply_preset(&mut self, p: Preset) {
        let (tau, q, scale_bits, rounds) = match p {
            Preset::L => (0.4, 0.8, 9, 2),
            Preset::M => (0.2, 0.8, 9, 2),
            Preset::S => (0.3, 0.9, 8, 2),
            Preset::T => (0.3, 0.9, 8, 4),
        };
        self.selection.tau_gs = tau;
        self.selection.quantile_p = q;
        self.svq.scale_bits = scale_bits;
        // Later stages move with the merge budget so their lengths are kept.
        let s = &mut self.schedule;
        let shift = |x: usize| (x + rounds * s.t_gm).saturating_sub(s.merge_rounds * s.t_gm);
        (s.mlp_start, s.svq3d_start, s.svq4d_start, s.total_iters) =
            (shift(s.mlp_start), shift(s.svq3d_start), shift(s.svq4d_start), shift(s.total_iters));
        s.merge_rounds = rounds;
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.selection.validate()?;
        self.merge.validate()?;
        if self.svq.refresh_every == 0 {
            return Err(Error::Config("svq.refresh_every must be positive".into()));
        }
        if let Some(ls) = &self.svq.layouts {
            for l in ls {
                if ls.iter().filter(|o| o.attribute == l.attribute).count() > 1 {
                    return Err(Error::Config(format!("svq: {:?} has more than one layout", l.attribute)));
                }
            }
        }
        Ok(())
    }
}

/// One line of the progress log, emitted after every milestone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub milestone: MilestoneKind,
    /// Scheduled iteration of the milestone.
    pub iteration: usize,
    /// Optimization steps actually taken when the report was made.
    pub trained: usize,
    pub round: usize,
    pub gaussians: usize,
    pub loss: f64,
    pub psnr: f64,
    /// Container size, on the final report only.
    pub size_mb: Option<f64>,
    pub seconds: f64,
}

pub struct PipelineOutput<T> {
    pub model: CompressedModel,
    pub parts: ModelParts,
    /// The cloud a decoder reconstructs from `model`.
    pub decoded: GaussianCloud<T>,
    pub appearance: Option<AppearanceModel<T>>,
    pub reports: Vec<StageReport>,
    pub merges: Vec<MergeRoundReport>,
}

struct Driver<'a, T: Real> {
    frames: &'a [CameraFrame<T>],
    cfg: &'a PipelineConfig,
    trainer: Trainer<T>,
    iteration: usize,
    start: Instant,
    reports: Vec<StageReport>,
    on_report: &'a mut dyn FnMut(&StageReport),
}

impl<'a, T: Real> Driver<'a, T> {
    fn train(&mut self, steps: usize, stage: &str) -> Result<()> {
        let steps = steps.min(self.cfg.schedule.total_iters.saturating_sub(self.iteration));
        self.trainer.run(self.frames, steps, stage)?;
        self.iteration += steps;
        Ok(())
    }

    /// Trains up to iteration `target`.
    fn train_until(&mut self, target: usize, stage: &str) -> Result<()> {
        self.train(target.saturating_sub(self.iteration), stage)
    }

    fn report(&mut self, m: Milestone, size_mb: Option<f64>, view: Option<&GaussianCloud<T>>) -> Result<()> {
        let owned;
        let view = match view {
            Some(v) => v,
            None => {
                owned = self.trainer.render_cloud()?;
                &owned
            }
        };
        let app = self.trainer.appearance();
        let r = StageReport {
            milestone: m.kind,
            iteration: m.iteration,
            trained: self.iteration,
            round: m.round,
            gaussians: view.len(),
            loss: mean_loss(view, app, self.frames, LossKind::L1)?,
            psnr: mean_psnr(view, app, self.frames)?,
            size_mb,
            seconds: self.start.elapsed().as_secs_f64(),
        };
        if let Some(dir) = &self.cfg.checkpoint_dir {
            self.checkpoint(dir, &r, view)?;
        }
        (self.on_report)(&r);
        self.reports.push(r);
        Ok(())
    }

    fn checkpoint(&self, dir: &std::path::Path, r: &StageReport, view: &GaussianCloud<T>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = match r.round {
            0 => format!("{:06}_{}", r.iteration, r.milestone),
            k => format!("{:06}_{}{}", r.iteration, r.milestone, k),
        };
        save_ply(view, dir.join(format!("{stem}.ply")))?;
        let sidecar = serde_json::json!({
            "report": r,
            "seed": self.cfg.seed,
            "optimizer": self.trainer.optimizer(),
        });
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_vec(&sidecar).map_err(|e| Error::Internal(e.to_string()))?)
            .map_err(|e| Error::io(&path, e))?;
        if let Some(app) = self.trainer.appearance() {
            let path = dir.join(format!("{stem}.mlp"));
            std::fs::write(&path, app.cast::<f32>().to_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Runs every stage on `pretrained` and packs the result.
///
/// `on_report` sees each [`StageReport`] as soon as its milestone is
/// reached.
pub fn run<T: Real>(
    pretrained: &GaussianCloud<T>,
    frames: &[CameraFrame<T>],
    cfg: &PipelineConfig,
    on_report: &mut dyn FnMut(&StageReport),
) -> Result<PipelineOutput<T>> {
    cfg.validate()?;
    if pretrained.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if frames.is_empty() {
        return Err(Error::Config("the pipeline needs at least one frame".into()));
    }
    for (i, f) in frames.iter().enumerate() {
        f.validate().map_err(|e| Error::Render {
            frame: i,
            source: Box::new(e),
        })?;
    }
    let sched = &cfg.schedule;
    let milestones = sched.milestones();
    let mut d = Driver {
        frames,
        cfg,
        trainer: Trainer::new(pretrained.clone(), cfg.rates.clone(), cfg.seed),
        iteration: 0,
        start: Instant::now(),
        reports: Vec::new(),
        on_report,
    };
    let mut merges = Vec::new();
    let merge_cfg = MergeConfig {
        rounds: sched.merge_rounds,
        steps: sched.t_gm,
        seed: cfg.seed,
        ..cfg.merge.clone()
    };

    for m in &milestones {
        let reduction = matches!(m.kind, MilestoneKind::Sample | MilestoneKind::Prune | MilestoneKind::Merge);
        if reduction && d.iteration != m.iteration {
            return Err(Error::Internal(format!(
                "{} milestone reached at iteration {} instead of {}",
                m.kind, d.iteration, m.iteration
            )));
        }
        match m.kind {
            MilestoneKind::Sample => {
                let cloud = d.trainer.cloud().clone();
                let mut scores = accumulate_scores(&cloud, frames, None, LossKind::L1)?;
                let (sampled, _) = sample(&cloud, &mut scores, &cfg.selection)?;
                d.trainer.set_cloud(sampled);
                d.report(*m, None, None)?;
                d.train_until(sched.t_gs, "sampling fine-tune")?;
            }
            MilestoneKind::Prune => {
                let cloud = d.trainer.cloud().clone();
                let scores = accumulate_scores(&cloud, frames, None, LossKind::L1)?;
                let (pruned, _) = prune(&cloud, &scores, &cfg.selection)?;
                d.trainer.set_cloud(pruned);
                d.report(*m, None, None)?;
                d.train_until(sched.t_gs + sched.t_gp, "pruning fine-tune")?;
            }
            MilestoneKind::Merge => {
                let cloud = d.trainer.cloud().clone();
                let (merged, _, rep) = merge_round(&cloud, frames, &merge_cfg, m.round - 1)?;
                merges.push(rep);
                d.trainer.set_cloud(merged);
                d.iteration += sched.t_gm;
                d.report(*m, None, None)?;
            }
            MilestoneKind::Mlp => {
                if d.iteration < m.iteration {
                    d.train_until(m.iteration, "pre-appearance fine-tune")?;
                }
                if cfg.use_appearance {
                    let cloud = d.trainer.cloud().clone();
                    let app_cfg = AppearanceConfig {
                        feature_dim: cloud.feature_dim(),
                        ..cfg.appearance
                    };
                    let model = AppearanceModel::<T>::new(app_cfg, cfg.seed.wrapping_add(4));
                    let segment = sched.svq3d_start.min(sched.total_iters) - m.iteration;
                    let warm = cfg.distill.warmup_steps.min(segment);
                    let dcfg = DistillConfig {
                        seed: cfg.seed.wrapping_add(1),
                        ..cfg.distill.clone()
                    };
                    let out = distill(&model, &cloud, frames, warm, &dcfg)?;
                    d.trainer.set_cloud(out.cloud);
                    d.trainer.set_appearance(out.model);
                    d.iteration += warm;
                }
                d.report(*m, None, None)?;
            }
            MilestoneKind::Svq3d | MilestoneKind::Svq4d => {
                d.train_until(m.iteration, "appearance fine-tune")?;
                let stage = if m.kind == MilestoneKind::Svq3d {
                    SvqStage::Attr3D
                } else {
                    SvqStage::Attr4D
                };
                let cloud = d.trainer.cloud().clone();
                let layouts: Vec<SvqLayout> = cfg
                    .svq
                    .layouts_for(cloud.feature_dim())
                    .into_iter()
                    .filter(|l| l.stage() == stage)
                    .collect();
                let active = ActiveStages {
                    attr3d: stage == SvqStage::Attr3D,
                    attr4d: stage == SvqStage::Attr4D,
                };
                let seed = cfg.seed.wrapping_add(if active.attr3d { 2 } else { 3 });
                let mut books = d.trainer.codebooks().cloned().unwrap_or_default();
                if !layouts.is_empty() {
                    books.extend(train_svq(&cloud, &layouts, active, seed)?);
                }
                if !books.attributes.is_empty() {
                    d.trainer.set_quantization(books, cfg.svq.refresh_every)?;
                }
                d.report(*m, None, None)?;
            }
            MilestoneKind::End => {
                d.train_until(sched.total_iters, "final fine-tune")?;
            }
        }
    }

    let view = d.trainer.render_cloud()?;
    let books = d.trainer.codebooks().cloned().unwrap_or_else(SvqCodebooks::default);
    let streams = d.trainer.index_streams().map(|s| s.to_vec()).unwrap_or_default();
    let mut parts = ModelParts::from_cloud(&view, &books, &streams, d.trainer.appearance());
    parts.extra = serde_json::json!({
        "schedule": sched,
        "tau_gs": cfg.selection.tau_gs,
        "quantile_p": cfg.selection.quantile_p,
        "seed": cfg.seed,
    });
    let model = pack(&parts)?;
    let decoded: GaussianCloud<T> = parts.to_cloud()?;
    let appearance = parts.appearance.as_ref().map(|m| m.cast::<T>());
    let size = measure(&model).megabytes();
    // The final report describes what a decoder sees.
    if let Some(a) = &appearance {
        d.trainer.set_appearance(a.clone());
    }
    let end = *milestones.last().expect("end milestone");
    d.report(end, Some(size), Some(&decoded))?;
    Ok(PipelineOutput {
        model,
        parts,
        decoded,
        appearance,
        reports: d.reports,
        merges,
    })
}
