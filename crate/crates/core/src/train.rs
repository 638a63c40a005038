//! Gradient-descent fine-tuning of a cloud, optionally with the appearance
//! model and with straight-through quantization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::{divergence_guard, AppearanceModel};
use crate::error::{Error, Result};
use crate::model::{layout, CameraFrame, GaussianCloud};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Real;
use crate::splat::{self, LossKind, RenderOptions};
use crate::svq::{self, IndexStream, SvqCodebooks};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub means: f64,
    pub scales: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub feature: f64,
    pub mlp: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            means: 1.6e-4,
            scales: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            feature: 2.5e-3,
            mlp: 1e-3,
        }
    }
}

impl LearningRates {
    /// Rate of flat per-Gaussian parameter `k`. Opacity and color are
    /// frozen when an appearance model supplies them.
    pub fn for_param(&self, k: usize, appearance: bool) -> f64 {
        match k {
            k if layout::MEAN_XYZ.contains(&k) || k == layout::MEAN_T => self.means,
            k if layout::SCALE_XYZ.contains(&k) || k == layout::SCALE_T => self.scales,
            k if layout::ROT_L.contains(&k) || layout::ROT_R.contains(&k) => self.rotation,
            k if k == layout::OPACITY => {
                if appearance {
                    0.0
                } else {
                    self.opacity
                }
            }
            k if layout::COLOR.contains(&k) => {
                if appearance {
                    0.0
                } else {
                    self.color
                }
            }
            _ => self.feature,
        }
    }
}

#[derive(Clone, Debug)]
struct QuantState {
    books: SvqCodebooks,
    streams: Vec<IndexStream>,
    refresh_every: usize,
    since_refresh: usize,
    codeword_opt: Adam,
}

/// Flat parameter offset of the first component of attribute `a`.
fn attribute_offset(a: svq::Attribute) -> usize {
    match a {
        svq::Attribute::ScaleXYZ => layout::SCALE_XYZ.start,
        svq::Attribute::RotR => layout::ROT_R.start,
        svq::Attribute::Feature => layout::FEATURE_START,
        svq::Attribute::ScaleT => layout::SCALE_T,
        svq::Attribute::RotL => layout::ROT_L.start,
    }
}

impl QuantState {
    /// The rendered value of a quantized attribute is its codeword, so each
    /// codeword's exact gradient is the sum over its members.
    fn step_codewords<T: Real>(&mut self, grads: &[T], pc: usize, rates: &LearningRates) {
        let mut entries: Vec<f32> = Vec::new();
        let mut g: Vec<f64> = Vec::new();
        let mut lrs: Vec<f64> = Vec::new();
        for ab in &self.books.attributes {
            let a = ab.layout.attribute;
            let lr = rates.for_param(attribute_offset(a), false);
            let mut off = attribute_offset(a);
            for (si, (cb, &d)) in ab.codebooks.iter().zip(&ab.layout.sub_dims).enumerate() {
                let base = g.len();
                entries.extend_from_slice(&cb.entries);
                g.resize(base + cb.entries.len(), 0.0);
                lrs.resize(base + cb.entries.len(), lr);
                let stream = self
                    .streams
                    .iter()
                    .find(|s| s.attribute == a && s.sub_vector == si)
                    .expect("stream per sub-vector");
                for (i, &k) in stream.indices.iter().enumerate() {
                    for j in 0..d {
                        g[base + k as usize * d + j] += grads[i * pc + off + j].to_f64_lossy();
                    }
                }
                off += d;
            }
        }
        let gf: Vec<f32> = g.iter().map(|&x| x as f32).collect();
        self.codeword_opt.step(&mut entries, &gf, &|i| lrs[i]);
        let mut pos = 0;
        for ab in &mut self.books.attributes {
            let quat = ab.layout.attribute.is_quaternion();
            for cb in &mut ab.codebooks {
                let n = cb.entries.len();
                cb.entries.copy_from_slice(&entries[pos..pos + n]);
                pos += n;
                if quat {
                    for w in cb.entries.chunks_mut(cb.dim) {
                        let norm = w.iter().map(|x| x * x).sum::<f32>().sqrt();
                        if norm > 0.0 {
                            w.iter_mut().for_each(|x| *x /= norm);
                        }
                    }
                }
            }
        }
    }
}

/// Owns the trainable state: cloud, optional appearance model and optional
/// quantization. Each step renders one seeded random frame.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    cloud: GaussianCloud<T>,
    appearance: Option<AppearanceModel<T>>,
    quant: Option<QuantState>,
    cloud_opt: Adam,
    mlp_opt: Option<Adam>,
    rates: LearningRates,
    rng: ChaCha8Rng,
    loss: LossKind,
    steps: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(cloud: GaussianCloud<T>, rates: LearningRates, seed: u64) -> Self {
        let n = cloud.len() * cloud.param_count();
        Self {
            cloud,
            appearance: None,
            quant: None,
            cloud_opt: Adam::new(n, AdamConfig::default()),
            mlp_opt: None,
            rates,
            rng: ChaCha8Rng::seed_from_u64(seed),
            loss: LossKind::L1,
            steps: 0,
        }
    }

    pub fn cloud(&self) -> &GaussianCloud<T> {
        &self.cloud
    }

    pub fn appearance(&self) -> Option<&AppearanceModel<T>> {
        self.appearance.as_ref()
    }

    pub fn codebooks(&self) -> Option<&SvqCodebooks> {
        self.quant.as_ref().map(|q| &q.books)
    }

    pub fn index_streams(&self) -> Option<&[IndexStream]> {
        self.quant.as_ref().map(|q| q.streams.as_slice())
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    /// Optimizer state of the per-Gaussian parameters.
    pub fn optimizer(&self) -> &Adam {
        &self.cloud_opt
    }

    /// Replaces the cloud (e.g. after a reduction) and resets its optimizer
    /// state. Quantization is dropped.
    pub fn set_cloud(&mut self, cloud: GaussianCloud<T>) {
        self.cloud_opt = Adam::new(cloud.len() * cloud.param_count(), AdamConfig::default());
        self.cloud = cloud;
        self.quant = None;
    }

    pub fn set_appearance(&mut self, model: AppearanceModel<T>) {
        self.mlp_opt = Some(Adam::new(model.param_count(), AdamConfig::default()));
        self.appearance = Some(model);
    }

    /// Enables quantization with `books`. Codewords get the summed gradient
    /// of their members every step; the continuous attributes get the same
    /// gradient straight through and are reassigned every `refresh_every`
    /// steps.
    pub fn set_quantization(&mut self, books: SvqCodebooks, refresh_every: usize) -> Result<()> {
        let (streams, _) = svq::quantize(&self.cloud, &books, books.stages())?;
        let entries = books.attributes.iter().flat_map(|a| &a.codebooks).map(|c| c.entries.len()).sum();
        self.quant = Some(QuantState {
            books,
            streams,
            refresh_every: refresh_every.max(1),
            since_refresh: 0,
            codeword_opt: Adam::new(entries, AdamConfig::default()),
        });
        Ok(())
    }

    /// The cloud the renderer sees: dequantized when quantization is on.
    pub fn render_cloud(&self) -> Result<GaussianCloud<T>> {
        match &self.quant {
            Some(q) => svq::dequantize(&self.cloud, &q.books, &q.streams),
            None => Ok(self.cloud.clone()),
        }
    }

    /// One optimization step on a random frame; returns its loss.
    pub fn step(&mut self, frames: &[CameraFrame<T>]) -> Result<f64> {
        if frames.is_empty() {
            return Err(Error::Config("training needs at least one frame".into()));
        }
        let j = self.rng.random_range(0..frames.len());
        let view = self.render_cloud()?;
        let (loss, grads) = splat::render_backward_with(
            &view,
            &frames[j],
            self.appearance.as_ref(),
            self.loss,
            &RenderOptions::default(),
        )
        .map_err(|e| Error::Render {
            frame: j,
            source: Box::new(e),
        })?;
        // Straight-through: gradients at the dequantized point update the
        // continuous parameters.
        let pc = self.cloud.param_count();
        let has_app = self.appearance.is_some();
        let rates: Vec<f64> = (0..pc).map(|k| self.rates.for_param(k, has_app)).collect();
        let mut params = self.cloud.flat_params();
        self.cloud_opt.step(&mut params, &grads.d_loss_d_params, &|i| rates[i % pc]);
        self.cloud.set_flat_params(&params);
        if let (Some(model), Some(opt), Some(g)) = (self.appearance.as_mut(), self.mlp_opt.as_mut(), grads.appearance) {
            let mut p = model.params();
            let lr = self.rates.mlp;
            opt.step(&mut p, &g, &|_| lr);
            model.set_params(&p);
        }
        if let Some(q) = self.quant.as_mut() {
            q.step_codewords(&grads.d_loss_d_params, pc, &self.rates);
            q.since_refresh += 1;
            if q.since_refresh >= q.refresh_every {
                // Reassign, then put the continuous values back on their
                // codewords so straight-through drift stays bounded.
                q.since_refresh = 0;
                let (streams, snapped) = svq::quantize(&self.cloud, &q.books, q.books.stages())?;
                q.streams = streams;
                self.cloud = snapped;
            }
        }
        self.steps += 1;
        Ok(loss.to_f64_lossy())
    }

    /// Runs `steps` steps with the divergence guard relative to the first
    /// loss of this run.
    pub fn run(&mut self, frames: &[CameraFrame<T>], steps: usize, stage: &str) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(steps);
        for s in 0..steps {
            let l = self.step(frames)?;
            divergence_guard(stage, s, losses.first().copied().unwrap_or(l), l)?;
            losses.push(l);
        }
        Ok(losses)
    }

    /// Mean loss of the current render cloud over all frames.
    pub fn evaluate(&self, frames: &[CameraFrame<T>]) -> Result<f64> {
        mean_loss(&self.render_cloud()?, self.appearance.as_ref(), frames, self.loss)
    }
}

pub fn mean_loss<T: Real>(
    cloud: &GaussianCloud<T>,
    appearance: Option<&AppearanceModel<T>>,
    frames: &[CameraFrame<T>],
    loss: LossKind,
) -> Result<f64> {
    let mut acc = 0.0;
    for f in frames {
        let img = splat::render(cloud, f, appearance)?.image;
        acc += splat::image_loss(&img, &f.image, loss).to_f64_lossy();
    }
    Ok(acc / frames.len().max(1) as f64)
}

/// Mean PSNR in dB over `frames`.
pub fn mean_psnr<T: Real>(
    cloud: &GaussianCloud<T>,
    appearance: Option<&AppearanceModel<T>>,
    frames: &[CameraFrame<T>],
) -> Result<f64> {
    let mut acc = 0.0;
    for f in frames {
        let img = splat::render(cloud, f, appearance)?.image;
        acc += splat::psnr(&img, &f.image);
    }
    Ok(acc / frames.len().max(1) as f64)
}

/// Straight-through fine-tuning under fixed quantization: returns the
/// continuous cloud, the refreshed codebooks and the per-step losses.
#[allow(clippy::too_many_arguments)]
pub fn finetune_quantized<T: Real>(
    cloud: &GaussianCloud<T>,
    appearance: Option<&AppearanceModel<T>>,
    books: &SvqCodebooks,
    frames: &[CameraFrame<T>],
    steps: usize,
    refresh_every: usize,
    rates: &LearningRates,
    seed: u64,
) -> Result<(GaussianCloud<T>, SvqCodebooks, Vec<f64>)> {
    if steps == 0 {
        return Ok((cloud.clone(), books.clone(), Vec::new()));
    }
    let mut t = Trainer::new(cloud.clone(), rates.clone(), seed);
    if let Some(m) = appearance {
        t.set_appearance(m.clone());
    }
    t.set_quantization(books.clone(), refresh_every)?;
    let losses = t.run(frames, steps, "quantized fine-tuning")?;
    let books = t.codebooks().cloned().unwrap_or_default();
    Ok((t.cloud, books, losses))
}
