//! Implicit appearance: a spatial trunk plus three time-conditioned heads
//! that replace stored per-Gaussian color and opacity at render time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::model::{CameraFrame, Gaussian4D, GaussianCloud};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Real;
use crate::splat::{self, LossKind, RenderOptions};

/// Fully connected layer, `weight` is row-major `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || T::lit(rng.random_range(-bound..bound));
        let weight = (0..in_dim * out_dim).map(|_| draw()).collect();
        let bias = (0..out_dim).map(|_| draw()).collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn forward(&self, x: &[T], out: &mut Vec<T>) {
        out.clear();
        for (row, &b) in self.weight.chunks_exact(self.in_dim).zip(&self.bias) {
            let mut acc = b;
            for (&w, &xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(acc);
        }
    }

    /// Accumulates parameter gradients into `grad` (weights then biases) and
    /// writes the input gradient into `d_in`.
    fn backward(&self, x: &[T], d_out: &[T], grad: &mut [T], d_in: &mut Vec<T>) {
        let (gw, gb) = grad.split_at_mut(self.weight.len());
        d_in.clear();
        d_in.resize(self.in_dim, T::zero());
        for (o, &g) in d_out.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            gb[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut gw[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                d_in[i] += g * row[i];
            }
        }
    }
}

/// ReLU multilayer perceptron; the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct MlpCache<T> {
    /// `acts[0]` is the input, `acts[k + 1]` the output of layer `k`
    /// (after ReLU for hidden layers).
    acts: Vec<Vec<T>>,
}

impl<T: Real> Mlp<T> {
    fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
        }
    }

    fn zeros(dims: &[usize]) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn forward<'c>(&self, input: &[T], cache: &'c mut MlpCache<T>) -> &'c [T] {
        cache.acts.resize_with(self.layers.len() + 1, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(input);
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let (done, rest) = cache.acts.split_at_mut(k + 1);
            layer.forward(&done[k], &mut rest[0]);
            if k < last {
                for v in rest[0].iter_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
            }
        }
        &cache.acts[self.layers.len()]
    }

    fn backward(&self, cache: &MlpCache<T>, d_out: &[T], grad: &mut [T], d_in: &mut Vec<T>) {
        let mut g = d_out.to_vec();
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.param_count();
        }
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let span = offsets[k]..offsets[k] + layer.param_count();
            layer.backward(&cache.acts[k], &g, &mut grad[span], d_in);
            if k > 0 {
                // ReLU mask of the previous layer's output.
                for (d, &a) in d_in.iter_mut().zip(&cache.acts[k]) {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                }
                std::mem::swap(&mut g, d_in);
            }
        }
    }

    fn write_params(&self, out: &mut Vec<T>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
    }

    fn read_params(&mut self, p: &[T]) -> usize {
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
        off
    }
}

/// Network dimensions. Defaults: trunk of two 64-wide ReLU layers into a
/// 32-wide latent, heads with one 32-wide hidden layer, four positional
/// encoding bands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppearanceConfig {
    pub feature_dim: usize,
    pub pe_bands: usize,
    pub trunk_width: usize,
    pub trunk_layers: usize,
    pub latent_dim: usize,
    pub head_width: usize,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        Self {
            feature_dim: crate::model::DEFAULT_FEATURE_DIM,
            pe_bands: 4,
            trunk_width: 64,
            trunk_layers: 2,
            latent_dim: 32,
            head_width: 32,
        }
    }
}

impl AppearanceConfig {
    pub fn position_encoding_dim(&self) -> usize {
        3 + 6 * self.pe_bands
    }

    pub fn trunk_input_dim(&self) -> usize {
        self.position_encoding_dim() + self.feature_dim + 3
    }

    fn trunk_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.trunk_input_dim()];
        dims.extend(std::iter::repeat_n(self.trunk_width, self.trunk_layers));
        dims.push(self.latent_dim);
        dims
    }

    fn head_dims(&self, extra_in: usize, out: usize) -> Vec<usize> {
        vec![self.latent_dim + extra_in, self.head_width, out]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceModel<T> {
    pub config: AppearanceConfig,
    pub trunk: Mlp<T>,
    pub head_opacity: Mlp<T>,
    pub head_static: Mlp<T>,
    pub head_viewdep: Mlp<T>,
}

/// Intermediate values of one [`AppearanceModel::forward_cached`] call.
#[derive(Clone, Debug, Default)]
pub struct AppearanceCache<T> {
    trunk: MlpCache<T>,
    opacity: MlpCache<T>,
    static_: MlpCache<T>,
    viewdep: MlpCache<T>,
    mean_xyz: [T; 3],
    color_pass: [bool; 3],
}

/// Gradients of one appearance evaluation w.r.t. its inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AppearanceInputGrad<T> {
    pub mean_xyz: Vec3<T>,
    pub feature: Vec<T>,
    pub view_dir: Vec3<T>,
}

impl<T: Real> AppearanceModel<T> {
    pub fn new(config: AppearanceConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            config,
            trunk: Mlp::new(&config.trunk_dims(), &mut rng),
            head_opacity: Mlp::new(&config.head_dims(0, 1), &mut rng),
            head_static: Mlp::new(&config.head_dims(0, 3), &mut rng),
            head_viewdep: Mlp::new(&config.head_dims(3, 3), &mut rng),
        }
    }

    pub fn zeros(config: AppearanceConfig) -> Self {
        Self {
            config,
            trunk: Mlp::zeros(&config.trunk_dims()),
            head_opacity: Mlp::zeros(&config.head_dims(0, 1)),
            head_static: Mlp::zeros(&config.head_dims(0, 3)),
            head_viewdep: Mlp::zeros(&config.head_dims(3, 3)),
        }
    }

    fn mlps(&self) -> [&Mlp<T>; 4] {
        [&self.trunk, &self.head_opacity, &self.head_static, &self.head_viewdep]
    }

    fn mlps_mut(&mut self) -> [&mut Mlp<T>; 4] {
        [
            &mut self.trunk,
            &mut self.head_opacity,
            &mut self.head_static,
            &mut self.head_viewdep,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.mlps().iter().map(|m| m.param_count()).sum()
    }

    /// All weights flattened: trunk, opacity head, static head, view head;
    /// per layer weights then biases.
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for m in self.mlps() {
            m.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, p: &[T]) {
        assert_eq!(p.len(), self.param_count(), "appearance parameter length mismatch");
        let mut off = 0;
        for m in self.mlps_mut() {
            off += m.read_params(&p[off..]);
        }
    }

    /// Layer shapes `(in, out)` of the four networks in parameter order.
    pub fn layer_shapes(&self) -> Vec<Vec<(usize, usize)>> {
        self.mlps()
            .iter()
            .map(|m| m.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect())
            .collect()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let expected = Self::zeros(self.config);
        if self.layer_shapes() != expected.layer_shapes() {
            return Err(Error::Config(
                "appearance layer shapes do not match the configuration".into(),
            ));
        }
        for m in self.mlps() {
            for l in &m.layers {
                if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                    return Err(Error::Config("appearance layer buffer size mismatch".into()));
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> AppearanceModel<U> {
        let mut out = AppearanceModel::<U>::zeros(self.config);
        let p: Vec<U> = self.params().iter().map(|&x| U::lit(x.to_f64_lossy())).collect();
        out.set_params(&p);
        out
    }

    fn encode_input(&self, mean_xyz: Vec3<T>, feature: &[T], t: T, out: &mut Vec<T>) {
        out.clear();
        out.extend_from_slice(&mean_xyz);
        let pi = T::lit(std::f64::consts::PI);
        for k in 0..self.config.pe_bands {
            let freq = T::lit((1u64 << k) as f64) * pi;
            for &x in &mean_xyz {
                out.push((freq * x).sin());
                out.push((freq * x).cos());
            }
        }
        out.extend_from_slice(feature);
        let tau = T::lit(std::f64::consts::TAU);
        out.push(t);
        out.push((tau * t).sin());
        out.push((tau * t).cos());
    }

    /// Opacity logit and color for one Gaussian at time `t` seen along
    /// `view_dir` (camera to Gaussian, unit length).
    pub fn forward(&self, g: &Gaussian4D<T>, t: T, view_dir: Vec3<T>) -> Result<(T, [T; 3])> {
        if g.feature_dim() != self.config.feature_dim {
            return Err(Error::Config(format!(
                "Gaussian feature width {} does not match appearance model width {}",
                g.feature_dim(),
                self.config.feature_dim
            )));
        }
        let mut cache = AppearanceCache::default();
        Ok(self.forward_cached(g.mean_xyz, &g.feature, t, view_dir, &mut cache))
    }

    pub fn forward_cached(
        &self,
        mean_xyz: Vec3<T>,
        feature: &[T],
        t: T,
        view_dir: Vec3<T>,
        cache: &mut AppearanceCache<T>,
    ) -> (T, [T; 3]) {
        let mut input = Vec::with_capacity(self.config.trunk_input_dim());
        self.encode_input(mean_xyz, feature, t, &mut input);
        cache.mean_xyz = mean_xyz;
        let latent = self.trunk.forward(&input, &mut cache.trunk).to_vec();
        let logit = self.head_opacity.forward(&latent, &mut cache.opacity)[0];
        let stat = self.head_static.forward(&latent, &mut cache.static_).to_vec();
        let mut vin = latent;
        vin.extend_from_slice(&view_dir);
        let vd = self.head_viewdep.forward(&vin, &mut cache.viewdep);
        let mut color = [T::zero(); 3];
        for c in 0..3 {
            let raw = stat[c].sigmoid() + vd[c];
            cache.color_pass[c] = raw >= T::zero() && raw <= T::one();
            color[c] = raw.max(T::zero()).min(T::one());
        }
        (logit, color)
    }

    /// Backpropagates `(d_logit, d_color)` of one cached evaluation:
    /// weight gradients are accumulated into `grad` (layout of [`params`]),
    /// input gradients are returned.
    ///
    /// [`params`]: AppearanceModel::params
    pub fn backward(
        &self,
        cache: &AppearanceCache<T>,
        d_logit: T,
        d_color: [T; 3],
        grad: &mut [T],
    ) -> AppearanceInputGrad<T> {
        let counts = self.mlps().map(|m| m.param_count());
        let (g_trunk, rest) = grad.split_at_mut(counts[0]);
        let (g_op, rest) = rest.split_at_mut(counts[1]);
        let (g_st, g_vd) = rest.split_at_mut(counts[2]);
        let latent_dim = self.config.latent_dim;

        let mut d_raw = [T::zero(); 3];
        for c in 0..3 {
            if cache.color_pass[c] {
                d_raw[c] = d_color[c];
            }
        }
        let mut d_latent = vec![T::zero(); latent_dim];
        let mut scratch = Vec::new();

        self.head_viewdep.backward(&cache.viewdep, &d_raw, g_vd, &mut scratch);
        for (d, &s) in d_latent.iter_mut().zip(&scratch) {
            *d += s;
        }
        let view_dir = [scratch[latent_dim], scratch[latent_dim + 1], scratch[latent_dim + 2]];

        let stat_out = &cache.static_.acts[self.head_static.layers.len()];
        let d_stat: Vec<T> = (0..3)
            .map(|c| {
                let s = stat_out[c].sigmoid();
                d_raw[c] * s * (T::one() - s)
            })
            .collect();
        self.head_static.backward(&cache.static_, &d_stat, g_st, &mut scratch);
        for (d, &s) in d_latent.iter_mut().zip(&scratch) {
            *d += s;
        }

        self.head_opacity.backward(&cache.opacity, &[d_logit], g_op, &mut scratch);
        for (d, &s) in d_latent.iter_mut().zip(&scratch) {
            *d += s;
        }

        self.trunk.backward(&cache.trunk, &d_latent, g_trunk, &mut scratch);

        let mut mean_xyz = [scratch[0], scratch[1], scratch[2]];
        let pi = T::lit(std::f64::consts::PI);
        let mut off = 3;
        for k in 0..self.config.pe_bands {
            let freq = T::lit((1u64 << k) as f64) * pi;
            for (c, m) in mean_xyz.iter_mut().enumerate() {
                let x = cache.mean_xyz[c];
                *m += scratch[off] * freq * (freq * x).cos() - scratch[off + 1] * freq * (freq * x).sin();
                off += 2;
            }
        }
        let feature = scratch[off..off + self.config.feature_dim].to_vec();
        AppearanceInputGrad {
            mean_xyz,
            feature,
            view_dir,
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"GSMP";

impl AppearanceModel<f32> {
    /// Shape header (config and layer shapes as little-endian u32) followed
    /// by every weight as little-endian f32, in [`params`] order.
    ///
    /// [`params`]: AppearanceModel::params
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + self.param_count() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [c.feature_dim, c.pe_bands, c.trunk_width, c.trunk_layers, c.latent_dim, c.head_width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let shapes = self.layer_shapes();
        for net in &shapes {
            out.extend_from_slice(&(net.len() as u32).to_le_bytes());
            for &(i, o) in net {
                out.extend_from_slice(&(i as u32).to_le_bytes());
                out.extend_from_slice(&(o as u32).to_le_bytes());
            }
        }
        for p in self.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::Truncated("appearance checkpoint".into()))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Decode("appearance checkpoint magic".into()));
        }
        let mut u32s = |n: usize| -> Result<Vec<usize>> {
            (0..n)
                .map(|_| Ok(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize))
                .collect()
        };
        let h = u32s(6)?;
        let config = AppearanceConfig {
            feature_dim: h[0],
            pe_bands: h[1],
            trunk_width: h[2],
            trunk_layers: h[3],
            latent_dim: h[4],
            head_width: h[5],
        };
        if config.pe_bands > 16 || config.trunk_layers > 64 || h.iter().any(|&v| v > 1 << 16) {
            return Err(Error::Decode("implausible appearance configuration".into()));
        }
        let mut model = AppearanceModel::<f32>::zeros(config);
        let mut shapes = Vec::new();
        for _ in 0..4 {
            let n = u32s(1)?[0];
            if n > 128 {
                return Err(Error::Decode("implausible appearance layer count".into()));
            }
            let dims = u32s(2 * n)?;
            shapes.push(dims.chunks(2).map(|d| (d[0], d[1])).collect::<Vec<_>>());
        }
        if shapes != model.layer_shapes() {
            return Err(Error::Decode("appearance layer shapes do not match the configuration".into()));
        }
        let count = model.param_count();
        let raw = take(count * 4)?;
        let p: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Decode("non-finite appearance weight".into()));
        }
        model.set_params(&p);
        if pos != bytes.len() {
            return Err(Error::Decode("trailing bytes after appearance checkpoint".into()));
        }
        Ok(model)
    }
}

/// Settings for [`distill`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Steps of direct regression onto stored colors/opacities before the
    /// end-to-end rendering loss takes over.
    pub warmup_steps: usize,
    pub mlp_lr: f64,
    pub feature_lr: f64,
    /// Larger learning rates used during the regression warm start.
    pub warmup_mlp_lr: f64,
    pub warmup_feature_lr: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 500,
            mlp_lr: 1e-3,
            feature_lr: 2.5e-3,
            warmup_mlp_lr: 3e-3,
            warmup_feature_lr: 1e-2,
            seed: 0,
        }
    }
}

/// Result of [`distill`]: the trained model and the cloud with updated
/// per-Gaussian features.
#[derive(Clone, Debug)]
pub struct Distilled<T> {
    pub model: AppearanceModel<T>,
    pub cloud: GaussianCloud<T>,
    pub losses: Vec<f64>,
}

/// Trains the appearance model and per-Gaussian features for `steps`
/// iterations, one seeded random frame per step. The first
/// `min(warmup_steps, steps)` steps regress the heads onto the stored
/// `color_f` and opacity; the rest minimize the rendering loss.
pub fn distill<T: Real>(
    model: &AppearanceModel<T>,
    cloud: &GaussianCloud<T>,
    frames: &[CameraFrame<T>],
    steps: usize,
    cfg: &DistillConfig,
) -> Result<Distilled<T>> {
    model.check_shapes()?;
    if cloud.feature_dim() != model.config.feature_dim {
        return Err(Error::Config("cloud and appearance feature widths differ".into()));
    }
    let mut model = model.clone();
    let mut cloud = cloud.clone();
    if steps == 0 {
        return Ok(Distilled {
            model,
            cloud,
            losses: Vec::new(),
        });
    }
    if frames.is_empty() {
        return Err(Error::Config("distillation needs at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d_f = cloud.feature_dim();
    let mut mlp_params = model.params();
    let mut features: Vec<T> = cloud.gaussians().iter().flat_map(|g| g.feature.clone()).collect();
    let adam_cfg = AdamConfig::default();
    let mut mlp_opt = Adam::new(mlp_params.len(), adam_cfg);
    let mut feat_opt = Adam::new(features.len(), adam_cfg);
    let warmup = cfg.warmup_steps.min(steps);
    let mut losses = Vec::with_capacity(steps);
    let mut initial: Option<f64> = None;
    let mut end_to_end_initial: Option<f64> = None;

    for step in 0..steps {
        let frame = &frames[rng.random_range(0..frames.len())];
        let mut g_mlp = vec![T::zero(); mlp_params.len()];
        let mut g_feat = vec![T::zero(); features.len()];
        let loss;
        if step < warmup {
            loss = regression_step(&model, &cloud, frame, &mut g_mlp, &mut g_feat);
            let guard = *initial.get_or_insert(loss);
            divergence_guard("appearance warm start", step, guard, loss)?;
            mlp_opt.step(&mut mlp_params, &g_mlp, &|_| cfg.warmup_mlp_lr);
            feat_opt.step(&mut features, &g_feat, &|_| cfg.warmup_feature_lr);
        } else {
            if step == warmup && warmup > 0 {
                mlp_opt = Adam::new(mlp_params.len(), adam_cfg);
                feat_opt = Adam::new(features.len(), adam_cfg);
            }
            let (l, grads) = splat::render_backward_with(
                &cloud,
                frame,
                Some(&model),
                LossKind::L1,
                &RenderOptions::default(),
            )?;
            loss = l.to_f64_lossy();
            let guard = *end_to_end_initial.get_or_insert(loss);
            divergence_guard("appearance distillation", step, guard, loss)?;
            let pc = cloud.param_count();
            for i in 0..cloud.len() {
                let row = &grads.d_loss_d_params[i * pc..(i + 1) * pc];
                g_feat[i * d_f..(i + 1) * d_f]
                    .copy_from_slice(&row[crate::model::feature_range(d_f)]);
            }
            if let Some(ga) = grads.appearance {
                g_mlp = ga;
            }
            mlp_opt.step(&mut mlp_params, &g_mlp, &|_| cfg.mlp_lr);
            feat_opt.step(&mut features, &g_feat, &|_| cfg.feature_lr);
        }
        model.set_params(&mlp_params);
        for (g, f) in cloud.gaussians_mut().iter_mut().zip(features.chunks_exact(d_f.max(1))) {
            if d_f > 0 {
                g.feature.copy_from_slice(f);
            }
        }
        losses.push(loss);
    }
    Ok(Distilled {
        model,
        cloud,
        losses,
    })
}

pub(crate) fn divergence_guard(stage: &str, step: usize, initial: f64, current: f64) -> Result<()> {
    if !current.is_finite() || (initial > 0.0 && current > 10.0 * initial) {
        return Err(Error::Divergence {
            stage: stage.to_string(),
            step,
            initial,
            current,
        });
    }
    Ok(())
}

/// Mean squared error of predicted vs stored color and activated opacity,
/// evaluated at the frame's time and viewing directions.
fn regression_step<T: Real>(
    model: &AppearanceModel<T>,
    cloud: &GaussianCloud<T>,
    frame: &CameraFrame<T>,
    g_mlp: &mut [T],
    g_feat: &mut [T],
) -> f64 {
    let n = cloud.len().max(1);
    let scale = T::one() / T::from_usize_lossy(n * 4);
    let center = frame.camera.center();
    let d_f = cloud.feature_dim();
    let mut cache = AppearanceCache::default();
    let mut loss = T::zero();
    for (i, g) in cloud.gaussians().iter().enumerate() {
        let view = splat::unit_direction(center, g.mean_xyz).0;
        let (logit, color) = model.forward_cached(g.mean_xyz, &g.feature, frame.timestamp, view, &mut cache);
        let target_o = g.opacity.sigmoid();
        let o = logit.sigmoid();
        let mut d_color = [T::zero(); 3];
        for c in 0..3 {
            let target = g.color_f[c].max(T::zero()).min(T::one());
            let r = color[c] - target;
            loss += r * r * scale;
            d_color[c] = T::lit(2.0) * r * scale;
        }
        let r = o - target_o;
        loss += r * r * scale;
        let d_logit = T::lit(2.0) * r * scale * o * (T::one() - o);
        let gin = model.backward(&cache, d_logit, d_color, g_mlp);
        g_feat[i * d_f..(i + 1) * d_f].copy_from_slice(&gin.feature);
    }
    loss.to_f64_lossy()
}
