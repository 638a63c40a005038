//! Differentiable splatting renderer for 4D Gaussians.
//!
//! Gaussians are conditioned at the frame time, projected with a pinhole
//! camera and composited front to back per pixel. [`render_backward_with`]
//! returns exact gradients of the image loss for every per-Gaussian
//! parameter and, when an appearance model is used, for its weights.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::{AppearanceCache, AppearanceModel};
use crate::error::{Error, Result};
use crate::linalg::{
    inverse2_spd, left_isoclinic, left_isoclinic_grad, mat3_t_vec, matmul, normalize4, normalize4_grad,
    right_isoclinic, right_isoclinic_grad, sub3, transpose, Mat2, Mat3, Mat4, Vec2, Vec3, Vec4,
};
use crate::model::{layout, Camera, CameraFrame, Gaussian4D, GaussianCloud, Image};
use crate::scalar::Real;

/// Minimum temporal variance accepted by [`condition_at`].
pub const MIN_TEMPORAL_VARIANCE: f64 = 1e-12;
/// Added to the projected covariance before inversion, in pixels².
pub const SCREEN_BLUR: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.999;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance drops below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
pub const NEAR_PLANE: f64 = 0.01;

const ROW_CHUNK: usize = 8;
const SPLAT_CHUNK: usize = 64;
// Per-splat screen-space accumulator: color(3), effective opacity, u(2), conic(4).
const ACC: usize = 10;

/// A 4D Gaussian conditioned at one timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioned3D<T> {
    pub mean3: Vec3<T>,
    pub cov3: Mat3<T>,
    pub temporal_weight: T,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[default]
    L1,
    L2,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderOptions<T> {
    /// Shifts the projected center of one Gaussian by a screen-space offset.
    /// Used to probe the loss as a function of the 2D position.
    pub screen_offset: Option<(usize, Vec2<T>)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderStats {
    /// Gaussians that reached the rasterizer.
    pub rendered: usize,
    /// Behind the near plane, off screen or too transparent to matter.
    pub culled: usize,
    /// Skipped for a degenerate temporal or projected covariance.
    pub degenerate: usize,
}

#[derive(Clone, Debug)]
pub struct RenderOutput<T> {
    pub image: Image<T>,
    pub stats: RenderStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients<T> {
    /// Gradient w.r.t. the projected 2D center, per Gaussian.
    pub d_loss_d_u: Vec<Vec2<T>>,
    /// Gradient w.r.t. the temporal mean, per Gaussian.
    pub d_loss_d_t: Vec<T>,
    /// Row-major `len × param_count` in [`layout`] order.
    pub d_loss_d_params: Vec<T>,
    /// Gradient w.r.t. the appearance weights when a model was used.
    pub appearance: Option<Vec<T>>,
    pub stats: RenderStats,
}

impl<T: Real> RenderGradients<T> {
    pub fn param_row(&self, i: usize, param_count: usize) -> &[T] {
        &self.d_loss_d_params[i * param_count..(i + 1) * param_count]
    }
}

#[derive(Clone, Debug)]
struct Cov4Cache<T> {
    qln: Vec4<T>,
    ql_norm: T,
    qrn: Vec4<T>,
    qr_norm: T,
    lm: Mat4<T>,
    rm: Mat4<T>,
    rot: Mat4<T>,
    s: Vec4<T>,
    m4: Mat4<T>,
}

#[derive(Clone, Debug)]
struct CondCache<T> {
    cov4: Cov4Cache<T>,
    a: Vec3<T>,
    stt: T,
    delta: T,
    weight: T,
}

fn covariance4<T: Real>(g: &Gaussian4D<T>) -> (Mat4<T>, Cov4Cache<T>) {
    let (qln, ql_norm) = normalize4(g.rot_l);
    let (qrn, qr_norm) = normalize4(g.rot_r);
    let lm = left_isoclinic(qln);
    let rm = right_isoclinic(qrn);
    let rot = matmul(&lm, &rm);
    let s = [g.scale_xyz[0].exp(), g.scale_xyz[1].exp(), g.scale_xyz[2].exp(), g.scale_t.exp()];
    let mut m4 = rot;
    for row in m4.iter_mut() {
        for j in 0..4 {
            row[j] *= s[j];
        }
    }
    let sigma = matmul(&m4, &transpose(&m4));
    (
        sigma,
        Cov4Cache {
            qln,
            ql_norm,
            qrn,
            qr_norm,
            lm,
            rm,
            rot,
            s,
            m4,
        },
    )
}

/// Full 4×4 covariance `R S Sᵀ Rᵀ` of a Gaussian.
pub fn covariance_4d<T: Real>(g: &Gaussian4D<T>) -> Mat4<T> {
    covariance4(g).0
}

fn condition_cached<T: Real>(g: &Gaussian4D<T>, t: T) -> Result<(Conditioned3D<T>, CondCache<T>)> {
    let (sigma, cov4) = covariance4(g);
    let stt = sigma[3][3];
    if !(stt >= T::lit(MIN_TEMPORAL_VARIANCE)) || !stt.is_finite() {
        return Err(Error::DegenerateCovariance(stt.to_f64_lossy()));
    }
    let a = [sigma[0][3], sigma[1][3], sigma[2][3]];
    let delta = t - g.mean_t;
    let k = delta / stt;
    let mut mean3 = g.mean_xyz;
    let mut cov3 = [[T::zero(); 3]; 3];
    for i in 0..3 {
        mean3[i] += a[i] * k;
        for j in 0..3 {
            cov3[i][j] = sigma[i][j] - a[i] * a[j] / stt;
        }
    }
    let weight = (-T::lit(0.5) * delta * delta / stt).exp();
    Ok((
        Conditioned3D {
            mean3,
            cov3,
            temporal_weight: weight,
        },
        CondCache {
            cov4,
            a,
            stt,
            delta,
            weight,
        },
    ))
}

/// Conditions `g` on time `t`: the Schur complement of the temporal block
/// gives the spatial covariance, the temporal marginal gives the weight.
pub fn condition_at<T: Real>(g: &Gaussian4D<T>, t: T) -> Result<Conditioned3D<T>> {
    condition_cached(g, t).map(|(c, _)| c)
}

/// Pulls gradients on the conditioned mean, covariance and weight back to
/// the first 16 parameters of [`layout`].
fn condition_backward<T: Real>(
    c: &CondCache<T>,
    g_mean: Vec3<T>,
    g_cov: &Mat3<T>,
    g_w: T,
    out: &mut [T],
) {
    let CondCache {
        a, stt, delta, weight, ..
    } = *c;
    let s = stt;
    let mut da = [T::zero(); 3];
    let mut d_delta = T::zero();
    let mut ds = T::zero();
    for i in 0..3 {
        da[i] += g_mean[i] * delta / s;
        d_delta += g_mean[i] * a[i] / s;
        ds -= g_mean[i] * a[i] * delta / (s * s);
    }
    for i in 0..3 {
        for j in 0..3 {
            let g = g_cov[i][j];
            da[i] -= g * a[j] / s;
            da[j] -= g * a[i] / s;
            ds += g * a[i] * a[j] / (s * s);
        }
    }
    d_delta -= g_w * weight * delta / s;
    ds += g_w * weight * T::lit(0.5) * delta * delta / (s * s);

    let mut g4 = [[T::zero(); 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            g4[i][j] = g_cov[i][j];
        }
        g4[i][3] = da[i];
    }
    g4[3][3] = ds;
    let gs = crate::linalg::mat_add(&g4, &transpose(&g4));
    let dm4 = matmul(&gs, &c.cov4.m4);
    let cc = &c.cov4;
    let mut drot = [[T::zero(); 4]; 4];
    let mut dsc = [T::zero(); 4];
    for i in 0..4 {
        for j in 0..4 {
            drot[i][j] = dm4[i][j] * cc.s[j];
            dsc[j] += dm4[i][j] * cc.rot[i][j];
        }
    }
    let dl = matmul(&drot, &transpose(&cc.rm));
    let dr = matmul(&transpose(&cc.lm), &drot);
    let dqln = left_isoclinic_grad(&dl);
    let dqrn = right_isoclinic_grad(&dr);
    let dql = normalize4_grad(cc.qln, cc.ql_norm, dqln);
    let dqr = normalize4_grad(cc.qrn, cc.qr_norm, dqrn);

    for i in 0..3 {
        out[layout::MEAN_XYZ.start + i] += g_mean[i];
        out[layout::SCALE_XYZ.start + i] += dsc[i] * cc.s[i];
    }
    out[layout::MEAN_T] -= d_delta;
    out[layout::SCALE_T] += dsc[3] * cc.s[3];
    for k in 0..4 {
        out[layout::ROT_L.start + k] += dql[k];
        out[layout::ROT_R.start + k] += dqr[k];
    }
}

/// Unit vector from `from` to `to` and the distance.
pub fn unit_direction<T: Real>(from: Vec3<T>, to: Vec3<T>) -> (Vec3<T>, T) {
    let d = sub3(to, from);
    let r = crate::linalg::norm_sq(&d).sqrt();
    if r > T::zero() {
        ([d[0] / r, d[1] / r, d[2] / r], r)
    } else {
        ([T::zero(), T::zero(), T::one()], r)
    }
}

/// A Gaussian ready for rasterization plus what the backward pass needs.
#[derive(Clone, Debug)]
struct Splat<T> {
    index: usize,
    depth: T,
    uv: Vec2<T>,
    conic: Mat2<T>,
    o_eff: T,
    color: [T; 3],
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    cache: SplatCache<T>,
}

#[derive(Clone, Debug)]
struct SplatCache<T> {
    cond: CondCache<T>,
    p_cam: Vec3<T>,
    jac: [[T; 3]; 2],
    m_cam: Mat3<T>,
    o_base: T,
    color_pass: [bool; 3],
    view: Option<(Vec3<T>, T, AppearanceCache<T>)>,
}

enum Prepared<T> {
    Splat(Box<Splat<T>>),
    Culled,
    Degenerate,
}

fn prepare_one<T: Real>(
    index: usize,
    g: &Gaussian4D<T>,
    camera: &Camera<T>,
    t: T,
    appearance: Option<&AppearanceModel<T>>,
    offset: Vec2<T>,
) -> Prepared<T> {
    let Ok((cond, cc)) = condition_cached(g, t) else {
        return Prepared::Degenerate;
    };
    let w = &camera.rotation;
    let p_cam = camera.world_to_camera(cond.mean3);
    let z = p_cam[2];
    if !z.is_finite() || z <= T::lit(NEAR_PLANE) {
        return Prepared::Culled;
    }
    let (o_base, color, color_pass, view) = match appearance {
        Some(model) => {
            let (dir, r) = unit_direction(camera.center(), cond.mean3);
            let mut cache = AppearanceCache::default();
            let (logit, color) = model.forward_cached(g.mean_xyz, &g.feature, t, dir, &mut cache);
            (logit.sigmoid(), color, [true; 3], Some((dir, r, cache)))
        }
        None => {
            let mut color = g.color_f;
            let mut pass = [true; 3];
            for c in 0..3 {
                pass[c] = color[c] >= T::zero() && color[c] <= T::one();
                color[c] = color[c].max(T::zero()).min(T::one());
            }
            (g.opacity.sigmoid(), color, pass, None)
        }
    };
    let o_eff = o_base * cond.temporal_weight;
    if !(o_eff >= T::lit(ALPHA_MIN)) {
        return Prepared::Culled;
    }
    let inv_z = T::one() / z;
    let uv = [
        camera.fx * p_cam[0] * inv_z + camera.cx + offset[0],
        camera.fy * p_cam[1] * inv_z + camera.cy + offset[1],
    ];
    let jac = [
        [camera.fx * inv_z, T::zero(), -camera.fx * p_cam[0] * inv_z * inv_z],
        [T::zero(), camera.fy * inv_z, -camera.fy * p_cam[1] * inv_z * inv_z],
    ];
    let m_cam = matmul(&matmul(w, &cond.cov3), &transpose(w));
    let mut cov2 = matmul(&matmul(&jac, &m_cam), &transpose(&jac));
    cov2[0][0] += T::lit(SCREEN_BLUR);
    cov2[1][1] += T::lit(SCREEN_BLUR);
    let Some(conic) = inverse2_spd(&cov2) else {
        return Prepared::Degenerate;
    };
    if !(cov2[0][0] > T::zero()) || !(cov2[1][1] > T::zero()) || !uv[0].is_finite() || !uv[1].is_finite() {
        return Prepared::Degenerate;
    }
    // Exact extent of the ellipse where alpha can reach the skip threshold.
    let q_max = T::lit(2.0) * (o_eff / T::lit(ALPHA_MIN)).ln();
    let margin = T::lit(1e-3);
    let ex = (q_max * cov2[0][0]).sqrt() + margin;
    let ey = (q_max * cov2[1][1]).sqrt() + margin;
    let half = T::lit(0.5);
    let fx0 = (uv[0] - ex - half).ceil();
    let fx1 = (uv[0] + ex - half).floor();
    let fy0 = (uv[1] - ey - half).ceil();
    let fy1 = (uv[1] + ey - half).floor();
    let wmax = T::from_usize_lossy(camera.width) - T::one();
    let hmax = T::from_usize_lossy(camera.height) - T::one();
    if fx1 < T::zero() || fy1 < T::zero() || fx0 > wmax || fy0 > hmax || fx0 > fx1 || fy0 > fy1 {
        return Prepared::Culled;
    }
    let clampi = |v: T, hi: T| v.max(T::zero()).min(hi).to_f64_lossy() as usize;
    Prepared::Splat(Box::new(Splat {
        index,
        depth: z,
        uv,
        conic,
        o_eff,
        color,
        x0: clampi(fx0, wmax),
        x1: clampi(fx1, wmax) + 1,
        y0: clampi(fy0, hmax),
        y1: clampi(fy1, hmax) + 1,
        cache: SplatCache {
            cond: cc,
            p_cam,
            jac,
            m_cam,
            o_base,
            color_pass,
            view,
        },
    }))
}

struct Scene<T> {
    splats: Vec<Splat<T>>,
    /// Per image row, indices into `splats` in compositing order.
    rows: Vec<Vec<u32>>,
    stats: RenderStats,
}

fn prepare<T: Real>(
    cloud: &GaussianCloud<T>,
    camera: &Camera<T>,
    t: T,
    appearance: Option<&AppearanceModel<T>>,
    opts: &RenderOptions<T>,
) -> Result<Scene<T>> {
    if let Some(model) = appearance {
        if model.config.feature_dim != cloud.feature_dim() {
            return Err(Error::Config(format!(
                "cloud feature width {} does not match appearance model width {}",
                cloud.feature_dim(),
                model.config.feature_dim
            )));
        }
    }
    let prepared: Vec<Prepared<T>> = cloud
        .gaussians()
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let offset = match opts.screen_offset {
                Some((k, o)) if k == i => o,
                _ => [T::zero(); 2],
            };
            prepare_one(i, g, camera, t, appearance, offset)
        })
        .collect();
    let mut stats = RenderStats::default();
    let mut splats = Vec::new();
    for p in prepared {
        match p {
            Prepared::Splat(s) => splats.push(*s),
            Prepared::Culled => stats.culled += 1,
            Prepared::Degenerate => stats.degenerate += 1,
        }
    }
    stats.rendered = splats.len();
    // Stable: equal depths keep index order.
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap_or(std::cmp::Ordering::Equal));
    let mut rows = vec![Vec::new(); camera.height];
    for (k, s) in splats.iter().enumerate() {
        for row in &mut rows[s.y0..s.y1] {
            row.push(k as u32);
        }
    }
    Ok(Scene { splats, rows, stats })
}

#[derive(Clone, Copy)]
struct Contribution<T> {
    splat: u32,
    alpha: T,
    gauss: T,
    clamped: bool,
    d: Vec2<T>,
    trans: T,
}

/// Composites one pixel; fills `contribs` with the Gaussians that counted.
fn shade_pixel<T: Real>(scene: &Scene<T>, x: usize, y: usize, contribs: &mut Vec<Contribution<T>>) -> [T; 3] {
    contribs.clear();
    let px = T::from_usize_lossy(x) + T::lit(0.5);
    let py = T::from_usize_lossy(y) + T::lit(0.5);
    let alpha_min = T::lit(ALPHA_MIN);
    let alpha_max = T::lit(ALPHA_MAX);
    let t_min = T::lit(TRANSMITTANCE_MIN);
    let mut trans = T::one();
    let mut color = [T::zero(); 3];
    for &k in &scene.rows[y] {
        let s = &scene.splats[k as usize];
        if x < s.x0 || x >= s.x1 {
            continue;
        }
        let d = [px - s.uv[0], py - s.uv[1]];
        let a = &s.conic;
        let q = a[0][0] * d[0] * d[0] + (a[0][1] + a[1][0]) * d[0] * d[1] + a[1][1] * d[1] * d[1];
        let gauss = (-T::lit(0.5) * q).exp();
        let raw = s.o_eff * gauss;
        if raw < alpha_min {
            continue;
        }
        let clamped = raw > alpha_max;
        let alpha = if clamped { alpha_max } else { raw };
        for c in 0..3 {
            color[c] += trans * alpha * s.color[c];
        }
        contribs.push(Contribution {
            splat: k,
            alpha,
            gauss,
            clamped,
            d,
            trans,
        });
        trans *= T::one() - alpha;
        if trans < t_min {
            break;
        }
    }
    color
}

fn check_frame<T: Real>(cloud: &GaussianCloud<T>, frame: &CameraFrame<T>) -> Result<()> {
    frame.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(())
}

/// Renders the cloud from `camera` at time `t` on a black background.
pub fn render_view<T: Real>(
    cloud: &GaussianCloud<T>,
    camera: &Camera<T>,
    t: T,
    appearance: Option<&AppearanceModel<T>>,
    opts: &RenderOptions<T>,
) -> Result<RenderOutput<T>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let scene = prepare(cloud, camera, t, appearance, opts)?;
    let (w, h) = (camera.width, camera.height);
    let mut data = vec![T::zero(); w * h * 3];
    data.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        let mut contribs = Vec::new();
        for x in 0..w {
            let c = shade_pixel(&scene, x, y, &mut contribs);
            row[x * 3..x * 3 + 3].copy_from_slice(&c);
        }
    });
    Ok(RenderOutput {
        image: Image::from_data(w, h, data)?,
        stats: scene.stats,
    })
}

/// Renders `cloud` with the frame's camera and timestamp.
pub fn render<T: Real>(
    cloud: &GaussianCloud<T>,
    frame: &CameraFrame<T>,
    appearance: Option<&AppearanceModel<T>>,
) -> Result<RenderOutput<T>> {
    check_frame(cloud, frame)?;
    render_view(cloud, &frame.camera, frame.timestamp, appearance, &RenderOptions::default())
}

/// Mean loss over all `H·W·3` channels.
pub fn image_loss<T: Real>(image: &Image<T>, target: &Image<T>, kind: LossKind) -> T {
    let n = T::from_usize_lossy(image.data.len().max(1));
    let mut acc = T::zero();
    for (&a, &b) in image.data.iter().zip(&target.data) {
        let r = a - b;
        acc += match kind {
            LossKind::L1 => r.abs(),
            LossKind::L2 => r * r,
        };
    }
    acc / n
}

fn loss_grad<T: Real>(r: T, kind: LossKind, inv_n: T) -> T {
    match kind {
        LossKind::L1 => {
            if r > T::zero() {
                inv_n
            } else if r < T::zero() {
                -inv_n
            } else {
                T::zero()
            }
        }
        LossKind::L2 => T::lit(2.0) * r * inv_n,
    }
}

/// Loss against `frame.image` and its gradients.
pub fn render_backward<T: Real>(
    cloud: &GaussianCloud<T>,
    frame: &CameraFrame<T>,
    loss: LossKind,
) -> Result<(T, RenderGradients<T>)> {
    render_backward_with(cloud, frame, None, loss, &RenderOptions::default())
}

pub fn render_backward_with<T: Real>(
    cloud: &GaussianCloud<T>,
    frame: &CameraFrame<T>,
    appearance: Option<&AppearanceModel<T>>,
    loss: LossKind,
    opts: &RenderOptions<T>,
) -> Result<(T, RenderGradients<T>)> {
    check_frame(cloud, frame)?;
    let camera = &frame.camera;
    let scene = prepare(cloud, camera, frame.timestamp, appearance, opts)?;
    let (w, h) = (camera.width, camera.height);
    let ns = scene.splats.len();
    let inv_n = T::one() / T::from_usize_lossy(w * h * 3);
    let target = &frame.image;

    // Screen-space pass: per row chunk partial accumulators, reduced in
    // chunk order so the result does not depend on scheduling.
    let partials: Vec<(T, Vec<T>)> = (0..h.div_ceil(ROW_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut acc = vec![T::zero(); ns * ACC];
            let mut loss_sum = T::zero();
            let mut contribs = Vec::new();
            for y in chunk * ROW_CHUNK..((chunk + 1) * ROW_CHUNK).min(h) {
                for x in 0..w {
                    let c = shade_pixel(&scene, x, y, &mut contribs);
                    let tgt = target.pixel(x, y);
                    let mut g = [T::zero(); 3];
                    for ch in 0..3 {
                        let r = c[ch] - tgt[ch];
                        loss_sum += match loss {
                            LossKind::L1 => r.abs(),
                            LossKind::L2 => r * r,
                        };
                        g[ch] = loss_grad(r, loss, inv_n);
                    }
                    if g == [T::zero(); 3] {
                        continue;
                    }
                    backward_pixel(&scene, &contribs, g, &mut acc);
                }
            }
            (loss_sum, acc)
        })
        .collect();
    let mut loss_total = T::zero();
    let mut acc = vec![T::zero(); ns * ACC];
    for (l, part) in partials {
        loss_total += l;
        for (a, p) in acc.iter_mut().zip(part) {
            *a += p;
        }
    }
    loss_total *= inv_n;

    let pc = cloud.param_count();
    let n = cloud.len();
    let app_len = appearance.map_or(0, AppearanceModel::param_count);
    let chunks: Vec<(Vec<(usize, Vec<T>)>, Vec<T>)> = scene
        .splats
        .par_chunks(SPLAT_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut app_grad = vec![T::zero(); app_len];
            let rows = chunk
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    let k = ci * SPLAT_CHUNK + j;
                    let mut row = vec![T::zero(); pc];
                    splat_backward(s, &acc[k * ACC..(k + 1) * ACC], camera, appearance, &mut row, &mut app_grad);
                    (s.index, row)
                })
                .collect();
            (rows, app_grad)
        })
        .collect();

    let mut d_params = vec![T::zero(); n * pc];
    let mut d_u = vec![[T::zero(); 2]; n];
    let mut app_total = appearance.map(|_| vec![T::zero(); app_len]);
    for (k, s) in scene.splats.iter().enumerate() {
        d_u[s.index] = [acc[k * ACC + 4], acc[k * ACC + 5]];
    }
    for (rows, app) in chunks {
        for (i, row) in rows {
            d_params[i * pc..(i + 1) * pc].copy_from_slice(&row);
        }
        if let Some(total) = app_total.as_mut() {
            for (t, g) in total.iter_mut().zip(app) {
                *t += g;
            }
        }
    }
    let d_t = (0..n).map(|i| d_params[i * pc + layout::MEAN_T]).collect();
    Ok((
        loss_total,
        RenderGradients {
            d_loss_d_u: d_u,
            d_loss_d_t: d_t,
            d_loss_d_params: d_params,
            appearance: app_total,
            stats: scene.stats,
        },
    ))
}

/// Reverse compositing pass for one pixel given `dL/dC`.
fn backward_pixel<T: Real>(scene: &Scene<T>, contribs: &[Contribution<T>], g: [T; 3], acc: &mut [T]) {
    let half = T::lit(0.5);
    // Color contributed by everything behind the current Gaussian.
    let mut behind = [T::zero(); 3];
    for c in contribs.iter().rev() {
        let k = c.splat as usize;
        let s = &scene.splats[k];
        let a = &mut acc[k * ACC..(k + 1) * ACC];
        let one_minus = T::one() - c.alpha;
        let mut d_alpha = T::zero();
        for ch in 0..3 {
            a[ch] += g[ch] * c.trans * c.alpha;
            d_alpha += g[ch] * (c.trans * s.color[ch] - behind[ch] / one_minus);
        }
        for ch in 0..3 {
            behind[ch] += c.trans * c.alpha * s.color[ch];
        }
        if c.clamped {
            continue;
        }
        a[3] += d_alpha * c.gauss;
        let d_gauss = d_alpha * s.o_eff;
        let d_q = -half * c.gauss * d_gauss;
        let conic = &s.conic;
        let ad = [
            (conic[0][0] + conic[0][0]) * c.d[0] + (conic[0][1] + conic[1][0]) * c.d[1],
            (conic[1][0] + conic[0][1]) * c.d[0] + (conic[1][1] + conic[1][1]) * c.d[1],
        ];
        // d = pixel - u
        a[4] -= d_q * ad[0];
        a[5] -= d_q * ad[1];
        a[6] += d_q * c.d[0] * c.d[0];
        a[7] += d_q * c.d[0] * c.d[1];
        a[8] += d_q * c.d[1] * c.d[0];
        a[9] += d_q * c.d[1] * c.d[1];
    }
}

/// Chains screen-space gradients of one splat back to its parameters.
fn splat_backward<T: Real>(
    s: &Splat<T>,
    acc: &[T],
    camera: &Camera<T>,
    appearance: Option<&AppearanceModel<T>>,
    row: &mut [T],
    app_grad: &mut [T],
) {
    let c = &s.cache;
    let d_color = [acc[0], acc[1], acc[2]];
    let d_oeff = acc[3];
    let d_u = [acc[4], acc[5]];
    let d_conic = [[acc[6], acc[7]], [acc[8], acc[9]]];
    let w_t = c.cond.weight;
    let d_obase = d_oeff * w_t;
    let d_w = d_oeff * c.o_base;
    let d_logit = d_obase * c.o_base * (T::one() - c.o_base);

    let mut d_mean3 = [T::zero(); 3];
    match (&c.view, appearance) {
        (Some((dir, r, cache)), Some(model)) => {
            let gin = model.backward(cache, d_logit, d_color, app_grad);
            for i in 0..3 {
                row[layout::MEAN_XYZ.start + i] += gin.mean_xyz[i];
            }
            row[layout::FEATURE_START..].copy_from_slice(&gin.feature);
            // Through dir = (mean3 - center) / |mean3 - center|.
            let proj = dir[0] * gin.view_dir[0] + dir[1] * gin.view_dir[1] + dir[2] * gin.view_dir[2];
            if *r > T::zero() {
                for i in 0..3 {
                    d_mean3[i] += (gin.view_dir[i] - dir[i] * proj) / *r;
                }
            }
        }
        _ => {
            row[layout::OPACITY] += d_logit;
            for ch in 0..3 {
                if c.color_pass[ch] {
                    row[layout::COLOR.start + ch] += d_color[ch];
                }
            }
        }
    }

    // Conic = inverse(cov2): dcov2 = -Aᵀ dA Aᵀ.
    let at = transpose(&s.conic);
    let g2 = matmul(&matmul(&at, &d_conic), &at).map(|r| r.map(|v| -v));
    let jac = &c.jac;
    let jt = transpose(jac);
    let d_m = matmul(&matmul(&jt, &g2), jac);
    let g2s = crate::linalg::mat_add(&g2, &transpose(&g2));
    let d_j = matmul(&matmul(&g2s, jac), &c.m_cam);

    let [x, y, z] = c.p_cam;
    let (fx, fy) = (camera.fx, camera.fy);
    let iz = T::one() / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let two = T::lit(2.0);
    let mut d_p = [
        fx * iz * d_u[0],
        fy * iz * d_u[1],
        -fx * x * iz2 * d_u[0] - fy * y * iz2 * d_u[1],
    ];
    d_p[0] += d_j[0][2] * (-fx * iz2);
    d_p[1] += d_j[1][2] * (-fy * iz2);
    d_p[2] += d_j[0][0] * (-fx * iz2) + d_j[0][2] * (two * fx * x * iz3) + d_j[1][1] * (-fy * iz2)
        + d_j[1][2] * (two * fy * y * iz3);

    let wr = &camera.rotation;
    let d_cov3 = matmul(&matmul(&transpose(wr), &d_m), wr);
    let dm = mat3_t_vec(wr, d_p);
    for i in 0..3 {
        d_mean3[i] += dm[i];
    }
    condition_backward(&c.cond, d_mean3, &d_cov3, d_w, row);
}

/// Peak signal-to-noise ratio for images in `[0, 1]`; the MSE is floored at
/// `1e-10`, so identical images give 100 dB.
pub fn psnr<T: Real>(a: &Image<T>, b: &Image<T>) -> f64 {
    let n = a.data.len().max(1) as f64;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let r = x.to_f64_lossy() - y.to_f64_lossy();
            r * r
        })
        .sum::<f64>()
        / n;
    -10.0 * mse.max(1e-10).log10()
}

/// Writes an 8-bit PNG.
pub fn save_png<T: Real>(image: &Image<T>, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, image.to_rgb8())
        .ok_or_else(|| Error::Internal("image buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn load_png(path: &Path) -> Result<Image<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?
        .to_rgb8();
    Image::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
}

/// Writes the image as planar little-endian f32 (`R` plane, `G`, `B`).
pub fn save_raw<T: Real>(image: &Image<T>, path: &Path) -> Result<()> {
    std::fs::write(path, image.to_planar_f32()).map_err(|e| Error::io(path, e))
}
