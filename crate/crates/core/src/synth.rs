//! Procedural multi-view scenes with known ground truth.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::FrameSet;
use crate::model::{Camera, CameraFrame, Gaussian4D, GaussianCloud, Image, StageTag, DEFAULT_FEATURE_DIM};
use crate::splat::{render_view, RenderOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionPreset {
    Static,
    OscillatingBlob,
    TwoSpeed,
}

impl FromStr for MotionPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Self::Static),
            "oscillating-blob" => Ok(Self::OscillatingBlob),
            "two-speed" => Ok(Self::TwoSpeed),
            _ => Err(Error::Config(format!(
                "unknown motion preset `{s}` (expected static, oscillating-blob or two-speed)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub gaussian_count: usize,
    pub frame_count: usize,
    pub camera_count: usize,
    pub width: usize,
    pub height: usize,
    pub ring_radius: f64,
    pub motion: MotionPreset,
    pub feature_dim: usize,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            gaussian_count: 2000,
            frame_count: 20,
            camera_count: 16,
            width: 64,
            height: 64,
            ring_radius: 3.0,
            motion: MotionPreset::TwoSpeed,
            feature_dim: DEFAULT_FEATURE_DIM,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gaussian_count == 0 || self.frame_count == 0 || self.camera_count == 0 {
            return Err(Error::Config("synthetic scene counts must be at least 1".into()));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::Config("synthetic images must be at least 8x8".into()));
        }
        if !(self.ring_radius > 1.5) {
            return Err(Error::Config("ring radius must exceed 1.5 (the scene spans the unit ball)".into()));
        }
        Ok(())
    }
}

/// Which structure a ground-truth Gaussian belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Static,
    Fast,
    Slow,
    Blob,
}

pub struct SyntheticScene {
    pub truth: GaussianCloud<f64>,
    pub groups: Vec<Group>,
    pub frames: FrameSet<f64>,
}

/// Scales and left/right quaternions of a Gaussian whose 3D slice has
/// standard deviation `sigma_c` along x, moves along x at `velocity` and
/// has temporal standard deviation `lifespan`.
pub fn moving_gaussian_shape(sigma_c: f64, lifespan: f64, velocity: f64) -> ([f64; 2], [f64; 4]) {
    let stt = lifespan * lifespan;
    let sxt = velocity * stt;
    let sxx = sigma_c * sigma_c + velocity * velocity * stt;
    // Eigen-decomposition of [[sxx, sxt], [sxt, stt]]; phi rotates x into t.
    let phi = 0.5 * (2.0 * sxt).atan2(sxx - stt);
    let (c, s) = (phi.cos(), phi.sin());
    let lx = c * c * sxx + 2.0 * c * s * sxt + s * s * stt;
    let lt = s * s * sxx - 2.0 * c * s * sxt + c * c * stt;
    let q = [(phi / 2.0).cos(), 0.0, 0.0, (phi / 2.0).sin()];
    ([0.5 * lx.ln(), 0.5 * lt.ln()], q)
}

fn background_color(p: [f64; 3]) -> [f64; 3] {
    [
        0.5 + 0.4 * (3.0 * p[0]).sin(),
        0.5 + 0.4 * (3.0 * p[1] + 1.0).sin(),
        0.5 + 0.4 * (3.0 * p[2] + 2.0).sin(),
    ]
}

fn unit_ball(rng: &mut ChaCha8Rng, r: f64) -> [f64; 3] {
    loop {
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if p.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
            return p.map(|x| x * r);
        }
    }
}

fn ground_truth(spec: &SyntheticSceneSpec) -> (Vec<Gaussian4D<f64>>, Vec<Group>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.gaussian_count;
    let (n_fast, n_slow, n_blob) = match spec.motion {
        MotionPreset::Static => (0, 0, 0),
        MotionPreset::TwoSpeed => (n / 5, n / 5, 0),
        MotionPreset::OscillatingBlob => (0, 0, n * 3 / 10),
    };
    let n_static = n - n_fast - n_slow - n_blob;
    let fd = spec.feature_dim;
    let mut gs = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);

    // Static part: a textured floor below the movers plus sparse floating
    // specks.
    for i in 0..n_static {
        let floor = i % 10 != 0;
        let (p, scale, opacity) = if floor {
            let d = unit_ball(&mut rng, 1.0);
            let p = [d[0] * 1.1, 0.65 + 0.02 * d[1], d[2] * 1.1];
            let s = [rng.random_range(-2.4..-1.9), -3.5, rng.random_range(-2.4..-1.9)];
            (p, s, rng.random_range(1.0..3.0))
        } else {
            let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(-3.0..-2.5));
            (unit_ball(&mut rng, 1.0), s, rng.random_range(-1.0..1.0))
        };
        // A very wide temporal extent makes the Gaussian time-invariant.
        let g = Gaussian4D::axis_aligned(p, 0.5, scale, 8.0, opacity, background_color(p), fd);
        gs.push(g);
        groups.push(Group::Static);
    }

    // Movers: each member is alive around its own time and moves along x
    // with the local velocity of its group's path.
    let mut movers = |count: usize, group: Group, path: &dyn Fn(f64) -> ([f64; 3], f64), lifespan: f64, color: [f64; 3]| {
        for i in 0..count {
            let t = (i as f64 + rng.random_range(0.0..1.0)) / count as f64;
            let (center, v) = path(t);
            let off = unit_ball(&mut rng, 0.12);
            let sigma_c = rng.random_range(0.045..0.07);
            let ([sx, st], q) = moving_gaussian_shape(sigma_c, lifespan, v);
            let mut g = Gaussian4D::axis_aligned(
                [center[0] + off[0], center[1] + off[1], center[2] + off[2]],
                t,
                [sx, sigma_c.ln(), sigma_c.ln()],
                st,
                rng.random_range(1.5..3.0),
                color.map(|c: f64| (c + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)),
                fd,
            );
            g.rot_l = q;
            g.rot_r = q;
            gs.push(g);
            groups.push(group);
        }
    };
    movers(n_fast, Group::Fast, &|t| ([-0.6 + 1.2 * t, 0.35, 0.0], 1.2), 0.08, [0.9, 0.15, 0.1]);
    movers(n_slow, Group::Slow, &|t| ([-0.15 + 0.3 * t, -0.35, 0.1], 0.3), 0.25, [0.1, 0.2, 0.9]);
    movers(
        n_blob,
        Group::Blob,
        &|t| ([0.4 * (2.0 * PI * t).sin(), 0.0, 0.0], 0.8 * PI * (2.0 * PI * t).cos()),
        0.06,
        [0.95, 0.85, 0.1],
    );
    (gs, groups)
}

/// Ring of cameras around the origin at two heights above the scene
/// (world -y is up).
pub fn camera_ring(spec: &SyntheticSceneSpec) -> Vec<Camera<f64>> {
    (0..spec.camera_count)
        .map(|c| {
            let a = 2.0 * PI * c as f64 / spec.camera_count as f64;
            let r = spec.ring_radius;
            let lift = if c % 2 == 0 { 0.35 } else { 0.2 };
            let eye = [r * a.sin(), -lift * r, -r * a.cos()];
            let focal = 1.2 * spec.width as f64 * r / 3.0;
            Camera::look_at(eye, [0.0; 3], [0.0, -1.0, 0.0], focal, spec.width, spec.height)
        })
        .collect()
}

pub fn timestamps(frame_count: usize) -> Vec<f64> {
    if frame_count == 1 {
        return vec![0.5];
    }
    (0..frame_count).map(|f| f as f64 / (frame_count - 1) as f64).collect()
}

/// Builds the ground truth and renders every (timestamp, camera) pair.
/// Images are quantized to 8 bits so that the in-memory frames equal the
/// PNG files written by [`FrameSet::save`].
pub fn generate(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let (gs, groups) = ground_truth(spec);
    let truth = GaussianCloud::with_feature_dim(gs, StageTag::Pretrained, spec.feature_dim)?;
    let cameras = camera_ring(spec);
    let times = timestamps(spec.frame_count);
    let nc = cameras.len();
    let frames = (0..times.len() * nc)
        .into_par_iter()
        .map(|i| {
            let (cam, t) = (&cameras[i % nc], times[i / nc]);
            let img = render_view(&truth, cam, t, None, &RenderOptions::default())?.image;
            let img = Image::from_rgb8(img.width, img.height, &img.to_rgb8())?;
            CameraFrame::new(cam.clone(), t, img)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticScene {
        truth,
        groups,
        frames: FrameSet {
            cameras,
            timestamps: times,
            frames,
        },
    })
}
