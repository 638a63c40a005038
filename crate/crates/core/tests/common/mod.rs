#![allow(dead_code)]

use gs4c::model::{Camera, CameraFrame, Gaussian4D, GaussianCloud, Image, StageTag};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn camera(size: usize) -> Camera<f64> {
    Camera::look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], size as f64 * 1.2, size, size)
}

pub fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Deliberately not unit length: normalization is part of the model.
    q.map(|x| x / n * rng.random_range(0.8..1.2))
}

pub fn random_gaussian(rng: &mut ChaCha8Rng, feature_dim: usize) -> Gaussian4D<f64> {
    let mut g = Gaussian4D::axis_aligned(
        [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.5..0.5)],
        rng.random_range(0.2..0.8),
        [rng.random_range(-2.3..-1.2), rng.random_range(-2.3..-1.2), rng.random_range(-2.3..-1.2)],
        rng.random_range(-1.0..0.0),
        rng.random_range(-1.0..2.0),
        [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
        feature_dim,
    );
    g.rot_l = random_quat(rng);
    g.rot_r = random_quat(rng);
    for f in &mut g.feature {
        *f = rng.random_range(-0.5..0.5);
    }
    g
}

pub fn random_cloud(seed: u64, n: usize, feature_dim: usize) -> GaussianCloud<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gs = (0..n).map(|_| random_gaussian(&mut rng, feature_dim)).collect();
    GaussianCloud::with_feature_dim(gs, StageTag::Pretrained, feature_dim).unwrap()
}

pub fn random_image(seed: u64, w: usize, h: usize) -> Image<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::from_data(w, h, data).unwrap()
}

pub fn random_frame(seed: u64, size: usize, t: f64) -> CameraFrame<f64> {
    CameraFrame::new(camera(size), t, random_image(seed, size, size)).unwrap()
}

/// Random but consistent container parts: `n` Gaussians, feature width
/// `fd`, a random subset of attributes quantized with random codebooks.
pub fn random_parts(seed: u64, n: usize, fd: usize, with_mlp: bool) -> gs4c::codec::ModelParts {
    use gs4c::appearance::{AppearanceConfig, AppearanceModel};
    use gs4c::svq::{default_layouts, AttributeCodebooks, Codebook, IndexStream, SvqCodebooks};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = random_cloud(seed ^ 0x5eed, n, fd);
    let mut books = SvqCodebooks::default();
    let mut streams = Vec::new();
    for mut layout in default_layouts(fd, 9) {
        if rng.random_bool(0.4) {
            continue;
        }
        layout.codebook_bits = rng.random_range(1..=6);
        let codebooks: Vec<Codebook> = layout
            .sub_dims
            .iter()
            .map(|&d| {
                let k = rng.random_range(1..=(1usize << layout.codebook_bits));
                Codebook {
                    dim: d,
                    entries: (0..k * d).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
                    assignments: Vec::new(),
                    objective_trace: Vec::new(),
                }
            })
            .collect();
        for (si, cb) in codebooks.iter().enumerate() {
            // Skewed indices so entropy coding has something to exploit.
            let k = cb.len() as u32;
            let indices = (0..n)
                .map(|_| if rng.random_bool(0.6) { 0 } else { rng.random_range(0..k) })
                .collect();
            streams.push(IndexStream {
                attribute: layout.attribute,
                sub_vector: si,
                bits: layout.codebook_bits,
                indices,
            });
        }
        books.attributes.push(AttributeCodebooks { layout, codebooks });
    }
    let app = with_mlp.then(|| {
        let cfg = AppearanceConfig {
            feature_dim: fd,
            pe_bands: 2,
            trunk_width: 8,
            trunk_layers: 1,
            latent_dim: 4,
            head_width: 4,
        };
        AppearanceModel::<f64>::new(cfg, seed)
    });
    let mut parts = gs4c::codec::ModelParts::from_cloud(&cloud, &books, &streams, app.as_ref());
    parts.extra = serde_json::json!({ "seed": seed });
    parts
}

/// Frames rendered from `truth` at the given timestamps (one camera).
pub fn rendered_frames(truth: &GaussianCloud<f64>, size: usize, times: &[f64]) -> Vec<CameraFrame<f64>> {
    times
        .iter()
        .map(|&t| {
            let cam = camera(size);
            let img = gs4c::splat::render_view(truth, &cam, t, None, &Default::default()).unwrap().image;
            CameraFrame::new(cam, t, img).unwrap()
        })
        .collect()
}

/// Copy of `cloud` with colors and positions jittered.
pub fn perturbed(cloud: &GaussianCloud<f64>, seed: u64, amount: f64) -> GaussianCloud<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = cloud.clone();
    for g in out.gaussians_mut() {
        for c in &mut g.color_f {
            *c = (*c + rng.random_range(-amount..amount)).clamp(0.05, 0.95);
        }
        for m in &mut g.mean_xyz {
            *m += rng.random_range(-amount..amount) * 0.2;
        }
    }
    out
}
