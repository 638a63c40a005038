//! 4D Gaussian domain types, validation and the uncompressed PLY profile.

mod camera;
mod ply;

use std::fmt;
use std::hash::{Hash, Hasher};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Vec3, Vec4};
use crate::scalar::Real;

pub use camera::{Camera, CameraFrame, Image};
pub use ply::{load_ply, read_ply, save_ply, write_ply, PLY_VERSION_COMMENT};

/// Default width of the per-Gaussian appearance feature.
pub const DEFAULT_FEATURE_DIM: usize = 8;

/// Offsets of each field inside the flat per-Gaussian parameter vector used
/// by gradients and optimizers. Features occupy `FEATURE_START..` to the end.
pub mod layout {
    use std::ops::Range;

    pub const MEAN_XYZ: Range<usize> = 0..3;
    pub const MEAN_T: usize = 3;
    pub const SCALE_XYZ: Range<usize> = 4..7;
    pub const SCALE_T: usize = 7;
    pub const ROT_L: Range<usize> = 8..12;
    pub const ROT_R: Range<usize> = 12..16;
    pub const OPACITY: usize = 16;
    pub const COLOR: Range<usize> = 17..20;
    pub const FEATURE_START: usize = 20;

    pub const fn param_count(feature_dim: usize) -> usize {
        FEATURE_START + feature_dim
    }
}

/// One 4D Gaussian primitive.
///
/// Scales are stored as logarithms and opacity as a logit; activations are
/// applied at evaluation time only. Time is normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian4D<T> {
    pub mean_xyz: Vec3<T>,
    pub mean_t: T,
    pub scale_xyz: Vec3<T>,
    pub scale_t: T,
    pub rot_l: Vec4<T>,
    pub rot_r: Vec4<T>,
    pub opacity: T,
    pub color_f: Vec3<T>,
    pub feature: Vec<T>,
}

impl<T: Real> Gaussian4D<T> {
    /// Axis-aligned Gaussian with identity rotations and a zero feature.
    pub fn axis_aligned(
        mean_xyz: Vec3<T>,
        mean_t: T,
        scale_xyz: Vec3<T>,
        scale_t: T,
        opacity: T,
        color_f: Vec3<T>,
        feature_dim: usize,
    ) -> Self {
        let id = [T::one(), T::zero(), T::zero(), T::zero()];
        Self {
            mean_xyz,
            mean_t,
            scale_xyz,
            scale_t,
            rot_l: id,
            rot_r: id,
            opacity,
            color_f,
            feature: vec![T::zero(); feature_dim],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature.len()
    }

    pub fn write_params(&self, out: &mut [T]) {
        out[layout::MEAN_XYZ].copy_from_slice(&self.mean_xyz);
        out[layout::MEAN_T] = self.mean_t;
        out[layout::SCALE_XYZ].copy_from_slice(&self.scale_xyz);
        out[layout::SCALE_T] = self.scale_t;
        out[layout::ROT_L].copy_from_slice(&self.rot_l);
        out[layout::ROT_R].copy_from_slice(&self.rot_r);
        out[layout::OPACITY] = self.opacity;
        out[layout::COLOR].copy_from_slice(&self.color_f);
        out[layout::FEATURE_START..].copy_from_slice(&self.feature);
    }

    pub fn read_params(&mut self, p: &[T]) {
        self.mean_xyz.copy_from_slice(&p[layout::MEAN_XYZ]);
        self.mean_t = p[layout::MEAN_T];
        self.scale_xyz.copy_from_slice(&p[layout::SCALE_XYZ]);
        self.scale_t = p[layout::SCALE_T];
        self.rot_l.copy_from_slice(&p[layout::ROT_L]);
        self.rot_r.copy_from_slice(&p[layout::ROT_R]);
        self.opacity = p[layout::OPACITY];
        self.color_f.copy_from_slice(&p[layout::COLOR]);
        self.feature.copy_from_slice(&p[layout::FEATURE_START..]);
    }

    pub fn params(&self) -> Vec<T> {
        let mut out = vec![T::zero(); layout::param_count(self.feature_dim())];
        self.write_params(&mut out);
        out
    }

    pub fn cast<U: Real>(&self) -> Gaussian4D<U> {
        let c = |x: T| U::lit(x.to_f64_lossy());
        Gaussian4D {
            mean_xyz: self.mean_xyz.map(c),
            mean_t: c(self.mean_t),
            scale_xyz: self.scale_xyz.map(c),
            scale_t: c(self.scale_t),
            rot_l: self.rot_l.map(c),
            rot_r: self.rot_r.map(c),
            opacity: c(self.opacity),
            color_f: self.color_f.map(c),
            feature: self.feature.iter().map(|&x| c(x)).collect(),
        }
    }
}

/// Which reduction stage produced a cloud.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageTag {
    Pretrained,
    Sampled,
    Pruned,
    Merged,
    Compressed,
}

/// Maps each Gaussian of a derived cloud to its index in the parent cloud.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IndexMap(pub Vec<usize>);

impl IndexMap {
    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn parent(&self, child: usize) -> usize {
        self.0[child]
    }
}

/// Ordered collection of Gaussians that share one feature width.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud<T> {
    gaussians: Vec<Gaussian4D<T>>,
    stage: StageTag,
    feature_dim: usize,
}

impl<T: Real> GaussianCloud<T> {
    pub fn new(gaussians: Vec<Gaussian4D<T>>, stage: StageTag) -> Result<Self> {
        let feature_dim = gaussians.first().map_or(DEFAULT_FEATURE_DIM, |g| g.feature_dim());
        Self::with_feature_dim(gaussians, stage, feature_dim)
    }

    pub fn with_feature_dim(
        gaussians: Vec<Gaussian4D<T>>,
        stage: StageTag,
        feature_dim: usize,
    ) -> Result<Self> {
        if let Some(i) = gaussians.iter().position(|g| g.feature_dim() != feature_dim) {
            return Err(Error::Format(format!(
                "Gaussian {i} has feature width {} but the cloud uses {feature_dim}",
                gaussians[i].feature_dim()
            )));
        }
        Ok(Self {
            gaussians,
            stage,
            feature_dim,
        })
    }

    pub fn gaussians(&self) -> &[Gaussian4D<T>] {
        &self.gaussians
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn stage(&self) -> StageTag {
        self.stage
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn param_count(&self) -> usize {
        layout::param_count(self.feature_dim)
    }

    pub fn with_stage(mut self, stage: StageTag) -> Self {
        self.stage = stage;
        self
    }

    /// Copies the Gaussians at `indices` (in the given order) into a new cloud.
    pub fn subset(&self, indices: &[usize], stage: StageTag) -> (Self, IndexMap) {
        let gaussians = indices.iter().map(|&i| self.gaussians[i].clone()).collect();
        (
            Self {
                gaussians,
                stage,
                feature_dim: self.feature_dim,
            },
            IndexMap(indices.to_vec()),
        )
    }

    /// Row-major `len × param_count` parameter matrix.
    pub fn flat_params(&self) -> Vec<T> {
        let p = self.param_count();
        let mut out = vec![T::zero(); p * self.len()];
        for (g, row) in self.gaussians.iter().zip(out.chunks_exact_mut(p)) {
            g.write_params(row);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[T]) {
        let p = self.param_count();
        assert_eq!(flat.len(), p * self.len(), "flat parameter length mismatch");
        for (g, row) in self.gaussians.iter_mut().zip(flat.chunks_exact(p)) {
            g.read_params(row);
        }
    }

    pub fn gaussians_mut(&mut self) -> &mut [Gaussian4D<T>] {
        &mut self.gaussians
    }

    pub fn cast<U: Real>(&self) -> GaussianCloud<U> {
        GaussianCloud {
            gaussians: self.gaussians.iter().map(|g| g.cast()).collect(),
            stage: self.stage,
            feature_dim: self.feature_dim,
        }
    }

    /// Content hash over every parameter bit pattern, used to tie score
    /// tables to the exact cloud they were computed on.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.len().hash(&mut h);
        self.feature_dim.hash(&mut h);
        for g in &self.gaussians {
            let mut row = vec![T::zero(); self.param_count()];
            g.write_params(&mut row);
            for x in row {
                x.to_f64_lossy().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Kind of invariant violation found by [`validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    ZeroQuaternion { field: &'static str },
    NonFiniteField { field: &'static str },
    FeatureWidth { expected: usize, found: usize },
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::ZeroQuaternion { field } => write!(f, "zero quaternion ({field})"),
            ViolationKind::NonFiniteField { field } => write!(f, "non-finite field ({field})"),
            ViolationKind::FeatureWidth { expected, found } => {
                write!(f, "feature width {found}, expected {expected}")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

const QUAT_EPS: f64 = 1e-6;

/// Lists every violated per-Gaussian invariant. Never modifies the cloud.
pub fn validate<T: Real>(cloud: &GaussianCloud<T>) -> ValidationReport {
    let mut violations = Vec::new();
    for (index, g) in cloud.gaussians().iter().enumerate() {
        let mut push = |kind| violations.push(Violation { index, kind });
        let fields: [(&'static str, &[T]); 9] = [
            ("mean_xyz", &g.mean_xyz),
            ("mean_t", std::slice::from_ref(&g.mean_t)),
            ("scale_xyz", &g.scale_xyz),
            ("scale_t", std::slice::from_ref(&g.scale_t)),
            ("rot_l", &g.rot_l),
            ("rot_r", &g.rot_r),
            ("opacity", std::slice::from_ref(&g.opacity)),
            ("color_f", &g.color_f),
            ("feature", &g.feature),
        ];
        for (field, values) in fields {
            if values.iter().any(|x| !x.is_finite()) {
                push(ViolationKind::NonFiniteField { field });
            }
        }
        // exp(scale) underflows to zero long before the logarithm is -inf.
        if g
            .scale_xyz
            .iter()
            .chain(std::iter::once(&g.scale_t))
            .any(|s| s.is_finite() && !(s.exp() > T::zero()))
        {
            push(ViolationKind::NonFiniteField { field: "scale" });
        }
        for (field, q) in [("rot_l", &g.rot_l), ("rot_r", &g.rot_r)] {
            let n = crate::linalg::norm_sq(q).sqrt();
            if n.is_finite() && n.to_f64_lossy() < QUAT_EPS {
                push(ViolationKind::ZeroQuaternion { field });
            }
        }
        if g.feature_dim() != cloud.feature_dim() {
            push(ViolationKind::FeatureWidth {
                expected: cloud.feature_dim(),
                found: g.feature_dim(),
            });
        }
    }
    ValidationReport { violations }
}

/// Concrete range helper used by modules that slice flat parameter rows.
pub fn feature_range(feature_dim: usize) -> Range<usize> {
    layout::FEATURE_START..layout::FEATURE_START + feature_dim
}
