//! Sub-vector quantization of per-Gaussian attributes.
//!
//! Each attribute is split into sub-vectors and each sub-vector position
//! gets its own k-means codebook. Spatial ("3D") attributes are activated
//! before the temporal ("4D") ones.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gaussian4D, GaussianCloud};
use crate::scalar::Real;

pub const LLOYD_ITERATIONS: usize = 10;
pub const MAX_TRAINING_VECTORS: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Attribute {
    ScaleXYZ,
    RotR,
    Feature,
    ScaleT,
    RotL,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SvqStage {
    Attr3D,
    Attr4D,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::ScaleXYZ,
        Attribute::RotR,
        Attribute::Feature,
        Attribute::ScaleT,
        Attribute::RotL,
    ];

    pub fn dim(self, feature_dim: usize) -> usize {
        match self {
            Attribute::ScaleXYZ => 3,
            Attribute::RotR | Attribute::RotL => 4,
            Attribute::Feature => feature_dim,
            Attribute::ScaleT => 1,
        }
    }

    pub fn stage(self) -> SvqStage {
        match self {
            Attribute::ScaleT | Attribute::RotL => SvqStage::Attr4D,
            _ => SvqStage::Attr3D,
        }
    }

    pub fn is_quaternion(self) -> bool {
        matches!(self, Attribute::RotR | Attribute::RotL)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn read<T: Real>(self, g: &Gaussian4D<T>) -> Vec<T> {
        match self {
            Attribute::ScaleXYZ => g.scale_xyz.to_vec(),
            Attribute::RotR => canonical_sign(g.rot_r).to_vec(),
            Attribute::Feature => g.feature.clone(),
            Attribute::ScaleT => vec![g.scale_t],
            Attribute::RotL => canonical_sign(g.rot_l).to_vec(),
        }
    }

    pub fn write<T: Real>(self, g: &mut Gaussian4D<T>, v: &[T]) {
        match self {
            Attribute::ScaleXYZ => g.scale_xyz.copy_from_slice(v),
            Attribute::RotR => g.rot_r.copy_from_slice(v),
            Attribute::Feature => g.feature.copy_from_slice(v),
            Attribute::ScaleT => g.scale_t = v[0],
            Attribute::RotL => g.rot_l.copy_from_slice(v),
        }
    }
}

/// `q` and `-q` give the same covariance (the rotation enters squared), so
/// quaternions are quantized with a non-negative first component.
fn canonical_sign<T: Real>(q: [T; 4]) -> [T; 4] {
    let flip = q[0] < T::zero() || (q[0] == T::zero() && q.iter().find(|v| **v != T::zero()).is_some_and(|v| *v < T::zero()));
    if flip {
        q.map(|v| -v)
    } else {
        q
    }
}

/// Which quantization stages are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveStages {
    pub attr3d: bool,
    pub attr4d: bool,
}

impl ActiveStages {
    pub const NONE: Self = Self {
        attr3d: false,
        attr4d: false,
    };
    pub const ALL: Self = Self {
        attr3d: true,
        attr4d: true,
    };

    pub fn contains(&self, s: SvqStage) -> bool {
        match s {
            SvqStage::Attr3D => self.attr3d,
            SvqStage::Attr4D => self.attr4d,
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.attr3d && !self.attr4d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SvqSchedule {
    pub svq3d_start: usize,
    pub svq4d_start: usize,
}

impl Default for SvqSchedule {
    fn default() -> Self {
        Self {
            svq3d_start: 9000,
            svq4d_start: 10000,
        }
    }
}

/// Stages active at iteration `iter`.
pub fn staged_schedule(iter: usize, cfg: &SvqSchedule) -> Result<ActiveStages> {
    if cfg.svq3d_start >= cfg.svq4d_start {
        return Err(Error::Config(format!(
            "SVQ schedule must start 3D ({}) before 4D ({})",
            cfg.svq3d_start, cfg.svq4d_start
        )));
    }
    Ok(ActiveStages {
        attr3d: iter >= cfg.svq3d_start,
        attr4d: iter >= cfg.svq4d_start,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SvqLayout {
    pub attribute: Attribute,
    pub sub_dims: Vec<usize>,
    pub codebook_bits: u32,
}

impl SvqLayout {
    pub fn stage(&self) -> SvqStage {
        self.attribute.stage()
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        let dim = self.attribute.dim(feature_dim);
        if self.sub_dims.iter().sum::<usize>() != dim || self.sub_dims.contains(&0) {
            return Err(Error::Config(format!(
                "{:?}: sub-vector dims {:?} do not partition dimension {dim}",
                self.attribute, self.sub_dims
            )));
        }
        if self.codebook_bits == 0 || self.codebook_bits > 24 {
            return Err(Error::Config(format!("{:?}: codebook bits must be in 1..=24", self.attribute)));
        }
        Ok(())
    }
}

/// Default layouts: scale [3] @ 2^9, right rotation [4] @ 2^13, feature in
/// sub-vectors of 4 @ 2^10, temporal scale [1] @ 2^9, left rotation [4] @
/// 2^13. `scale_bits` overrides the spatial scale codebook size.
pub fn default_layouts(feature_dim: usize, scale_bits: u32) -> Vec<SvqLayout> {
    let mut feature_split = vec![4; feature_dim / 4];
    if !feature_dim.is_multiple_of(4) {
        feature_split.push(feature_dim % 4);
    }
    let mut out = vec![
        SvqLayout {
            attribute: Attribute::ScaleXYZ,
            sub_dims: vec![3],
            codebook_bits: scale_bits,
        },
        SvqLayout {
            attribute: Attribute::RotR,
            sub_dims: vec![4],
            codebook_bits: 13,
        },
    ];
    if feature_dim > 0 {
        out.push(SvqLayout {
            attribute: Attribute::Feature,
            sub_dims: feature_split,
            codebook_bits: 10,
        });
    }
    out.push(SvqLayout {
        attribute: Attribute::ScaleT,
        sub_dims: vec![1],
        codebook_bits: 9,
    });
    out.push(SvqLayout {
        attribute: Attribute::RotL,
        sub_dims: vec![4],
        codebook_bits: 13,
    });
    out
}

/// k-means codebook with f32 codewords.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub dim: usize,
    /// Row-major `K × dim`.
    pub entries: Vec<f32>,
    /// Nearest codeword of every training vector.
    pub assignments: Vec<u32>,
    /// Mean squared error after each Lloyd assignment step.
    pub objective_trace: Vec<f64>,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.entries.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn codeword(&self, k: usize) -> &[f32] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    /// Index of the nearest codeword (squared Euclidean, ties: lowest).
    pub fn nearest(&self, v: &[f64]) -> u32 {
        nearest_in(&self.entries, self.dim, v).0 as u32
    }
}

fn nearest_in<C: Copy + Into<f64>>(centers: &[C], dim: usize, v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.chunks_exact(dim).enumerate() {
        let mut d = 0.0;
        for (a, &b) in v.iter().zip(c) {
            let r = a - b.into();
            d += r * r;
        }
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign_all(points: &[f64], centers: &[f64], dim: usize) -> Vec<(usize, f64)> {
    points.par_chunks(dim).map(|p| nearest_in(centers, dim, p)).collect()
}

fn kmeans_pp(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points
        .par_chunks(dim)
        .map(|p| nearest_in(&centers, dim, p).1)
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = &points[pick * dim..(pick + 1) * dim];
        centers.extend_from_slice(c);
        d2.par_iter_mut().zip(points.par_chunks(dim)).for_each(|(d, p)| {
            let mut e = 0.0;
            for (a, b) in p.iter().zip(c) {
                e += (a - b) * (a - b);
            }
            if e < *d {
                *d = e;
            }
        });
    }
    centers
}

/// Trains a codebook of `min(2^bits, N)` codewords on `vectors` (row-major
/// `N × dim`).
pub fn train_codebook<T: Real>(vectors: &[T], dim: usize, bits: u32, seed: u64) -> Result<Codebook> {
    if dim == 0 {
        return Err(Error::Config("codebook dimension must be positive".into()));
    }
    if vectors.is_empty() || !vectors.len().is_multiple_of(dim) {
        return Err(Error::Config("codebook training needs at least one whole vector".into()));
    }
    let n = vectors.len() / dim;
    let k_max = 1usize << bits;
    let all: Vec<f64> = vectors.iter().map(|v| v.to_f64_lossy()).collect();
    if n <= k_max {
        let entries: Vec<f32> = all.iter().map(|&v| v as f32).collect();
        let mut cb = Codebook {
            dim,
            entries,
            assignments: Vec::new(),
            objective_trace: Vec::new(),
        };
        cb.assignments = all.par_chunks(dim).map(|p| cb.nearest(p)).collect();
        return Ok(cb);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train: Vec<f64> = if n > MAX_TRAINING_VECTORS {
        let mut idx = sample_indices(&mut rng, n, MAX_TRAINING_VECTORS).into_vec();
        idx.sort_unstable();
        idx.iter().flat_map(|&i| all[i * dim..(i + 1) * dim].iter().copied()).collect()
    } else {
        all.clone()
    };
    let nt = train.len() / dim;
    let k = k_max;
    let mut centers = kmeans_pp(&train, dim, k, &mut rng);
    let mut trace = Vec::with_capacity(LLOYD_ITERATIONS);
    for _ in 0..LLOYD_ITERATIONS {
        let assign = assign_all(&train, &centers, dim);
        trace.push(assign.iter().map(|a| a.1).sum::<f64>() / nt as f64);
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assign.iter().enumerate() {
            counts[c] += 1;
            for j in 0..dim {
                sums[c * dim + j] += train[i * dim + j];
            }
        }
        // Empty clusters take the points farthest from their centers.
        let mut far: Vec<usize> = (0..nt).collect();
        far.sort_by(|&a, &b| assign[b].1.total_cmp(&assign[a].1).then(a.cmp(&b)));
        let mut far_iter = far.into_iter();
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centers[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            } else if let Some(p) = far_iter.next() {
                centers[c * dim..(c + 1) * dim].copy_from_slice(&train[p * dim..(p + 1) * dim]);
            }
        }
    }
    let entries: Vec<f32> = centers.iter().map(|&v| v as f32).collect();
    let mut cb = Codebook {
        dim,
        entries,
        assignments: Vec::new(),
        objective_trace: trace,
    };
    cb.assignments = all.par_chunks(dim).map(|p| cb.nearest(p)).collect();
    Ok(cb)
}

fn normalize_codewords(cb: &mut Codebook, vectors: &[f64]) {
    for row in cb.entries.chunks_exact_mut(cb.dim) {
        let n = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if n > 1e-12 {
            for v in row.iter_mut() {
                *v = (*v as f64 / n) as f32;
            }
        } else {
            row.fill(0.0);
            row[0] = 1.0;
        }
    }
    let cbr = &*cb;
    let assignments = vectors.par_chunks(cb.dim).map(|p| cbr.nearest(p)).collect();
    cb.assignments = assignments;
}

/// Codebooks for every sub-vector of one attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeCodebooks {
    pub layout: SvqLayout,
    pub codebooks: Vec<Codebook>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SvqCodebooks {
    pub attributes: Vec<AttributeCodebooks>,
}

impl SvqCodebooks {
    pub fn get(&self, a: Attribute) -> Option<&AttributeCodebooks> {
        self.attributes.iter().find(|x| x.layout.attribute == a)
    }

    pub fn stages(&self) -> ActiveStages {
        let mut s = ActiveStages::NONE;
        for a in &self.attributes {
            match a.layout.stage() {
                SvqStage::Attr3D => s.attr3d = true,
                SvqStage::Attr4D => s.attr4d = true,
            }
        }
        s
    }

    /// Merges `other` in, replacing codebooks of the same attribute.
    pub fn extend(&mut self, other: SvqCodebooks) {
        for a in other.attributes {
            self.attributes.retain(|x| x.layout.attribute != a.layout.attribute);
            self.attributes.push(a);
        }
        self.attributes.sort_by_key(|a| a.layout.attribute);
    }

    /// Index bits per Gaussian before entropy coding.
    pub fn index_bits_per_gaussian(&self) -> u64 {
        self.attributes
            .iter()
            .map(|a| a.layout.codebook_bits as u64 * a.layout.sub_dims.len() as u64)
            .sum()
    }
}

/// Columns `[off, off + d)` of attribute `a` over the whole cloud.
fn gather<T: Real>(cloud: &GaussianCloud<T>, a: Attribute, off: usize, d: usize) -> Vec<f64> {
    cloud
        .gaussians()
        .iter()
        .flat_map(|g| a.read(g)[off..off + d].iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>())
        .collect()
}

/// Trains the codebooks of every layout whose stage is active.
pub fn train_svq<T: Real>(
    cloud: &GaussianCloud<T>,
    layouts: &[SvqLayout],
    active: ActiveStages,
    seed: u64,
) -> Result<SvqCodebooks> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut jobs = Vec::new();
    for (li, l) in layouts.iter().enumerate() {
        l.validate(cloud.feature_dim())?;
        if !active.contains(l.stage()) {
            continue;
        }
        let mut off = 0;
        for (si, &d) in l.sub_dims.iter().enumerate() {
            jobs.push((li, si, off, d));
            off += d;
        }
    }
    let trained: Vec<Result<Codebook>> = jobs
        .par_iter()
        .map(|&(li, si, off, d)| {
            let l = &layouts[li];
            let data = gather(cloud, l.attribute, off, d);
            let job_seed = seed ^ ((l.attribute.code() as u64) << 32) ^ (si as u64).wrapping_mul(0x9e37_79b9);
            let mut cb = train_codebook(&data, d, l.codebook_bits, job_seed)?;
            if l.attribute.is_quaternion() {
                normalize_codewords(&mut cb, &data);
            }
            Ok(cb)
        })
        .collect();
    let mut out = SvqCodebooks::default();
    let mut it = trained.into_iter();
    for l in layouts {
        if !active.contains(l.stage()) {
            continue;
        }
        let codebooks = l.sub_dims.iter().map(|_| it.next().unwrap()).collect::<Result<Vec<_>>>()?;
        out.attributes.push(AttributeCodebooks {
            layout: l.clone(),
            codebooks,
        });
    }
    out.attributes.sort_by_key(|a| a.layout.attribute);
    Ok(out)
}

/// One index stream: the codeword chosen for one sub-vector position of
/// one attribute, per Gaussian.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexStream {
    pub attribute: Attribute,
    pub sub_vector: usize,
    pub bits: u32,
    pub indices: Vec<u32>,
}

/// Assigns every sub-vector to its nearest codeword and returns the index
/// streams with the dequantized cloud. Means are left untouched.
pub fn quantize<T: Real>(
    cloud: &GaussianCloud<T>,
    books: &SvqCodebooks,
    active: ActiveStages,
) -> Result<(Vec<IndexStream>, GaussianCloud<T>)> {
    let mut streams = Vec::new();
    for ab in &books.attributes {
        let l = &ab.layout;
        if !active.contains(l.stage()) {
            return Err(Error::Staging(format!(
                "{:?} belongs to {:?}, which is not active",
                l.attribute,
                l.stage()
            )));
        }
        l.validate(cloud.feature_dim())?;
        if ab.codebooks.len() != l.sub_dims.len() {
            return Err(Error::Config(format!("{:?}: codebook count mismatch", l.attribute)));
        }
        let mut off = 0;
        for (si, (&d, cb)) in l.sub_dims.iter().zip(&ab.codebooks).enumerate() {
            if cb.dim != d {
                return Err(Error::Config(format!("{:?}: codebook width mismatch", l.attribute)));
            }
            let data = gather(cloud, l.attribute, off, d);
            let indices = data.par_chunks(d).map(|p| cb.nearest(p)).collect();
            streams.push(IndexStream {
                attribute: l.attribute,
                sub_vector: si,
                bits: l.codebook_bits,
                indices,
            });
            off += d;
        }
    }
    let deq = dequantize(cloud, books, &streams)?;
    Ok((streams, deq))
}

/// Writes the codewords selected by `streams` into a copy of `cloud`.
/// Quaternions are renormalized.
pub fn dequantize<T: Real>(
    cloud: &GaussianCloud<T>,
    books: &SvqCodebooks,
    streams: &[IndexStream],
) -> Result<GaussianCloud<T>> {
    let mut out = cloud.clone();
    let n = cloud.len();
    for ab in &books.attributes {
        let a = ab.layout.attribute;
        let dim = a.dim(cloud.feature_dim());
        let mine: Vec<&IndexStream> = streams.iter().filter(|s| s.attribute == a).collect();
        if mine.len() != ab.codebooks.len() {
            return Err(Error::Decode(format!("{a:?}: expected {} index streams", ab.codebooks.len())));
        }
        for g in 0..n {
            let mut v = Vec::with_capacity(dim);
            for (s, cb) in mine.iter().zip(&ab.codebooks) {
                let k = *s.indices.get(g).ok_or_else(|| Error::Decode(format!("{a:?}: index stream too short")))? as usize;
                if k >= cb.len() {
                    return Err(Error::Decode(format!("{a:?}: index {k} out of range {}", cb.len())));
                }
                v.extend(cb.codeword(k).iter().map(|&c| T::from_f32_exact(c)));
            }
            if a.is_quaternion() {
                let norm = v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt();
                if norm > T::zero() {
                    for x in v.iter_mut() {
                        *x /= norm;
                    }
                }
            }
            a.write(&mut out.gaussians_mut()[g], &v);
        }
    }
    Ok(out)
}

/// Reassigns the continuous attributes to their nearest codewords and
/// moves each codeword to the mean of its members (empty ones stay).
pub fn refresh_codebooks<T: Real>(cloud: &GaussianCloud<T>, books: &mut SvqCodebooks) {
    for ab in &mut books.attributes {
        let a = ab.layout.attribute;
        let mut off = 0;
        for (cb, &d) in ab.codebooks.iter_mut().zip(&ab.layout.sub_dims) {
            let data = gather(cloud, a, off, d);
            off += d;
            let cbr = &*cb;
            let assign: Vec<u32> = data.par_chunks(d).map(|p| cbr.nearest(p)).collect();
            let k = cb.len();
            let mut sums = vec![0.0f64; k * d];
            let mut counts = vec![0usize; k];
            for (i, &c) in assign.iter().enumerate() {
                counts[c as usize] += 1;
                for j in 0..d {
                    sums[c as usize * d + j] += data[i * d + j];
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    for j in 0..d {
                        cb.entries[c * d + j] = (sums[c * d + j] / counts[c] as f64) as f32;
                    }
                }
            }
            if a.is_quaternion() {
                normalize_codewords(cb, &data);
            } else {
                let cbr = &*cb;
                cb.assignments = data.par_chunks(d).map(|p| cbr.nearest(p)).collect();
            }
        }
    }
}

/// Packs indices at a fixed width of `bits`, LSB first.
pub fn pack_indices(indices: &[u32], bits: u32) -> Vec<u8> {
    let total = indices.len() * bits as usize;
    let mut out = vec![0u8; total.div_ceil(8)];
    let mut pos = 0usize;
    for &v in indices {
        for b in 0..bits {
            if (v >> b) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

pub fn unpack_indices(bytes: &[u8], bits: u32, count: usize) -> Result<Vec<u32>> {
    if bytes.len() * 8 < count * bits as usize {
        return Err(Error::Truncated("packed index stream".into()));
    }
    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let mut v = 0u32;
        for b in 0..bits {
            if (bytes[pos / 8] >> (pos % 8)) & 1 == 1 {
                v |= 1 << b;
            }
            pos += 1;
        }
        out.push(v);
    }
    Ok(out)
}
