//! Single-file container: fixed header, then checksummed sections.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::huffman::{huffman_decode, huffman_encode};
use super::{lzma_unwrap, lzma_wrap};
use crate::appearance::AppearanceModel;
use crate::error::{Error, Result};
use crate::model::{Gaussian4D, GaussianCloud, StageTag};
use crate::scalar::Real;
use crate::svq::{dequantize, Attribute, AttributeCodebooks, Codebook, IndexStream, SvqCodebooks, SvqLayout};

pub const MAGIC: &[u8; 4] = b"GS4C";
pub const CONTAINER_VERSION: u16 = 1;
const FIXED_HEADER: usize = 4 + 2 + 4 + 2;
const SECTION_HEADER: usize = 1 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SectionKind {
    Means = 0,
    Codebooks = 1,
    IndexStreams = 2,
    Mlp = 3,
    Metadata = 4,
    /// Attributes stored without quantization (f32, LZMA-wrapped).
    RawAttributes = 5,
}

impl SectionKind {
    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Self::Means,
            1 => Self::Codebooks,
            2 => Self::IndexStreams,
            3 => Self::Mlp,
            4 => Self::Metadata,
            5 => Self::RawAttributes,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Means => "means",
            Self::Codebooks => "codebooks",
            Self::IndexStreams => "index-streams",
            Self::Mlp => "mlp",
            Self::Metadata => "metadata",
            Self::RawAttributes => "raw-attributes",
        }
    }
}

/// Per-Gaussian fields that can bypass quantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RawField {
    ScaleXYZ,
    ScaleT,
    RotL,
    RotR,
    Opacity,
    Color,
    Feature,
}

impl RawField {
    pub fn dim(self, feature_dim: usize) -> usize {
        match self {
            RawField::ScaleXYZ | RawField::Color => 3,
            RawField::ScaleT | RawField::Opacity => 1,
            RawField::RotL | RawField::RotR => 4,
            RawField::Feature => feature_dim,
        }
    }

    fn of(a: Attribute) -> Self {
        match a {
            Attribute::ScaleXYZ => RawField::ScaleXYZ,
            Attribute::RotR => RawField::RotR,
            Attribute::Feature => RawField::Feature,
            Attribute::ScaleT => RawField::ScaleT,
            Attribute::RotL => RawField::RotL,
        }
    }

    fn read<T: Real>(self, g: &Gaussian4D<T>, out: &mut Vec<f32>) {
        let f = |v: &T| v.to_f32_lossy();
        match self {
            RawField::ScaleXYZ => out.extend(g.scale_xyz.iter().map(f)),
            RawField::ScaleT => out.push(g.scale_t.to_f32_lossy()),
            RawField::RotL => out.extend(g.rot_l.iter().map(f)),
            RawField::RotR => out.extend(g.rot_r.iter().map(f)),
            RawField::Opacity => out.push(g.opacity.to_f32_lossy()),
            RawField::Color => out.extend(g.color_f.iter().map(f)),
            RawField::Feature => out.extend(g.feature.iter().map(f)),
        }
    }

    fn write<T: Real>(self, g: &mut Gaussian4D<T>, v: &[f32]) {
        let c = |x: f32| T::from_f32_exact(x);
        match self {
            RawField::ScaleXYZ => g.scale_xyz = [c(v[0]), c(v[1]), c(v[2])],
            RawField::ScaleT => g.scale_t = c(v[0]),
            RawField::RotL => g.rot_l = [c(v[0]), c(v[1]), c(v[2]), c(v[3])],
            RawField::RotR => g.rot_r = [c(v[0]), c(v[1]), c(v[2]), c(v[3])],
            RawField::Opacity => g.opacity = c(v[0]),
            RawField::Color => g.color_f = [c(v[0]), c(v[1]), c(v[2])],
            RawField::Feature => g.feature = v.iter().map(|&x| c(x)).collect(),
        }
    }
}

/// Everything a decoder needs to rebuild the compressed cloud.
///
/// Codebooks carry only their entries; training diagnostics
/// (assignments, objective trace) are not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParts {
    pub feature_dim: usize,
    /// `(x, y, z, t)` per Gaussian.
    pub means: Vec<[f32; 4]>,
    pub codebooks: SvqCodebooks,
    pub streams: Vec<IndexStream>,
    pub raw_fields: Vec<RawField>,
    /// Row per Gaussian, fields concatenated in `raw_fields` order.
    pub raw: Vec<f32>,
    pub appearance: Option<AppearanceModel<f32>>,
    /// Free-form JSON stored with the layouts (schedule, preset, ...).
    pub extra: serde_json::Value,
}

impl ModelParts {
    /// Collects the parts of a quantized cloud. Attributes without a
    /// codebook are stored raw, as are opacity and color when there is no
    /// appearance model.
    pub fn from_cloud<T: Real>(
        cloud: &GaussianCloud<T>,
        codebooks: &SvqCodebooks,
        streams: &[IndexStream],
        appearance: Option<&AppearanceModel<T>>,
    ) -> Self {
        let mut raw_fields: Vec<RawField> = Attribute::ALL
            .iter()
            .filter(|a| codebooks.get(**a).is_none())
            .filter(|a| **a != Attribute::Feature || cloud.feature_dim() > 0)
            .map(|&a| RawField::of(a))
            .collect();
        if appearance.is_none() {
            raw_fields.push(RawField::Opacity);
            raw_fields.push(RawField::Color);
        }
        let mut raw = Vec::new();
        for g in cloud.gaussians() {
            for f in &raw_fields {
                f.read(g, &mut raw);
            }
        }
        let books = SvqCodebooks {
            attributes: codebooks
                .attributes
                .iter()
                .map(|ab| AttributeCodebooks {
                    layout: ab.layout.clone(),
                    codebooks: ab.codebooks.iter().map(strip_diagnostics).collect(),
                })
                .collect(),
        };
        Self {
            feature_dim: cloud.feature_dim(),
            means: cloud
                .gaussians()
                .iter()
                .map(|g| {
                    [
                        g.mean_xyz[0].to_f32_lossy(),
                        g.mean_xyz[1].to_f32_lossy(),
                        g.mean_xyz[2].to_f32_lossy(),
                        g.mean_t.to_f32_lossy(),
                    ]
                })
                .collect(),
            codebooks: books,
            streams: streams.to_vec(),
            raw_fields,
            raw,
            appearance: appearance.map(|m| m.cast()),
            extra: serde_json::Value::Null,
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    fn raw_width(&self) -> usize {
        self.raw_fields.iter().map(|f| f.dim(self.feature_dim)).sum()
    }

    /// Rebuilds the cloud: means, raw fields, then dequantized attributes.
    /// Fields that are neither raw nor quantized keep identity defaults
    /// (zero logit opacity and mid-gray color when an appearance model
    /// replaces them).
    pub fn to_cloud<T: Real>(&self) -> Result<GaussianCloud<T>> {
        let width = self.raw_width();
        if self.raw.len() != width * self.len() {
            return Err(Error::Decode("raw attribute payload length".into()));
        }
        let half = T::lit(0.5);
        let mut gs = Vec::with_capacity(self.len());
        for (i, m) in self.means.iter().enumerate() {
            let c = |x: f32| T::from_f32_exact(x);
            let mut g = Gaussian4D::axis_aligned(
                [c(m[0]), c(m[1]), c(m[2])],
                c(m[3]),
                [T::zero(); 3],
                T::zero(),
                T::zero(),
                [half; 3],
                self.feature_dim,
            );
            let row = &self.raw[i * width..(i + 1) * width];
            let mut off = 0;
            for f in &self.raw_fields {
                let d = f.dim(self.feature_dim);
                f.write(&mut g, &row[off..off + d]);
                off += d;
            }
            gs.push(g);
        }
        let base = GaussianCloud::with_feature_dim(gs, StageTag::Compressed, self.feature_dim)?;
        dequantize(&base, &self.codebooks, &self.streams)
    }
}

fn strip_diagnostics(cb: &Codebook) -> Codebook {
    Codebook {
        dim: cb.dim,
        entries: cb.entries.clone(),
        assignments: Vec::new(),
        objective_trace: Vec::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamInfo {
    pub attribute: Attribute,
    pub sub_vector: usize,
    pub bits: u32,
    pub alphabet: u32,
    /// Huffman-coded bytes of this stream inside the index section.
    pub coded_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Metadata {
    feature_dim: usize,
    layouts: Vec<SvqLayout>,
    streams: Vec<StreamInfo>,
    raw_fields: Vec<RawField>,
    appearance: bool,
    means_format: String,
    #[serde(default)]
    extra: serde_json::Value,
}

/// A packed model: Gaussian count plus its sections in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedModel {
    pub count: u32,
    pub sections: Vec<(SectionKind, Vec<u8>)>,
}

impl CompressedModel {
    pub fn section(&self, kind: SectionKind) -> Option<&[u8]> {
        self.sections.iter().find(|(k, _)| *k == kind).map(|(_, p)| p.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(measure(self).total as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u16).to_le_bytes());
        for (kind, payload) in &self.sections {
            out.push(*kind as u8);
            out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    /// Parses the framing and verifies every section checksum.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < FIXED_HEADER {
            return Err(Error::Truncated("container header".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CONTAINER_VERSION {
            return Err(Error::UnknownVersion(version));
        }
        let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        let n_sections = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
        let mut pos = FIXED_HEADER;
        let mut sections = Vec::with_capacity(n_sections);
        for s in 0..n_sections {
            let head = bytes
                .get(pos..pos + SECTION_HEADER)
                .ok_or_else(|| Error::Truncated(format!("header of section {s}")))?;
            let kind = SectionKind::from_code(head[0])
                .ok_or_else(|| Error::Decode(format!("unknown section kind {}", head[0])))?;
            let crc = u32::from_le_bytes(head[1..5].try_into().unwrap());
            let len = u64::from_le_bytes(head[5..13].try_into().unwrap());
            pos += SECTION_HEADER;
            let end = usize::try_from(len)
                .ok()
                .and_then(|l| pos.checked_add(l))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Truncated(format!("{} section", kind.name())))?;
            let payload = &bytes[pos..end];
            if crc32fast::hash(payload) != crc {
                return Err(Error::Checksum {
                    section: kind.name().to_string(),
                });
            }
            if sections.iter().any(|(k, _)| *k == kind) {
                return Err(Error::Decode(format!("duplicate {} section", kind.name())));
            }
            sections.push((kind, payload.to_vec()));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(Error::Decode(format!("{} trailing bytes after last section", bytes.len() - pos)));
        }
        Ok(Self { count, sections })
    }
}

/// Encodes the parts into container sections. Empty payloads are omitted.
pub fn pack(parts: &ModelParts) -> Result<CompressedModel> {
    let n = parts.len();
    let count = u32::try_from(n).map_err(|_| Error::Encoding("too many Gaussians".into()))?;
    if parts.raw.len() != parts.raw_width() * n {
        return Err(Error::Encoding("raw attribute payload does not match the field list".into()));
    }
    for ab in &parts.codebooks.attributes {
        ab.layout.validate(parts.feature_dim)?;
        if ab.codebooks.len() != ab.layout.sub_dims.len() {
            return Err(Error::Encoding(format!("{:?}: codebook count mismatch", ab.layout.attribute)));
        }
    }

    let mut means = Vec::with_capacity(n * 16);
    for m in &parts.means {
        for v in m {
            means.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut books = Vec::new();
    for ab in &parts.codebooks.attributes {
        for cb in &ab.codebooks {
            books.extend_from_slice(&(cb.len() as u32).to_le_bytes());
            books.extend_from_slice(&(cb.dim as u32).to_le_bytes());
            for v in &cb.entries {
                books.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    let mut infos = Vec::new();
    let mut coded = Vec::new();
    for s in &parts.streams {
        let cb = parts
            .codebooks
            .get(s.attribute)
            .and_then(|ab| ab.codebooks.get(s.sub_vector))
            .ok_or_else(|| Error::Encoding(format!("{:?}[{}]: stream without codebook", s.attribute, s.sub_vector)))?;
        if s.indices.len() != n {
            return Err(Error::Encoding(format!("{:?}[{}]: stream length", s.attribute, s.sub_vector)));
        }
        let alphabet = cb.len() as u32;
        let enc = huffman_encode(&s.indices, alphabet.max(1))?;
        infos.push(StreamInfo {
            attribute: s.attribute,
            sub_vector: s.sub_vector,
            bits: s.bits,
            alphabet,
            coded_bytes: enc.len() as u64,
        });
        coded.extend_from_slice(&enc);
    }

    let mut raw = Vec::with_capacity(parts.raw.len() * 4);
    for v in &parts.raw {
        raw.extend_from_slice(&v.to_le_bytes());
    }

    let meta = Metadata {
        feature_dim: parts.feature_dim,
        layouts: parts.codebooks.attributes.iter().map(|a| a.layout.clone()).collect(),
        streams: infos,
        raw_fields: parts.raw_fields.clone(),
        appearance: parts.appearance.is_some(),
        means_format: "f32".into(),
        extra: parts.extra.clone(),
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::Encoding(format!("metadata: {e}")))?;

    let wrap = |b: Vec<u8>| if b.is_empty() { Ok(b) } else { lzma_wrap(&b) };
    let mut sections = vec![
        (SectionKind::Metadata, meta),
        (SectionKind::Means, means),
        (SectionKind::Codebooks, wrap(books)?),
        (SectionKind::IndexStreams, wrap(coded)?),
        (SectionKind::Mlp, parts.appearance.as_ref().map(|m| m.to_bytes()).unwrap_or_default()),
        (SectionKind::RawAttributes, wrap(raw)?),
    ];
    sections.retain(|(k, p)| *k == SectionKind::Metadata || !p.is_empty());
    Ok(CompressedModel { count, sections })
}

/// Decodes every section back into parts.
pub fn unpack(model: &CompressedModel) -> Result<ModelParts> {
    let n = model.count as usize;
    let meta: Metadata = serde_json::from_slice(
        model
            .section(SectionKind::Metadata)
            .ok_or_else(|| Error::Decode("missing metadata section".into()))?,
    )
    .map_err(|e| Error::Decode(format!("metadata: {e}")))?;
    if meta.means_format != "f32" {
        return Err(Error::Decode(format!("unsupported means format {}", meta.means_format)));
    }
    let unwrap = |k: SectionKind| -> Result<Vec<u8>> {
        match model.section(k) {
            Some(p) => lzma_unwrap(p),
            None => Ok(Vec::new()),
        }
    };

    let means_bytes = model.section(SectionKind::Means).unwrap_or_default();
    if means_bytes.len() != n * 16 {
        return Err(Error::Decode(format!(
            "means section has {} bytes, expected {}",
            means_bytes.len(),
            n * 16
        )));
    }
    let floats = |b: &[u8]| -> Vec<f32> { b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect() };
    let means: Vec<[f32; 4]> = floats(means_bytes).chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();

    let books_bytes = unwrap(SectionKind::Codebooks)?;
    let mut pos = 0usize;
    let mut attributes = Vec::new();
    for layout in &meta.layouts {
        layout.validate(meta.feature_dim).map_err(|e| Error::Decode(e.to_string()))?;
        let mut codebooks = Vec::new();
        for &d in &layout.sub_dims {
            let head = books_bytes
                .get(pos..pos + 8)
                .ok_or_else(|| Error::Truncated("codebook header".into()))?;
            let k = u32::from_le_bytes(head[..4].try_into().unwrap()) as usize;
            let dim = u32::from_le_bytes(head[4..].try_into().unwrap()) as usize;
            if dim != d || k > 1usize << layout.codebook_bits {
                return Err(Error::Decode(format!("{:?}: codebook shape {k}x{dim}", layout.attribute)));
            }
            pos += 8;
            let body = books_bytes
                .get(pos..pos + k * d * 4)
                .ok_or_else(|| Error::Truncated("codebook entries".into()))?;
            pos += k * d * 4;
            codebooks.push(Codebook {
                dim,
                entries: floats(body),
                assignments: Vec::new(),
                objective_trace: Vec::new(),
            });
        }
        attributes.push(AttributeCodebooks {
            layout: layout.clone(),
            codebooks,
        });
    }
    if pos != books_bytes.len() {
        return Err(Error::Decode("trailing bytes in codebook section".into()));
    }

    let coded = unwrap(SectionKind::IndexStreams)?;
    let declared: u64 = meta.streams.iter().map(|s| s.coded_bytes).sum();
    if declared != coded.len() as u64 {
        return Err(Error::Decode(format!(
            "index streams declare {declared} bytes but the section holds {}",
            coded.len()
        )));
    }
    let mut streams = Vec::with_capacity(meta.streams.len());
    let mut pos = 0usize;
    for info in &meta.streams {
        let end = pos + info.coded_bytes as usize;
        let (indices, used) = huffman_decode(&coded[pos..end])?;
        if used != info.coded_bytes as usize || indices.len() != n {
            return Err(Error::Decode(format!("{:?}[{}]: stream length", info.attribute, info.sub_vector)));
        }
        if indices.iter().any(|&i| i >= info.alphabet.max(1)) {
            return Err(Error::Decode(format!("{:?}[{}]: index out of range", info.attribute, info.sub_vector)));
        }
        streams.push(IndexStream {
            attribute: info.attribute,
            sub_vector: info.sub_vector,
            bits: info.bits,
            indices,
        });
        pos = end;
    }

    let appearance = match model.section(SectionKind::Mlp) {
        Some(b) => Some(AppearanceModel::<f32>::from_bytes(b)?),
        None => None,
    };
    if appearance.is_some() != meta.appearance {
        return Err(Error::Decode("appearance flag disagrees with sections".into()));
    }

    let raw = floats(&unwrap(SectionKind::RawAttributes)?);
    let parts = ModelParts {
        feature_dim: meta.feature_dim,
        means,
        codebooks: SvqCodebooks { attributes },
        streams,
        raw_fields: meta.raw_fields,
        raw,
        appearance,
        extra: meta.extra,
    };
    if parts.raw.len() != parts.raw_width() * n {
        return Err(Error::Decode("raw attribute payload length".into()));
    }
    Ok(parts)
}

/// Byte counts per section. `header` covers the fixed header, every
/// section header and the metadata payload.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeBreakdown {
    pub header: u64,
    pub means: u64,
    pub codebooks: u64,
    pub index_streams: u64,
    pub mlp: u64,
    pub raw_attributes: u64,
    pub total: u64,
}

impl SizeBreakdown {
    pub fn megabytes(&self) -> f64 {
        self.total as f64 / (1u64 << 20) as f64
    }
}

pub fn measure(model: &CompressedModel) -> SizeBreakdown {
    let mut b = SizeBreakdown {
        header: (FIXED_HEADER + SECTION_HEADER * model.sections.len()) as u64,
        ..Default::default()
    };
    for (kind, p) in &model.sections {
        let len = p.len() as u64;
        match kind {
            SectionKind::Metadata => b.header += len,
            SectionKind::Means => b.means += len,
            SectionKind::Codebooks => b.codebooks += len,
            SectionKind::IndexStreams => b.index_streams += len,
            SectionKind::Mlp => b.mlp += len,
            SectionKind::RawAttributes => b.raw_attributes += len,
        }
    }
    b.total = b.header + b.means + b.codebooks + b.index_streams + b.mlp + b.raw_attributes;
    b
}

pub fn write_container(path: &Path, model: &CompressedModel) -> Result<()> {
    std::fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<CompressedModel> {
    CompressedModel::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
