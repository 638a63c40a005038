//! Binary little-endian PLY profile for uncompressed 4D Gaussian clouds.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{layout, Gaussian4D, GaussianCloud, StageTag};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const PLY_VERSION_COMMENT: &str = "gs4c_version 1";

const FIXED_PROPERTIES: [&str; layout::FEATURE_START] = [
    "x", "y", "z", "t", "scale_x", "scale_y", "scale_z", "scale_t", "rot_l_0", "rot_l_1", "rot_l_2",
    "rot_l_3", "rot_r_0", "rot_r_1", "rot_r_2", "rot_r_3", "opacity", "f_dc_0", "f_dc_1", "f_dc_2",
];

fn property_names(feature_dim: usize) -> Vec<String> {
    FIXED_PROPERTIES
        .iter()
        .map(|s| s.to_string())
        .chain((0..feature_dim).map(|k| format!("feat_{k}")))
        .collect()
}

fn scalar_size(ty: &str) -> Option<usize> {
    Some(match ty {
        "char" | "uchar" | "int8" | "uint8" => 1,
        "short" | "ushort" | "int16" | "uint16" => 2,
        "int" | "uint" | "float" | "int32" | "uint32" | "float32" => 4,
        "double" | "float64" => 8,
        _ => return None,
    })
}

struct Property {
    name: String,
    ty: String,
    offset: usize,
}

/// Writes `cloud` in the PLY profile. Values are stored as `f32`.
pub fn write_ply<T: Real, W: Write>(cloud: &GaussianCloud<T>, mut w: W) -> std::io::Result<()> {
    let names = property_names(cloud.feature_dim());
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("comment {PLY_VERSION_COMMENT}\n"));
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes())?;
    let mut row = vec![T::zero(); cloud.param_count()];
    let mut bytes = Vec::with_capacity(row.len() * 4);
    for g in cloud.gaussians() {
        g.write_params(&mut row);
        bytes.clear();
        for x in &row {
            bytes.extend_from_slice(&x.to_f32_lossy().to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()
}

pub fn save_ply<T: Real>(cloud: &GaussianCloud<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_ply(cloud, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_ply<T: Real>(path: impl AsRef<Path>) -> Result<GaussianCloud<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses a PLY stream. Properties are matched by name, so any header order
/// is accepted; unknown scalar properties are skipped.
pub fn read_ply<T: Real, R: BufRead>(mut r: R) -> Result<GaussianCloud<T>> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String> {
        line.clear();
        let n = r
            .read_line(&mut line)
            .map_err(|e| Error::io("<ply stream>", e))?;
        if n == 0 {
            return Err(Error::Format("unexpected end of PLY header".into()));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };

    if next_line(&mut r)? != "ply" {
        return Err(Error::Format("missing `ply` magic line".into()));
    }
    let mut count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<Property> = Vec::new();
    let mut stride = 0usize;
    let mut format_ok = false;
    loop {
        let l = next_line(&mut r)?;
        let tokens: Vec<&str> = l.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "binary_little_endian", _] => format_ok = true,
            ["format", other, ..] => {
                return Err(Error::Format(format!("unsupported PLY format `{other}`")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                count = Some(
                    n.parse()
                        .map_err(|_| Error::Format(format!("bad vertex count `{n}`")))?,
                );
                in_vertex = true;
            }
            ["element", name, n] => {
                if count.is_none() && *n != "0" {
                    return Err(Error::Format(format!(
                        "element `{name}` before vertex data is not supported"
                    )));
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::Format("list properties are not supported".into()))
            }
            ["property", ty, name] if in_vertex => {
                let size = scalar_size(ty)
                    .ok_or_else(|| Error::Format(format!("unknown property type `{ty}`")))?;
                props.push(Property {
                    name: name.to_string(),
                    ty: ty.to_string(),
                    offset: stride,
                });
                stride += size;
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(Error::Format(format!("unrecognized header line `{l}`"))),
        }
    }
    if !format_ok {
        return Err(Error::Format("missing format line".into()));
    }
    let count = count.ok_or_else(|| Error::Format("no vertex element".into()))?;

    let feature_dim = (0..)
        .take_while(|k| props.iter().any(|p| p.name == format!("feat_{k}")))
        .count();
    let mut offsets = Vec::with_capacity(layout::param_count(feature_dim));
    for name in property_names(feature_dim) {
        let p = props
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::MissingProperty(name.clone()))?;
        if p.ty != "float" && p.ty != "float32" {
            return Err(Error::Format(format!(
                "property `{name}` has type `{}`, expected float",
                p.ty
            )));
        }
        offsets.push(p.offset);
    }
    if count == 0 {
        return Err(Error::EmptyCloud);
    }

    let mut buf = vec![0u8; stride];
    let mut row = vec![T::zero(); offsets.len()];
    let mut gaussians = Vec::with_capacity(count);
    for i in 0..count {
        r.read_exact(&mut buf).map_err(|e| {
            Error::Format(format!("vertex {i} of {count} truncated: {e}"))
        })?;
        for (dst, &off) in row.iter_mut().zip(&offsets) {
            let v = f32::from_le_bytes(buf[off..off + 4].try_into().expect("4 bytes"));
            *dst = T::from_f32_exact(v);
        }
        let mut g = Gaussian4D::axis_aligned(
            [T::zero(); 3],
            T::zero(),
            [T::zero(); 3],
            T::zero(),
            T::zero(),
            [T::zero(); 3],
            feature_dim,
        );
        g.read_params(&row);
        gaussians.push(g);
    }
    GaussianCloud::with_feature_dim(gaussians, StageTag::Pretrained, feature_dim)
}
