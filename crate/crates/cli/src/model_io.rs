use std::path::{Path, PathBuf};

use gs4c::appearance::AppearanceModel;
use gs4c::codec::{read_container, unpack, MAGIC};
use gs4c::model::{load_ply, GaussianCloud};
use gs4c::{Error, Result};

/// A renderable model: the cloud and, if colors are predicted, the MLP.
pub struct LoadedModel {
    pub cloud: GaussianCloud<f64>,
    pub appearance: Option<AppearanceModel<f64>>,
}

pub fn mlp_sidecar(ply: &Path) -> PathBuf {
    ply.with_extension("mlp")
}

fn is_container(path: &Path) -> Result<bool> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 4];
    Ok(f.read_exact(&mut head).is_ok() && &head == MAGIC)
}

/// Loads either a container or a PLY with an optional `.mlp` sidecar.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    if is_container(path)? {
        let parts = unpack(&read_container(path)?)?;
        return Ok(LoadedModel {
            cloud: parts.to_cloud()?,
            appearance: parts.appearance.as_ref().map(|m| m.cast()),
        });
    }
    let cloud = load_ply(path)?;
    let sidecar = mlp_sidecar(path);
    let appearance = if sidecar.exists() {
        let bytes = std::fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        Some(AppearanceModel::<f32>::from_bytes(&bytes)?.cast())
    } else {
        None
    };
    Ok(LoadedModel { cloud, appearance })
}
