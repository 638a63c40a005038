//! Frames directory: `f{frame:04}_c{cam:02}.png` images plus `cameras.json`
//! with the cameras and the timestamps.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Camera, CameraFrame, Image};
use crate::scalar::Real;

pub const CAMERAS_FILE: &str = "cameras.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamerasFile {
    pub cameras: Vec<Camera<f64>>,
    pub timestamps: Vec<f64>,
}

pub fn frame_file_name(frame: usize, cam: usize) -> String {
    format!("f{frame:04}_c{cam:02}.png")
}

/// Multi-view video: every camera sees every timestamp. `frames` is
/// timestamp-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet<T> {
    pub cameras: Vec<Camera<f64>>,
    pub timestamps: Vec<f64>,
    pub frames: Vec<CameraFrame<T>>,
}

impl<T: Real> FrameSet<T> {
    pub fn get(&self, frame: usize, cam: usize) -> &CameraFrame<T> {
        &self.frames[frame * self.cameras.len() + cam]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = CamerasFile {
            cameras: self.cameras.clone(),
            timestamps: self.timestamps.clone(),
        };
        let path = dir.join(CAMERAS_FILE);
        let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::Internal(e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let nc = self.cameras.len();
        self.frames.par_iter().enumerate().try_for_each(|(i, f)| {
            crate::splat::save_png(&f.image, &dir.join(frame_file_name(i / nc, i % nc)))
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CAMERAS_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CamerasFile =
            serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let nc = meta.cameras.len();
        let total = nc * meta.timestamps.len();
        let frames = (0..total)
            .into_par_iter()
            .map(|i| {
                let (f, c) = (i / nc, i % nc);
                let p = dir.join(frame_file_name(f, c));
                let img = image::open(&p)
                    .map_err(|e| Error::io(&p, std::io::Error::other(e)))?
                    .to_rgb8();
                let image = Image::<T>::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())?;
                CameraFrame::new(meta.cameras[c].cast(), T::lit(meta.timestamps[f]), image).map_err(|e| {
                    Error::InvalidFrame(format!("{}: {e}", p.display()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cameras: meta.cameras,
            timestamps: meta.timestamps,
            frames,
        })
    }
}
