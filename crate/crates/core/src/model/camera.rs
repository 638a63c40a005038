use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mat3_t_vec, mat3_vec, sub3, Mat3, Vec3};
use crate::scalar::Real;

/// Pinhole camera: world-to-camera rigid transform plus intrinsics in pixels.
///
/// Camera space looks down +z; pixel `(x, y)` has its center at
/// `(x + 0.5, y + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> Camera<T> {
    /// Camera at `eye` looking at `target` with `up` roughly +y in the image
    /// going down (OpenCV convention: x right, y down, z forward).
    pub fn look_at(eye: Vec3<T>, target: Vec3<T>, up: Vec3<T>, focal: T, width: usize, height: usize) -> Self {
        let normalize = |v: Vec3<T>| {
            let n = crate::linalg::norm_sq(&v).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        };
        let cross = |a: Vec3<T>, b: Vec3<T>| {
            [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ]
        };
        let forward = normalize(sub3(target, eye));
        let right = normalize(cross(forward, up));
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let r_eye = mat3_vec(&rotation, eye);
        Self {
            fx: focal,
            fy: focal,
            cx: T::from_usize_lossy(width) * T::lit(0.5),
            cy: T::from_usize_lossy(height) * T::lit(0.5),
            rotation,
            translation: [-r_eye[0], -r_eye[1], -r_eye[2]],
            width,
            height,
        }
    }

    pub fn world_to_camera(&self, p: Vec3<T>) -> Vec3<T> {
        let r = mat3_vec(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3<T> {
        let c = mat3_t_vec(&self.rotation, self.translation);
        [-c[0], -c[1], -c[2]]
    }

    pub fn cast<U: Real>(&self) -> Camera<U> {
        let c = |x: T| U::lit(x.to_f64_lossy());
        Camera {
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            rotation: self.rotation.map(|r| r.map(c)),
            translation: self.translation.map(c),
            width: self.width,
            height: self.height,
        }
    }
}

/// Row-major `height × width × 3` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![T::zero(); width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidFrame(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [T; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, c: [T; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&c);
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&x| U::lit(x.to_f64_lossy())).collect(),
        }
    }

    /// 8-bit RGB bytes, values clamped to `[0, 1]` and rounded.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&x| (x.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| T::lit(b as f64 / 255.0)).collect();
        Self::from_data(width, height, data)
    }

    /// Planar float32 dump: all R values, then G, then B.
    pub fn to_planar_f32(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(n * 12);
        for c in 0..3 {
            for i in 0..n {
                out.extend_from_slice(&self.data[i * 3 + c].to_f32_lossy().to_le_bytes());
            }
        }
        out
    }
}

/// One training view: camera, normalized timestamp and ground-truth image.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame<T> {
    pub camera: Camera<T>,
    pub timestamp: T,
    pub image: Image<T>,
}

impl<T: Real> CameraFrame<T> {
    pub fn new(camera: Camera<T>, timestamp: T, image: Image<T>) -> Result<Self> {
        let frame = Self {
            camera,
            timestamp,
            image,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.camera.width, self.camera.height);
        if w < 8 || h < 8 {
            return Err(Error::InvalidFrame(format!("image {w}x{h} smaller than 8x8")));
        }
        if self.image.width != w || self.image.height != h || self.image.data.len() != w * h * 3 {
            return Err(Error::InvalidFrame(format!(
                "image {}x{} does not match camera {w}x{h}",
                self.image.width, self.image.height
            )));
        }
        let t = self.timestamp.to_f64_lossy();
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidFrame(format!("timestamp {t} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> CameraFrame<U> {
        CameraFrame {
            camera: self.camera.cast(),
            timestamp: U::lit(self.timestamp.to_f64_lossy()),
            image: self.image.cast(),
        }
    }
}
