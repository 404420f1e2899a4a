//! Pinhole camera model and per-frame depth maps.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{GeometryError, Point3};

/// Pinhole intrinsics. Pixel (u, v) has u growing rightward, v downward;
/// (cx, cy) is the principal point in the same coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx.is_finite() && self.fy.is_finite() && self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::BadIntrinsics("non-finite value".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::BadIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::BadIntrinsics("zero image dimension".into()));
        }
        if self.cx < 0.0 || self.cx >= self.width as f64 || self.cy < 0.0 || self.cy >= self.height as f64 {
            return Err(GeometryError::BadIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Back-projects pixel (u, v) at the given depth (meters along the optical
/// axis) into camera coordinates.
pub fn unproject(pixel: (f64, f64), depth: f64, k: &CameraIntrinsics) -> Result<Point3, GeometryError> {
    let (u, v) = pixel;
    if !k.contains(u, v) {
        return Err(GeometryError::PixelOutOfBounds {
            u,
            v,
            width: k.width,
            height: k.height,
        });
    }
    if !(depth.is_finite() && depth > 0.0) {
        return Err(GeometryError::InvalidDepth(depth));
    }
    Ok(Point3::new(
        (u - k.cx) / k.fx * depth,
        (v - k.cy) / k.fy * depth,
        depth,
    ))
}

/// Projects a camera-space point onto the image plane. The result may fall
/// outside the image bounds; callers decide whether that matters.
pub fn project(point: Point3, k: &CameraIntrinsics) -> Result<(f64, f64), GeometryError> {
    if point.z <= 0.0 || !point.is_finite() {
        return Err(GeometryError::NonPositiveDepth(point.z));
    }
    Ok((
        point.x / point.z * k.fx + k.cx,
        point.y / point.z * k.fy + k.cy,
    ))
}

#[derive(Debug, Error)]
pub enum DepthIoError {
    #[error("failed to read depth image: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to decode depth image: {0}")]
    Decode(#[from] image::ImageError),
    #[error("depth image must be 8 or 16 bit grayscale")]
    BadPixelFormat,
    #[error("depth scale must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("invalid depth map: {0}")]
    Invalid(String),
}

/// Dense per-pixel depth in meters. Zero marks missing measurements, the
/// usual convention for depth images stored as 16-bit PNG.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self, DepthIoError> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(DepthIoError::Invalid(format!(
                "expected {} values for {}x{}, got {}",
                (width as usize) * (height as usize),
                width,
                height,
                data.len()
            )));
        }
        if !data.iter().all(|d| d.is_finite() && *d >= 0.0) {
            return Err(DepthIoError::Invalid(
                "depth values must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// A map with every pixel at the same valid depth.
    pub fn constant(width: u32, height: u32, depth: f64) -> Self {
        Self {
            width,
            height,
            data: vec![depth; (width as usize) * (height as usize)],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, u: u32, v: u32) -> f64 {
        self.data[v as usize * self.width as usize + u as usize]
    }

    /// Depth at an integer pixel, or None when out of bounds or invalid (0).
    pub fn valid_at(&self, u: i64, v: i64) -> Option<f64> {
        if u < 0 || v < 0 || u >= self.width as i64 || v >= self.height as i64 {
            return None;
        }
        let d = self.get(u as u32, v as u32);
        (d > 0.0).then_some(d)
    }

    pub fn set(&mut self, u: u32, v: u32, depth: f64) {
        self.data[v as usize * self.width as usize + u as usize] = depth;
    }

    /// Reads a 16-bit (or 8-bit) grayscale PNG. `scale` is stored units per
    /// meter, e.g. 1000 for millimeter-encoded files. Zero stays invalid.
    pub fn from_png(path: &Path, scale: f64) -> Result<Self, DepthIoError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(DepthIoError::BadScale(scale));
        }
        let img = image::open(path)?;
        match img {
            image::DynamicImage::ImageLuma16(buf) => {
                let (w, h) = buf.dimensions();
                let data = buf.pixels().map(|p| p.0[0] as f64 / scale).collect();
                DepthMap::new(w, h, data)
            }
            image::DynamicImage::ImageLuma8(buf) => {
                let (w, h) = buf.dimensions();
                let data = buf.pixels().map(|p| p.0[0] as f64 / scale).collect();
                DepthMap::new(w, h, data)
            }
            _ => Err(DepthIoError::BadPixelFormat),
        }
    }

    /// Writes a 16-bit grayscale PNG with the given scale. Values that do not
    /// fit the 16-bit range are clamped; exact zero stays the invalid marker.
    pub fn to_png(&self, path: &Path, scale: f64) -> Result<(), DepthIoError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(DepthIoError::BadScale(scale));
        }
        let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(self.width, self.height);
        for (u, v, px) in buf.enumerate_pixels_mut() {
            let d = self.get(u, v);
            let raw = if d == 0.0 {
                0
            } else {
                (d * scale).round().clamp(1.0, u16::MAX as f64) as u16
            };
            *px = image::Luma([raw]);
        }
        buf.save(path)?;
        Ok(())
    }
}
