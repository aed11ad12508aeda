//! Observation encoding: C x C patches sampled at spacing S around each
//! source landmark, on both preprocessed images, plus the normalized source
//! point distribution.

use serde::{Deserialize, Serialize};

use crate::core::{GrayImage, LandmarkSet, Point};
use crate::error::{Error, Result};
use crate::imageops::bilinear_or_fill;

/// Patch geometry: side length C in samples, sampling step S in
/// full-resolution pixels. The observation extent per axis is (C-1)*S.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObsConfig {
    pub c: usize,
    pub s: f64,
    /// Value used for samples falling outside the image.
    pub fill: f64,
}

impl Default for ObsConfig {
    fn default() -> Self {
        Self {
            c: 20,
            s: 40.0,
            fill: 0.0,
        }
    }
}

impl ObsConfig {
    pub fn extent(&self) -> f64 {
        (self.c as f64 - 1.0) * self.s
    }

    pub fn validate(&self) -> Result<()> {
        if self.c < 1 {
            return Err(Error::InvalidConfig("patch size C must be >= 1".into()));
        }
        if self.s <= 0.0 {
            return Err(Error::InvalidConfig("sampling step S must be > 0".into()));
        }
        Ok(())
    }
}

/// Flattened model input. Serialization order: landmark-major, source patch
/// before target patch, row-major within each patch, then normalized points
/// (x, y per landmark).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// K * 2 * C*C scalars.
    pub patches: Vec<f64>,
    /// K normalized source coordinates.
    pub norm_points: Vec<(f64, f64)>,
    pub centroid: Point,
    pub scale: f64,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.patches.len() + 2 * self.norm_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty() && self.norm_points.is_empty()
    }

    /// Expected flat length for K landmarks and patch side C.
    pub fn expected_len(k: usize, c: usize) -> usize {
        2 * k * c * c + 2 * k
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.patches);
        for &(x, y) in &self.norm_points {
            v.push(x);
            v.push(y);
        }
        v
    }
}

/// Sample a C x C grid centered on `center` with spacing S; out-of-bounds
/// samples take `cfg.fill`. Row-major: row index varies y.
pub fn extract_patch(img: &GrayImage, center: Point, cfg: &ObsConfig) -> Vec<f64> {
    let c = cfg.c;
    let half = (c as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(c * c);
    for j in 0..c {
        let y = center.y + cfg.s * (j as f64 - half);
        for i in 0..c {
            let x = center.x + cfg.s * (i as f64 - half);
            out.push(bilinear_or_fill(img, x, y, cfg.fill));
        }
    }
    out
}

/// Center on the centroid and divide by the RMS radius, yielding a zero-mean
/// point set with unit RMS radius.
pub fn normalize_points(pts: &LandmarkSet) -> Result<(Vec<(f64, f64)>, Point, f64)> {
    if pts.len() < 2 {
        return Err(Error::DegeneratePointSet);
    }
    let centroid = pts.centroid();
    let ms = pts
        .points
        .iter()
        .map(|p| (p.x - centroid.x).powi(2) + (p.y - centroid.y).powi(2))
        .sum::<f64>()
        / pts.len() as f64;
    let scale = ms.sqrt();
    if scale < 1e-9 {
        return Err(Error::DegeneratePointSet);
    }
    let norm = pts
        .points
        .iter()
        .map(|p| ((p.x - centroid.x) / scale, (p.y - centroid.y) / scale))
        .collect();
    Ok((norm, centroid, scale))
}

/// Build the observation for a pair: per source landmark one patch from each
/// preprocessed image, both centered at the source landmark coordinate, then
/// the normalized source points.
pub fn encode(
    source_landmarks: &LandmarkSet,
    preprocessed_source: &GrayImage,
    preprocessed_target: &GrayImage,
    cfg: &ObsConfig,
) -> Result<Observation> {
    cfg.validate()?;
    let (norm_points, centroid, scale) = normalize_points(source_landmarks)?;
    let mut patches = Vec::with_capacity(2 * source_landmarks.len() * cfg.c * cfg.c);
    for &p in &source_landmarks.points {
        patches.extend(extract_patch(preprocessed_source, p, cfg));
        patches.extend(extract_patch(preprocessed_target, p, cfg));
    }
    Ok(Observation {
        patches,
        norm_points,
        centroid,
        scale,
    })
}
