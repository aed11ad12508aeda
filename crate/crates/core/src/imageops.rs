//! Known-operator preprocessing: grayscale conversion, standardization,
//! histogram equalization, Gaussian/LoG filtering, guided filtering,
//! multi-scale Frangi vesselness, and factor-4 resampling.

use serde::{Deserialize, Serialize};

use crate::core::{GrayImage, ImageData, RgbImage};
use crate::error::{Error, Result};

/// Grayscale conversion mode. Vessel contrast is strongest in the green
/// channel on fundus photographs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GrayMode {
    GreenChannel,
    Luma,
}

/// Polarity of tubular structures relative to background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    /// Dark vessels on bright background (retinal default).
    DarkOnBright,
    BrightOnDark,
}

/// Multi-scale Frangi vesselness configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrangiConfig {
    /// Gaussian scales in pixels, strictly increasing.
    pub scales: Vec<f64>,
    /// Blobness sensitivity beta.
    pub beta: f64,
    /// Structureness sensitivity; `None` selects half the maximum
    /// structureness observed at each scale.
    pub c: Option<f64>,
    pub polarity: Polarity,
}

impl Default for FrangiConfig {
    fn default() -> Self {
        Self {
            // Eight scales covering fundus vessel calibers after factor-4
            // downsampling.
            scales: vec![1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0],
            beta: 0.5,
            c: None,
            polarity: Polarity::DarkOnBright,
        }
    }
}

impl FrangiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::InvalidConfig("frangi scales empty".into()));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) || self.scales[0] <= 0.0 {
            return Err(Error::InvalidConfig(
                "frangi scales must be strictly increasing and positive".into(),
            ));
        }
        if self.beta <= 0.0 {
            return Err(Error::InvalidConfig("frangi beta must be > 0".into()));
        }
        if let Some(c) = self.c {
            if c <= 0.0 {
                return Err(Error::InvalidConfig("frangi c must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Guided filter configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidedFilterConfig {
    /// Window radius in pixels; the window is (2r+1) squared.
    pub radius: usize,
    /// Regularizer in squared intensity units.
    pub eps: f64,
}

impl Default for GuidedFilterConfig {
    fn default() -> Self {
        Self {
            radius: 2,
            eps: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResampleFactor {
    Down4,
    Up4,
}

/// Preprocessing branch selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    None,
    HistEqLoG,
    GuidedFrangi,
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Branch::None => write!(f, "none"),
            Branch::HistEqLoG => write!(f, "histeq-log"),
            Branch::GuidedFrangi => write!(f, "guided-frangi"),
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Branch::None),
            "histeq-log" => Ok(Branch::HistEqLoG),
            "guided-frangi" => Ok(Branch::GuidedFrangi),
            other => Err(format!("unknown branch {other:?}")),
        }
    }
}

/// Parameters for the full preprocessing pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessParams {
    pub gray_mode: GrayMode,
    pub log_sigma: f64,
    pub hist_bins: usize,
    pub guided: GuidedFilterConfig,
    pub frangi: FrangiConfig,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            gray_mode: GrayMode::GreenChannel,
            log_sigma: 2.0,
            hist_bins: 256,
            guided: GuidedFilterConfig::default(),
            frangi: FrangiConfig::default(),
        }
    }
}

pub fn to_gray(img: &RgbImage, mode: GrayMode) -> GrayImage {
    let mut data = Vec::with_capacity(img.width * img.height);
    for px in img.data.chunks_exact(3) {
        let v = match mode {
            GrayMode::GreenChannel => px[1],
            GrayMode::Luma => 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2],
        };
        data.push(v);
    }
    GrayImage::new(img.width, img.height, data)
}

/// Linear map sending min -> -1 and max -> +1; constant images map to zero.
pub fn standardize(img: &GrayImage) -> GrayImage {
    let min = img.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = img.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range <= 0.0 {
        return GrayImage::filled(img.width, img.height, 0.0);
    }
    let data = img
        .data
        .iter()
        .map(|&v| 2.0 * (v - min) / range - 1.0)
        .collect();
    GrayImage::new(img.width, img.height, data)
}

/// CDF remap over `bins` bins, output rescaled to [-1, 1]. Constant images
/// pass through unchanged.
pub fn hist_equalize(img: &GrayImage, bins: usize) -> GrayImage {
    assert!(bins >= 2, "need at least 2 bins");
    let min = img.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = img.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range <= 0.0 {
        return img.clone();
    }
    let mut hist = vec![0usize; bins];
    let bin_of = |v: f64| (((v - min) / range * bins as f64) as usize).min(bins - 1);
    for &v in &img.data {
        hist[bin_of(v)] += 1;
    }
    let total = img.data.len() as f64;
    let mut cdf = vec![0.0f64; bins];
    let mut acc = 0usize;
    for (b, &h) in hist.iter().enumerate() {
        acc += h;
        cdf[b] = acc as f64 / total;
    }
    let data = img.data.iter().map(|&v| 2.0 * cdf[bin_of(v)] - 1.0).collect();
    GrayImage::new(img.width, img.height, data)
}

/// Symmetric reflection of an out-of-range index into [0, n).
#[inline]
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian with kernel half-width ceil(3*sigma) and reflective
/// boundaries.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    assert!(sigma > 0.0, "sigma must be positive");
    let kernel = gaussian_kernel(sigma);
    let half = (kernel.len() / 2) as isize;
    let (w, h) = (img.width, img.height);

    // Horizontal pass.
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        let row = &img.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let xi = reflect(x as isize + ki as isize - half, w);
                acc += kv * row[xi];
            }
            tmp[y * w + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0f64; w * h];
    for x in 0..w {
        for y in 0..h {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let yi = reflect(y as isize + ki as isize - half, h);
                acc += kv * tmp[yi * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    GrayImage::new(w, h, out)
}

/// Scale-normalized Laplacian of Gaussian: sigma^2 * (Ixx + Iyy) of the
/// smoothed image, via central differences.
pub fn log_filter(img: &GrayImage, sigma: f64) -> GrayImage {
    let (ixx, _, iyy) = hessian_2d(img, sigma);
    let data = ixx
        .data
        .iter()
        .zip(iyy.data.iter())
        .map(|(&a, &b)| a + b)
        .collect();
    GrayImage::new(img.width, img.height, data)
}

/// Scale-normalized Hessian maps (Ixx, Ixy, Iyy) of the Gaussian-smoothed
/// image, each multiplied by sigma^2.
pub fn hessian_2d(img: &GrayImage, sigma: f64) -> (GrayImage, GrayImage, GrayImage) {
    let blurred = gaussian_blur(img, sigma);
    let (w, h) = (img.width, img.height);
    let s2 = sigma * sigma;
    let at = |x: isize, y: isize| blurred.data[reflect(y, h) * w + reflect(x, w)];

    let mut ixx = vec![0.0f64; w * h];
    let mut ixy = vec![0.0f64; w * h];
    let mut iyy = vec![0.0f64; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let c = at(x, y);
            ixx[i] = s2 * (at(x + 1, y) - 2.0 * c + at(x - 1, y));
            iyy[i] = s2 * (at(x, y + 1) - 2.0 * c + at(x, y - 1));
            ixy[i] = s2
                * (at(x + 1, y + 1) - at(x + 1, y - 1) - at(x - 1, y + 1) + at(x - 1, y - 1))
                / 4.0;
        }
    }
    (
        GrayImage::new(w, h, ixx),
        GrayImage::new(w, h, ixy),
        GrayImage::new(w, h, iyy),
    )
}

/// Box mean with windows renormalized by the number of valid pixels at the
/// boundary, via a summed-area table.
fn box_mean(img: &GrayImage, radius: usize) -> GrayImage {
    let (w, h) = (img.width, img.height);
    let r = radius as isize;
    // Integral image with one extra row/column of zeros.
    let mut sat = vec![0.0f64; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row_acc = 0.0;
        for x in 0..w {
            row_acc += img.data[y * w + x];
            sat[(y + 1) * (w + 1) + (x + 1)] = sat[y * (w + 1) + (x + 1)] + row_acc;
        }
    }
    let mut out = vec![0.0f64; w * h];
    for y in 0..h as isize {
        let y0 = (y - r).max(0) as usize;
        let y1 = ((y + r) as usize).min(h - 1) + 1;
        for x in 0..w as isize {
            let x0 = (x - r).max(0) as usize;
            let x1 = ((x + r) as usize).min(w - 1) + 1;
            let sum = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                + sat[y0 * (w + 1) + x0];
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            out[y as usize * w + x as usize] = sum / count;
        }
    }
    GrayImage::new(w, h, out)
}

/// Classical guided filter: the output is a local linear function of the
/// guide image.
pub fn guided_filter(
    guide: &GrayImage,
    input: &GrayImage,
    cfg: &GuidedFilterConfig,
) -> Result<GrayImage> {
    if guide.width != input.width || guide.height != input.height {
        return Err(Error::DimensionMismatch(
            guide.width,
            guide.height,
            input.width,
            input.height,
        ));
    }
    let (w, h) = (guide.width, guide.height);
    let n = w * h;

    let mean_g = box_mean(guide, cfg.radius);
    let mean_in = box_mean(input, cfg.radius);
    let gg = GrayImage::new(w, h, guide.data.iter().map(|&v| v * v).collect());
    let gi = GrayImage::new(
        w,
        h,
        guide
            .data
            .iter()
            .zip(input.data.iter())
            .map(|(&g, &i)| g * i)
            .collect(),
    );
    let mean_gg = box_mean(&gg, cfg.radius);
    let mean_gi = box_mean(&gi, cfg.radius);

    let mut a = vec![0.0f64; n];
    let mut b = vec![0.0f64; n];
    for i in 0..n {
        let var = mean_gg.data[i] - mean_g.data[i] * mean_g.data[i];
        let cov = mean_gi.data[i] - mean_g.data[i] * mean_in.data[i];
        a[i] = cov / (var + cfg.eps);
        b[i] = mean_in.data[i] - a[i] * mean_g.data[i];
    }
    let mean_a = box_mean(&GrayImage::new(w, h, a), cfg.radius);
    let mean_b = box_mean(&GrayImage::new(w, h, b), cfg.radius);

    let data = (0..n)
        .map(|i| mean_a.data[i] * guide.data[i] + mean_b.data[i])
        .collect();
    Ok(GrayImage::new(w, h, data))
}

/// Multi-scale Frangi vesselness; output rescaled to [0, 1].
pub fn frangi_vesselness(img: &GrayImage, cfg: &FrangiConfig) -> Result<GrayImage> {
    cfg.validate()?;
    let (w, h) = (img.width, img.height);
    let n = w * h;
    let mut best = vec![0.0f64; n];

    for &sigma in &cfg.scales {
        let (ixx, ixy, iyy) = hessian_2d(img, sigma);
        let mut l1 = vec![0.0f64; n];
        let mut l2 = vec![0.0f64; n];
        let mut max_s = 0.0f64;
        for i in 0..n {
            let (a, b, d) = (ixx.data[i], ixy.data[i], iyy.data[i]);
            let half_tr = 0.5 * (a + d);
            let disc = (0.5 * (a - d)).hypot(b);
            let (e1, e2) = (half_tr - disc, half_tr + disc);
            // Order by magnitude: |l1| <= |l2|.
            if e1.abs() <= e2.abs() {
                l1[i] = e1;
                l2[i] = e2;
            } else {
                l1[i] = e2;
                l2[i] = e1;
            }
            let s = l1[i].hypot(l2[i]);
            if s > max_s {
                max_s = s;
            }
        }
        let c = cfg.c.unwrap_or(0.5 * max_s);
        if c <= 0.0 {
            // Flat at this scale; nothing to add.
            continue;
        }
        let two_beta2 = 2.0 * cfg.beta * cfg.beta;
        let two_c2 = 2.0 * c * c;
        for i in 0..n {
            let pass = match cfg.polarity {
                Polarity::DarkOnBright => l2[i] > 0.0,
                Polarity::BrightOnDark => l2[i] < 0.0,
            };
            if !pass {
                continue;
            }
            let rb = if l2[i] == 0.0 { 0.0 } else { l1[i] / l2[i] };
            let s = l1[i].hypot(l2[i]);
            let v = (-rb * rb / two_beta2).exp() * (1.0 - (-s * s / two_c2).exp());
            if v > best[i] {
                best[i] = v;
            }
        }
    }

    let max_v = best.iter().cloned().fold(0.0f64, f64::max);
    if max_v > 0.0 {
        for v in &mut best {
            *v /= max_v;
        }
    }
    Ok(GrayImage::new(w, h, best))
}

/// Bilinear sample with coordinates clamped to the image bounds.
pub fn bilinear_clamped(img: &GrayImage, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (img.width - 1) as f64);
    let y = y.clamp(0.0, (img.height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let v00 = img.get(x0, y0);
    let v10 = img.get(x1, y0);
    let v01 = img.get(x0, y1);
    let v11 = img.get(x1, y1);
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
}

/// Bilinear sample returning `fill` outside [0, w-1] x [0, h-1].
pub fn bilinear_or_fill(img: &GrayImage, x: f64, y: f64, fill: f64) -> f64 {
    if x < 0.0 || y < 0.0 || x > (img.width - 1) as f64 || y > (img.height - 1) as f64 {
        return fill;
    }
    bilinear_clamped(img, x, y)
}

/// Factor-4 resampling. Down4 = Gaussian blur (sigma 2) then decimation;
/// Up4 = bilinear upsampling to 4x dimensions.
pub fn resample(img: &GrayImage, factor: ResampleFactor) -> Result<GrayImage> {
    match factor {
        ResampleFactor::Down4 => {
            if img.width < 4 || img.height < 4 {
                return Err(Error::ImageTooSmall {
                    width: img.width,
                    height: img.height,
                    min: 4,
                });
            }
            let blurred = gaussian_blur(img, 2.0);
            let ow = img.width.div_ceil(4);
            let oh = img.height.div_ceil(4);
            let mut data = Vec::with_capacity(ow * oh);
            for y in 0..oh {
                for x in 0..ow {
                    data.push(blurred.get(x * 4, y * 4));
                }
            }
            Ok(GrayImage::new(ow, oh, data))
        }
        ResampleFactor::Up4 => {
            let ow = img.width * 4;
            let oh = img.height * 4;
            // Bilinear with linear extrapolation past the last sample row and
            // column; clamping there would flatten the final three fine
            // pixels of each row/column.
            let cell = |i: usize, n: usize| -> (usize, f64) {
                let f = i as f64 / 4.0;
                let i0 = (f.floor() as usize).min(n.saturating_sub(2));
                (i0, f - i0 as f64)
            };
            let mut data = Vec::with_capacity(ow * oh);
            for y in 0..oh {
                let (y0, fy) = cell(y, img.height);
                let y1 = (y0 + 1).min(img.height - 1);
                for x in 0..ow {
                    let (x0, fx) = cell(x, img.width);
                    let x1 = (x0 + 1).min(img.width - 1);
                    let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
                    let bot = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
                    data.push(top * (1.0 - fy) + bot * fy);
                }
            }
            Ok(GrayImage::new(ow, oh, data))
        }
    }
}

fn gray_of(img: &ImageData, mode: GrayMode) -> GrayImage {
    match img {
        ImageData::Gray(g) => g.clone(),
        ImageData::Rgb(c) => to_gray(c, mode),
    }
}

/// Full preprocessing pipeline for one image.
pub fn preprocess(img: &ImageData, branch: Branch, params: &PreprocessParams) -> Result<GrayImage> {
    let gray = standardize(&gray_of(img, params.gray_mode));
    match branch {
        Branch::None => Ok(gray),
        Branch::HistEqLoG => {
            let eq = hist_equalize(&gray, params.hist_bins);
            let log = log_filter(&eq, params.log_sigma);
            Ok(standardize(&log))
        }
        Branch::GuidedFrangi => {
            let down = resample(&gray, ResampleFactor::Down4)?;
            let guided = guided_filter(&down, &down, &params.guided)?;
            let vessel = frangi_vesselness(&guided, &params.frangi)?;
            let up = resample(&vessel, ResampleFactor::Up4)?;
            Ok(standardize(&up))
        }
    }
}
