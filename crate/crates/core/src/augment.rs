//! Training-data synthesis: intensity jitter, random affine perturbation of
//! image+points, demonstrator displacements, and a synthetic fundus-pair
//! generator for desk-scale testing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core::{
    Affine2D, Category, Displacements, GrayImage, ImageData, ImagePair, LandmarkSet, Point,
};
use crate::error::{Error, Result};
use crate::imageops::bilinear_or_fill;

/// Ranges for random affine draws and intensity jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub copies: usize,
    /// Additive shift range in standardized units, +/-.
    pub brightness_range: f64,
    /// Multiplicative factor interval.
    pub contrast_range: (f64, f64),
    /// Rotation range in degrees, +/-.
    pub rot_range: f64,
    pub scale_range: (f64, f64),
    /// Shear range, +/-.
    pub shear_range: f64,
    /// Translation range in pixels, +/-.
    pub trans_range: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            copies: 64,
            brightness_range: 0.2,
            contrast_range: (0.8, 1.25),
            rot_range: 10.0,
            scale_range: (0.9, 1.1),
            shear_range: 0.05,
            trans_range: 50.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.contrast_range.0 <= 0.0 || self.contrast_range.1 < self.contrast_range.0 {
            return Err(Error::InvalidConfig("bad contrast range".into()));
        }
        if self.scale_range.0 <= 0.0 || self.scale_range.1 < self.scale_range.0 {
            return Err(Error::InvalidConfig("bad scale range".into()));
        }
        if self.brightness_range < 0.0
            || self.rot_range < 0.0
            || self.shear_range < 0.0
            || self.trans_range < 0.0
        {
            return Err(Error::InvalidConfig("negative jitter range".into()));
        }
        Ok(())
    }
}

/// Synthetic vessel-tree pair generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub size: usize,
    pub n_vessels: usize,
    pub vessel_width_range: (f64, f64),
    pub n_landmarks: usize,
    /// Affine draw ranges for the source -> target transform.
    pub transform: AugmentConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 256,
            n_vessels: 6,
            vessel_width_range: (1.5, 3.0),
            n_landmarks: 10,
            transform: AugmentConfig {
                copies: 0,
                rot_range: 5.0,
                scale_range: (1.0, 1.0),
                shear_range: 0.0,
                trans_range: 30.0,
                ..AugmentConfig::default()
            },
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 64 {
            return Err(Error::InvalidConfig("synth size must be >= 64".into()));
        }
        if self.n_landmarks < 3 {
            return Err(Error::InvalidConfig("need at least 3 landmarks".into()));
        }
        self.transform.validate()
    }
}

/// out = clamp(contrast*in + brightness, -1, 1).
pub fn jitter_intensity(img: &GrayImage, brightness: f64, contrast: f64) -> GrayImage {
    assert!(contrast > 0.0);
    let data = img
        .data
        .iter()
        .map(|&v| (contrast * v + brightness).clamp(-1.0, 1.0))
        .collect();
    GrayImage::new(img.width, img.height, data)
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Draw translation * rotation * scale * shear about the image center.
/// Determinant is positive since scale factors are positive.
pub fn random_affine(rng: &mut impl Rng, cfg: &AugmentConfig, center: Point) -> Affine2D {
    let theta = uniform(rng, -cfg.rot_range, cfg.rot_range).to_radians();
    let s = uniform(rng, cfg.scale_range.0, cfg.scale_range.1);
    let h = uniform(rng, -cfg.shear_range, cfg.shear_range);
    let tx = uniform(rng, -cfg.trans_range, cfg.trans_range);
    let ty = uniform(rng, -cfg.trans_range, cfg.trans_range);

    let about_origin = Affine2D::translation(tx, ty)
        .compose(&Affine2D::rotation(theta))
        .compose(&Affine2D::scaling(s, s))
        .compose(&Affine2D::shear(h));
    Affine2D::translation(center.x, center.y)
        .compose(&about_origin)
        .compose(&Affine2D::translation(-center.x, -center.y))
}

/// Inverse-mapped warp: out(p) = img(T^-1 p), off-image samples take `fill`.
pub fn warp_image(img: &GrayImage, t: &Affine2D, fill: f64) -> Result<GrayImage> {
    let inv = t.invert()?;
    let mut data = Vec::with_capacity(img.width * img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = inv.apply(Point::new(x as f64, y as f64));
            data.push(bilinear_or_fill(img, p.x, p.y, fill));
        }
    }
    Ok(GrayImage::new(img.width, img.height, data))
}

/// Ground-truth displacement vectors: target landmark minus source landmark.
pub fn demonstrator(pair: &ImagePair) -> Result<Displacements> {
    if pair.source_landmarks.len() != pair.target_landmarks.len() {
        return Err(Error::CountMismatch(
            pair.source_landmarks.len(),
            pair.target_landmarks.len(),
        ));
    }
    Ok(Displacements {
        vectors: pair
            .source_landmarks
            .points
            .iter()
            .zip(pair.target_landmarks.points.iter())
            .map(|(s, t)| (t.x - s.x, t.y - s.y))
            .collect(),
    })
}

fn standardized_gray(img: &ImageData) -> GrayImage {
    match img {
        ImageData::Gray(g) => crate::imageops::standardize(g),
        ImageData::Rgb(c) => crate::imageops::standardize(&crate::imageops::to_gray(
            c,
            crate::imageops::GrayMode::GreenChannel,
        )),
    }
}

/// Expand one pair into `copies` perturbed pairs. Each copy jitters the
/// intensity of both images independently and applies one random affine to
/// the source image and its landmarks; the target side stays put.
pub fn augment_pair(pair: &ImagePair, cfg: &AugmentConfig) -> Result<Vec<ImagePair>> {
    cfg.validate()?;
    let src = standardized_gray(&pair.source);
    let tgt = standardized_gray(&pair.target);
    let center = Point::new((src.width - 1) as f64 / 2.0, (src.height - 1) as f64 / 2.0);

    let mut out = Vec::with_capacity(cfg.copies);
    for copy in 0..cfg.copies {
        // Per-copy derived seed so copies can be regenerated independently.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(copy as u64));
        let t = random_affine(&mut rng, cfg, center);
        let sb = uniform(&mut rng, -cfg.brightness_range, cfg.brightness_range);
        let sc = uniform(&mut rng, cfg.contrast_range.0, cfg.contrast_range.1);
        let tb = uniform(&mut rng, -cfg.brightness_range, cfg.brightness_range);
        let tc = uniform(&mut rng, cfg.contrast_range.0, cfg.contrast_range.1);

        let warped = if t == Affine2D::identity() {
            src.clone()
        } else {
            warp_image(&src, &t, 0.0)?
        };
        out.push(ImagePair {
            id: format!("{}#{copy}", pair.id),
            category: pair.category,
            source: ImageData::Gray(jitter_intensity(&warped, sb, sc)),
            target: ImageData::Gray(jitter_intensity(&tgt, tb, tc)),
            source_landmarks: t.apply_set(&pair.source_landmarks),
            target_landmarks: pair.target_landmarks.clone(),
        });
    }
    Ok(out)
}

/// A generated pair together with its ground-truth source -> target
/// transform and the drawn vessel centerline samples.
#[derive(Debug, Clone)]
pub struct SynthPair {
    pub pair: ImagePair,
    pub truth: Affine2D,
    pub centerline: Vec<Point>,
}

struct VesselRenderer {
    size: usize,
    darkness: Vec<f64>,
    branch_points: Vec<Point>,
    centerline: Vec<Point>,
}

impl VesselRenderer {
    fn new(size: usize) -> Self {
        Self {
            size,
            darkness: vec![0.0; size * size],
            branch_points: Vec::new(),
            centerline: Vec::new(),
        }
    }

    /// Stamp a Gaussian cross-section along the segment from `a` towards
    /// direction `dir` with length `len`.
    fn draw_segment(&mut self, a: Point, dir: (f64, f64), len: f64, width: f64, depth: f64) -> Point {
        let steps = (len / 0.5).ceil() as usize;
        let r = (3.0 * width).ceil() as isize;
        let mut p = a;
        for _ in 0..steps {
            p = Point::new(p.x + dir.0 * 0.5, p.y + dir.1 * 0.5);
            self.centerline.push(p);
            let cx = p.x.round() as isize;
            let cy = p.y.round() as isize;
            for dy in -r..=r {
                for dx in -r..=r {
                    let x = cx + dx;
                    let y = cy + dy;
                    if x < 0 || y < 0 || x >= self.size as isize || y >= self.size as isize {
                        continue;
                    }
                    let d2 = (x as f64 - p.x).powi(2) + (y as f64 - p.y).powi(2);
                    let v = depth * (-d2 / (2.0 * width * width)).exp();
                    let i = y as usize * self.size + x as usize;
                    if v > self.darkness[i] {
                        self.darkness[i] = v;
                    }
                }
            }
        }
        p
    }

    /// One vessel: a curving trunk that sheds thinner side branches, like a
    /// retinal arcade. `curve` is the per-segment heading drift.
    fn grow_tree(
        &mut self,
        rng: &mut impl Rng,
        root: Point,
        angle: f64,
        width: f64,
        depth_left: usize,
        curve: f64,
    ) {
        let len = uniform(rng, 20.0, 45.0);
        let wobble = uniform(rng, -0.12, 0.12);
        let a = angle + wobble + curve;
        let end = self.draw_segment(root, (a.cos(), a.sin()), len, width, 0.8);
        let margin = 0.08 * self.size as f64;
        let inside = end.x > margin
            && end.y > margin
            && end.x < self.size as f64 - margin
            && end.y < self.size as f64 - margin;
        if depth_left == 0 || !inside {
            return;
        }
        self.branch_points.push(end);
        // Trunk continues; a thinner side branch splits off most of the time.
        self.grow_tree(rng, end, a, (width * 0.93).max(1.0), depth_left - 1, curve);
        if rng.gen_bool(0.75) {
            let spread = uniform(rng, 0.45, 0.9) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            self.grow_tree(
                rng,
                end,
                a + spread,
                (width * 0.7).max(1.0),
                depth_left.saturating_sub(2),
                curve * 0.5,
            );
        }
    }
}

/// Render one synthetic pair: a branching vessel tree (dark on bright, mild
/// vignetting), landmarks on branch points, and a random affine + intensity
/// jitter producing the target side. The drawn transform is returned as
/// ground truth.
pub fn synth_pair(cfg: &SynthConfig, id: &str) -> Result<SynthPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.size;
    let mut renderer = VesselRenderer::new(size);

    // Retina-like layout: every vessel radiates from a common optic-disc
    // region on the right, fanning leftwards and curving like arcades.
    // Independently drawn images therefore share their gross anatomy, the
    // way fundus photographs of different eyes do.
    let s = size as f64;
    let disc = Point::new(
        s * uniform(&mut rng, 0.78, 0.86),
        s * uniform(&mut rng, 0.44, 0.56),
    );
    for v in 0..cfg.n_vessels {
        let frac = if cfg.n_vessels > 1 {
            v as f64 / (cfg.n_vessels - 1) as f64
        } else {
            0.5
        };
        // Fan over roughly 110..250 degrees (pointing left), widest vessels
        // on the outer arcades.
        let base_angle =
            std::f64::consts::PI + (frac - 0.5) * 2.4 + uniform(&mut rng, -0.08, 0.08);
        let curve = -(frac - 0.5) * 0.16 + uniform(&mut rng, -0.02, 0.02);
        let width = cfg.vessel_width_range.0
            + (cfg.vessel_width_range.1 - cfg.vessel_width_range.0)
                * (2.0 * (frac - 0.5)).abs().clamp(0.3, 1.0);
        let root = Point::new(
            disc.x + uniform(&mut rng, -4.0, 4.0),
            disc.y + uniform(&mut rng, -4.0, 4.0),
        );
        renderer.grow_tree(&mut rng, root, base_angle, width, 7, curve);
    }

    // Bright background with mild vignetting, vessels subtracted.
    let half = (size - 1) as f64 / 2.0;
    let rmax2 = 2.0 * half * half;
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let r2 = (x as f64 - half).powi(2) + (y as f64 - half).powi(2);
            let vignette = 1.0 - 0.3 * r2 / rmax2;
            let v = 0.95 * vignette - renderer.darkness[y * size + x];
            data.push(v);
        }
    }
    let source = crate::imageops::standardize(&GrayImage::new(size, size, data));

    // Landmarks on branch points, padded with extra centerline points when
    // the tree branched too little.
    let mut candidates = renderer.branch_points;
    while candidates.len() < cfg.n_landmarks {
        candidates.push(Point::new(
            uniform(&mut rng, 0.25, 0.75) * size as f64,
            uniform(&mut rng, 0.25, 0.75) * size as f64,
        ));
    }
    // Spread the picks evenly across the candidate list.
    let mut landmarks = Vec::with_capacity(cfg.n_landmarks);
    for i in 0..cfg.n_landmarks {
        landmarks.push(candidates[i * candidates.len() / cfg.n_landmarks]);
    }
    let source_landmarks = LandmarkSet::new(landmarks);

    let center = Point::new(half, half);
    let truth = random_affine(&mut rng, &cfg.transform, center);
    let target_img = warp_image(&source, &truth, 0.0)?;
    let b = uniform(&mut rng, -cfg.transform.brightness_range, cfg.transform.brightness_range);
    let c = uniform(&mut rng, cfg.transform.contrast_range.0, cfg.transform.contrast_range.1);
    let target = jitter_intensity(&target_img, b, c);
    let target_landmarks = truth.apply_set(&source_landmarks);

    Ok(SynthPair {
        pair: ImagePair {
            id: id.to_string(),
            category: Category::Synthetic,
            source: ImageData::Gray(source),
            target: ImageData::Gray(target),
            source_landmarks,
            target_landmarks,
        },
        truth,
        centerline: renderer.centerline,
    })
}
