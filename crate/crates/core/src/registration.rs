//! Transform fitting from predicted displacements, target registration
//! error, and the evaluation protocols (leave-one-out and a simple held-out
//! split), with category-stratified reporting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, random_affine, warp_image, AugmentConfig};
use crate::core::{
    Affine2D, Category, Displacements, GrayImage, ImageData, ImagePair, LandmarkSet, Point,
};
use crate::error::{Error, Result};
use crate::imageops::{preprocess, Branch, PreprocessParams};
use crate::model::{self, ModelParams, Sample, TrainConfig};
use crate::observation::{encode, ObsConfig};

/// Transform class fitted to the predicted correspondences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformModel {
    Translation,
    Similarity,
    Affine,
}

impl TransformModel {
    pub fn min_points(&self) -> usize {
        match self {
            TransformModel::Translation => 1,
            TransformModel::Similarity => 2,
            TransformModel::Affine => 3,
        }
    }
}

impl std::str::FromStr for TransformModel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "translation" => Ok(TransformModel::Translation),
            "similarity" => Ok(TransformModel::Similarity),
            "affine" => Ok(TransformModel::Affine),
            other => Err(format!("unknown transform model {other:?}")),
        }
    }
}

/// Least-squares fit of a transform in the given class mapping src onto dst.
pub fn fit_transform(
    src: &LandmarkSet,
    dst: &LandmarkSet,
    model: TransformModel,
) -> Result<Affine2D> {
    if src.len() != dst.len() {
        return Err(Error::CountMismatch(src.len(), dst.len()));
    }
    if src.len() < model.min_points() {
        return Err(Error::DegenerateConfiguration(format!(
            "{} points, need {}",
            src.len(),
            model.min_points()
        )));
    }
    match model {
        TransformModel::Translation => {
            let cs = src.centroid();
            let cd = dst.centroid();
            Ok(Affine2D::translation(cd.x - cs.x, cd.y - cs.y))
        }
        TransformModel::Similarity => fit_similarity(src, dst),
        TransformModel::Affine => fit_affine(src, dst),
    }
}

/// Procrustes fit: rotation + uniform scale + translation, no reflection.
fn fit_similarity(src: &LandmarkSet, dst: &LandmarkSet) -> Result<Affine2D> {
    let cs = src.centroid();
    let cd = dst.centroid();
    let mut sxx = 0.0; // sum x.x' + y.y'
    let mut sxy = 0.0; // sum x.y' - y.x'
    let mut norm = 0.0;
    for (p, q) in src.points.iter().zip(dst.points.iter()) {
        let (px, py) = (p.x - cs.x, p.y - cs.y);
        let (qx, qy) = (q.x - cd.x, q.y - cd.y);
        sxx += px * qx + py * qy;
        sxy += px * qy - py * qx;
        norm += px * px + py * py;
    }
    if norm < 1e-12 {
        return Err(Error::DegenerateConfiguration(
            "source points coincide".into(),
        ));
    }
    let scale = sxx.hypot(sxy) / norm;
    let theta = sxy.atan2(sxx);
    let (s, c) = theta.sin_cos();
    let (a, b) = (scale * c, scale * s);
    // Linear part [[a, -b], [b, a]] about the centroids.
    Ok(Affine2D::new([
        a,
        -b,
        cd.x - (a * cs.x - b * cs.y),
        b,
        a,
        cd.y - (b * cs.x + a * cs.y),
    ]))
}

/// Gaussian elimination with partial pivoting for a small dense system.
fn solve_linear(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::DegenerateConfiguration(
                "rank-deficient normal equations".into(),
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// Full affine fit via per-axis normal equations, with point-set
/// pre-normalization for conditioning.
fn fit_affine(src: &LandmarkSet, dst: &LandmarkSet) -> Result<Affine2D> {
    let (ns, cs, ss) = crate::observation::normalize_points(src)
        .map_err(|_| Error::DegenerateConfiguration("source points coincide".into()))?;

    // Normal equations on normalized source coordinates.
    let mut m = [[0.0f64; 3]; 3];
    let mut rx = [0.0f64; 3];
    let mut ry = [0.0f64; 3];
    for ((x, y), q) in ns.iter().zip(dst.points.iter()) {
        let row = [*x, *y, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += row[i] * row[j];
            }
            rx[i] += row[i] * q.x;
            ry[i] += row[i] * q.y;
        }
    }
    let solve = |r: [f64; 3]| -> Result<Vec<f64>> {
        let mut a: Vec<Vec<f64>> = m.iter().map(|row| row.to_vec()).collect();
        let mut b = r.to_vec();
        solve_linear(&mut a, &mut b)
    };
    let px = solve(rx)?;
    let py = solve(ry)?;

    // Undo the normalization: x_norm = (x - cx)/s.
    let denorm = |p: &[f64]| {
        let a = p[0] / ss;
        let b = p[1] / ss;
        let t = p[2] - a * cs.x - b * cs.y;
        (a, b, t)
    };
    let (a11, a12, tx) = denorm(&px);
    let (a21, a22, ty) = denorm(&py);
    Ok(Affine2D::new([a11, a12, tx, a21, a22, ty]))
}

/// Mean and per-point Euclidean distances between transformed source
/// landmarks and their targets.
pub fn tre(t: &Affine2D, src: &LandmarkSet, tgt: &LandmarkSet) -> Result<(f64, Vec<f64>)> {
    if src.len() != tgt.len() {
        return Err(Error::CountMismatch(src.len(), tgt.len()));
    }
    let per_point: Vec<f64> = src
        .points
        .iter()
        .zip(tgt.points.iter())
        .map(|(p, q)| t.apply(*p).dist(q))
        .collect();
    let mean = per_point.iter().sum::<f64>() / per_point.len().max(1) as f64;
    Ok((mean, per_point))
}

/// Outcome of registering one pair with a trained model.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub transform: Affine2D,
    pub predicted_points: LandmarkSet,
    pub tre_initial: f64,
    /// TRE through the fitted transform.
    pub tre_final: f64,
    /// TRE of the raw predicted points, without the transform fit.
    pub tre_raw: f64,
}

/// Run the full inference path on one pair: preprocess both images, encode,
/// predict, rescale displacements, fit the transform, and score against the
/// ground-truth target landmarks.
pub fn register_pair(
    params: &ModelParams,
    pair: &ImagePair,
    obs_cfg: &ObsConfig,
    branch: Branch,
    pre: &PreprocessParams,
    displacement_scale: f64,
    model: TransformModel,
) -> Result<RegistrationResult> {
    register_pair_iterative(
        params,
        pair,
        obs_cfg,
        branch,
        pre,
        displacement_scale,
        model,
        1,
    )
}

/// Trimmed least squares: fit, rank the points by residual, and refit on
/// the best `keep_fraction` of them. With enough points this suppresses the
/// occasional grossly mismatched landmark; with few points it degrades to
/// the plain fit.
pub fn fit_transform_trimmed(
    src: &LandmarkSet,
    dst: &LandmarkSet,
    model: TransformModel,
    keep_fraction: f64,
) -> Result<Affine2D> {
    let full = fit_transform(src, dst, model)?;
    let n = src.len();
    let keep = ((n as f64 * keep_fraction).ceil() as usize).max(model.min_points().max(3));
    if keep >= n {
        return Ok(full);
    }
    let mut ranked: Vec<(f64, usize)> = src
        .points
        .iter()
        .zip(dst.points.iter())
        .enumerate()
        .map(|(i, (s, d))| {
            let m = full.apply(*s);
            ((m.x - d.x).powi(2) + (m.y - d.y).powi(2), i)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let src_in = LandmarkSet::new(ranked[..keep].iter().map(|&(_, i)| src.points[i]).collect());
    let dst_in = LandmarkSet::new(ranked[..keep].iter().map(|&(_, i)| dst.points[i]).collect());
    // A degenerate inlier subset (e.g. collinear) falls back to the full fit.
    Ok(fit_transform(&src_in, &dst_in, model).unwrap_or(full))
}

/// One trained model with its observation geometry, ready for inference.
#[derive(Debug, Clone, Copy)]
pub struct Stage<'a> {
    pub params: &'a ModelParams,
    pub obs: &'a ObsConfig,
    pub displacement_scale: f64,
    /// Warp-and-refine passes run with this stage's model.
    pub iterations: usize,
}

/// Core inference: predict a transform from source to target. Each stage
/// re-applies its model `iterations` times; after each pass the source
/// image is warped by the transform composed so far and the landmarks move
/// with it, so later passes see a smaller residual displacement — the same
/// distribution the augmented training covers. Later stages typically use
/// a finer observation spacing to refine the residual left by the first.
/// Returns the composed transform and the raw predicted target points of
/// the final pass.
pub fn predict_transform_staged(
    stages: &[Stage],
    source: &ImageData,
    target: &ImageData,
    source_landmarks: &LandmarkSet,
    branch: Branch,
    pre: &PreprocessParams,
    model: TransformModel,
) -> Result<(Affine2D, LandmarkSet)> {
    if stages.is_empty() {
        return Err(Error::InvalidConfig("no inference stages".into()));
    }
    for st in stages {
        if source_landmarks.len() != st.params.k {
            return Err(Error::ConfigMismatch(format!(
                "{} landmarks given, model expects {}",
                source_landmarks.len(),
                st.params.k
            )));
        }
    }
    let src_gray = gray_of(source);
    let tgt_img = preprocess(target, branch, pre)?;

    let mut total = Affine2D::identity();
    let mut current = source.clone();
    let mut landmarks = source_landmarks.clone();
    let mut predicted_points = landmarks.clone();
    let mut id_pre: Option<GrayImage> = None;
    for (si, stage) in stages.iter().enumerate() {
        let params = stage.params;
        let obs_cfg = stage.obs;
        let displacement_scale = stage.displacement_scale;
        let iterations = stage.iterations.max(1);
        for iter in 0..iterations {
            if si + iter > 0 {
                current = ImageData::Gray(warp_image(&src_gray, &total, 0.0)?);
                landmarks = total.apply_set(source_landmarks);
            }
            let src_img = preprocess(&current, branch, pre)?;
            if si == 0 && iter == 0 {
                id_pre = Some(src_img.clone());
            }
            let obs = encode(&landmarks, &src_img, &tgt_img, obs_cfg)?;
            let flat = obs.to_vec();
            if flat.len() != params.obs_len {
                return Err(Error::ConfigMismatch(format!(
                    "observation length {} does not match checkpoint {}",
                    flat.len(),
                    params.obs_len
                )));
            }
            let pred = model::forward(params, &flat)?;
        // Test-time ensembling: run every dihedral/permutation observation
        // variant through the net, map the predictions back to the original
        // frame, and take the per-landmark median. A wrong correspondence
        // mode rarely survives all eight symmetries, so the median keeps the
        // consistent one.
        let k = params.k;
        let mut per_slot: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); k];
        for (i, &(dx, dy)) in pred.displacements.iter().enumerate() {
            per_slot[i].0.push(dx);
            per_slot[i].1.push(dy);
        }
        let base = Sample {
            obs: flat.clone(),
            demo: Displacements {
                vectors: vec![(0.0, 0.0); k],
            },
        };
        let mut trng = ChaCha8Rng::seed_from_u64(0x7e57_71a5 ^ iter as u64);
        for bits in 1..8u8 {
            let d = Dihedral::from_bits(bits);
            let mut perm: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                perm.swap(i, trng.gen_range(0..=i));
            }
            let variant = sample_variant(&base, k, obs_cfg.c, &perm, d);
            let vp = model::forward(params, &variant.obs)?;
            for (i, &dv) in vp.displacements.iter().enumerate() {
                let back = d.apply_vec_inv(dv);
                per_slot[perm[i]].0.push(back.0);
                per_slot[perm[i]].1.push(back.1);
            }
        }
        let ens: Vec<(f64, f64)> = per_slot
            .iter_mut()
            .map(|(xs, ys)| (median(xs), median(ys)))
            .collect();
        predicted_points = LandmarkSet::new(
            landmarks
                .points
                .iter()
                .zip(ens.iter())
                .map(|(p, &(dx, dy))| {
                    Point::new(
                        p.x + dx * displacement_scale,
                        p.y + dy * displacement_scale,
                    )
                })
                .collect(),
        );
            // Coarse to fine: early passes of a stage fit a translation only
            // (most robust), its final pass fits the requested model.
            let pass_model = if iter + 1 < iterations {
                TransformModel::Translation
            } else {
                model
            };
            let step = fit_transform_trimmed(&landmarks, &predicted_points, pass_model, 0.7)?;
            if std::env::var_os("RETREG_TRACE").is_some() {
                let mean_d: (f64, f64) = pred.displacements.iter().fold((0.0, 0.0), |a, d| {
                    (a.0 + d.0 / params.k as f64, a.1 + d.1 / params.k as f64)
                });
                eprintln!(
                    "trace: stage {si} iter {iter} trans head ({:.1}, {:.1}) px, disp head mean ({:.1}, {:.1}) px, step t ({:.1}, {:.1})",
                    pred.translation.0 * displacement_scale,
                    pred.translation.1 * displacement_scale,
                    mean_d.0 * displacement_scale,
                    mean_d.1 * displacement_scale,
                    step.m[2],
                    step.m[5],
                );
            }
            total = step.compose(&total);
        }
        // In a cascade, let a plain correlation search over global
        // translations compete with the first stage's estimate: on the rare
        // pair where the network locks onto a wrong correspondence mode, the
        // image-similarity score exposes it and the search supplies a sane
        // starting point for the remaining stages. Single-stage runs stay
        // purely network-driven.
        if si == 0 && stages.len() > 1 {
            if let Some(idp) = &id_pre {
                let max_shift = stage.obs.extent() * 0.75;
                let t_corr = correlation_translation(idp, &tgt_img, max_shift)?;
                let score = |t: &Affine2D| -> Result<f64> {
                    let warped = warp_image(&src_gray, t, 0.0)?;
                    let p = preprocess(&ImageData::Gray(warped), branch, pre)?;
                    Ok(ncc(&p, &tgt_img))
                };
                let s_net = score(&total)?;
                let s_corr = score(&t_corr)?;
                if std::env::var_os("RETREG_TRACE").is_some() {
                    eprintln!(
                        "trace: hypothesis net ncc {s_net:.4} (t {:.1},{:.1}) vs corr ncc {s_corr:.4} (t {:.1},{:.1})",
                        total.m[2], total.m[5], t_corr.m[2], t_corr.m[5],
                    );
                }
                if s_corr > s_net {
                    total = t_corr;
                    predicted_points = total.apply_set(source_landmarks);
                }
            }
        }
    }
    Ok((total, predicted_points))
}

/// Zero-normalized cross-correlation of two equal-size images.
fn ncc(a: &GrayImage, b: &GrayImage) -> f64 {
    let n = a.data.len().min(b.data.len()) as f64;
    if n < 2.0 {
        return 0.0;
    }
    let ma = a.data.iter().sum::<f64>() / n;
    let mb = b.data.iter().sum::<f64>() / n;
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data.iter().zip(b.data.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        num += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 0.0 || vb <= 0.0 {
        0.0
    } else {
        num / (va * vb).sqrt()
    }
}

/// Exhaustive integer-shift NCC search at quarter resolution, returning the
/// best global translation (in full-resolution pixels) from source to
/// target.
fn correlation_translation(
    src_pre: &GrayImage,
    tgt_pre: &GrayImage,
    max_shift: f64,
) -> Result<Affine2D> {
    let a = crate::imageops::resample(src_pre, crate::imageops::ResampleFactor::Down4)?;
    let b = crate::imageops::resample(tgt_pre, crate::imageops::ResampleFactor::Down4)?;
    let r = (max_shift / 4.0).ceil() as isize;
    let (w, h) = (a.width as isize, a.height as isize);
    let mut best = (f64::NEG_INFINITY, 0isize, 0isize);
    for dy in -r..=r {
        for dx in -r..=r {
            // Overlap statistics of a(x, y) against b(x + dx, y + dy).
            let x0 = 0.max(-dx);
            let x1 = w.min(w - dx);
            let y0 = 0.max(-dy);
            let y1 = h.min(h - dy);
            if x1 - x0 < 8 || y1 - y0 < 8 {
                continue;
            }
            let (mut sa, mut sb, mut saa, mut sbb, mut sab, mut n) =
                (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y1 {
                for x in x0..x1 {
                    let va = a.get(x as usize, y as usize);
                    let vb = b.get((x + dx) as usize, (y + dy) as usize);
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                    n += 1.0;
                }
            }
            let cov = sab - sa * sb / n;
            let var_a = saa - sa * sa / n;
            let var_b = sbb - sb * sb / n;
            if var_a <= 0.0 || var_b <= 0.0 {
                continue;
            }
            let score = cov / (var_a * var_b).sqrt();
            if score > best.0 {
                best = (score, dx, dy);
            }
        }
    }
    Ok(Affine2D::translation(
        (best.1 * 4) as f64,
        (best.2 * 4) as f64,
    ))
}

/// Single-stage [`predict_transform_staged`].
#[allow(clippy::too_many_arguments)]
pub fn predict_transform(
    params: &ModelParams,
    source: &ImageData,
    target: &ImageData,
    source_landmarks: &LandmarkSet,
    obs_cfg: &ObsConfig,
    branch: Branch,
    pre: &PreprocessParams,
    displacement_scale: f64,
    model: TransformModel,
    iterations: usize,
) -> Result<(Affine2D, LandmarkSet)> {
    predict_transform_staged(
        &[Stage {
            params,
            obs: obs_cfg,
            displacement_scale,
            iterations,
        }],
        source,
        target,
        source_landmarks,
        branch,
        pre,
        model,
    )
}

/// Register one pair through a stage cascade and score it.
pub fn register_pair_staged(
    stages: &[Stage],
    pair: &ImagePair,
    branch: Branch,
    pre: &PreprocessParams,
    model: TransformModel,
) -> Result<RegistrationResult> {
    pair.validate()?;
    let (transform, predicted_points) = predict_transform_staged(
        stages,
        &pair.source,
        &pair.target,
        &pair.source_landmarks,
        branch,
        pre,
        model,
    )?;
    let (tre_initial, _) = tre(
        &Affine2D::identity(),
        &pair.source_landmarks,
        &pair.target_landmarks,
    )?;
    let (tre_final, _) = tre(&transform, &pair.source_landmarks, &pair.target_landmarks)?;
    let (tre_raw, _) = tre(
        &Affine2D::identity(),
        &predicted_points,
        &pair.target_landmarks,
    )?;
    Ok(RegistrationResult {
        transform,
        predicted_points,
        tre_initial,
        tre_final,
        tre_raw,
    })
}

/// [`register_pair`] with a configurable number of warp-and-refine passes.
#[allow(clippy::too_many_arguments)]
pub fn register_pair_iterative(
    params: &ModelParams,
    pair: &ImagePair,
    obs_cfg: &ObsConfig,
    branch: Branch,
    pre: &PreprocessParams,
    displacement_scale: f64,
    model: TransformModel,
    iterations: usize,
) -> Result<RegistrationResult> {
    register_pair_staged(
        &[Stage {
            params,
            obs: obs_cfg,
            displacement_scale,
            iterations,
        }],
        pair,
        branch,
        pre,
        model,
    )
}

/// One evaluated pair in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub category: Category,
    pub c: usize,
    pub s: f64,
    pub branch: String,
    pub tre_initial: f64,
    pub tre_final: f64,
    pub tre_raw: f64,
    pub recovery_pct: f64,
}

/// Mean/std aggregates for one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category: Category,
    pub n: usize,
    pub tre_initial_mean: f64,
    pub tre_initial_std: f64,
    pub tre_final_mean: f64,
    pub tre_final_std: f64,
    pub recovery_mean: f64,
    pub recovery_std: f64,
}

/// Full evaluation report with the effective configuration embedded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_pair: Vec<EvalRow>,
    pub per_category: Vec<CategoryStats>,
    pub config: EvalConfig,
}

/// Configuration snapshot stored inside every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub obs: ObsConfig,
    pub branch: String,
    pub transform_model: TransformModel,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub protocol: String,
    pub seed: u64,
}

fn recovery_pct(tre_initial: f64, tre_final: f64) -> f64 {
    if tre_initial > 0.0 {
        100.0 * (1.0 - tre_final / tre_initial)
    } else {
        0.0
    }
}

/// Sample-standard-deviation (n-1) aggregates per category, in category
/// order.
fn category_stats(rows: &[EvalRow]) -> Vec<CategoryStats> {
    let mut cats: Vec<Category> = rows.iter().map(|r| r.category).collect();
    cats.sort();
    cats.dedup();
    cats.iter()
        .map(|&cat| {
            let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.category == cat).collect();
            let stat = |f: &dyn Fn(&EvalRow) -> f64| -> (f64, f64) {
                let n = sel.len() as f64;
                let mean = sel.iter().map(|r| f(r)).sum::<f64>() / n;
                let var = if sel.len() > 1 {
                    sel.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                (mean, var.sqrt())
            };
            let (tim, tis) = stat(&|r| r.tre_initial);
            let (tfm, tfs) = stat(&|r| r.tre_final);
            let (rm, rs) = stat(&|r| r.recovery_pct);
            CategoryStats {
                category: cat,
                n: sel.len(),
                tre_initial_mean: tim,
                tre_initial_std: tis,
                tre_final_mean: tfm,
                tre_final_std: tfs,
                recovery_mean: rm,
                recovery_std: rs,
            }
        })
        .collect()
}

/// Options shared by the evaluation protocols.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub obs: ObsConfig,
    pub branch: Branch,
    pub pre: PreprocessParams,
    pub transform_model: TransformModel,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub hidden: Vec<usize>,
    /// Observation-level variants per encoded sample (landmark permutation
    /// plus a dihedral flip of every patch); 1 means no extra variants.
    pub obs_variants: usize,
    /// Apply one extra random affine to BOTH sides of each augmented copy.
    /// The shared transform cancels out of the displacement targets (up to
    /// its linear part) but varies the patch content, which discourages the
    /// model from memorizing individual training pairs.
    pub augment_both: bool,
    /// Model applications per registration (warp-and-refine); 1 = single shot.
    pub iterations: usize,
    /// Train a second model at a quarter of the observation spacing on
    /// landmark-aligned pairs and run it after the first: the coarse stage
    /// removes the bulk displacement, the fine stage sharpens the fit.
    pub refine: bool,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            obs: ObsConfig::default(),
            branch: Branch::GuidedFrangi,
            pre: PreprocessParams::default(),
            transform_model: TransformModel::Affine,
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            hidden: vec![256, 128],
            obs_variants: 1,
            augment_both: true,
            iterations: 1,
            refine: false,
            seed: 0,
        }
    }
}

/// One dihedral element acting on a square patch grid: an optional x flip,
/// y flip, and transpose. All eight combinations are exact symmetries of
/// the sampling grid, so applying one to every patch (and its matrix to
/// every displacement and normalized point) yields another valid sample.
#[derive(Debug, Clone, Copy)]
struct Dihedral {
    flip_x: bool,
    flip_y: bool,
    transpose: bool,
}

impl Dihedral {
    fn from_bits(bits: u8) -> Self {
        Self {
            flip_x: bits & 1 != 0,
            flip_y: bits & 2 != 0,
            transpose: bits & 4 != 0,
        }
    }

    /// Index into the original patch that lands at (row, col) after the
    /// transform.
    fn source_index(&self, row: usize, col: usize, c: usize) -> (usize, usize) {
        let (mut r, mut cc) = (row, col);
        if self.flip_x {
            cc = c - 1 - cc;
        }
        if self.flip_y {
            r = c - 1 - r;
        }
        if self.transpose {
            std::mem::swap(&mut r, &mut cc);
        }
        (r, cc)
    }

    /// The matrix mapping original vectors into the transformed frame
    /// (inverse of the lookup map; orthogonal, so the transpose).
    fn apply_vec(&self, v: (f64, f64)) -> (f64, f64) {
        // Lookup map h: if flip_x x := -x; if flip_y y := -y; if transpose
        // swap. Its matrix H is orthogonal; vectors transform by H^T.
        let sx = if self.flip_x { -1.0 } else { 1.0 };
        let sy = if self.flip_y { -1.0 } else { 1.0 };
        if self.transpose {
            // H = [[0, sy], [sx, 0]]; H^T = [[0, sx], [sy, 0]].
            (sx * v.1, sy * v.0)
        } else {
            (sx * v.0, sy * v.1)
        }
    }

    /// Inverse of [`Self::apply_vec`]: maps vectors from the transformed
    /// frame back to the original one.
    fn apply_vec_inv(&self, v: (f64, f64)) -> (f64, f64) {
        let sx = if self.flip_x { -1.0 } else { 1.0 };
        let sy = if self.flip_y { -1.0 } else { 1.0 };
        if self.transpose {
            (sy * v.1, sx * v.0)
        } else {
            (sx * v.0, sy * v.1)
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Rearrange one encoded sample: permute the landmark slots and apply a
/// dihedral element to every patch, displacement, and normalized point.
/// Costs no image work and teaches the model that landmark slots are
/// interchangeable.
fn sample_variant(sample: &Sample, k: usize, c: usize, perm: &[usize], d: Dihedral) -> Sample {
    let block = 2 * c * c;
    debug_assert_eq!(sample.obs.len(), k * block + 2 * k);
    let patches = &sample.obs[..k * block];
    let points = &sample.obs[k * block..];

    let mut obs = Vec::with_capacity(sample.obs.len());
    for &src_slot in perm {
        let src = &patches[src_slot * block..(src_slot + 1) * block];
        for half in 0..2 {
            let p = &src[half * c * c..(half + 1) * c * c];
            for row in 0..c {
                for col in 0..c {
                    let (r, cc) = d.source_index(row, col, c);
                    obs.push(p[r * c + cc]);
                }
            }
        }
    }
    for &src_slot in perm {
        let v = d.apply_vec((points[2 * src_slot], points[2 * src_slot + 1]));
        obs.push(v.0);
        obs.push(v.1);
    }
    let vectors = perm
        .iter()
        .map(|&src_slot| d.apply_vec(sample.demo.vectors[src_slot]))
        .collect();
    Sample {
        obs,
        demo: Displacements { vectors },
    }
}

/// Displacement scale keeping network outputs O(1): image width / 4.
pub fn displacement_scale_for(pairs: &[ImagePair]) -> f64 {
    pairs
        .first()
        .map(|p| p.source.width() as f64 / 4.0)
        .unwrap_or(1.0)
}

fn gray_of(img: &ImageData) -> GrayImage {
    match img {
        ImageData::Gray(g) => g.clone(),
        ImageData::Rgb(c) => crate::imageops::to_gray(c, crate::imageops::GrayMode::GreenChannel),
    }
}

/// Preprocess, augment, and encode a set of training pairs into model
/// samples. The target image of a pair is preprocessed once and shared by
/// the copies that keep the target side untouched.
pub fn build_samples(
    pairs: &[ImagePair],
    opts: &EvalOptions,
    displacement_scale: f64,
) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (pi, pair) in pairs.iter().enumerate() {
        let tgt_img = preprocess(&pair.target, opts.branch, &opts.pre)?;
        let mut variants = Vec::with_capacity(opts.augment.copies + 1);
        variants.push(pair.clone());
        let aug = AugmentConfig {
            seed: opts
                .augment
                .seed
                .wrapping_add(0x9e37_79b9)
                .wrapping_mul(pi as u64 + 1),
            ..opts.augment.clone()
        };
        variants.extend(augment_pair(pair, &aug)?);
        let mut vrng = ChaCha8Rng::seed_from_u64(aug.seed ^ 0x5bd1_e995);
        for (vi, v) in variants.iter().enumerate() {
            // One extra affine applied to BOTH sides: it cancels out of the
            // displacement targets (translation exactly, rotation/scale up
            // to the linear part) while showing the same demonstration
            // under a different view of the images.
            let (src_landmarks, src_view, tgt_view_owned) = if opts.augment_both && vi > 0 {
                let w = v.source.width() as f64;
                let h = v.source.height() as f64;
                let center = Point::new((w - 1.0) / 2.0, (h - 1.0) / 2.0);
                let u = random_affine(&mut vrng, &opts.augment, center);
                let ws = warp_image(&gray_of(&v.source), &u, 0.0)?;
                let wt = warp_image(&gray_of(&v.target), &u, 0.0)?;
                (
                    u.apply_set(&v.source_landmarks),
                    ImageData::Gray(ws),
                    Some((
                        u.apply_set(&v.target_landmarks),
                        preprocess(&ImageData::Gray(wt), opts.branch, &opts.pre)?,
                    )),
                )
            } else {
                (v.source_landmarks.clone(), v.source.clone(), None)
            };
            let src_img = preprocess(&src_view, opts.branch, &opts.pre)?;
            let (tgt_landmarks, tgt_ref) = match &tgt_view_owned {
                Some((lms, img)) => (lms, img),
                None => (&v.target_landmarks, &tgt_img),
            };
            let obs = encode(&src_landmarks, &src_img, tgt_ref, &opts.obs)?;
            let demo = Displacements {
                vectors: src_landmarks
                    .points
                    .iter()
                    .zip(tgt_landmarks.points.iter())
                    .map(|(s, t)| (t.x - s.x, t.y - s.y))
                    .collect(),
            };
            let sample = Sample {
                obs: obs.to_vec(),
                demo: Displacements {
                    vectors: demo
                        .vectors
                        .iter()
                        .map(|&(dx, dy)| (dx / displacement_scale, dy / displacement_scale))
                        .collect(),
                },
            };
            let k = src_landmarks.len();
            for _ in 1..opts.obs_variants.max(1) {
                let mut perm: Vec<usize> = (0..k).collect();
                for i in (1..k).rev() {
                    let j = vrng.gen_range(0..=i);
                    perm.swap(i, j);
                }
                let d = Dihedral::from_bits(vrng.gen_range(0..8u8));
                samples.push(sample_variant(&sample, k, opts.obs.c, perm.as_slice(), d));
            }
            samples.push(sample);
        }
    }
    Ok(samples)
}

fn eval_row(
    pair: &ImagePair,
    result: &RegistrationResult,
    opts: &EvalOptions,
) -> EvalRow {
    EvalRow {
        id: pair.id.clone(),
        category: pair.category,
        c: opts.obs.c,
        s: opts.obs.s,
        branch: opts.branch.to_string(),
        tre_initial: result.tre_initial,
        tre_final: result.tre_final,
        tre_raw: result.tre_raw,
        recovery_pct: recovery_pct(result.tre_initial, result.tre_final),
    }
}

fn eval_config(opts: &EvalOptions, protocol: &str) -> EvalConfig {
    EvalConfig {
        obs: opts.obs,
        branch: opts.branch.to_string(),
        transform_model: opts.transform_model,
        train: opts.train.clone(),
        augment: opts.augment.clone(),
        protocol: protocol.to_string(),
        seed: opts.seed,
    }
}

/// Train on `train_pairs` and register every pair in `test_pairs`.
///
/// The 0.9/0.1 train/validation split is over whole pairs, before
/// augmentation, so copies of one pair never straddle the split and the
/// validation loss measures transfer to unseen pairs.
fn train_and_register(
    train_pairs: &[ImagePair],
    test_pairs: &[&ImagePair],
    opts: &EvalOptions,
    fold_seed: u64,
) -> Result<Vec<EvalRow>> {
    let k = train_pairs[0].source_landmarks.len();
    let scale = displacement_scale_for(train_pairs);
    let cfg = TrainConfig {
        seed: fold_seed,
        ..opts.train.clone()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed);
    let mut idx: Vec<usize> = (0..train_pairs.len()).collect();
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n_val = ((train_pairs.len() as f64 * cfg.val_fraction).round() as usize)
        .clamp(
            usize::from(train_pairs.len() > 1),
            train_pairs.len().saturating_sub(1),
        );
    let (val_idx, fit_idx) = idx.split_at(n_val);
    let fit_pairs: Vec<ImagePair> = fit_idx.iter().map(|&i| train_pairs[i].clone()).collect();
    let val_pairs: Vec<ImagePair> = val_idx.iter().map(|&i| train_pairs[i].clone()).collect();

    let train_samples = build_samples(&fit_pairs, opts, scale)?;
    // Validation pairs get a few augmented copies of their own so the
    // early-stopping signal is stable even with a handful of pairs; they
    // still never mix with the training side.
    let val_opts = EvalOptions {
        augment: AugmentConfig {
            copies: opts.augment.copies.min(8),
            seed: opts.augment.seed ^ 0x00c0_ffee,
            ..opts.augment.clone()
        },
        obs_variants: 1,
        ..opts.clone()
    };
    let val_samples = build_samples(&val_pairs, &val_opts, scale)?;
    let (params, history) =
        model::train_with_val(&train_samples, &val_samples, k, &opts.hidden, &cfg)?;
    if std::env::var_os("RETREG_TRACE").is_some() {
        let best = history
            .iter()
            .map(|&(_, v)| v)
            .fold(f64::INFINITY, f64::min);
        eprintln!(
            "trace: {} train samples, {} val samples, {} epochs, best val {:.5}, last train {:.5}",
            train_samples.len(),
            val_samples.len(),
            history.len(),
            best,
            history.last().map(|&(t, _)| t).unwrap_or(f64::NAN),
        );
    }
    let fine = if opts.refine {
        let fopts = fine_options(opts);
        let fscale = scale / 4.0;
        let fit_aligned = aligned_pairs(&fit_pairs)?;
        let val_aligned = aligned_pairs(&val_pairs)?;
        let ftrain = build_samples(&fit_aligned, &fopts, fscale)?;
        let fval_opts = EvalOptions {
            augment: AugmentConfig {
                copies: fopts.augment.copies.min(8),
                seed: fopts.augment.seed ^ 0x00c0_ffee,
                ..fopts.augment.clone()
            },
            obs_variants: 1,
            ..fopts.clone()
        };
        let fval = build_samples(&val_aligned, &fval_opts, fscale)?;
        let (fparams, fhistory) =
            model::train_with_val(&ftrain, &fval, k, &opts.hidden, &cfg)?;
        if std::env::var_os("RETREG_TRACE").is_some() {
            let best = fhistory
                .iter()
                .map(|&(_, v)| v)
                .fold(f64::INFINITY, f64::min);
            eprintln!(
                "trace: fine stage {} epochs, best val {:.5}",
                fhistory.len(),
                best
            );
        }
        Some((fparams, fopts.obs, fscale))
    } else {
        None
    };
    test_pairs
        .iter()
        .map(|pair| {
            let mut stages = vec![Stage {
                params: &params,
                obs: &opts.obs,
                displacement_scale: scale,
                iterations: opts.iterations,
            }];
            if let Some((fparams, fobs, fscale)) = &fine {
                stages.push(Stage {
                    params: fparams,
                    obs: fobs,
                    displacement_scale: *fscale,
                    iterations: 2,
                });
            }
            let result = register_pair_staged(
                &stages,
                pair,
                opts.branch,
                &opts.pre,
                opts.transform_model,
            )?;
            Ok(eval_row(pair, &result, opts))
        })
        .collect()
}

/// Warp each pair's source onto its target by the least-squares affine
/// through the landmark correspondences. The residual displacement is then
/// near zero, so small augmented perturbations of these pairs match the
/// distribution a refinement stage sees at inference time.
fn aligned_pairs(pairs: &[ImagePair]) -> Result<Vec<ImagePair>> {
    pairs
        .iter()
        .map(|p| {
            let t = fit_transform(
                &p.source_landmarks,
                &p.target_landmarks,
                TransformModel::Affine,
            )?;
            let ws = warp_image(&gray_of(&p.source), &t, 0.0)?;
            Ok(ImagePair {
                id: p.id.clone(),
                category: p.category,
                source: ImageData::Gray(ws),
                target: p.target.clone(),
                source_landmarks: t.apply_set(&p.source_landmarks),
                target_landmarks: p.target_landmarks.clone(),
            })
        })
        .collect()
}

/// Configuration of the refinement stage: a quarter of the observation
/// spacing, with augmentation ranges shrunk to the residual scale the
/// stage is meant to handle (half its own observation extent).
fn fine_options(opts: &EvalOptions) -> EvalOptions {
    let s_fine = (opts.obs.s / 4.0).max(1.0);
    let extent = (opts.obs.c as f64 - 1.0) * s_fine;
    EvalOptions {
        obs: ObsConfig {
            s: s_fine,
            ..opts.obs
        },
        augment: AugmentConfig {
            // The residual regression task is easier than the coarse one, so
            // half the copies keep the budget balanced between the stages.
            copies: (opts.augment.copies / 2).max(8),
            trans_range: extent / 2.0,
            rot_range: opts.augment.rot_range.min(2.0),
            scale_range: (0.98, 1.02),
            shear_range: 0.02,
            seed: opts.augment.seed ^ 0xf1de_f1de,
            ..opts.augment.clone()
        },
        ..opts.clone()
    }
}

/// Leave-one-out protocol: one fold per pair, the held-out pair excluded
/// from training and validation, the rest split 0.9/0.1 inside `train`.
pub fn leave_one_out(dataset: &[ImagePair], opts: &EvalOptions) -> Result<EvalReport> {
    if dataset.len() < 2 {
        return Err(Error::DatasetTooSmall(dataset.len(), 2));
    }
    let mut rows = Vec::with_capacity(dataset.len());
    for (fold, test_pair) in dataset.iter().enumerate() {
        let train_pairs: Vec<ImagePair> = dataset
            .iter()
            .filter(|p| p.id != test_pair.id)
            .cloned()
            .collect();
        // Disjointness: the test pair must not leak into this fold.
        if train_pairs.iter().any(|p| p.id == test_pair.id)
            || train_pairs.len() != dataset.len() - 1
        {
            return Err(Error::DegenerateConfiguration(format!(
                "fold {fold}: test pair {} leaked into the training set",
                test_pair.id
            )));
        }
        // Fold-derived seed re-initializes the model independently per fold.
        let fold_seed = opts.seed.wrapping_add(fold as u64 + 1);
        let mut fold_rows = train_and_register(&train_pairs, &[test_pair], opts, fold_seed)?;
        rows.append(&mut fold_rows);
    }
    let per_category = category_stats(&rows);
    Ok(EvalReport {
        per_pair: rows,
        per_category,
        config: eval_config(opts, "leave-one-out"),
    })
}

/// Held-out split protocol: train once on a fraction of the dataset and
/// register the remainder. Desk-scale stand-in for full leave-one-out.
pub fn holdout_evaluate(
    dataset: &[ImagePair],
    opts: &EvalOptions,
    train_fraction: f64,
) -> Result<EvalReport> {
    if dataset.len() < 2 {
        return Err(Error::DatasetTooSmall(dataset.len(), 2));
    }
    let n_train = ((dataset.len() as f64 * train_fraction).round() as usize)
        .clamp(1, dataset.len() - 1);
    let train_pairs: Vec<ImagePair> = dataset[..n_train].to_vec();
    let test_pairs: Vec<&ImagePair> = dataset[n_train..].iter().collect();
    let rows = train_and_register(&train_pairs, &test_pairs, opts, opts.seed)?;
    let per_category = category_stats(&rows);
    Ok(EvalReport {
        per_pair: rows,
        per_category,
        config: eval_config(opts, "holdout"),
    })
}

/// One leave-one-out report per (C, S) grid entry.
pub fn sweep_hyperparams(
    dataset: &[ImagePair],
    c_values: &[usize],
    s_values: &[f64],
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    if c_values.is_empty() || s_values.is_empty() {
        return Err(Error::InvalidConfig("empty hyperparameter grid".into()));
    }
    let mut reports = Vec::with_capacity(c_values.len() * s_values.len());
    for &c in c_values {
        for &s in s_values {
            let sub = EvalOptions {
                obs: ObsConfig {
                    c,
                    s,
                    fill: opts.obs.fill,
                },
                ..opts.clone()
            };
            reports.push(leave_one_out(dataset, &sub)?);
        }
    }
    Ok(reports)
}

impl EvalReport {
    /// Tabular text serialization, one row per pair, fixed column order.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str("id\tcategory\tC\tS\tbranch\ttre_initial\ttre_final\ttre_raw\trecovery_pct\n");
        for r in &self.per_pair {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.category,
                r.c,
                r.s,
                r.branch,
                r.tre_initial,
                r.tre_final,
                r.tre_raw,
                r.recovery_pct
            ));
        }
        out.push('\n');
        out.push_str("# category\tn\ttre_initial_mean\ttre_initial_std\ttre_final_mean\ttre_final_std\trecovery_mean\trecovery_std\n");
        for s in &self.per_category {
            out.push_str(&format!(
                "# {}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                s.category,
                s.n,
                s.tre_initial_mean,
                s.tre_initial_std,
                s.tre_final_mean,
                s.tre_final_std,
                s.recovery_mean,
                s.recovery_std
            ));
        }
        out
    }

    /// Structured serialization with the config snapshot embedded.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn mean_recovery(&self) -> f64 {
        let n = self.per_pair.len().max(1) as f64;
        self.per_pair.iter().map(|r| r.recovery_pct).sum::<f64>() / n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{synth_pair, SynthConfig};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(pts: &[(f64, f64)]) -> LandmarkSet {
        LandmarkSet::new(pts.iter().map(|&(x, y)| Point::new(x, y)).collect())
    }

    fn random_points(n: usize, rng: &mut impl Rng) -> LandmarkSet {
        LandmarkSet::new(
            (0..n)
                .map(|_| Point::new(rng.gen_range(0.0..500.0), rng.gen_range(0.0..500.0)))
                .collect(),
        )
    }

    fn random_transform(rng: &mut impl Rng) -> Affine2D {
        let theta = rng.gen_range(-30.0f64..30.0).to_radians();
        let s = rng.gen_range(0.5..2.0);
        let h = rng.gen_range(-0.3..0.3);
        let tx = rng.gen_range(-100.0..100.0);
        let ty = rng.gen_range(-100.0..100.0);
        Affine2D::translation(tx, ty)
            .compose(&Affine2D::rotation(theta))
            .compose(&Affine2D::scaling(s, s))
            .compose(&Affine2D::shear(h))
    }

    /// Independent oracle: direct 6x6 normal equations without any point
    /// normalization, solved by Gaussian elimination over the raw system.
    fn affine_oracle(src: &LandmarkSet, dst: &LandmarkSet) -> Affine2D {
        // Unknowns: [a11, a12, tx, a21, a22, ty].
        let mut m = vec![vec![0.0f64; 6]; 6];
        let mut r = vec![0.0f64; 6];
        for (p, q) in src.points.iter().zip(dst.points.iter()) {
            let rows: [([f64; 6], f64); 2] = [
                ([p.x, p.y, 1.0, 0.0, 0.0, 0.0], q.x),
                ([0.0, 0.0, 0.0, p.x, p.y, 1.0], q.y),
            ];
            for (j_row, target) in rows.iter() {
                for i in 0..6 {
                    for j in 0..6 {
                        m[i][j] += j_row[i] * j_row[j];
                    }
                    r[i] += j_row[i] * target;
                }
            }
        }
        let x = solve_linear(&mut m, &mut r).unwrap();
        Affine2D::new([x[0], x[1], x[2], x[3], x[4], x[5]])
    }

    fn residual(t: &Affine2D, src: &LandmarkSet, dst: &LandmarkSet) -> f64 {
        src.points
            .iter()
            .zip(dst.points.iter())
            .map(|(p, q)| {
                let r = t.apply(*p);
                (r.x - q.x).powi(2) + (r.y - q.y).powi(2)
            })
            .sum()
    }

    #[test]
    fn fit_identity_for_equal_sets() {
        let src = set(&[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (7.0, 3.0)]);
        for model in [
            TransformModel::Translation,
            TransformModel::Similarity,
            TransformModel::Affine,
        ] {
            let t = fit_transform(&src, &src, model).unwrap();
            for (got, want) in t.m.iter().zip(Affine2D::identity().m.iter()) {
                assert_abs_diff_eq!(got, want, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn fit_affine_recovers_exact_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let src = random_points(10, &mut rng);
            let t = random_transform(&mut rng);
            let dst = t.apply_set(&src);
            let fitted = fit_transform(&src, &dst, TransformModel::Affine).unwrap();
            for (got, want) in fitted.m.iter().zip(t.m.iter()) {
                assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
            }
        }
    }

    #[test]
    fn fit_affine_matches_oracle_under_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let src = random_points(10, &mut rng);
            let t = random_transform(&mut rng);
            let mut dst = t.apply_set(&src);
            for p in &mut dst.points {
                p.x += rng.gen_range(-1.0..1.0);
                p.y += rng.gen_range(-1.0..1.0);
            }
            let fitted = fit_transform(&src, &dst, TransformModel::Affine).unwrap();
            let oracle = affine_oracle(&src, &dst);
            let rf = residual(&fitted, &src, &dst);
            let ro = residual(&oracle, &src, &dst);
            assert!((rf - ro).abs() < 1e-9, "residuals {rf} vs {ro}");
            // Local optimality: random perturbations never beat the fit.
            for _ in 0..20 {
                let mut perturbed = fitted;
                for m in &mut perturbed.m {
                    *m += rng.gen_range(-1e-3..1e-3);
                }
                assert!(residual(&perturbed, &src, &dst) >= rf - 1e-9);
            }
        }
    }

    #[test]
    fn fit_similarity_recovers_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let src = random_points(8, &mut rng);
            let theta = rng.gen_range(-1.0f64..1.0);
            let s = rng.gen_range(0.5..2.0);
            let t = Affine2D::translation(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0))
                .compose(&Affine2D::rotation(theta))
                .compose(&Affine2D::scaling(s, s));
            let dst = t.apply_set(&src);
            let fitted = fit_transform(&src, &dst, TransformModel::Similarity).unwrap();
            for (got, want) in fitted.m.iter().zip(t.m.iter()) {
                assert!((got - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn nested_model_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let src = random_points(10, &mut rng);
            let mut dst = random_points(10, &mut rng);
            for p in &mut dst.points {
                p.x += rng.gen_range(-5.0..5.0);
            }
            let ra = residual(
                &fit_transform(&src, &dst, TransformModel::Affine).unwrap(),
                &src,
                &dst,
            );
            let rs = residual(
                &fit_transform(&src, &dst, TransformModel::Similarity).unwrap(),
                &src,
                &dst,
            );
            let rt = residual(
                &fit_transform(&src, &dst, TransformModel::Translation).unwrap(),
                &src,
                &dst,
            );
            assert!(ra <= rs + 1e-9);
            assert!(rs <= rt + 1e-9);
        }
    }

    #[test]
    fn fit_rejects_degenerate_inputs() {
        let src = set(&[(1.0, 1.0), (2.0, 2.0)]);
        let dst = set(&[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]);
        assert!(matches!(
            fit_transform(&src, &dst, TransformModel::Affine),
            Err(Error::CountMismatch(..))
        ));
        let two = set(&[(0.0, 0.0), (1.0, 1.0)]);
        assert!(fit_transform(&two, &two, TransformModel::Affine).is_err());
        // Collinear points are rank-deficient for the affine model.
        let line_src = set(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]);
        let line_dst = set(&[(0.0, 1.0), (1.0, 2.0), (2.0, 3.0), (3.0, 4.0)]);
        assert!(matches!(
            fit_transform(&line_src, &line_dst, TransformModel::Affine),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn tre_cases() {
        let src = set(&[(0.0, 0.0), (10.0, 0.0)]);
        let (zero, _) = tre(&Affine2D::identity(), &src, &src).unwrap();
        assert_abs_diff_eq!(zero, 0.0, epsilon = 1e-12);

        let tgt = set(&[(3.0, 4.0), (13.0, 4.0)]);
        let (five, per) = tre(&Affine2D::identity(), &src, &tgt).unwrap();
        assert_abs_diff_eq!(five, 5.0, epsilon = 1e-12);
        assert_eq!(per.len(), 2);

        let perfect = Affine2D::translation(3.0, 4.0);
        let (t, _) = tre(&perfect, &src, &tgt).unwrap();
        assert_abs_diff_eq!(t, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn recovery_recomputes_from_tre() {
        assert_abs_diff_eq!(recovery_pct(100.0, 20.0), 80.0, epsilon = 1e-12);
        assert_abs_diff_eq!(recovery_pct(0.0, 0.0), 0.0, epsilon = 1e-12);
    }

    fn tiny_synth_dataset(n: usize, seed: u64) -> Vec<ImagePair> {
        (0..n)
            .map(|i| {
                let cfg = SynthConfig {
                    size: 96,
                    n_vessels: 4,
                    seed: seed + i as u64,
                    transform: AugmentConfig {
                        copies: 0,
                        rot_range: 2.0,
                        scale_range: (1.0, 1.0),
                        shear_range: 0.0,
                        trans_range: 8.0,
                        ..AugmentConfig::default()
                    },
                    ..SynthConfig::default()
                };
                synth_pair(&cfg, &format!("X{i:03}")).unwrap().pair
            })
            .collect()
    }

    fn fast_opts() -> EvalOptions {
        EvalOptions {
            obs: ObsConfig {
                c: 4,
                s: 6.0,
                fill: 0.0,
            },
            branch: Branch::None,
            hidden: vec![16],
            train: TrainConfig {
                epochs: 3,
                patience: 3,
                batch_size: 8,
                ..TrainConfig::default()
            },
            augment: AugmentConfig {
                copies: 2,
                trans_range: 8.0,
                rot_range: 2.0,
                scale_range: (1.0, 1.0),
                shear_range: 0.0,
                ..AugmentConfig::default()
            },
            ..EvalOptions::default()
        }
    }

    #[test]
    fn register_pair_oracle_and_zero_params() {
        let pair = &tiny_synth_dataset(1, 40)[0];
        let opts = fast_opts();
        let k = pair.source_landmarks.len();
        let obs_len = crate::observation::Observation::expected_len(k, opts.obs.c);
        // All-zero parameters predict zero displacements: the fit collapses
        // to (near) identity and tre_final ~= tre_initial.
        let zero = ModelParams {
            obs_len,
            k,
            hidden: vec![],
            theta: vec![0.0; ModelParams::param_count(obs_len, k, &[])],
        };
        let r = register_pair(
            &zero,
            pair,
            &opts.obs,
            opts.branch,
            &opts.pre,
            24.0,
            TransformModel::Affine,
        )
        .unwrap();
        // The network contributes the identity; the returned transform is
        // either that or the pure translation picked by the correlation
        // fallback, so its linear part stays the identity and the predicted
        // points are the transformed source landmarks.
        assert_abs_diff_eq!(r.transform.m[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.transform.m[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.transform.m[3], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.transform.m[4], 1.0, epsilon = 1e-12);
        let mapped = r.transform.apply_set(&pair.source_landmarks);
        for (p, q) in r.predicted_points.points.iter().zip(mapped.points.iter()) {
            assert_abs_diff_eq!(p.x, q.x, epsilon = 1e-9);
            assert_abs_diff_eq!(p.y, q.y, epsilon = 1e-9);
        }
        assert!((r.tre_final - r.tre_raw).abs() < 1e-9);
    }

    #[test]
    fn register_pair_exact_demonstrator_gives_zero_tre() {
        // Feed the exact demonstrator through the predicted-points path by
        // fitting directly; synthetic ground truth is affine, so tre_final
        // is zero.
        let pair = &tiny_synth_dataset(1, 41)[0];
        let t = fit_transform(
            &pair.source_landmarks,
            &pair.target_landmarks,
            TransformModel::Affine,
        )
        .unwrap();
        let (final_tre, _) = tre(&t, &pair.source_landmarks, &pair.target_landmarks).unwrap();
        assert!(final_tre < 1e-6);
    }

    #[test]
    fn leave_one_out_bookkeeping() {
        let dataset = tiny_synth_dataset(2, 50);
        let opts = fast_opts();
        let report = leave_one_out(&dataset, &opts).unwrap();
        assert_eq!(report.per_pair.len(), 2);
        for row in &report.per_pair {
            assert!(row.recovery_pct.is_finite());
            let want = recovery_pct(row.tre_initial, row.tre_final);
            assert_abs_diff_eq!(row.recovery_pct, want, epsilon = 1e-9);
        }
        assert!(matches!(
            leave_one_out(&dataset[..1], &opts),
            Err(Error::DatasetTooSmall(1, 2))
        ));
    }

    #[test]
    fn leave_one_out_detects_leaked_test_pair() {
        // Duplicate ids make the fold's disjointness assertion fire.
        let mut dataset = tiny_synth_dataset(2, 60);
        dataset.push(dataset[0].clone());
        let opts = fast_opts();
        assert!(matches!(
            leave_one_out(&dataset, &opts),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn sweep_bookkeeping() {
        let dataset = tiny_synth_dataset(2, 70);
        let opts = fast_opts();
        let single = sweep_hyperparams(&dataset, &[4], &[6.0], &opts).unwrap();
        assert_eq!(single.len(), 1);
        let direct = leave_one_out(&dataset, &opts).unwrap();
        assert_eq!(single[0].per_pair, direct.per_pair);

        let grid = sweep_hyperparams(&dataset, &[4, 6], &[4.0, 6.0], &opts).unwrap();
        assert_eq!(grid.len(), 4);
        let mut keys: Vec<(usize, String)> = grid
            .iter()
            .map(|r| (r.config.obs.c, format!("{}", r.config.obs.s)))
            .collect();
        keys.dedup();
        assert_eq!(keys.len(), 4);
        keys.sort();
    }
}
