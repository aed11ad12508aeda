//! Multi-task imitation regressor: a fully-connected trunk with
//! rectified-linear activations and two affine heads predicting the source
//! translation and per-landmark displacement vectors. Training uses manual
//! reverse-mode gradients and Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core::Displacements;
use crate::error::{Error, Result};
use crate::imageops::{Branch, PreprocessParams};
use crate::observation::ObsConfig;

/// Network parameters stored as one flat vector plus the architecture
/// descriptor. Trunk layers come first (row-major weights, then bias),
/// followed by the translation head and the displacement head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub obs_len: usize,
    pub k: usize,
    /// Hidden layer widths; the full chain is obs_len -> hidden... -> heads.
    pub hidden: Vec<usize>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    w_off: usize,
    b_off: usize,
    in_dim: usize,
    out_dim: usize,
}

impl ModelParams {
    fn trunk_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        dims.push(self.obs_len);
        dims.extend_from_slice(&self.hidden);
        dims
    }

    fn trunk_out(&self) -> usize {
        *self.hidden.last().unwrap_or(&self.obs_len)
    }

    /// Parameter layout: per trunk layer W then b, then the two heads.
    fn segments(&self) -> Vec<Segment> {
        let dims = self.trunk_dims();
        let mut segs = Vec::with_capacity(dims.len() + 1);
        let mut off = 0;
        for w in dims.windows(2) {
            let (i, o) = (w[0], w[1]);
            segs.push(Segment {
                w_off: off,
                b_off: off + i * o,
                in_dim: i,
                out_dim: o,
            });
            off += i * o + o;
        }
        let d = self.trunk_out();
        segs.push(Segment {
            w_off: off,
            b_off: off + 2 * d,
            in_dim: d,
            out_dim: 2,
        });
        off += 2 * d + 2;
        segs.push(Segment {
            w_off: off,
            b_off: off + 2 * self.k * d,
            in_dim: d,
            out_dim: 2 * self.k,
        });
        segs
    }

    pub fn param_count(obs_len: usize, k: usize, hidden: &[usize]) -> usize {
        let mut dims = vec![obs_len];
        dims.extend_from_slice(hidden);
        let trunk: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let d = *dims.last().unwrap();
        trunk + (2 * d + 2) + (2 * k * d + 2 * k)
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub w_translation: f64,
    pub w_displacement: f64,
    pub val_fraction: f64,
    /// Early-stopping patience in epochs without validation improvement.
    pub patience: usize,
    /// Decoupled L2 weight decay per step (0 disables it).
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 200,
            batch_size: 32,
            w_translation: 0.5,
            w_displacement: 0.5,
            val_fraction: 0.1,
            patience: 10,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::InvalidConfig("learning rate must be >= 0".into()));
        }
        if self.w_translation < 0.0
            || self.w_displacement < 0.0
            || (self.w_translation == 0.0 && self.w_displacement == 0.0)
        {
            return Err(Error::InvalidConfig(
                "loss weights must be non-negative and not both zero".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction <= 0.0 {
            return Err(Error::InvalidConfig("val_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Network output: one global translation and K displacement vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub translation: (f64, f64),
    pub displacements: Vec<(f64, f64)>,
}

/// Glorot-uniform weights, zero biases.
pub fn init(obs_len: usize, k: usize, hidden: &[usize], rng: &mut impl Rng) -> ModelParams {
    assert!(obs_len >= 1 && k >= 1);
    let mut p = ModelParams {
        obs_len,
        k,
        hidden: hidden.to_vec(),
        theta: vec![0.0; ModelParams::param_count(obs_len, k, hidden)],
    };
    let segments = p.segments();
    for seg in segments {
        let bound = (6.0 / (seg.in_dim + seg.out_dim) as f64).sqrt();
        for i in 0..seg.in_dim * seg.out_dim {
            p.theta[seg.w_off + i] = rng.gen_range(-bound..bound);
        }
        // Biases stay zero.
    }
    p
}

struct ForwardCache {
    /// Trunk activations: a[0] = input, a[l+1] = relu(W a[l] + b).
    activations: Vec<Vec<f64>>,
    /// Pre-activation values per trunk layer.
    pre: Vec<Vec<f64>>,
    head_t: Vec<f64>,
    head_d: Vec<f64>,
}

fn affine_forward(theta: &[f64], seg: &Segment, input: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(seg.out_dim);
    for o in 0..seg.out_dim {
        let row = &theta[seg.w_off + o * seg.in_dim..seg.w_off + (o + 1) * seg.in_dim];
        let mut acc = theta[seg.b_off + o];
        for (w, x) in row.iter().zip(input.iter()) {
            acc += w * x;
        }
        out.push(acc);
    }
    out
}

fn forward_cached(p: &ModelParams, obs: &[f64]) -> Result<ForwardCache> {
    if obs.len() != p.obs_len {
        return Err(Error::ShapeMismatch(format!(
            "observation length {} vs model {}",
            obs.len(),
            p.obs_len
        )));
    }
    let segs = p.segments();
    let n_trunk = p.hidden.len();
    let mut activations = vec![obs.to_vec()];
    let mut pre = Vec::with_capacity(n_trunk);
    for seg in &segs[..n_trunk] {
        let z = affine_forward(&p.theta, seg, activations.last().unwrap());
        let a = z.iter().map(|&v| v.max(0.0)).collect();
        pre.push(z);
        activations.push(a);
    }
    let last = activations.last().unwrap();
    let head_t = affine_forward(&p.theta, &segs[n_trunk], last);
    let head_d = affine_forward(&p.theta, &segs[n_trunk + 1], last);
    Ok(ForwardCache {
        activations,
        pre,
        head_t,
        head_d,
    })
}

/// Deterministic forward pass.
pub fn forward(p: &ModelParams, obs: &[f64]) -> Result<Prediction> {
    let cache = forward_cached(p, obs)?;
    Ok(Prediction {
        translation: (cache.head_t[0], cache.head_t[1]),
        displacements: cache
            .head_d
            .chunks_exact(2)
            .map(|c| (c[0], c[1]))
            .collect(),
    })
}

/// Mean demonstrator displacement, the translation-head target.
pub fn translation_target(demo: &Displacements) -> (f64, f64) {
    let n = demo.len() as f64;
    let (sx, sy) = demo
        .vectors
        .iter()
        .fold((0.0, 0.0), |(sx, sy), &(dx, dy)| (sx + dx, sy + dy));
    (sx / n, sy / n)
}

/// Weighted two-task squared error.
pub fn loss(pred: &Prediction, demo: &Displacements, cfg: &TrainConfig) -> Result<f64> {
    if pred.displacements.len() != demo.len() {
        return Err(Error::CountMismatch(pred.displacements.len(), demo.len()));
    }
    let (mx, my) = translation_target(demo);
    let lt = (pred.translation.0 - mx).powi(2) + (pred.translation.1 - my).powi(2);
    let k = demo.len() as f64;
    let ld = pred
        .displacements
        .iter()
        .zip(demo.vectors.iter())
        .map(|(&(px, py), &(dx, dy))| (px - dx).powi(2) + (py - dy).powi(2))
        .sum::<f64>()
        / k;
    Ok(cfg.w_translation * lt + cfg.w_displacement * ld)
}

/// Exact reverse-mode gradient of loss∘forward with respect to all
/// parameters; also returns the loss value.
pub fn backward(
    p: &ModelParams,
    obs: &[f64],
    demo: &Displacements,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    if demo.len() != p.k {
        return Err(Error::CountMismatch(demo.len(), p.k));
    }
    let cache = forward_cached(p, obs)?;
    let pred = Prediction {
        translation: (cache.head_t[0], cache.head_t[1]),
        displacements: cache
            .head_d
            .chunks_exact(2)
            .map(|c| (c[0], c[1]))
            .collect(),
    };
    let loss_value = loss(&pred, demo, cfg)?;

    let segs = p.segments();
    let n_trunk = p.hidden.len();
    let mut grad = vec![0.0f64; p.theta.len()];

    let (mx, my) = translation_target(demo);
    let d_head_t = vec![
        2.0 * cfg.w_translation * (cache.head_t[0] - mx),
        2.0 * cfg.w_translation * (cache.head_t[1] - my),
    ];
    let k = demo.len() as f64;
    let mut d_head_d = Vec::with_capacity(2 * demo.len());
    for (i, &(dx, dy)) in demo.vectors.iter().enumerate() {
        d_head_d.push(2.0 * cfg.w_displacement / k * (cache.head_d[2 * i] - dx));
        d_head_d.push(2.0 * cfg.w_displacement / k * (cache.head_d[2 * i + 1] - dy));
    }

    let last = cache.activations.last().unwrap();
    let mut d_last = vec![0.0f64; last.len()];
    for (head_idx, d_out) in [(n_trunk, &d_head_t), (n_trunk + 1, &d_head_d)] {
        let seg = &segs[head_idx];
        for o in 0..seg.out_dim {
            let g = d_out[o];
            grad[seg.b_off + o] += g;
            let w_row = seg.w_off + o * seg.in_dim;
            for i in 0..seg.in_dim {
                grad[w_row + i] += g * last[i];
                d_last[i] += g * p.theta[w_row + i];
            }
        }
    }

    // Back through the trunk.
    let mut d_act = d_last;
    for l in (0..n_trunk).rev() {
        let seg = &segs[l];
        let a_in = &cache.activations[l];
        let z = &cache.pre[l];
        let mut d_in = vec![0.0f64; seg.in_dim];
        for o in 0..seg.out_dim {
            let dz = if z[o] > 0.0 { d_act[o] } else { 0.0 };
            grad[seg.b_off + o] += dz;
            let w_row = seg.w_off + o * seg.in_dim;
            for i in 0..seg.in_dim {
                grad[w_row + i] += dz * a_in[i];
                d_in[i] += dz * p.theta[w_row + i];
            }
        }
        d_act = d_in;
    }

    Ok((loss_value, grad))
}

/// Adam moment buffers and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Standard Adam update with bias correction.
pub fn adam_step(p: &mut ModelParams, grads: &[f64], state: &mut AdamState, cfg: &TrainConfig) {
    assert_eq!(grads.len(), p.theta.len());
    assert_eq!(state.m.len(), p.theta.len());
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.adam_beta1.powf(t);
    let bc2 = 1.0 - cfg.adam_beta2.powf(t);
    for i in 0..p.theta.len() {
        state.m[i] = cfg.adam_beta1 * state.m[i] + (1.0 - cfg.adam_beta1) * grads[i];
        state.v[i] = cfg.adam_beta2 * state.v[i] + (1.0 - cfg.adam_beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        p.theta[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.adam_eps) + cfg.weight_decay * p.theta[i]);
    }
}

/// One training sample: flattened observation and demonstrator targets
/// (already divided by the displacement scale).
#[derive(Debug, Clone)]
pub struct Sample {
    pub obs: Vec<f64>,
    pub demo: Displacements,
}

/// Per-epoch train/validation losses.
pub type History = Vec<(f64, f64)>;

fn mean_loss(p: &ModelParams, samples: &[&Sample], cfg: &TrainConfig) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        let pred = forward(p, &s.obs)?;
        acc += loss(&pred, &s.demo, cfg)?;
    }
    Ok(acc / samples.len().max(1) as f64)
}

fn check_samples(dataset: &[Sample], k: usize) -> Result<usize> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let obs_len = dataset[0].obs.len();
    for s in dataset {
        if s.obs.len() != obs_len {
            return Err(Error::InconsistentShapes {
                expected: obs_len,
                got: s.obs.len(),
            });
        }
        if s.demo.len() != k {
            return Err(Error::CountMismatch(s.demo.len(), k));
        }
    }
    Ok(obs_len)
}

/// Shuffled mini-batch Adam training with a held-out validation fraction
/// split off the given samples; returns the parameters with the best
/// validation loss and the loss history.
pub fn train(
    dataset: &[Sample],
    k: usize,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<(ModelParams, History)> {
    cfg.validate()?;
    check_samples(dataset, k)?;

    // 0.9 / 0.1 style split on a shuffled index.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    shuffle(&mut idx, &mut rng);
    let n_val = ((dataset.len() as f64 * cfg.val_fraction).round() as usize)
        .clamp(usize::from(dataset.len() > 1), dataset.len().saturating_sub(1));
    let (val_idx, train_idx) = idx.split_at(n_val);
    let val_set: Vec<Sample> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    let train_set: Vec<Sample> = train_idx.iter().map(|&i| dataset[i].clone()).collect();
    train_with_val(&train_set, &val_set, k, hidden, cfg)
}

/// Like [`train`] but with an explicit validation set, so the caller can
/// split at a coarser granularity than individual samples (e.g. whole
/// image pairs, keeping augmented copies of one pair on one side).
pub fn train_with_val(
    train_set: &[Sample],
    val_set: &[Sample],
    k: usize,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<(ModelParams, History)> {
    cfg.validate()?;
    let obs_len = check_samples(train_set, k)?;
    for s in val_set {
        if s.obs.len() != obs_len {
            return Err(Error::InconsistentShapes {
                expected: obs_len,
                got: s.obs.len(),
            });
        }
        if s.demo.len() != k {
            return Err(Error::CountMismatch(s.demo.len(), k));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init(obs_len, k, hidden, &mut rng);
    let mut state = AdamState::new(params.len());
    let val_refs: Vec<&Sample> = val_set.iter().collect();
    let mut train_order: Vec<usize> = (0..train_set.len()).collect();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;

    for _epoch in 0..cfg.epochs {
        shuffle(&mut train_order, &mut rng);
        let mut train_loss_acc = 0.0;
        let mut n_batches = 0usize;
        for batch in train_order.chunks(cfg.batch_size.max(1)) {
            let mut grad_acc = vec![0.0f64; params.len()];
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &train_set[i];
                let (l, g) = backward(&params, &s.obs, &s.demo, cfg)?;
                batch_loss += l;
                for (a, b) in grad_acc.iter_mut().zip(g.iter()) {
                    *a += b;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grad_acc {
                *g *= inv;
            }
            adam_step(&mut params, &grad_acc, &mut state, cfg);
            train_loss_acc += batch_loss * inv;
            n_batches += 1;
        }
        let train_loss = train_loss_acc / n_batches.max(1) as f64;
        let val_loss = if val_refs.is_empty() {
            train_loss
        } else {
            mean_loss(&params, &val_refs, cfg)?
        };
        history.push((train_loss, val_loss));

        if val_loss < best_val {
            best_val = val_loss;
            best = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok((best, history))
}

/// Fisher-Yates with our seeded RNG, kept local for bitwise reproducibility.
fn shuffle(v: &mut [usize], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned checkpoint embedding everything needed to reproduce
/// predictions: parameters, observation geometry, preprocessing branch,
/// and the displacement scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: ModelParams,
    pub obs_config: ObsConfig,
    pub branch: Branch,
    pub preprocess: PreprocessParams,
    /// Displacement targets are pixels divided by this scale (image width/4).
    pub displacement_scale: f64,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        std::fs::write(path, json).map_err(|e| Error::IoFailure {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::IoFailure {
            path: path.to_path_buf(),
            source: e,
        })?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::ConfigMismatch(format!(
                "cannot parse checkpoint {}: {e}",
                path.display()
            )))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint version {} unsupported",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}
