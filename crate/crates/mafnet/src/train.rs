//! Training: patch sampling with geometric augmentation, the Adam optimizer,
//! staged training with on-the-fly noise synthesis, and checkpoint-resumable
//! state.
//!
//! Reproducibility contract: every random decision is derived from the
//! training seed through fixed stream tags and (epoch, step) indices, never
//! from ambient state, so a run can be stopped at any epoch boundary,
//! checkpointed, and resumed bitwise identically.

use std::path::{Path, PathBuf};

use crate::cube::HSICube;
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore};
use crate::loss::{total_loss_graph, LAMBDA_DEFAULT};
use crate::model::{
    checkpoint_to_bytes, restore_checkpoint, CheckpointSection, Network, NetworkConfig,
    SECTION_HISTORY, SECTION_OPTIMIZER, SECTION_PROGRESS,
};
use crate::noise::{synthesize_case, NoiseCase, NoiseSpec};
use crate::rng::{rng_from_seed, split, split3, stream};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

/// Default initial learning rate.
pub const LR_INIT_DEFAULT: f64 = 1e-4;
/// Default per-epoch multiplicative learning-rate decay.
pub const LR_DECAY_DEFAULT: f64 = 0.97;
/// Adam first-moment decay.
pub const ADAM_BETA1: f64 = 0.9;
/// Adam second-moment decay.
pub const ADAM_BETA2: f64 = 0.999;
/// Adam denominator stabilizer.
pub const ADAM_EPS: f64 = 1e-8;
/// Augmentation rescaling factors; the source window is resized to the patch
/// with nearest-neighbor lookup.
pub const AUG_SCALES: [f64; 3] = [0.75, 1.0, 1.25];

/// Learning rate at a 0-based epoch index: `lr_init * decay^epoch`.
pub fn lr_at(lr_init: f64, lr_decay: f64, epoch: usize) -> f64 {
    lr_init * lr_decay.powi(epoch as i32)
}

// ----------------------------------------------------------------------
// Patch sampling
// ----------------------------------------------------------------------

/// Training patch shape: a contiguous band window and a spatial crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchDims {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
}

/// Nearest-neighbor resize of a `(bands, sh, sw)` block to `(bands, th, tw)`;
/// source index = floor(dst * src_len / dst_len).
fn resize_nearest(src: &[f32], bands: usize, sh: usize, sw: usize, th: usize, tw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; bands * th * tw];
    for b in 0..bands {
        for i in 0..th {
            let si = i * sh / th;
            for j in 0..tw {
                let sj = j * sw / tw;
                out[(b * th + i) * tw + j] = src[(b * sh + si) * sw + sj];
            }
        }
    }
    out
}

/// Orientation codes: 0 identity, 1 rot90 clockwise, 2 rot180,
/// 3 rot270 clockwise, 4 horizontal flip.
fn apply_geom(src: &[f32], bands: usize, ph: usize, pw: usize, geom: u8) -> Vec<f32> {
    if geom == 0 {
        return src.to_vec();
    }
    let mut out = vec![0.0f32; bands * ph * pw];
    for b in 0..bands {
        for i in 0..ph {
            for j in 0..pw {
                // Input dims are (pw, ph) for the 90-degree rotations and
                // (ph, pw) otherwise, so the output is always (ph, pw).
                let v = match geom {
                    1 => src[(b * pw + (pw - 1 - j)) * ph + i],
                    2 => src[(b * ph + (ph - 1 - i)) * pw + (pw - 1 - j)],
                    3 => src[(b * pw + j) * ph + (ph - 1 - i)],
                    4 => src[(b * ph + i) * pw + (pw - 1 - j)],
                    _ => unreachable!(),
                };
                out[(b * ph + i) * pw + j] = v;
            }
        }
    }
    out
}

/// Window edge needed so that resizing by `scale` yields `target` samples.
fn scaled_len(target: usize, scale: f64) -> usize {
    (target as f64 / scale).ceil() as usize
}

/// Draw `count` augmented patches from one cube.
///
/// Per patch, in this fixed order, the generator draws: band window start,
/// orientation, rescale factor (uniform over the factors whose source window
/// fits; identity always fits), and the spatial corner. If a 90-degree
/// orientation of a non-square patch cannot fit the cube, the orientation
/// falls back to identity.
pub fn sample_patches(
    cube: &HSICube,
    dims: PatchDims,
    count: usize,
    seed: u64,
) -> Result<Vec<HSICube>> {
    let (b, h, w) = cube.dims();
    if dims.bands == 0 || dims.height == 0 || dims.width == 0 {
        return Err(Error::Shape("patch dims must be positive".into()));
    }
    if dims.bands > b || dims.height > h || dims.width > w {
        return Err(Error::Shape(format!(
            "patch ({}, {}, {}) exceeds source ({b}, {h}, {w})",
            dims.bands, dims.height, dims.width
        )));
    }
    let mut rng = rng_from_seed(split(seed, stream::PATCH));
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let b0 = rng.gen_range(0..=b - dims.bands);
        let mut geom: u8 = rng.gen_range(0..5);
        let (mut th, mut tw) = pre_geom_dims(dims, geom);
        if th > h || tw > w {
            geom = 0;
            (th, tw) = (dims.height, dims.width);
        }
        let feasible: Vec<f64> = AUG_SCALES
            .iter()
            .copied()
            .filter(|&s| scaled_len(th, s) <= h && scaled_len(tw, s) <= w)
            .collect();
        let scale = feasible[rng.gen_range(0..feasible.len())];
        let (sh, sw) = (scaled_len(th, scale), scaled_len(tw, scale));
        let i0 = rng.gen_range(0..=h - sh);
        let j0 = rng.gen_range(0..=w - sw);

        let mut window = vec![0.0f32; dims.bands * sh * sw];
        for bb in 0..dims.bands {
            for i in 0..sh {
                let src = ((b0 + bb) * h + i0 + i) * w + j0;
                let dst = (bb * sh + i) * sw;
                window[dst..dst + sw].copy_from_slice(&cube.data()[src..src + sw]);
            }
        }
        let sized = if (sh, sw) == (th, tw) {
            window
        } else {
            resize_nearest(&window, dims.bands, sh, sw, th, tw)
        };
        let data = apply_geom(&sized, dims.bands, dims.height, dims.width, geom);
        out.push(HSICube::new(dims.bands, dims.height, dims.width, data)?);
    }
    Ok(out)
}

/// Spatial dims the window must have before the orientation is applied.
fn pre_geom_dims(dims: PatchDims, geom: u8) -> (usize, usize) {
    if geom == 1 || geom == 3 {
        (dims.width, dims.height)
    } else {
        (dims.height, dims.width)
    }
}

// ----------------------------------------------------------------------
// Adam optimizer
// ----------------------------------------------------------------------

/// Adam with f32 moment tensors aligned to the parameter store.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>) -> Self {
        Adam {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: (0..store.len())
                .map(|i| Tensor::zeros(store.value(i).shape()))
                .collect(),
            v: (0..store.len())
                .map(|i| Tensor::zeros(store.value(i).shape()))
                .collect(),
        }
    }

    /// One update from the gradients currently accumulated in the store.
    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for idx in 0..store.len() {
            // Split borrows: moments live here, grads/values in the store.
            let grads: Vec<f32> = store.grad(idx).data().to_vec();
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let p = store.value_mut(idx).data_mut();
            for k in 0..grads.len() {
                let g = grads[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let mhat = m[k] as f64 / bc1;
                let vhat = v[k] as f64 / bc2;
                p[k] -= (lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
    }

    /// Serialize as `t u64 | per name-sorted param: m f32... v f32...`.
    pub fn to_bytes(&self, store: &ParamStore<f32>) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.t.to_le_bytes());
        for idx in store.sorted_indices() {
            for t in [&self.m[idx], &self.v[idx]] {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], store: &ParamStore<f32>) -> Result<Self> {
        let expected = 8 + 8 * store.param_count();
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "optimizer section has {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let t = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let mut adam = Adam::new(store);
        adam.t = t;
        let mut off = 8;
        for idx in store.sorted_indices() {
            for tensor in [&mut adam.m[idx], &mut adam.v[idx]] {
                for v in tensor.data_mut() {
                    *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                    off += 4;
                }
            }
        }
        Ok(adam)
    }
}

// ----------------------------------------------------------------------
// Stages and schedule
// ----------------------------------------------------------------------

/// Noise regime of one training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Sigma30,
    Sigma50,
    Sigma70,
    Blind,
    Complex,
}

impl StageKind {
    /// The incremental curriculum: fixed noise levels from easy to hard,
    /// then blind Gaussian, then the mixed-noise cases.
    pub const SCHEDULE: [StageKind; 5] = [
        StageKind::Sigma30,
        StageKind::Sigma50,
        StageKind::Sigma70,
        StageKind::Blind,
        StageKind::Complex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Sigma30 => "sigma30",
            StageKind::Sigma50 => "sigma50",
            StageKind::Sigma70 => "sigma70",
            StageKind::Blind => "blind",
            StageKind::Complex => "complex",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "sigma30" => StageKind::Sigma30,
            "sigma50" => StageKind::Sigma50,
            "sigma70" => StageKind::Sigma70,
            "blind" => StageKind::Blind,
            "complex" => StageKind::Complex,
            _ => {
                return Err(Error::Config(format!(
                    "unknown stage '{name}' (expected sigma30, sigma50, sigma70, blind, complex)"
                )))
            }
        })
    }

    /// The noise applied to one batch. The mixed stage draws one of the five
    /// structured cases per batch from the batch seed.
    fn batch_spec(self, batch_seed: u64) -> NoiseSpec {
        let case = match self {
            StageKind::Sigma30 => NoiseCase::GaussFixed(30.0),
            StageKind::Sigma50 => NoiseCase::GaussFixed(50.0),
            StageKind::Sigma70 => NoiseCase::GaussFixed(70.0),
            StageKind::Blind => NoiseCase::GaussBlind,
            StageKind::Complex => {
                let mut rng = rng_from_seed(split(batch_seed, stream::CASE));
                [
                    NoiseCase::Case1,
                    NoiseCase::Case2,
                    NoiseCase::Case3,
                    NoiseCase::Case4,
                    NoiseCase::Case5,
                ][rng.gen_range(0..5)]
            }
        };
        NoiseSpec::new(case, batch_seed)
    }
}

/// Hyperparameters shared by all stages.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub patch: PatchDims,
    /// Patches drawn per epoch across all source cubes (before the
    /// validation split).
    pub patches_per_epoch: usize,
    pub lr_init: f64,
    pub lr_decay: f64,
    pub lambda: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Small defaults that exercise the full pipeline in minutes on a CPU.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            epochs_per_stage: 5,
            batch_size: 4,
            patch: PatchDims {
                bands: 8,
                height: 32,
                width: 32,
            },
            patches_per_epoch: 32,
            lr_init: LR_INIT_DEFAULT,
            lr_decay: LR_DECAY_DEFAULT,
            lambda: LAMBDA_DEFAULT,
            val_fraction: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_stage == 0 || self.batch_size == 0 || self.patches_per_epoch == 0 {
            return Err(Error::Param(
                "epochs, batch size, and patches per epoch must be positive".into(),
            ));
        }
        if self.patches_per_epoch < self.batch_size {
            return Err(Error::Param(format!(
                "patches per epoch ({}) below batch size ({})",
                self.patches_per_epoch, self.batch_size
            )));
        }
        if !(self.lr_init > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Param(format!(
                "learning rate {} / decay {} out of range",
                self.lr_init, self.lr_decay
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Param(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Param(format!(
                "validation fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Mean losses of one epoch.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub lr: f64,
    pub rec: f64,
    pub grad: f64,
    pub total: f64,
    pub val_total: f64,
}

/// Everything a resumable run owns.
pub struct TrainState {
    pub net: Network,
    pub store: ParamStore<f32>,
    pub adam: Adam,
    /// Position in the stage list currently being trained (stages before it
    /// are complete).
    pub stage_index: usize,
    /// Completed epochs within the current stage.
    pub epochs_done: usize,
    /// Every emitted log line, across stages.
    pub history: Vec<String>,
}

pub fn init_state(config: NetworkConfig) -> Result<TrainState> {
    let (net, store) = Network::build::<f32>(config)?;
    let adam = Adam::new(&store);
    Ok(TrainState {
        net,
        store,
        adam,
        stage_index: 0,
        epochs_done: 0,
        history: Vec::new(),
    })
}

/// Seed governing all randomness of one stage.
fn stage_seed(cfg: &TrainConfig, kind: StageKind) -> u64 {
    split3(
        cfg.seed,
        stream::STAGE,
        StageKind::SCHEDULE.iter().position(|&k| k == kind).unwrap() as u64,
        0,
    )
}

/// Draw the epoch's patch pool, spread as evenly as possible over sources.
fn epoch_patches(
    sources: &[HSICube],
    cfg: &TrainConfig,
    seed: u64,
    epoch: usize,
) -> Result<Vec<HSICube>> {
    let n = sources.len();
    let mut pool = Vec::with_capacity(cfg.patches_per_epoch);
    for (ci, cube) in sources.iter().enumerate() {
        let count = cfg.patches_per_epoch / n + usize::from(ci < cfg.patches_per_epoch % n);
        let s = split3(seed, stream::PATCH, epoch as u64, ci as u64);
        pool.extend(sample_patches(cube, cfg.patch, count, s)?);
    }
    Ok(pool)
}

/// Forward one noisy/clean pair, returning `(rec, grad, total)` and, when
/// `train` is set, accumulating parameter gradients into the store.
fn forward_pair(
    net: &Network,
    store: &mut ParamStore<f32>,
    noisy: &HSICube,
    clean: &HSICube,
    lambda: f64,
    train: bool,
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::<f32>::new();
    let out = net.forward_graph(&mut g, store, noisy)?;
    let target = g.input(clean.to_tensor(), false);
    let nodes = total_loss_graph(&mut g, out.denoised, target, lambda);
    let rec = g.value(nodes.rec).item() as f64;
    let grad = g.value(nodes.grad).item() as f64;
    let total = g.value(nodes.total).item() as f64;
    if train && total.is_finite() {
        let grads = g.backward(nodes.total);
        g.accumulate_param_grads(&grads, store);
    }
    Ok((rec, grad, total))
}

/// Train one stage from `state.epochs_done` to `until_epoch`.
///
/// Per epoch: draw a fresh patch pool, shuffle it, hold out the validation
/// fraction, then optimize over batches with noise synthesized on the fly
/// from per-batch seeds. Emits one pinned-format log line per epoch:
/// `stage epoch lr loss_rec loss_grad loss_total`.
pub fn run_stage(
    state: &mut TrainState,
    kind: StageKind,
    cfg: &TrainConfig,
    sources: &[HSICube],
    until_epoch: usize,
    sink: &mut dyn FnMut(&str),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::Data("no training cubes provided".into()));
    }
    if cfg.patch.bands != state.net.config.bands {
        return Err(Error::Shape(format!(
            "patch bands {} must match network bands {}",
            cfg.patch.bands, state.net.config.bands
        )));
    }
    let sseed = stage_seed(cfg, kind);
    let mut stats = Vec::new();
    for epoch in state.epochs_done..until_epoch {
        let lr = lr_at(cfg.lr_init, cfg.lr_decay, epoch);
        let mut pool = epoch_patches(sources, cfg, sseed, epoch)?;
        let mut order = rng_from_seed(split3(sseed, stream::SHUFFLE, epoch as u64, 0));
        pool.shuffle(&mut order);
        let n_val = ((pool.len() as f64 * cfg.val_fraction).round() as usize).min(pool.len() - 1);
        let val = pool.split_off(pool.len() - n_val);

        let (mut rec_sum, mut grad_sum, mut total_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for (step, batch) in pool.chunks(cfg.batch_size).enumerate() {
            let batch_seed = split3(sseed, stream::TRAIN_NOISE, epoch as u64, step as u64);
            let spec = kind.batch_spec(batch_seed);
            state.store.zero_grads();
            for (pi, clean) in batch.iter().enumerate() {
                let mut s = spec.clone();
                s.seed = split(batch_seed, pi as u64);
                let (noisy, _) = synthesize_case(clean, &s)?;
                let (rec, grad, total) =
                    forward_pair(&state.net, &mut state.store, &noisy, clean, cfg.lambda, true)?;
                if !total.is_finite() {
                    return Err(Error::Divergence {
                        stage: kind.name().into(),
                        epoch,
                        step,
                        batch_seed,
                    });
                }
                rec_sum += rec;
                grad_sum += grad;
                total_sum += total;
                seen += 1;
            }
            let inv = 1.0 / batch.len() as f32;
            for idx in 0..state.store.len() {
                for v in state.store.grad_mut(idx).data_mut() {
                    *v *= inv;
                }
            }
            state.adam.step(&mut state.store, lr);
        }

        let train_batches = pool.chunks(cfg.batch_size).len();
        let mut val_total = 0.0;
        for (vi, clean) in val.iter().enumerate() {
            let vseed = split3(sseed, stream::VAL_SPLIT, epoch as u64, vi as u64);
            let spec = kind.batch_spec(vseed);
            let (noisy, _) = synthesize_case(clean, &spec)?;
            let (_, _, total) =
                forward_pair(&state.net, &mut state.store, &noisy, clean, cfg.lambda, false)?;
            if !total.is_finite() {
                return Err(Error::Divergence {
                    stage: kind.name().into(),
                    epoch,
                    step: train_batches + vi,
                    batch_seed: vseed,
                });
            }
            val_total += total;
        }
        let val_total = if val.is_empty() {
            f64::NAN
        } else {
            val_total / val.len() as f64
        };

        let (rec, grad, total) = (
            rec_sum / seen as f64,
            grad_sum / seen as f64,
            total_sum / seen as f64,
        );
        let line = format!("{} {} {} {} {} {}", kind.name(), epoch, lr, rec, grad, total);
        sink(&line);
        state.history.push(line);
        state.epochs_done = epoch + 1;
        stats.push(EpochStats {
            lr,
            rec,
            grad,
            total,
            val_total,
        });
    }
    Ok(stats)
}

// ----------------------------------------------------------------------
// Checkpointable state
// ----------------------------------------------------------------------

fn progress_bytes(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::with_capacity(8);
    out.extend_from_slice(&(state.stage_index as u32).to_le_bytes());
    out.extend_from_slice(&(state.epochs_done as u32).to_le_bytes());
    out
}

/// Serialize the full training state (weights + optimizer + progress +
/// history) to checkpoint bytes.
pub fn state_to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let sections = vec![
        CheckpointSection {
            kind: SECTION_OPTIMIZER,
            payload: state.adam.to_bytes(&state.store),
        },
        CheckpointSection {
            kind: SECTION_PROGRESS,
            payload: progress_bytes(state),
        },
        CheckpointSection {
            kind: SECTION_HISTORY,
            payload: state.history.join("\n").into_bytes(),
        },
    ];
    checkpoint_to_bytes(&state.net.config, &state.store, &sections)
}

/// Rebuild a training state from checkpoint bytes. Missing sections fall
/// back to a fresh optimizer / zero progress / empty history.
pub fn state_from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let (net, store, sections) = restore_checkpoint(bytes)?;
    let mut adam = Adam::new(&store);
    let mut stage_index = 0;
    let mut epochs_done = 0;
    let mut history = Vec::new();
    for s in &sections {
        match s.kind {
            SECTION_OPTIMIZER => adam = Adam::from_bytes(&s.payload, &store)?,
            SECTION_PROGRESS => {
                if s.payload.len() != 8 {
                    return Err(Error::Format(format!(
                        "progress section has {} bytes, expected 8",
                        s.payload.len()
                    )));
                }
                stage_index = u32::from_le_bytes(s.payload[..4].try_into().unwrap()) as usize;
                epochs_done = u32::from_le_bytes(s.payload[4..8].try_into().unwrap()) as usize;
            }
            SECTION_HISTORY => {
                let text = std::str::from_utf8(&s.payload)
                    .map_err(|_| Error::Format("history section is not UTF-8".into()))?;
                history = text
                    .lines()
                    .filter(|l| !l.is_empty())
                    .map(str::to_string)
                    .collect();
            }
            _ => {}
        }
    }
    Ok(TrainState {
        net,
        store,
        adam,
        stage_index,
        epochs_done,
        history,
    })
}

pub fn save_state(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = state_to_bytes(state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    state_from_bytes(&bytes)
}

/// Run (or resume) the staged curriculum. Weights warm-start each stage from
/// the previous stage's result; optimizer moments restart per stage. Writes
/// one checkpoint per completed stage into `checkpoint_dir` when given and
/// returns their paths.
pub fn run_schedule(
    state: &mut TrainState,
    cfg: &TrainConfig,
    sources: &[HSICube],
    stages: &[StageKind],
    checkpoint_dir: Option<&Path>,
    sink: &mut dyn FnMut(&str),
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (idx, &kind) in stages.iter().enumerate() {
        if state.stage_index > idx {
            continue;
        }
        run_stage(state, kind, cfg, sources, cfg.epochs_per_stage, sink)?;
        state.stage_index = idx + 1;
        state.epochs_done = 0;
        state.adam = Adam::new(&state.store);
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("stage_{}.mafw", kind.name()));
            save_state(&path, state)?;
            written.push(path);
        }
    }
    Ok(written)
}

// ----------------------------------------------------------------------
// Single-patch overfit probe
// ----------------------------------------------------------------------

/// Outcome of the overfit probe.
#[derive(Clone, Debug)]
pub struct OverfitReport {
    pub steps: usize,
    pub final_psnr_db: f64,
    /// Total loss sampled every `sample_every` steps (and at the last step).
    pub losses: Vec<(usize, f64)>,
}

/// Repeatedly fit one fixed noisy/clean pair and report the denoising PSNR
/// at the end. A healthy implementation drives PSNR far above the noisy
/// input's PSNR because nothing prevents memorizing a single patch.
pub fn overfit_single_patch(
    net_config: NetworkConfig,
    clean: &HSICube,
    sigma: f32,
    steps: usize,
    lr: f64,
    seed: u64,
    sample_every: usize,
) -> Result<OverfitReport> {
    let (net, mut store) = Network::build::<f32>(net_config)?;
    let mut adam = Adam::new(&store);
    let spec = NoiseSpec::new(NoiseCase::GaussFixed(sigma), split(seed, stream::TRAIN_NOISE));
    let (noisy, _) = synthesize_case(clean, &spec)?;
    let mut losses = Vec::new();
    for step in 0..steps {
        store.zero_grads();
        let (_, _, total) = forward_pair(&net, &mut store, &noisy, clean, LAMBDA_DEFAULT, true)?;
        if !total.is_finite() {
            return Err(Error::Divergence {
                stage: "overfit".into(),
                epoch: 0,
                step,
                batch_seed: spec.seed,
            });
        }
        if step % sample_every == 0 || step + 1 == steps {
            losses.push((step, total));
        }
        adam.step(&mut store, lr);
    }
    let (_, denoised) = net.denoise_cube(&store, &noisy)?;
    let psnr = crate::metrics::psnr(&denoised, clean, 1.0)?;
    Ok(OverfitReport {
        steps,
        final_psnr_db: psnr.mean_db,
        losses,
    })
}
