//! Joint view + geometric-prior training of the shared 2D encoder.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use rayon::prelude::*;
use rustc_hash::FxHashSet;
use thiserror::Error;

use super::encoder::{
    chunk_backward, encode_chunk_subset_cached, encode_image, encode_image_cached, image_backward,
    EncoderError, EncoderParams,
};
use super::features::{FeatureMap, FeatureStore};
use super::loss::{point_info_nce_grad, LossError};
use crate::geometry::ColorImage;
use crate::matching::{subsample_matches, CorrespondenceSet};
use crate::voxels::{OccupancyChunk, PixelVoxelCorrs};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("loss became non-finite at step {0}")]
    DivergenceDetected(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Training hyperparameters. Defaults: SGD at learning rate 0.1 decayed by
/// 0.99 every 1000 steps, temperature 0.4, equal view and geo weights.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub iterations: usize,
    pub tau: f64,
    /// Correspondences sampled per set per step.
    pub sample_k: usize,
    pub w_view: f64,
    pub w_geo: f64,
    pub momentum: f64,
    /// When false, geo-loss gradients stop at the 2D encoder.
    pub geo_grad_into_3d: bool,
    /// Invariance score cadence in steps; 0 disables.
    pub invariance_every: usize,
    /// Positive/negative samples per pair for the invariance score.
    pub invariance_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 8,
            lr_decay: 0.99,
            decay_every: 1000,
            iterations: 200,
            tau: 0.4,
            sample_k: 1024,
            w_view: 1.0,
            w_geo: 1.0,
            momentum: 0.0,
            geo_grad_into_3d: true,
            invariance_every: 50,
            invariance_samples: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if !(self.tau > 0.0) {
            return Err(TrainError::InvalidConfig(format!("tau {} must be > 0", self.tau)));
        }
        if self.w_view < 0.0 || self.w_geo < 0.0 || (self.w_view == 0.0 && self.w_geo == 0.0) {
            return Err(TrainError::InvalidConfig(
                "loss weights must be >= 0 and not both zero".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.sample_k == 0 {
            return Err(TrainError::InvalidConfig("sample_k must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate at a given step: decayed by `lr_decay` every
    /// `decay_every` steps.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((step / self.decay_every) as i32)
    }
}

/// One training example: an overlapping frame pair, the chunks cropped
/// from each view's frustum, and the mined correspondence sets.
#[derive(Debug, Clone)]
pub struct TrainingTuple {
    pub color_a: ColorImage,
    pub color_b: ColorImage,
    pub chunk_a: OccupancyChunk,
    pub chunk_b: OccupancyChunk,
    pub view: CorrespondenceSet,
    pub geo_a: PixelVoxelCorrs,
    pub geo_b: PixelVoxelCorrs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermStats {
    pub loss_sum: f64,
    pub loss_mean: f64,
    pub count: usize,
}

/// Joint loss over one tuple: the mean-form objective
/// w_view * view + w_geo * (geo_a + geo_b), with parameter gradients.
#[derive(Debug, Clone)]
pub struct JointLossOutput {
    pub objective: f64,
    pub view: Option<TermStats>,
    pub geo_a: Option<TermStats>,
    pub geo_b: Option<TermStats>,
    pub grads: EncoderParams,
}

fn stats(report: &super::loss::LossReport) -> TermStats {
    TermStats {
        loss_sum: report.loss_sum,
        loss_mean: report.loss_mean,
        count: report.match_count,
    }
}

/// Maps pixel-pixel matches onto half-resolution feature-map cell pairs.
fn view_pairs(
    fm_a: &FeatureMap,
    fm_b: &FeatureMap,
    set: &CorrespondenceSet,
) -> Result<Vec<(usize, usize)>, EncoderError> {
    set.matches
        .iter()
        .map(|m| {
            Ok((
                fm_a.cell_of_pixel(m.pixel_a.0 as u32, m.pixel_a.1 as u32)?,
                fm_b.cell_of_pixel(m.pixel_b.0 as u32, m.pixel_b.1 as u32)?,
            ))
        })
        .collect()
}

/// Computes the joint loss and its gradients with respect to all encoder
/// parameters (2D gradients accumulate across both frames; 3D gradients
/// flow only when `geo_grad_into_3d` is set).
pub fn joint_loss(
    params: &EncoderParams,
    tuple: &TrainingTuple,
    cfg: &TrainConfig,
) -> Result<JointLossOutput, TrainError> {
    let (fm_a, cache_a) = encode_image_cached(params, &tuple.color_a)?;
    let (fm_b, cache_b) = encode_image_cached(params, &tuple.color_b)?;
    let d = params.dim;

    let mut grad_fm_a = vec![0.0f64; fm_a.count() * d];
    let mut grad_fm_b = vec![0.0f64; fm_b.count() * d];
    let mut objective = 0.0;
    let mut out_view = None;
    let mut out_geo_a = None;
    let mut out_geo_b = None;
    let mut grads = params.zeros_like();

    if cfg.w_view > 0.0 {
        let pairs = view_pairs(&fm_a, &fm_b, &tuple.view)?;
        let report = point_info_nce_grad(&fm_a, &fm_b, &pairs, cfg.tau)?;
        // mean-form objective: scale the sum gradient by w / |M|
        let scale = cfg.w_view / report.match_count as f64;
        axpy(&mut grad_fm_a, &report.grad_a, scale);
        axpy(&mut grad_fm_b, &report.grad_b, scale);
        objective += cfg.w_view * report.loss_mean;
        out_view = Some(stats(&report));
    }

    if cfg.w_geo > 0.0 {
        for (corrs, chunk, fm, grad_fm, slot) in [
            (&tuple.geo_a, &tuple.chunk_a, &fm_a, &mut grad_fm_a, 0usize),
            (&tuple.geo_b, &tuple.chunk_b, &fm_b, &mut grad_fm_b, 1),
        ] {
            let mut voxels: Vec<u64> = corrs.matches.iter().map(|m| m.voxel).collect();
            voxels.sort_unstable();
            voxels.dedup();
            if voxels.is_empty() {
                return Err(TrainError::Loss(LossError::EmptyMatchSet));
            }
            let (vf, chunk_cache) = encode_chunk_subset_cached(params, chunk, &voxels)?;
            let pairs: Vec<(usize, usize)> = corrs
                .matches
                .iter()
                .map(|m| {
                    Ok((
                        fm.cell_of_pixel(m.pixel.0 as u32, m.pixel.1 as u32)?,
                        vf.rank_of(m.voxel).expect("voxel came from the subset"),
                    ))
                })
                .collect::<Result<_, EncoderError>>()?;
            let report = point_info_nce_grad(fm, &vf, &pairs, cfg.tau)?;
            let scale = cfg.w_geo / report.match_count as f64;
            axpy(grad_fm, &report.grad_a, scale);
            objective += cfg.w_geo * report.loss_mean;
            let s = stats(&report);
            if cfg.geo_grad_into_3d {
                let mut grad_vf = report.grad_b;
                for g in grad_vf.iter_mut() {
                    *g *= scale;
                }
                chunk_backward(params, &chunk_cache, &grad_vf, &mut grads);
            }
            if slot == 0 {
                out_geo_a = Some(s);
            } else {
                out_geo_b = Some(s);
            }
        }
    }

    image_backward(params, &cache_a, &grad_fm_a, &mut grads);
    image_backward(params, &cache_b, &grad_fm_b, &mut grads);

    Ok(JointLossOutput {
        objective,
        view: out_view,
        geo_a: out_geo_a,
        geo_b: out_geo_b,
        grads,
    })
}

fn axpy(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Per-step trace record; the invariance score is filled on its cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss_view_mean: f64,
    pub loss_geo_mean: f64,
    pub objective: f64,
    pub invariance: Option<f64>,
}

#[derive(Debug)]
pub struct TrainResult {
    pub params: EncoderParams,
    pub trace: Vec<TraceRow>,
}

/// Uniform sub-sample of pixel-voxel matches, deterministic in `seed`,
/// preserving pixel-index order.
pub fn subsample_pixel_voxel(corrs: &PixelVoxelCorrs, k: usize, seed: u64) -> PixelVoxelCorrs {
    if corrs.matches.len() <= k {
        return corrs.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, corrs.matches.len(), k).into_vec();
    picked.sort_unstable();
    PixelVoxelCorrs {
        frame_index: corrs.frame_index,
        matches: picked.iter().map(|&i| corrs.matches[i]).collect(),
    }
}

fn mix_seed(seed: u64, step: usize, slot: usize, salt: u64) -> u64 {
    // splitmix64 over the packed identifiers
    let mut x = seed
        ^ (step as u64).wrapping_mul(0x9E3779B97F4A7C15)
        ^ (slot as u64).wrapping_mul(0xBF58476D1CE4E5B9)
        ^ salt.wrapping_mul(0x94D049BB133111EB);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Plain SGD over the joint loss with the configured decay schedule.
/// Deterministic in `seed`: batch order and per-step correspondence
/// subsampling derive from it, and batch gradients reduce in slot order
/// regardless of thread count.
pub fn train(
    initial: &EncoderParams,
    dataset: &[TrainingTuple],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let mut params = initial.clone();
    let mut velocity = params.zeros_like();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0, 0, 0xABCD));
    order.shuffle(&mut order_rng);
    let mut cursor = 0usize;
    let mut trace = Vec::with_capacity(cfg.iterations);

    for step in 0..cfg.iterations {
        let lr = cfg.lr_at(step);

        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let outputs: Vec<Result<JointLossOutput, TrainError>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &tuple_idx)| {
                let tuple = &dataset[tuple_idx];
                let working = TrainingTuple {
                    color_a: tuple.color_a.clone(),
                    color_b: tuple.color_b.clone(),
                    chunk_a: tuple.chunk_a.clone(),
                    chunk_b: tuple.chunk_b.clone(),
                    view: subsample_matches(
                        &tuple.view,
                        cfg.sample_k,
                        mix_seed(seed, step, slot, 1),
                    ),
                    geo_a: subsample_pixel_voxel(
                        &tuple.geo_a,
                        cfg.sample_k,
                        mix_seed(seed, step, slot, 2),
                    ),
                    geo_b: subsample_pixel_voxel(
                        &tuple.geo_b,
                        cfg.sample_k,
                        mix_seed(seed, step, slot, 3),
                    ),
                };
                joint_loss(&params, &working, cfg)
            })
            .collect();

        let mut grad_acc = params.zeros_like();
        let inv_batch = 1.0 / cfg.batch_size as f64;
        let mut view_mean = 0.0;
        let mut view_terms = 0usize;
        let mut geo_mean = 0.0;
        let mut geo_terms = 0usize;
        let mut objective = 0.0;
        for out in outputs {
            let out = out?;
            grad_acc.add_scaled(&out.grads, inv_batch);
            objective += out.objective * inv_batch;
            if let Some(s) = out.view {
                view_mean += s.loss_mean;
                view_terms += 1;
            }
            for s in [out.geo_a, out.geo_b].into_iter().flatten() {
                geo_mean += s.loss_mean;
                geo_terms += 1;
            }
        }
        if view_terms > 0 {
            view_mean /= view_terms as f64;
        }
        if geo_terms > 0 {
            geo_mean /= geo_terms as f64;
        }

        if !objective.is_finite() {
            return Err(TrainError::DivergenceDetected(step));
        }

        velocity.scale(cfg.momentum);
        velocity.add_scaled(&grad_acc, 1.0);
        params.add_scaled(&velocity, -lr);

        let invariance = if cfg.invariance_every > 0 && (step + 1) % cfg.invariance_every == 0 {
            Some(view_invariance_score(
                &params,
                &eval_pairs_of(dataset),
                cfg.invariance_samples,
                mix_seed(seed, step, 0, 4),
            )?)
        } else {
            None
        };

        trace.push(TraceRow {
            step,
            lr,
            loss_view_mean: view_mean,
            loss_geo_mean: geo_mean,
            objective,
            invariance,
        });
    }

    Ok(TrainResult { params, trace })
}

/// Deterministic full-dataset evaluation of the joint objective with a
/// fixed subsampling seed; used to compare models before and after
/// training.
pub fn evaluate_objective(
    params: &EncoderParams,
    dataset: &[TrainingTuple],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let totals: Vec<Result<f64, TrainError>> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, tuple)| {
            let working = TrainingTuple {
                color_a: tuple.color_a.clone(),
                color_b: tuple.color_b.clone(),
                chunk_a: tuple.chunk_a.clone(),
                chunk_b: tuple.chunk_b.clone(),
                view: subsample_matches(&tuple.view, cfg.sample_k, mix_seed(seed, 0, i, 1)),
                geo_a: subsample_pixel_voxel(&tuple.geo_a, cfg.sample_k, mix_seed(seed, 0, i, 2)),
                geo_b: subsample_pixel_voxel(&tuple.geo_b, cfg.sample_k, mix_seed(seed, 0, i, 3)),
            };
            joint_loss(params, &working, cfg).map(|o| o.objective)
        })
        .collect();
    let mut sum = 0.0;
    for t in totals {
        sum += t?;
    }
    Ok(sum / dataset.len() as f64)
}

/// One frame pair for invariance evaluation; chunks are not needed.
#[derive(Debug, Clone, Copy)]
pub struct ViewEvalPair<'a> {
    pub color_a: &'a ColorImage,
    pub color_b: &'a ColorImage,
    pub matches: &'a CorrespondenceSet,
}

/// Borrows the view-side of a training dataset for evaluation.
pub fn eval_pairs_of(dataset: &[TrainingTuple]) -> Vec<ViewEvalPair<'_>> {
    dataset
        .iter()
        .map(|t| ViewEvalPair { color_a: &t.color_a, color_b: &t.color_b, matches: &t.view })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na * nb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

/// Mean cosine similarity of corresponding feature pairs minus the mean
/// over randomly sampled non-corresponding pairs, averaged over the eval
/// tuples. Range [-2, 2]; 0 for a constant encoder.
pub fn view_invariance_score(
    params: &EncoderParams,
    tuples: &[ViewEvalPair<'_>],
    samples_per_pair: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    if tuples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let scores: Vec<Result<f64, TrainError>> = tuples
        .par_iter()
        .enumerate()
        .map(|(ti, tuple)| {
            let fm_a = encode_image(params, tuple.color_a)?;
            let fm_b = encode_image(params, tuple.color_b)?;
            let pairs = view_pairs(&fm_a, &fm_b, tuple.matches)?;
            if pairs.is_empty() {
                return Err(TrainError::Loss(LossError::EmptyMatchSet));
            }
            let matched: FxHashSet<(usize, usize)> = pairs.iter().copied().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0, ti, 5));

            let n_pos = samples_per_pair.min(pairs.len());
            let mut pos_sum = 0.0;
            for idx in rand::seq::index::sample(&mut rng, pairs.len(), n_pos) {
                let (ca, cb) = pairs[idx];
                pos_sum += cosine(fm_a.vector(ca), fm_b.vector(cb));
            }

            let mut neg_sum = 0.0;
            let mut neg_count = 0usize;
            let mut guard = 0usize;
            while neg_count < samples_per_pair {
                guard += 1;
                if guard > samples_per_pair * 100 {
                    break; // degenerate: nearly everything matches
                }
                let ca = rng.gen_range(0..fm_a.count());
                let cb = rng.gen_range(0..fm_b.count());
                if matched.contains(&(ca, cb)) {
                    continue;
                }
                neg_sum += cosine(fm_a.vector(ca), fm_b.vector(cb));
                neg_count += 1;
            }
            if neg_count == 0 {
                return Ok(0.0);
            }
            Ok(pos_sum / n_pos as f64 - neg_sum / neg_count as f64)
        })
        .collect();

    let mut sum = 0.0;
    for s in &scores {
        match s {
            Ok(v) => sum += v,
            Err(e) => return Err(clone_error(e)),
        }
    }
    Ok(sum / scores.len() as f64)
}

fn clone_error(e: &TrainError) -> TrainError {
    match e {
        TrainError::Loss(l) => TrainError::Loss(l.clone()),
        TrainError::Encoder(l) => TrainError::Encoder(l.clone()),
        TrainError::DivergenceDetected(s) => TrainError::DivergenceDetected(*s),
        TrainError::InvalidConfig(s) => TrainError::InvalidConfig(s.clone()),
        TrainError::EmptyDataset => TrainError::EmptyDataset,
    }
}
