//! Training objective and loop: photometric color loss, reprojection loss
//! with auto-masking, the sampling losses against the mixture-update
//! targets, and the Adam-driven epoch loop.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_with_cache, encoder_backward, EncoderGrad, EncoderParams, EncoderShape, FeatureGrid, Tensor3};
use crate::error::{Error, Result};
use crate::field::{
    FieldGrad, FieldParams, FieldShape, GaussGrad, GaussPredictorParams, GaussPredictorShape,
    GaussianMixture1D,
};
use crate::geometry::{ray_for_pixel, reproject_with_jacobian, Intrinsics, Ray, SE3Pose};

use crate::img::ImageBuf;
use crate::nn::{stream_rng, Adam, GradSet, ParamSet};
use crate::prsamp::{prsom_update, sampling_loss_grads, sampling_losses};
use crate::render::{render_ray, RayForward, RayGrads, RenderConfig, SampleSource};
use crate::scenegen::Manifest;

// RNG stream domains
const DOM_INIT: u64 = 100;
const DOM_FRAME: u64 = 101;
const DOM_PIXELS: u64 = 102;
const DOM_RAY: u64 = 103;

/// Rays per parallel reduction chunk. Fixed so that partial-sum order (and
/// therefore every bit of the result) is independent of thread count.
const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub rays_per_batch: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub k: usize,
    pub m: usize,
    pub t_near: f64,
    pub t_far: f64,
    pub levels_pos: usize,
    pub levels_dir: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub gauss_hidden_width: usize,
    pub gauss_hidden_layers: usize,
    pub channels: usize,
    pub grid_size: usize,
    pub fov_margin_deg: f64,
    /// Internal balancing of the two sampling-loss terms inside L_samp.
    /// The op-level definitions stay unweighted; these scale the terms'
    /// contribution to the training objective and its gradients.
    pub w_gauss: f64,
    pub w_surface: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 200,
            rays_per_batch: 256,
            steps_per_epoch: 8,
            lr: 2e-3,
            gamma: 0.99,
            weight_decay: 0.0,
            seed: 7,
            k: 4,
            m: 8,
            t_near: 0.2,
            t_far: 22.0,
            levels_pos: 10,
            levels_dir: 4,
            hidden_width: 64,
            hidden_layers: 4,
            gauss_hidden_width: 32,
            gauss_hidden_layers: 2,
            channels: 32,
            grid_size: 64,
            fov_margin_deg: 40.0,
            w_gauss: 1.0,
            w_surface: 0.002,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays_per_batch == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("rays_per_batch and steps_per_epoch must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.t_near >= self.t_far {
            return Err(Error::Config(format!(
                "t_near {} must be below t_far {}",
                self.t_near, self.t_far
            )));
        }
        if self.k == 0 || self.m == 0 {
            return Err(Error::Config("k and m must be >= 1".into()));
        }
        Ok(())
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            t_near: self.t_near,
            t_far: self.t_far,
            k: self.k,
            m: self.m,
            levels_pos: self.levels_pos,
            levels_dir: self.levels_dir,
        }
    }
}

/// All trainable parameters plus optimizer state.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub encoder: EncoderParams,
    pub field: FieldParams,
    pub gauss: GaussPredictorParams,
    pub adam: Adam,
    pub epoch: usize,
}

impl ModelState {
    pub fn init(cfg: &TrainConfig) -> ModelState {
        let mut rng = stream_rng(cfg.seed, DOM_INIT, 0);
        let encoder = EncoderParams::init(
            EncoderShape {
                channels: cfg.channels,
                grid_h: cfg.grid_size,
                grid_w: cfg.grid_size,
                fov_margin: cfg.fov_margin_deg.to_radians(),
            },
            &mut rng,
        );
        let field = FieldParams::init(
            FieldShape {
                levels_pos: cfg.levels_pos,
                levels_dir: cfg.levels_dir,
                channels: cfg.channels,
                hidden_width: cfg.hidden_width,
                hidden_layers: cfg.hidden_layers,
            },
            &mut rng,
        );
        let gauss = GaussPredictorParams::init(
            GaussPredictorShape {
                k: cfg.k,
                channels: cfg.channels,
                hidden_width: cfg.gauss_hidden_width,
                hidden_layers: cfg.gauss_hidden_layers,
            },
            &mut rng,
        );
        let n = encoder.num_params() + field.num_params() + gauss.num_params();
        let mut adam = Adam::new(n, cfg.lr);
        adam.weight_decay = cfg.weight_decay;
        ModelState {
            encoder,
            field,
            gauss,
            adam,
            epoch: 0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.field.num_params() + self.gauss.num_params()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        self.encoder.write_params(out);
        self.field.write_params(out);
        self.gauss.write_params(out);
    }

    pub fn read_params(&mut self, data: &mut impl Iterator<Item = f64>) {
        self.encoder.read_params(data);
        self.field.read_params(data);
        self.gauss.read_params(data);
    }
}

/// A loaded training sequence: images with camera-to-world poses. Frame 0 is
/// the conditioning input frame.
pub struct Sequence {
    pub intrinsics: Intrinsics,
    pub images: Vec<ImageBuf>,
    pub poses: Vec<SE3Pose>,
}

impl Sequence {
    pub fn load(dir: &std::path::Path) -> Result<Sequence> {
        let manifest = Manifest::load(dir)?;
        let mut images = Vec::new();
        let mut poses = Vec::new();
        for frame in &manifest.frames {
            images.push(ImageBuf::load_png(&dir.join(&frame.rgb))?);
            let pose = SE3Pose::from_matrix4_rows(&frame.pose)?;
            poses.push(pose);
        }
        if images.len() < 2 {
            return Err(Error::Config(format!(
                "sequence needs at least 2 frames, found {}",
                images.len()
            )));
        }
        manifest.intrinsics.validate()?;
        Ok(Sequence {
            intrinsics: manifest.intrinsics,
            images,
            poses,
        })
    }
}

/// Mean squared error over rays and channels.
pub fn rgb_loss(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            pred.len(),
            gt.len()
        )));
    }
    let n = (pred.len() * 3) as f64;
    Ok(pred
        .iter()
        .zip(gt)
        .flat_map(|(p, g)| p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)))
        .sum::<f64>()
        / n)
}

/// One ray's reprojection inputs.
#[derive(Debug, Clone, Copy)]
pub struct ReprojSample {
    /// Pixel in the source frame the ray went through.
    pub pixel: (f64, f64),
    /// Rendered depth D̂ along that ray (meters from the source camera).
    pub depth: f64,
    /// Ray weight sum, used as a validity gate.
    pub weight_sum: f64,
}

#[derive(Debug, Clone)]
pub struct ReprojResult {
    pub loss: f64,
    /// dL/dD̂ per input sample (zero for masked samples).
    pub d_depth: Vec<f64>,
    pub used: usize,
    /// True when every sample was masked out (loss is 0 by convention).
    pub all_masked: bool,
}

/// Photometric reprojection loss with auto-masking.
///
/// Each source pixel is warped into the target frame through its rendered
/// depth; the loss is the channel-mean L1 between the source color and the
/// bilinearly sampled target color, averaged over unmasked pixels. A pixel
/// is masked when the warp is invalid, its ray is empty (weight_sum below
/// 0.5), or the unwarped error already beats the warped error (auto-mask,
/// strict less-than). Images and poses are constants: the gradient is taken
/// with respect to depth only.
pub fn reproj_loss(
    samples: &[ReprojSample],
    img_src: &ImageBuf,
    img_tgt: &ImageBuf,
    pose_src: &SE3Pose,
    pose_tgt: &SE3Pose,
    k: &Intrinsics,
) -> ReprojResult {
    struct PerPixel {
        err: f64,
        d_depth: f64,
        used: bool,
    }
    let per: Vec<PerPixel> = samples
        .iter()
        .map(|s| {
            let masked = PerPixel {
                err: 0.0,
                d_depth: 0.0,
                used: false,
            };
            if s.weight_sum < 0.5 || s.depth <= 0.0 {
                return masked;
            }
            let ((wx, wy), (jx, jy), valid) =
                reproject_with_jacobian(s.pixel, s.depth, pose_src, pose_tgt, k);
            if !valid {
                return masked;
            }
            let src = img_src.sample_bilinear(s.pixel.0, s.pixel.1);
            let (warped, gx, gy) = img_tgt.sample_bilinear_with_grad(wx, wy);
            let unwarped = img_tgt.sample_bilinear(s.pixel.0, s.pixel.1);
            let mut err_warp = 0.0;
            let mut err_id = 0.0;
            let mut d_depth = 0.0;
            for c in 0..3 {
                let a = src[c] - warped[c];
                err_warp += a.abs() / 3.0;
                err_id += (src[c] - unwarped[c]).abs() / 3.0;
                // d|a|/dD = sign(a) * (-dwarped/dD); dwarped/dD = grad . J
                d_depth += a.signum() * -(gx[c] * jx + gy[c] * jy) / 3.0;
            }
            if err_id < err_warp {
                return masked;
            }
            PerPixel {
                err: err_warp,
                d_depth,
                used: true,
            }
        })
        .collect();
    let used = per.iter().filter(|p| p.used).count();
    if used == 0 {
        return ReprojResult {
            loss: 0.0,
            d_depth: vec![0.0; samples.len()],
            used: 0,
            all_masked: true,
        };
    }
    let n = used as f64;
    ReprojResult {
        loss: per.iter().map(|p| p.err).sum::<f64>() / n,
        d_depth: per.iter().map(|p| p.d_depth / n).collect(),
        used,
        all_masked: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLosses {
    pub l_rgb: f64,
    pub l_reproj: f64,
    pub l_gauss: f64,
    pub l_surface: f64,
    pub l_total: f64,
}

/// Which loss terms contribute gradients; forward values are always all
/// computed. Used by tests to verify term separability.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub rgb: bool,
    pub reproj: bool,
    pub samp: bool,
}

impl Default for LossTerms {
    fn default() -> LossTerms {
        LossTerms {
            rgb: true,
            reproj: true,
            samp: true,
        }
    }
}

/// How per-ray sample distances are chosen for a batch.
enum BatchSampling<'a> {
    /// Stream keyed by (seed, ray counter) — normal training.
    Stream { base: u64 },
    /// Frozen distances and mixture targets per ray — makes the loss a
    /// deterministic, differentiable function of the parameters so finite
    /// differences apply (the target is stop-grad during training anyway).
    Fixed(&'a FrozenBatch),
}

/// Per-ray sample sets and PrSOM target mixtures captured from one
/// stochastic batch.
pub struct FrozenBatch {
    pub samples: Vec<crate::prsamp::SampleSet>,
    pub targets: Vec<GaussianMixture1D>,
    /// Probe features are stop-grad inputs to the mixture head, so a frozen
    /// re-run must hold them constant as well.
    pub probe_feats: Vec<Vec<Vec<f64>>>,
}

/// One training batch against a single source frame.
///
/// All rays are cast from source-frame pixels, expressed in the input-camera
/// frame (frame 0) where the feature grid lives.
struct BatchPlan {
    source_frame: usize,
    pixels: Vec<(f64, f64)>,
}

fn plan_batch(seq: &Sequence, cfg: &TrainConfig, epoch: usize, step: usize) -> BatchPlan {
    let counter = (epoch * cfg.steps_per_epoch + step) as u64;
    let mut frame_rng = stream_rng(cfg.seed, DOM_FRAME, counter);
    let source_frame = frame_rng.gen_range(1..seq.images.len());
    let mut pix_rng = stream_rng(cfg.seed, DOM_PIXELS, counter);
    let k = &seq.intrinsics;
    let pixels = (0..cfg.rays_per_batch)
        .map(|_| {
            (
                pix_rng.gen_range(0..k.width) as f64,
                pix_rng.gen_range(0..k.height) as f64,
            )
        })
        .collect();
    BatchPlan {
        source_frame,
        pixels,
    }
}

struct RayOutcome {
    fwd: RayForward,
    gt_color: [f64; 3],
    target_mixture: GaussianMixture1D,
}

fn forward_ray(
    state: &ModelState,
    grid: &FeatureGrid,
    seq: &Sequence,
    plan: &BatchPlan,
    cfg: &TrainConfig,
    sampling: &BatchSampling,
    ray_counter: u64,
    idx: usize,
) -> Result<RayOutcome> {
    let rcfg = cfg.render_config();
    let k = &seq.intrinsics;
    let pixel = plan.pixels[idx];
    let pose_src = &seq.poses[plan.source_frame];
    let pose_input = &seq.poses[0];
    // world ray through the source pixel, re-expressed in the input frame
    let world = ray_for_pixel(k, pose_src, pixel)?;
    let inv = pose_input.inverse();
    let ray = Ray {
        origin: inv.transform_point(&world.origin),
        direction: inv.transform_dir(&world.direction),
    };
    let fwd = match sampling {
        BatchSampling::Stream { base } => {
            let mut rng = stream_rng(cfg.seed, DOM_RAY, base + ray_counter);
            render_ray(&state.field, &state.gauss, grid, &ray, &rcfg, SampleSource::Draw(&mut rng))?
        }
        BatchSampling::Fixed(frozen) => crate::render::render_ray_frozen_probe(
            &state.field,
            &state.gauss,
            grid,
            &ray,
            &rcfg,
            &frozen.samples[idx],
            &frozen.probe_feats[idx],
        )?,
    };
    let target_mixture = match sampling {
        BatchSampling::Stream { .. } => {
            prsom_update(&fwd.mixture_eval.mixture, &fwd.samples, &fwd.render.alphas)
        }
        BatchSampling::Fixed(frozen) => frozen.targets[idx].clone(),
    };
    let px = pixel.0 as usize;
    let py = pixel.1 as usize;
    let gt_color = seq.images[plan.source_frame].pixel(px, py);
    Ok(RayOutcome {
        fwd,
        gt_color,
        target_mixture,
    })
}

pub struct BatchGrads {
    pub encoder: EncoderGrad,
    pub field: FieldGrad,
    pub gauss: GaussGrad,
}

impl BatchGrads {
    pub fn zeros_like(state: &ModelState) -> BatchGrads {
        BatchGrads {
            encoder: EncoderGrad::zeros_like(&state.encoder),
            field: FieldGrad::zeros_like(&state.field),
            gauss: GaussGrad::zeros_like(&state.gauss),
        }
    }

    pub fn write_grads(&self, out: &mut Vec<f64>) {
        self.encoder.write_grads(out);
        self.field.write_grads(out);
        self.gauss.write_grads(out);
    }
}

fn run_batch(
    state: &ModelState,
    seq: &Sequence,
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
    sampling: BatchSampling,
    terms: LossTerms,
) -> Result<(BatchLosses, BatchGrads)> {
    let plan = plan_batch(seq, cfg, epoch, step);
    let ell = cfg.rays_per_batch;
    let (grid, enc_cache) = encode_with_cache(&state.encoder, &seq.images[0], &seq.intrinsics)?;
    let ray_base = ((epoch * cfg.steps_per_epoch + step) * ell) as u64;

    // phase 1: forward all rays (fixed-size chunks, order-stable)
    let outcomes: Vec<Result<RayOutcome>> = (0..ell)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .flat_map_iter(|chunk| {
            chunk
                .iter()
                .map(|&i| {
                    forward_ray(state, &grid, seq, &plan, cfg, &sampling, ray_base, i)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let outcomes: Vec<RayOutcome> = outcomes.into_iter().collect::<Result<_>>()?;

    // losses
    let pred_colors: Vec<[f64; 3]> = outcomes.iter().map(|o| o.fwd.render.color).collect();
    let gt_colors: Vec<[f64; 3]> = outcomes.iter().map(|o| o.gt_color).collect();
    let l_rgb = rgb_loss(&pred_colors, &gt_colors)?;

    let reproj_samples: Vec<ReprojSample> = outcomes
        .iter()
        .zip(&plan.pixels)
        .map(|(o, &pixel)| ReprojSample {
            pixel,
            depth: o.fwd.render.depth,
            weight_sum: o.fwd.render.weight_sum,
        })
        .collect();
    let target_frame = plan.source_frame - 1;
    let reproj = reproj_loss(
        &reproj_samples,
        &seq.images[plan.source_frame],
        &seq.images[target_frame],
        &seq.poses[plan.source_frame],
        &seq.poses[target_frame],
        &seq.intrinsics,
    );

    let mut l_gauss = 0.0;
    let mut l_surface = 0.0;
    for o in &outcomes {
        let s = sampling_losses(&o.fwd.mixture_eval.mixture, &o.target_mixture, o.fwd.render.depth);
        l_gauss += cfg.w_gauss * s.l_gauss;
        l_surface += cfg.w_surface * s.l_surface;
    }
    l_gauss /= ell as f64;
    l_surface /= ell as f64;

    let losses = BatchLosses {
        l_rgb,
        l_reproj: reproj.loss,
        l_gauss,
        l_surface,
        l_total: l_rgb + reproj.loss + l_gauss + l_surface,
    };

    // phase 2: backward per ray in fixed chunks, merged in chunk order
    let chunk_grads: Vec<RayGrads> = outcomes
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut acc = RayGrads {
                field: FieldGrad::zeros_like(&state.field),
                gauss: GaussGrad::zeros_like(&state.gauss),
                d_grid: Tensor3::zeros(grid.data.h, grid.data.w, grid.data.c),
            };
            for (li, o) in chunk.iter().enumerate() {
                let i = ci * CHUNK + li;
                let mut d_color = [0.0; 3];
                if terms.rgb {
                    for c in 0..3 {
                        d_color[c] =
                            2.0 * (o.fwd.render.color[c] - o.gt_color[c]) / (3.0 * ell as f64);
                    }
                }
                let mut d_depth = 0.0;
                if terms.reproj {
                    d_depth += reproj.d_depth[i];
                }
                let mut d_means = vec![0.0; cfg.k];
                let mut d_stds = vec![0.0; cfg.k];
                if terms.samp {
                    let g = sampling_loss_grads(
                        &o.fwd.mixture_eval.mixture,
                        &o.target_mixture,
                        o.fwd.render.depth,
                    );
                    for q in 0..cfg.k {
                        d_means[q] = cfg.w_gauss * g.d_means[q] / ell as f64;
                        d_stds[q] = cfg.w_gauss * g.d_stds[q] / ell as f64;
                    }
                    d_depth += cfg.w_surface * g.d_depth / ell as f64;
                }
                crate::render::render_ray_backward(
                    &state.field,
                    &state.gauss,
                    &grid,
                    &o.fwd,
                    &d_color,
                    d_depth,
                    &d_means,
                    &d_stds,
                    &mut acc,
                );
            }
            acc
        })
        .collect();

    let mut grads = BatchGrads::zeros_like(state);
    let mut d_grid = Tensor3::zeros(grid.data.h, grid.data.w, grid.data.c);
    for cg in &chunk_grads {
        grads.field.add_assign(&cg.field);
        grads.gauss.add_assign(&cg.gauss);
        for (a, b) in d_grid.data.iter_mut().zip(&cg.d_grid.data) {
            *a += b;
        }
    }
    encoder_backward(&state.encoder, &enc_cache, &d_grid, &mut grads.encoder);
    Ok((losses, grads))
}

/// Total loss + full-parameter gradients for one batch; exposed for the
/// gradient test suite.
pub fn total_loss(
    state: &ModelState,
    seq: &Sequence,
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
    terms: LossTerms,
) -> Result<(BatchLosses, BatchGrads)> {
    run_batch(state, seq, cfg, epoch, step, BatchSampling::Stream { base: 0 }, terms)
}

/// Same batch but with frozen per-ray sample distances and mixture targets,
/// making the loss a deterministic function of the parameters
/// (finite-difference oracle).
pub fn total_loss_frozen(
    state: &ModelState,
    seq: &Sequence,
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
    frozen: &FrozenBatch,
    terms: LossTerms,
) -> Result<(BatchLosses, BatchGrads)> {
    run_batch(state, seq, cfg, epoch, step, BatchSampling::Fixed(frozen), terms)
}

/// Capture the sample sets and targets one training batch would use, so a
/// frozen re-run reproduces the stochastic batch exactly.
pub fn freeze_batch(
    state: &ModelState,
    seq: &Sequence,
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<FrozenBatch> {
    let plan = plan_batch(seq, cfg, epoch, step);
    let (grid, _) = encode_with_cache(&state.encoder, &seq.images[0], &seq.intrinsics)?;
    let ray_base = ((epoch * cfg.steps_per_epoch + step) * cfg.rays_per_batch) as u64;
    let mut samples = Vec::with_capacity(cfg.rays_per_batch);
    let mut targets = Vec::with_capacity(cfg.rays_per_batch);
    let mut probe_feats = Vec::with_capacity(cfg.rays_per_batch);
    for i in 0..cfg.rays_per_batch {
        let sampling = BatchSampling::Stream { base: 0 };
        let o = forward_ray(state, &grid, seq, &plan, cfg, &sampling, ray_base, i)?;
        samples.push(o.fwd.samples);
        targets.push(o.target_mixture);
        probe_feats.push(o.fwd.probe_feats);
    }
    Ok(FrozenBatch {
        samples,
        targets,
        probe_feats,
    })
}

/// One CSV row per step: `epoch,step,l_rgb,l_reproj,l_gauss,l_surface,l_total,lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossLogRow {
    pub epoch: usize,
    pub step: usize,
    pub losses: BatchLosses,
    pub lr: f64,
}

impl LossLogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.losses.l_rgb,
            self.losses.l_reproj,
            self.losses.l_gauss,
            self.losses.l_surface,
            self.losses.l_total,
            self.lr
        )
    }
}

/// Called after every completed epoch (checkpointing hook).
pub type EpochCallback<'a> = dyn FnMut(&ModelState) -> Result<()> + 'a;

/// Run training for `cfg.epochs` epochs starting from `state.epoch`.
/// Learning rate decays by gamma each epoch; aborts on a non-finite loss.
pub fn train(
    state: &mut ModelState,
    seq: &Sequence,
    cfg: &TrainConfig,
    mut on_epoch: Option<&mut EpochCallback>,
) -> Result<Vec<LossLogRow>> {
    cfg.validate()?;
    let mut log = Vec::new();
    let mut flat = Vec::with_capacity(state.num_params());
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        state.adam.lr = cfg.lr * cfg.gamma.powi(epoch as i32);
        for step in 0..cfg.steps_per_epoch {
            let (losses, grads) = total_loss(state, seq, cfg, epoch, step, LossTerms::default())?;
            if !losses.l_total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    source_frame: plan_batch(seq, cfg, epoch, step).source_frame,
                });
            }
            flat.clear();
            state.write_params(&mut flat);
            let mut gflat = Vec::with_capacity(flat.len());
            grads.write_grads(&mut gflat);
            state.adam.step(&mut flat, &gflat);
            state.read_params(&mut flat.iter().copied());
            log.push(LossLogRow {
                epoch,
                step,
                losses,
                lr: state.adam.lr,
            });
        }
        state.epoch += 1;
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(state)?;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SE3Pose;
    use crate::nn::fd;
    use crate::scenegen::{self, ScenePrimitive, SceneSdf, SequenceSpec};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    #[test]
    fn rgb_loss_examples() {
        let gt = vec![[0.2, 0.4, 0.6], [0.1, 0.1, 0.1]];
        assert_eq!(rgb_loss(&gt, &gt).unwrap(), 0.0);
        let off: Vec<[f64; 3]> = gt.iter().map(|p| [p[0] + 0.1, p[1] + 0.1, p[2] + 0.1]).collect();
        assert_relative_eq!(rgb_loss(&off, &gt).unwrap(), 0.01, epsilon = 1e-15);
        assert_relative_eq!(
            rgb_loss(&[[1.0, 0.0, 0.0]], &[[0.0, 0.0, 0.0]]).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-15
        );
        assert!(rgb_loss(&gt, &gt[..1]).is_err());
    }

    /// Flat-fronted boxes with alternating albedos: a scene where the
    /// photometric loss has an exact zero at ground-truth depth, because a
    /// lateral camera shift of an integer pixel count lands every warp on a
    /// pixel center.
    fn checker_wall_scene() -> (SceneSdf, Intrinsics) {
        let mut prims = Vec::new();
        let z = 4.0;
        for ix in -4i64..=4 {
            for iy in -3i64..=3 {
                let albedo = if (ix + iy).rem_euclid(2) == 0 {
                    [0.85, 0.2, 0.15]
                } else {
                    [0.1, 0.55, 0.8]
                };
                prims.push(ScenePrimitive::Box {
                    center: [ix as f64 * 0.8, iy as f64 * 0.8, z + 0.4],
                    half_extents: [0.4, 0.4, 0.4],
                    albedo,
                });
            }
        }
        let scene = SceneSdf {
            primitives: prims,
            background: [0.0, 0.0, 0.0],
            texture_amplitude: 0.0,
        };
        let k = Intrinsics {
            fx: 80.0,
            fy: 80.0,
            cx: 32.0,
            cy: 24.0,
            width: 64,
            height: 48,
        };
        (scene, k)
    }

    /// Source/target frame pair with an exact-integer-pixel lateral shift:
    /// baseline b chosen so fx*b/z is a whole number of pixels.
    fn checker_pair() -> (SceneSdf, Intrinsics, [ImageBuf; 2], [SE3Pose; 2], crate::img::DepthMap) {
        let (scene, k) = checker_wall_scene();
        let z = 4.0;
        let shift_px = 2.0;
        let b = shift_px * z / k.fx;
        let pose_tgt = SE3Pose::identity();
        let pose_src = SE3Pose::new(
            nalgebra::Matrix3::identity(),
            Vector3::new(b, 0.0, 0.0),
        );
        let (img_tgt, _) = scene.render_gt(&k, &pose_tgt);
        let (img_src, depth_src) = scene.render_gt(&k, &pose_src);
        (scene, k, [img_src, img_tgt], [pose_src, pose_tgt], depth_src)
    }

    #[test]
    fn reproj_zero_at_ground_truth_depth() {
        let (_, k, [img_src, img_tgt], [pose_src, pose_tgt], depth_src) = checker_pair();
        let mut samples = Vec::new();
        for py in (2..k.height - 2).step_by(3) {
            for px in (2..k.width - 2).step_by(3) {
                let d = depth_src.get(px, py);
                if d > 0.0 {
                    samples.push(ReprojSample {
                        pixel: (px as f64, py as f64),
                        depth: d,
                        weight_sum: 1.0,
                    });
                }
            }
        }
        assert!(samples.len() > 100);
        let r = reproj_loss(&samples, &img_src, &img_tgt, &pose_src, &pose_tgt, &k);
        assert!(!r.all_masked);
        assert!(r.loss <= 1e-3, "loss at gt depth: {}", r.loss);

        // +10% depth error moves warps off pixel centers: strictly worse
        let perturbed: Vec<ReprojSample> = samples
            .iter()
            .map(|s| ReprojSample {
                depth: s.depth * 1.1,
                ..*s
            })
            .collect();
        let r2 = reproj_loss(&perturbed, &img_src, &img_tgt, &pose_src, &pose_tgt, &k);
        assert!(r2.loss > r.loss + 1e-4, "{} !> {}", r2.loss, r.loss);
    }

    #[test]
    fn reproj_identity_pose_is_plain_l1() {
        let (_, k, [img_src, img_tgt], [pose_src, _], _) = checker_pair();
        let samples = vec![
            ReprojSample {
                pixel: (10.0, 10.0),
                depth: 3.0,
                weight_sum: 1.0,
            },
            ReprojSample {
                pixel: (40.0, 30.0),
                depth: 7.0,
                weight_sum: 1.0,
            },
        ];
        // same pose for source and target: warp is the identity for any depth
        let r = reproj_loss(&samples, &img_src, &img_tgt, &pose_src, &pose_src, &k);
        let mut want = 0.0;
        for s in &samples {
            let a = img_src.sample_bilinear(s.pixel.0, s.pixel.1);
            let b = img_tgt.sample_bilinear(s.pixel.0, s.pixel.1);
            want += (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() / 3.0;
        }
        want /= samples.len() as f64;
        assert_relative_eq!(r.loss, want, epsilon = 1e-12);
        assert_eq!(r.used, 2);
    }

    #[test]
    fn reproj_masks_empty_rays_and_invalid_warps() {
        let (_, k, [img_src, img_tgt], [pose_src, pose_tgt], _) = checker_pair();
        let samples = vec![
            ReprojSample {
                pixel: (10.0, 10.0),
                depth: 4.0,
                weight_sum: 0.3, // empty ray
            },
            ReprojSample {
                pixel: (1.0, 24.0),
                depth: 0.05, // warps far out of bounds
                weight_sum: 1.0,
            },
        ];
        let r = reproj_loss(&samples, &img_src, &img_tgt, &pose_src, &pose_tgt, &k);
        assert!(r.all_masked);
        assert_eq!(r.loss, 0.0);
        assert!(r.d_depth.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn reproj_depth_gradient_matches_finite_differences() {
        let (_, k, [img_src, img_tgt], [pose_src, pose_tgt], depth_src) = checker_pair();
        let mut samples = Vec::new();
        for &(px, py) in &[(9usize, 9usize), (20, 15), (33, 30), (45, 20)] {
            let d = depth_src.get(px, py);
            // offset from gt so the loss sits on a smooth (non-kink) region
            samples.push(ReprojSample {
                pixel: (px as f64, py as f64),
                depth: d * 1.03,
                weight_sum: 1.0,
            });
        }
        let r = reproj_loss(&samples, &img_src, &img_tgt, &pose_src, &pose_tgt, &k);
        let h = 1e-7;
        for i in 0..samples.len() {
            let mut probe = samples.clone();
            probe[i].depth += h;
            let fp = reproj_loss(&probe, &img_src, &img_tgt, &pose_src, &pose_tgt, &k).loss;
            probe[i].depth = samples[i].depth - h;
            let fm = reproj_loss(&probe, &img_src, &img_tgt, &pose_src, &pose_tgt, &k).loss;
            let num = (fp - fm) / (2.0 * h);
            assert!(
                fd::rel_err(r.d_depth[i], num) < 1e-4,
                "sample {i}: {} vs {num}",
                r.d_depth[i]
            );
        }
    }

    fn tiny_sequence(dir: &std::path::Path) -> Sequence {
        let scene = scenegen::default_scene(3);
        let k = Intrinsics {
            fx: 40.0,
            fy: 40.0,
            cx: 16.0,
            cy: 12.0,
            width: 32,
            height: 24,
        };
        let spec = SequenceSpec {
            camera: k,
            trajectory: scenegen::default_trajectory(4, 0.4, 3),
        };
        scenegen::generate_sequence(&scene, &spec, 3, dir).unwrap();
        Sequence::load(dir).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            rays_per_batch: 24,
            steps_per_epoch: 2,
            lr: 1e-3,
            gamma: 0.95,
            seed: 11,
            k: 4,
            m: 4,
            t_near: 0.2,
            t_far: 22.0,
            levels_pos: 4,
            levels_dir: 2,
            hidden_width: 16,
            hidden_layers: 2,
            gauss_hidden_width: 16,
            gauss_hidden_layers: 2,
            channels: 4,
            grid_size: 16,
            fov_margin_deg: 30.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_additivity_holds() {
        let dir = tempfile::tempdir().unwrap();
        let seq = tiny_sequence(dir.path());
        let cfg = tiny_config();
        let state = ModelState::init(&cfg);
        let frozen = freeze_batch(&state, &seq, &cfg, 0, 0).unwrap();
        let (losses, _) =
            total_loss_frozen(&state, &seq, &cfg, 0, 0, &frozen, LossTerms::default()).unwrap();
        assert_eq!(
            losses.l_total,
            losses.l_rgb + losses.l_reproj + losses.l_gauss + losses.l_surface
        );
    }

    #[test]
    fn term_separability_of_gradients() {
        let dir = tempfile::tempdir().unwrap();
        let seq = tiny_sequence(dir.path());
        let cfg = tiny_config();
        let state = ModelState::init(&cfg);
        let frozen = freeze_batch(&state, &seq, &cfg, 0, 0).unwrap();
        let rgb_only = LossTerms {
            rgb: true,
            reproj: false,
            samp: false,
        };
        let (_, g1) =
            total_loss_frozen(&state, &seq, &cfg, 0, 0, &frozen, rgb_only).unwrap();
        let all_but_samp = LossTerms {
            rgb: true,
            reproj: true,
            samp: false,
        };
        let (_, _g2) =
            total_loss_frozen(&state, &seq, &cfg, 0, 0, &frozen, all_but_samp).unwrap();
        // adding L_samp back must not change the L_rgb field-gradient entries
        // when the other terms are off
        let (_, g3) = total_loss_frozen(
            &state,
            &seq,
            &cfg,
            0,
            0,
            &frozen,
            LossTerms {
                rgb: true,
                reproj: false,
                samp: true,
            },
        )
        .unwrap();
        let (_, g_samp_only) = total_loss_frozen(
            &state,
            &seq,
            &cfg,
            0,
            0,
            &frozen,
            LossTerms {
                rgb: false,
                reproj: false,
                samp: true,
            },
        )
        .unwrap();
        let mut a = Vec::new();
        g1.write_grads(&mut a);
        let mut b = Vec::new();
        g3.write_grads(&mut b);
        let mut c = Vec::new();
        g_samp_only.write_grads(&mut c);
        for i in 0..a.len() {
            assert_relative_eq!(b[i], a[i] + c[i], epsilon = 1e-12, max_relative = 1e-9);
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let dir = tempfile::tempdir().unwrap();
        let seq = tiny_sequence(dir.path());
        let mut cfg = tiny_config();
        cfg.rays_per_batch = 8;
        let state = ModelState::init(&cfg);
        let frozen = freeze_batch(&state, &seq, &cfg, 0, 0).unwrap();
        let (_, grads) =
            total_loss_frozen(&state, &seq, &cfg, 0, 0, &frozen, LossTerms::default()).unwrap();

        let mut flat = Vec::new();
        state.write_params(&mut flat);
        let mut gflat = Vec::new();
        grads.write_grads(&mut gflat);
        assert_eq!(flat.len(), gflat.len());

        let loss_at = |params: &[f64]| {
            let mut s2 = state.clone();
            s2.read_params(&mut params.iter().copied());
            let (l, _) =
                total_loss_frozen(&s2, &seq, &cfg, 0, 0, &frozen, LossTerms::default()).unwrap();
            l.l_total
        };
        let n = flat.len();
        let h = 1e-5;
        // spread probes over the encoder, field and predictor blocks
        let enc = state.encoder.num_params();
        let fld = state.field.num_params();
        let probes = [
            1usize,
            enc / 2,
            enc - 2,
            enc + fld / 2,
            enc + fld - 2,
            enc + fld + 3,
            n - 2,
        ];
        for &i in &probes {
            let num = fd::central(&flat, i, h, |p| loss_at(p));
            assert!(
                fd::rel_err(gflat[i], num) < 1e-3,
                "param {i}/{n}: {} vs {num}",
                gflat[i]
            );
        }
    }

    #[test]
    fn zero_epochs_leaves_state_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let seq = tiny_sequence(dir.path());
        let mut cfg = tiny_config();
        cfg.epochs = 0;
        let mut state = ModelState::init(&cfg);
        let mut before = Vec::new();
        state.write_params(&mut before);
        let log = train(&mut state, &seq, &cfg, None).unwrap();
        assert!(log.is_empty());
        let mut after = Vec::new();
        state.write_params(&mut after);
        assert_eq!(before, after);
        assert_eq!(state.epoch, 0);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let seq = tiny_sequence(dir.path());
        let cfg = tiny_config();
        let mut s1 = ModelState::init(&cfg);
        let log1 = train(&mut s1, &seq, &cfg, None).unwrap();
        let mut s2 = ModelState::init(&cfg);
        let log2 = train(&mut s2, &seq, &cfg, None).unwrap();
        let mut p1 = Vec::new();
        s1.write_params(&mut p1);
        let mut p2 = Vec::new();
        s2.write_params(&mut p2);
        assert_eq!(p1, p2);
        assert_eq!(log1, log2);
    }

    #[test]
    fn training_reduces_loss() {
        let dir = tempfile::tempdir().unwrap();
        let seq = tiny_sequence(dir.path());
        let mut cfg = tiny_config();
        cfg.epochs = 8;
        cfg.rays_per_batch = 64;
        cfg.lr = 3e-3;
        let mut state = ModelState::init(&cfg);
        let log = train(&mut state, &seq, &cfg, None).unwrap();
        let epoch_avg = |e: usize| {
            let rows: Vec<&LossLogRow> = log.iter().filter(|r| r.epoch == e).collect();
            rows.iter().map(|r| r.losses.l_total).sum::<f64>() / rows.len() as f64
        };
        assert!(
            epoch_avg(7) < epoch_avg(0),
            "first {} vs last {}",
            epoch_avg(0),
            epoch_avg(7)
        );
    }
}
