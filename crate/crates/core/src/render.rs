//! Volume-rendering quadrature along a ray — transmittance, per-sample
//! weights, composited color and explicit depth — plus the per-ray
//! orchestration that ties the encoder grid, the mixture predictor, the
//! sampler and the field together.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{BilinearTaps, FeatureGrid, Tensor3};
use crate::error::{Error, Result};
use crate::field::{
    field_backward, field_eval, predict_mixture, predict_mixture_backward, FieldEval, FieldGrad,
    FieldParams, GaussGrad, GaussPredictorParams, MixtureEval, positional_encoding,
};
use crate::geometry::Ray;
use crate::prsamp::{sample_points, SampleSet};

/// Sorted sample distances with their field outputs, ready to composite.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub distances: Vec<f64>,
    /// δ_i: gap to the previous sample; δ_1 = d_1 − t_n.
    pub deltas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl RaySamples {
    pub fn new(
        distances: Vec<f64>,
        sigmas: Vec<f64>,
        colors: Vec<[f64; 3]>,
        t_near: f64,
    ) -> Result<RaySamples> {
        if distances.len() != sigmas.len() || distances.len() != colors.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} distances, {} sigmas, {} colors",
                distances.len(),
                sigmas.len(),
                colors.len()
            )));
        }
        let mut prev = t_near;
        let mut deltas = Vec::with_capacity(distances.len());
        for &d in &distances {
            if d <= prev {
                return Err(Error::ShapeMismatch(format!(
                    "sample distances not strictly increasing: {d} after {prev}"
                )));
            }
            deltas.push(d - prev);
            prev = d;
        }
        Ok(RaySamples {
            distances,
            deltas,
            sigmas,
            colors,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RayRender {
    pub color: [f64; 3],
    pub depth: f64,
    pub weights: Vec<f64>,
    pub trans: Vec<f64>,
    pub alphas: Vec<f64>,
    pub weight_sum: f64,
}

/// α_j = 1 − exp(−σ_j δ_j).
pub fn alpha_values(sigmas: &[f64], deltas: &[f64]) -> Vec<f64> {
    sigmas
        .iter()
        .zip(deltas)
        .map(|(s, d)| 1.0 - (-s * d).exp())
        .collect()
}

/// Quadrature along the ray: T_i = exp(−Σ_{j<i} σ_j δ_j),
/// w_i = T_i (1 − exp(−σ_i δ_i)), Ĉ = Σ w_i c_i, D̂ = Σ w_i d_i.
/// Weights are left unnormalized; empty rays composite to ≈0 depth and are
/// masked downstream via weight_sum.
pub fn composite(samples: &RaySamples) -> RayRender {
    let n = samples.distances.len();
    let mut trans = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut t = 1.0;
    for i in 0..n {
        let alpha = 1.0 - (-samples.sigmas[i] * samples.deltas[i]).exp();
        let w = t * alpha;
        trans.push(t);
        alphas.push(alpha);
        weights.push(w);
        for c in 0..3 {
            color[c] += w * samples.colors[i][c];
        }
        depth += w * samples.distances[i];
        t *= 1.0 - alpha;
    }
    let weight_sum = weights.iter().sum();
    RayRender {
        color,
        depth,
        weights,
        trans,
        alphas,
        weight_sum,
    }
}

/// Backprop through composite. Takes dL/dĈ and dL/dD̂, returns
/// (dL/dσ_i, dL/dc_i). Uses ∂w_i/∂σ_i = δ_i T_{i+1} and
/// ∂w_i/∂σ_j = −δ_j w_i for j < i, accumulated with suffix sums.
pub fn composite_backward(
    samples: &RaySamples,
    render: &RayRender,
    d_color: &[f64; 3],
    d_depth: f64,
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = samples.distances.len();
    // dL/dw_i
    let dw: Vec<f64> = (0..n)
        .map(|i| {
            d_color
                .iter()
                .zip(&samples.colors[i])
                .map(|(g, c)| g * c)
                .sum::<f64>()
                + d_depth * samples.distances[i]
        })
        .collect();
    let mut d_sigmas = vec![0.0; n];
    let mut suffix = 0.0;
    for j in (0..n).rev() {
        let t_next = render.trans[j] * (1.0 - render.alphas[j]);
        d_sigmas[j] = samples.deltas[j] * (t_next * dw[j] - suffix);
        suffix += dw[j] * render.weights[j];
    }
    let d_colors: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            [
                d_color[0] * render.weights[i],
                d_color[1] * render.weights[i],
                d_color[2] * render.weights[i],
            ]
        })
        .collect();
    (d_sigmas, d_colors)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub t_near: f64,
    pub t_far: f64,
    /// Mixture components per ray.
    pub k: usize,
    /// Draws per component.
    pub m: usize,
    pub levels_pos: usize,
    pub levels_dir: usize,
}

impl Default for RenderConfig {
    fn default() -> RenderConfig {
        RenderConfig {
            t_near: 0.2,
            t_far: 100.0,
            k: 4,
            m: 8,
            levels_pos: 10,
            levels_dir: 4,
        }
    }
}

/// Where the per-ray sample distances come from: fresh draws, or a frozen
/// set (used to make the loss a deterministic function for gradient checks).
pub enum SampleSource<'a, R: Rng> {
    Draw(&'a mut R),
    Fixed(&'a SampleSet),
}

/// Everything produced by one ray's forward pass, kept for the backward
/// pass: probe features, the mixture, sample points, per-point field
/// evaluations and the composite.
pub struct RayForward {
    pub probe_distances: Vec<f64>,
    pub probe_taps: Vec<Option<BilinearTaps>>,
    pub mixture_eval: MixtureEval,
    pub samples: SampleSet,
    pub point_taps: Vec<Option<BilinearTaps>>,
    pub field_evals: Vec<FieldEval>,
    pub ray_samples: RaySamples,
    pub render: RayRender,
    /// Encoded direction, shared by all points of the ray.
    pub dir_enc: Vec<f64>,
    /// Encoded positions per point.
    pub pos_enc: Vec<Vec<f64>>,
    pub probe_feats: Vec<Vec<f64>>,
    pub point_feats: Vec<Vec<f64>>,
}

/// One ray through the conditioned field. The ray must be expressed in the
/// input-camera frame so feature lookups line up with the encoder grid.
pub fn render_ray<R: Rng>(
    field: &FieldParams,
    gauss: &GaussPredictorParams,
    grid: &FeatureGrid,
    ray: &Ray,
    cfg: &RenderConfig,
    source: SampleSource<R>,
) -> Result<RayForward> {
    render_ray_impl(field, gauss, grid, ray, cfg, source, None)
}

/// `render_ray` with the mixture head's probe features pinned to the given
/// values instead of re-gathered from the grid. Finite-difference checks use
/// this to evaluate the loss under the same stop-gradient semantics as the
/// backward pass: the mixture head reads the grid but is trained as if its
/// input features were constants.
pub fn render_ray_frozen_probe(
    field: &FieldParams,
    gauss: &GaussPredictorParams,
    grid: &FeatureGrid,
    ray: &Ray,
    cfg: &RenderConfig,
    samples: &SampleSet,
    probe_feats: &[Vec<f64>],
) -> Result<RayForward> {
    render_ray_impl::<rand_chacha::ChaCha8Rng>(
        field,
        gauss,
        grid,
        ray,
        cfg,
        SampleSource::Fixed(samples),
        Some(probe_feats),
    )
}

fn render_ray_impl<R: Rng>(
    field: &FieldParams,
    gauss: &GaussPredictorParams,
    grid: &FeatureGrid,
    ray: &Ray,
    cfg: &RenderConfig,
    source: SampleSource<R>,
    probe_override: Option<&[Vec<f64>]>,
) -> Result<RayForward> {
    let k = cfg.k;
    // k probe points at stratum midpoints of [t_n, t_f]
    let probe_distances: Vec<f64> = (0..k)
        .map(|i| cfg.t_near + (i as f64 + 0.5) / k as f64 * (cfg.t_far - cfg.t_near))
        .collect();
    let mut probe_taps = Vec::with_capacity(k);
    let mut probe_feats = Vec::with_capacity(k);
    for (i, &d) in probe_distances.iter().enumerate() {
        let x = ray.origin + ray.direction * d;
        let taps = grid.taps_for_point(&x);
        probe_feats.push(match probe_override {
            Some(f) => f[i].clone(),
            None => match &taps {
                Some(t) => grid.gather(t),
                None => vec![0.0; grid.channels()],
            },
        });
        probe_taps.push(taps);
    }
    let mixture_eval = predict_mixture(gauss, &probe_distances, &probe_feats, cfg.t_near, cfg.t_far)?;

    let samples = match source {
        SampleSource::Draw(rng) => {
            sample_points(&mixture_eval.mixture, cfg.m, cfg.t_near, cfg.t_far, rng)
        }
        SampleSource::Fixed(s) => s.clone(),
    };

    let dir_enc = positional_encoding(&ray.direction, cfg.levels_dir, 1.0);
    let mut point_taps = Vec::with_capacity(samples.distances.len());
    let mut point_feats = Vec::with_capacity(samples.distances.len());
    let mut pos_enc = Vec::with_capacity(samples.distances.len());
    let mut field_evals = Vec::with_capacity(samples.distances.len());
    let mut sigmas = Vec::with_capacity(samples.distances.len());
    let mut colors = Vec::with_capacity(samples.distances.len());
    for &d in &samples.distances {
        let x = ray.origin + ray.direction * d;
        let taps = grid.taps_for_point(&x);
        let feat = match &taps {
            Some(t) => grid.gather(t),
            None => vec![0.0; grid.channels()],
        };
        let gx = positional_encoding(&x, cfg.levels_pos, cfg.t_far);
        let eval = field_eval(field, &gx, &dir_enc, &feat)?;
        sigmas.push(eval.sigma);
        colors.push(eval.color);
        field_evals.push(eval);
        point_taps.push(taps);
        point_feats.push(feat);
        pos_enc.push(gx);
    }
    let ray_samples = RaySamples::new(samples.distances.clone(), sigmas, colors, cfg.t_near)?;
    let render = composite(&ray_samples);
    Ok(RayForward {
        probe_distances,
        probe_taps,
        mixture_eval,
        samples,
        point_taps,
        field_evals,
        ray_samples,
        render,
        dir_enc,
        pos_enc,
        probe_feats,
        point_feats,
    })
}

/// Per-ray parameter gradients plus the grid-shaped feature gradient, to be
/// pushed through the encoder once per batch.
pub struct RayGrads {
    pub field: FieldGrad,
    pub gauss: GaussGrad,
    pub d_grid: Tensor3,
}

/// Backprop one ray given dL/dĈ, dL/dD̂ and dL/d(mixture means, stds).
pub fn render_ray_backward(
    field: &FieldParams,
    gauss: &GaussPredictorParams,
    grid: &FeatureGrid,
    fwd: &RayForward,
    d_color: &[f64; 3],
    d_depth: f64,
    d_means: &[f64],
    d_stds: &[f64],
    grads: &mut RayGrads,
) {
    let (d_sigmas, d_colors) = composite_backward(&fwd.ray_samples, &fwd.render, d_color, d_depth);
    for (i, eval) in fwd.field_evals.iter().enumerate() {
        if d_sigmas[i] == 0.0 && d_colors[i] == [0.0; 3] {
            continue;
        }
        let (_, _, d_feat) = field_backward(field, eval, d_sigmas[i], &d_colors[i], &mut grads.field);
        if let Some(taps) = &fwd.point_taps[i] {
            FeatureGrid::scatter_grad(taps, &d_feat, &mut grads.d_grid);
        }
    }
    // The mixture head's loss updates only the predictor itself: its probe
    // features are read from the grid but treated as constants, so the
    // (often much larger) mixture gradients cannot swamp the shared encoder.
    let _ = predict_mixture_backward(gauss, &fwd.mixture_eval, d_means, d_stds, &mut grads.gauss);
    let _ = grid;
}

/// Convenience for oracle tests and reconstruction: analytic surface depth
/// turned into a near-opaque density spike at the surface.
pub fn oracle_sigmas(distances: &[f64], surface_depth: f64, opacity: f64) -> Vec<f64> {
    distances
        .iter()
        .map(|&d| if d >= surface_depth { opacity } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use crate::encoder::{EncoderParams, EncoderShape};
    use crate::field::{FieldShape, GaussPredictorShape};
    use crate::geometry::Intrinsics;
    use crate::img::ImageBuf;
    use crate::nn::{fd, stream_rng};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn samples_of(dists: &[f64], sigmas: &[f64]) -> RaySamples {
        let colors = vec![[0.2, 0.5, 0.8]; dists.len()];
        RaySamples::new(dists.to_vec(), sigmas.to_vec(), colors, 0.1).unwrap()
    }

    #[test]
    fn empty_space_composites_to_zero() {
        let s = samples_of(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]);
        let r = composite(&s);
        assert_eq!(r.color, [0.0, 0.0, 0.0]);
        assert_eq!(r.depth, 0.0);
        assert_eq!(r.weight_sum, 0.0);
        assert!(r.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn opaque_first_sample_takes_all_weight() {
        let s = samples_of(&[2.0, 3.0, 4.0], &[50.0 / 1.9, 1.0, 1.0]);
        let r = composite(&s);
        assert!(r.weights[0] > 0.999);
        assert_relative_eq!(r.depth, 2.0, epsilon = 1e-2);
        assert!(r.weights[1] < 1e-9 && r.weights[2] < 1e-9);
    }

    #[test]
    fn two_sample_hand_case() {
        // sigma = (1, 2), delta = (0.5, 0.5)
        let s = samples_of(&[0.6, 1.1], &[1.0, 2.0]);
        let r = composite(&s);
        assert_relative_eq!(r.weights[0], 1.0 - (-0.5f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(r.weights[0], 0.39347, epsilon = 1e-5);
        assert_relative_eq!(
            r.weights[1],
            (-0.5f64).exp() * (1.0 - (-1.0f64).exp()),
            epsilon = 1e-12
        );
        assert_relative_eq!(r.weights[1], 0.38340, epsilon = 1e-5);
    }

    #[test]
    fn alpha_examples() {
        let a = alpha_values(&[0.0, 2.0f64.ln() / 0.5, 100.0], &[0.5, 0.5, 1.0]);
        assert_eq!(a[0], 0.0);
        assert_relative_eq!(a[1], 0.5, epsilon = 1e-12);
        assert!(a[2] > 1.0 - 1e-12 && a[2] <= 1.0);
        // monotone in sigma*delta
        let probe = alpha_values(&[0.5, 1.0, 2.0, 4.0], &[1.0; 4]);
        for w in probe.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn weight_sum_equals_one_minus_residual_transmittance() {
        for trial in 0..50 {
            let mut rng = stream_rng(50, 0, trial);
            let n = rng.gen_range(2..40);
            let mut d = 0.1;
            let mut dists = Vec::new();
            for _ in 0..n {
                d += rng.gen_range(0.01..2.0);
                dists.push(d);
            }
            let sigmas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
            let s = samples_of(&dists, &sigmas);
            let r = composite(&s);
            let tau: f64 = sigmas.iter().zip(&s.deltas).map(|(a, b)| a * b).sum();
            let residual = (-tau).exp();
            assert_relative_eq!(r.weight_sum, 1.0 - residual, epsilon = 1e-6);
            assert!(r.weight_sum <= 1.0 + 1e-6);
            for w in r.trans.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
            assert_eq!(r.trans[0], 1.0);
        }
    }

    #[test]
    fn zero_density_insertion_is_invisible() {
        // under the "delta to previous point" convention, an interior
        // zero-density point would steal interval from its successor, so the
        // clean invariants are: (a) appending past the end changes nothing,
        // (b) inserting right after an existing sample changes results by
        // O(eps)
        let mut rng = stream_rng(51, 0, 0);
        for insert_at in 1..4usize {
            let dists = [0.5, 1.3, 2.8, 4.0];
            let sigmas: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..2.0)).collect();
            let colors: Vec<[f64; 3]> = (0..4)
                .map(|_| [rng.gen(), rng.gen(), rng.gen()])
                .collect();
            let base = composite(
                &RaySamples::new(dists.to_vec(), sigmas.clone(), colors.clone(), 0.1).unwrap(),
            );

            let mut d2 = dists.to_vec();
            let mut s2 = sigmas.clone();
            let mut c2 = colors.clone();
            d2.push(9.0);
            s2.push(0.0);
            c2.push([0.9, 0.9, 0.9]);
            let appended = composite(&RaySamples::new(d2, s2, c2, 0.1).unwrap());
            assert_eq!(base.color, appended.color);
            assert_eq!(base.depth, appended.depth);

            let eps = 1e-8;
            let mut d2 = dists.to_vec();
            let mut s2 = sigmas.clone();
            let mut c2 = colors.clone();
            d2.insert(insert_at, dists[insert_at - 1] + eps);
            s2.insert(insert_at, 0.0);
            c2.insert(insert_at, [0.9, 0.9, 0.9]);
            let with_ghost = composite(&RaySamples::new(d2, s2, c2, 0.1).unwrap());
            for c in 0..3 {
                assert_relative_eq!(base.color[c], with_ghost.color[c], epsilon = 1e-6);
            }
            assert_relative_eq!(base.depth, with_ghost.depth, epsilon = 1e-6);
        }
    }

    #[test]
    fn non_monotone_distances_rejected() {
        assert!(RaySamples::new(vec![1.0, 1.0], vec![0.1, 0.1], vec![[0.0; 3]; 2], 0.1).is_err());
        assert!(RaySamples::new(vec![0.05], vec![0.1], vec![[0.0; 3]], 0.1).is_err());
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        for trial in 0..100 {
            let mut rng = stream_rng(52, 0, trial);
            let n = rng.gen_range(2..12);
            let mut d = 0.2;
            let mut dists = Vec::new();
            for _ in 0..n {
                d += rng.gen_range(0.05..1.5);
                dists.push(d);
            }
            let sigmas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..2.0)).collect();
            let colors: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.gen(), rng.gen(), rng.gen()])
                .collect();
            let d_color = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let d_depth = rng.gen_range(-1.0..1.0);

            let s = RaySamples::new(dists.clone(), sigmas.clone(), colors.clone(), 0.1).unwrap();
            let r = composite(&s);
            let (d_sigmas, d_colors) = composite_backward(&s, &r, &d_color, d_depth);

            let loss = |sig: &[f64], col: &[[f64; 3]]| {
                let s = RaySamples::new(dists.clone(), sig.to_vec(), col.to_vec(), 0.1).unwrap();
                let r = composite(&s);
                r.color.iter().zip(&d_color).map(|(a, b)| a * b).sum::<f64>() + d_depth * r.depth
            };
            let h = 1e-6;
            for i in 0..n {
                let num = fd::central(&sigmas, i, h, |sg| loss(sg, &colors));
                assert!(
                    fd::rel_err(d_sigmas[i], num) < 1e-4,
                    "trial {trial} sigma {i}: {} vs {num}",
                    d_sigmas[i]
                );
                for c in 0..3 {
                    let mut c2 = colors.clone();
                    c2[i][c] += h;
                    let fp = loss(&sigmas, &c2);
                    c2[i][c] = colors[i][c] - h;
                    let fm = loss(&sigmas, &c2);
                    assert!(fd::rel_err(d_colors[i][c], (fp - fm) / (2.0 * h)) < 1e-4);
                }
            }
        }
    }

    fn ray_fixture() -> (FieldParams, GaussPredictorParams, FeatureGrid, Ray, RenderConfig) {
        let mut rng = stream_rng(53, 0, 0);
        let cfg = RenderConfig {
            t_near: 0.2,
            t_far: 20.0,
            k: 4,
            m: 8,
            levels_pos: 4,
            levels_dir: 2,
        };
        let channels = 4;
        let field = {
            let mut f = FieldParams::init(
                FieldShape {
                    levels_pos: cfg.levels_pos,
                    levels_dir: cfg.levels_dir,
                    channels,
                    hidden_width: 16,
                    hidden_layers: 2,
                },
                &mut rng,
            );
            f.head_sigma = crate::nn::Linear::kaiming(16, 1, &mut rng);
            f.head_color = crate::nn::Linear::kaiming(16, 3, &mut rng);
            f
        };
        let gauss = {
            let mut g = GaussPredictorParams::init(
                GaussPredictorShape {
                    k: cfg.k,
                    channels,
                    hidden_width: 16,
                    hidden_layers: 2,
                },
                &mut rng,
            );
            g.head = crate::nn::Linear::kaiming(16, 2 * cfg.k, &mut rng);
            g
        };
        let k = Intrinsics {
            fx: 30.0,
            fy: 30.0,
            cx: 16.0,
            cy: 12.0,
            width: 32,
            height: 24,
        };
        let enc = EncoderParams::init(
            EncoderShape {
                channels,
                grid_h: 16,
                grid_w: 16,
                fov_margin: 30.0f64.to_radians(),
            },
            &mut rng,
        );
        let mut img = ImageBuf::new(k.width, k.height);
        for v in &mut img.data {
            *v = rng.gen_range(0.0..1.0);
        }
        let grid = crate::encoder::encode(&enc, &img, &k).unwrap();
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::new(0.05, -0.02, 1.0).normalize(),
        };
        (field, gauss, grid, ray, cfg)
    }

    #[test]
    fn one_ray_evaluates_field_exactly_n_times() {
        let (field, gauss, grid, ray, cfg) = ray_fixture();
        let mut rng = stream_rng(54, 0, 0);
        let fwd = render_ray(
            &field,
            &gauss,
            &grid,
            &ray,
            &cfg,
            SampleSource::Draw(&mut rng),
        )
        .unwrap();
        assert_eq!(fwd.field_evals.len(), 64);
        assert_eq!(fwd.samples.distances.len(), 4 * 8 + 32);
    }

    #[test]
    fn render_ray_is_deterministic_per_stream() {
        let (field, gauss, grid, ray, cfg) = ray_fixture();
        let a = render_ray(
            &field,
            &gauss,
            &grid,
            &ray,
            &cfg,
            SampleSource::Draw(&mut stream_rng(55, 1, 9)),
        )
        .unwrap();
        let b = render_ray(
            &field,
            &gauss,
            &grid,
            &ray,
            &cfg,
            SampleSource::Draw(&mut stream_rng(55, 1, 9)),
        )
        .unwrap();
        assert_eq!(a.render.color, b.render.color);
        assert_eq!(a.render.depth, b.render.depth);
        assert_eq!(a.samples.distances, b.samples.distances);
    }

    #[test]
    fn oracle_density_spike_recovers_depth() {
        let (field, gauss, grid, ray, cfg) = ray_fixture();
        let mut rng = stream_rng(56, 0, 0);
        let fwd = render_ray(
            &field,
            &gauss,
            &grid,
            &ray,
            &cfg,
            SampleSource::Draw(&mut rng),
        )
        .unwrap();
        let surface = 7.3;
        let sigmas = oracle_sigmas(&fwd.samples.distances, surface, 1e4);
        let colors = vec![[1.0, 0.0, 0.0]; sigmas.len()];
        let s = RaySamples::new(fwd.samples.distances.clone(), sigmas, colors, cfg.t_near).unwrap();
        let r = composite(&s);
        // depth lands on the first sample at/after the surface
        let spacing = s
            .distances
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0f64, f64::max);
        assert!((r.depth - surface).abs() <= spacing, "depth {} vs {surface}", r.depth);
    }

    #[test]
    fn ray_backward_matches_finite_differences() {
        let (field, gauss, grid, ray, cfg) = ray_fixture();
        let mut rng = stream_rng(57, 0, 0);
        let fwd = render_ray(
            &field,
            &gauss,
            &grid,
            &ray,
            &cfg,
            SampleSource::Draw(&mut rng),
        )
        .unwrap();
        let frozen = fwd.samples.clone();
        let d_color = [0.4, -0.7, 0.2];
        let d_depth = 0.3;
        let d_means = [0.5, -0.2, 0.1, 0.9];
        let d_stds = [-0.3, 0.6, 0.2, -0.8];
        let mut grads = RayGrads {
            field: FieldGrad::zeros_like(&field),
            gauss: GaussGrad::zeros_like(&gauss),
            d_grid: Tensor3::zeros(grid.data.h, grid.data.w, grid.data.c),
        };
        render_ray_backward(
            &field, &gauss, &grid, &fwd, &d_color, d_depth, &d_means, &d_stds, &mut grads,
        );

        // frozen probe features mirror the stop-gradient on the mixture head
        let frozen_probe = fwd.probe_feats.clone();
        let loss = |f: &FieldParams, g: &GaussPredictorParams, gr: &FeatureGrid| {
            let fwd =
                render_ray_frozen_probe(f, g, gr, &ray, &cfg, &frozen, &frozen_probe).unwrap();
            fwd.render.color.iter().zip(&d_color).map(|(a, b)| a * b).sum::<f64>()
                + d_depth * fwd.render.depth
                + fwd.mixture_eval.mixture.means.iter().zip(&d_means).map(|(a, b)| a * b).sum::<f64>()
                + fwd.mixture_eval.mixture.stds.iter().zip(&d_stds).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        use crate::nn::{GradSet, ParamSet};
        // field parameters
        let mut flat = Vec::new();
        field.write_params(&mut flat);
        let mut gflat = Vec::new();
        grads.field.write_grads(&mut gflat);
        let nf = flat.len();
        for &i in &[0usize, nf / 2, nf - 3] {
            let num = fd::central(&flat, i, h, |fs| {
                let mut f2 = field.clone();
                f2.read_params(&mut fs.iter().copied());
                loss(&f2, &gauss, &grid)
            });
            assert!(fd::rel_err(gflat[i], num) < 1e-3, "field {i}: {} vs {num}", gflat[i]);
        }
        // predictor parameters
        let mut flat = Vec::new();
        gauss.write_params(&mut flat);
        let mut gflat = Vec::new();
        grads.gauss.write_grads(&mut gflat);
        let ng = flat.len();
        for &i in &[0usize, ng / 2, ng - 3] {
            let num = fd::central(&flat, i, h, |fs| {
                let mut g2 = gauss.clone();
                g2.read_params(&mut fs.iter().copied());
                loss(&field, &g2, &grid)
            });
            assert!(fd::rel_err(gflat[i], num) < 1e-3, "gauss {i}: {} vs {num}", gflat[i]);
        }
        // grid features: check the strongest-gradient entries
        let mut idx: Vec<usize> = (0..grads.d_grid.data.len()).collect();
        idx.sort_by(|&a, &b| {
            grads.d_grid.data[b]
                .abs()
                .partial_cmp(&grads.d_grid.data[a].abs())
                .unwrap()
        });
        for &i in idx.iter().take(5) {
            let num = fd::central(&grid.data.data.clone(), i, h, |gs| {
                let g2 = FeatureGrid {
                    data: Tensor3 {
                        data: gs.to_vec(),
                        ..grid.data.clone()
                    },
                    fov: grid.fov,
                };
                loss(&field, &gauss, &g2)
            });
            assert!(
                fd::rel_err(grads.d_grid.data[i], num) < 1e-3,
                "grid {i}: {} vs {num}",
                grads.d_grid.data[i]
            );
        }
    }
}
