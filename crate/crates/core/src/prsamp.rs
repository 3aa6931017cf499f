//! Probabilistic ray sampling: mixture-guided point draws, the
//! point-to-Gaussian assignment that updates the mixture toward occupied
//! space, and the sampling losses trained against those updated targets.

use rand::Rng;

use crate::field::{GaussianMixture1D, STD_FLOOR};
use crate::nn::normal_draw;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleTag {
    /// Drawn from mixture component i.
    Gaussian(usize),
    /// One of the stratified-uniform exploration points.
    Uniform,
}

/// Sorted sample distances with their provenance. N = k·m + 32.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub distances: Vec<f64>,
    pub tags: Vec<SampleTag>,
}

pub const UNIFORM_COUNT: usize = 32;

/// m draws per Gaussian (clamped into [t_n, t_f]) plus 32 stratified-uniform
/// draws; merged, sorted, exact ties nudged apart by 1e-6 m.
pub fn sample_points(
    mixture: &GaussianMixture1D,
    m: usize,
    t_near: f64,
    t_far: f64,
    rng: &mut impl Rng,
) -> SampleSet {
    let k = mixture.k();
    let n = k * m + UNIFORM_COUNT;
    let mut pts: Vec<(f64, SampleTag)> = Vec::with_capacity(n);
    // headroom at both bounds: delta_1 = d_1 - t_n must stay positive, and
    // tie nudging must not push past t_f
    let lo = t_near + 1e-6;
    let hi = t_far - n as f64 * 1e-6;
    for i in 0..k {
        for _ in 0..m {
            let d = mixture.means[i] + mixture.stds[i] * normal_draw(rng);
            pts.push((d.clamp(lo, hi), SampleTag::Gaussian(i)));
        }
    }
    for u in 0..UNIFORM_COUNT {
        let jitter: f64 = rng.gen();
        let d = t_near + (u as f64 + jitter) / UNIFORM_COUNT as f64 * (t_far - t_near);
        pts.push((d.clamp(lo, hi), SampleTag::Uniform));
    }
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances"));
    for i in 1..pts.len() {
        if pts[i].0 <= pts[i - 1].0 {
            pts[i].0 = pts[i - 1].0 + 1e-6;
        }
    }
    let (distances, tags) = pts.into_iter().unzip();
    SampleSet { distances, tags }
}

/// Point-to-Gaussian responsibilities and the resulting mixture update.
///
/// Each sample point is assigned to components by normalized Gaussian
/// likelihood; the new mean is the responsibility-and-alpha-weighted average
/// of the points, stds the matching weighted deviation (floored). Components
/// whose total weight degenerates keep their previous parameters. Means are
/// re-sorted ascending so the 1D ordering of components is preserved. The
/// result is a pure target: no gradient flows through it.
pub fn prsom_update(
    mixture: &GaussianMixture1D,
    samples: &SampleSet,
    alphas: &[f64],
) -> GaussianMixture1D {
    let k = mixture.k();
    let n = samples.distances.len();
    assert_eq!(alphas.len(), n);
    let mut means = Vec::with_capacity(k);
    let mut stds = Vec::with_capacity(k);
    // log-domain responsibilities keep far-away points from underflowing
    let mut logp = vec![0.0; k * n];
    for (j, &d) in samples.distances.iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for i in 0..k {
            let z = (d - mixture.means[i]) / mixture.stds[i];
            let lp = -mixture.stds[i].ln() - 0.5 * z * z;
            logp[i * n + j] = lp;
            max = max.max(lp);
        }
        let norm: f64 = (0..k).map(|i| (logp[i * n + j] - max).exp()).sum();
        for i in 0..k {
            logp[i * n + j] = (logp[i * n + j] - max).exp() / norm;
        }
    }
    for i in 0..k {
        let resp = &logp[i * n..(i + 1) * n];
        let denom: f64 = resp.iter().zip(alphas).map(|(p, a)| p * a).sum();
        if denom < 1e-8 {
            means.push(mixture.means[i]);
            stds.push(mixture.stds[i]);
            continue;
        }
        let mu: f64 = resp
            .iter()
            .zip(alphas)
            .zip(&samples.distances)
            .map(|((p, a), d)| p * a * d)
            .sum::<f64>()
            / denom;
        let var: f64 = resp
            .iter()
            .zip(alphas)
            .zip(&samples.distances)
            .map(|((p, a), d)| p * a * (d - mu) * (d - mu))
            .sum::<f64>()
            / denom;
        means.push(mu);
        stds.push(var.sqrt().max(STD_FLOOR));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| means[a].partial_cmp(&means[b]).expect("finite means"));
    GaussianMixture1D {
        means: order.iter().map(|&i| means[i]).collect(),
        stds: order.iter().map(|&i| stds[i]).collect(),
    }
}

/// Closed-form KL divergence of 1D normals.
pub fn kl_1d_gauss(mu: f64, s: f64, mu_t: f64, s_t: f64) -> f64 {
    (s_t / s).ln() + (s * s + (mu - mu_t) * (mu - mu_t)) / (2.0 * s_t * s_t) - 0.5
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingLosses {
    pub l_gauss: f64,
    pub l_surface: f64,
    pub l_samp: f64,
}

/// L_gauss = mean KL(G_i ‖ G′_i); L_surface = min_i |μ′_i − D̂|.
/// The target mixture is a constant.
pub fn sampling_losses(
    mixture: &GaussianMixture1D,
    target: &GaussianMixture1D,
    depth: f64,
) -> SamplingLosses {
    let k = mixture.k();
    let l_gauss = (0..k)
        .map(|i| kl_1d_gauss(mixture.means[i], mixture.stds[i], target.means[i], target.stds[i]))
        .sum::<f64>()
        / k as f64;
    let l_surface = surface_gap(target, depth).1;
    SamplingLosses {
        l_gauss,
        l_surface,
        l_samp: l_gauss + l_surface,
    }
}

/// (index of the closest target mean, |μ′_i − D̂|); ties go to the lowest
/// index.
pub fn surface_gap(target: &GaussianMixture1D, depth: f64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &mu) in target.means.iter().enumerate() {
        let gap = (mu - depth).abs();
        if gap < best.1 {
            best = (i, gap);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct SamplingGrads {
    pub d_means: Vec<f64>,
    pub d_stds: Vec<f64>,
    /// dL_surface/dD̂.
    pub d_depth: f64,
}

pub fn sampling_loss_grads(
    mixture: &GaussianMixture1D,
    target: &GaussianMixture1D,
    depth: f64,
) -> SamplingGrads {
    let k = mixture.k();
    let kf = k as f64;
    let mut d_means = Vec::with_capacity(k);
    let mut d_stds = Vec::with_capacity(k);
    for i in 0..k {
        let (mu, s) = (mixture.means[i], mixture.stds[i]);
        let (mu_t, s_t) = (target.means[i], target.stds[i]);
        d_means.push((mu - mu_t) / (s_t * s_t) / kf);
        d_stds.push((-1.0 / s + s / (s_t * s_t)) / kf);
    }
    let (idx, gap) = surface_gap(target, depth);
    let d_depth = if gap == 0.0 {
        0.0
    } else {
        (depth - target.means[idx]).signum()
    };
    SamplingGrads {
        d_means,
        d_stds,
        d_depth,
    }
}
