//! The conditioned radiance field f(·) and the Gaussian-mixture predictor
//! g(·): small dense networks with explicit forward and reverse-mode rules.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    sigmoid, sigmoid_deriv, softplus, softplus_deriv, GradSet, Linear, LinearGrad, Mlp, MlpCache,
    MlpGrad, ParamSet,
};

/// Lower bound on mixture standard deviations, meters. Keeps PrSOM
/// responsibilities finite.
pub const STD_FLOOR: f64 = 0.05;

/// Sinusoidal positional encoding: x followed by
/// (sin(2^l π x_i), cos(2^l π x_i)) for l = 0..L-1, per coordinate.
/// Coordinates are pre-scaled by `scale` (t_f for positions, 1 for
/// directions). Output length 3 + 6L.
pub fn positional_encoding(x: &Vector3<f64>, levels: usize, scale: f64) -> Vec<f64> {
    let xs = [x.x / scale, x.y / scale, x.z / scale];
    let mut out = Vec::with_capacity(3 + 6 * levels);
    out.extend_from_slice(&xs);
    for l in 0..levels {
        let f = (1u64 << l) as f64 * std::f64::consts::PI;
        for xi in xs {
            out.push((f * xi).sin());
            out.push((f * xi).cos());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldShape {
    /// Positional-encoding frequency count for positions.
    pub levels_pos: usize,
    /// Frequency count for view directions.
    pub levels_dir: usize,
    /// Conditioning feature channels.
    pub channels: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl FieldShape {
    pub fn input_dim(&self) -> usize {
        (3 + 6 * self.levels_pos) + (3 + 6 * self.levels_dir) + self.channels
    }
}

/// Trunk MLP with two heads: scalar density (softplus) and RGB color
/// (sigmoid).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub shape: FieldShape,
    pub trunk: Mlp,
    pub head_sigma: Linear,
    pub head_color: Linear,
}

impl FieldParams {
    pub fn init(shape: FieldShape, rng: &mut impl Rng) -> FieldParams {
        let mut dims = vec![shape.input_dim()];
        dims.extend(std::iter::repeat(shape.hidden_width).take(shape.hidden_layers));
        FieldParams {
            shape,
            trunk: Mlp::kaiming(&dims, rng),
            // output heads start at zero: sigma = ln 2, color = mid-gray
            head_sigma: Linear::zeros(shape.hidden_width, 1),
            head_color: Linear::zeros(shape.hidden_width, 3),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FieldEval {
    pub color: [f64; 3],
    pub sigma: f64,
    cache: MlpCache,
    pre_sigma: f64,
    pre_color: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct FieldGrad {
    pub trunk: MlpGrad,
    pub head_sigma: LinearGrad,
    pub head_color: LinearGrad,
}

impl FieldGrad {
    pub fn zeros_like(p: &FieldParams) -> FieldGrad {
        FieldGrad {
            trunk: MlpGrad::zeros_like(&p.trunk),
            head_sigma: LinearGrad::zeros_like(&p.head_sigma),
            head_color: LinearGrad::zeros_like(&p.head_color),
        }
    }

    pub fn add_assign(&mut self, other: &FieldGrad) {
        self.trunk.add_assign(&other.trunk);
        self.head_sigma.add_assign(&other.head_sigma);
        self.head_color.add_assign(&other.head_color);
    }
}

/// Evaluate f at one point. `gx` is the encoded position, `gd` the encoded
/// direction, `feat` the conditioning feature vector.
pub fn field_eval(
    params: &FieldParams,
    gx: &[f64],
    gd: &[f64],
    feat: &[f64],
) -> Result<FieldEval> {
    let expect = params.shape.input_dim();
    let got = gx.len() + gd.len() + feat.len();
    if got != expect {
        return Err(Error::ShapeMismatch(format!(
            "field input dim {got}, params expect {expect}"
        )));
    }
    let mut input = Vec::with_capacity(expect);
    input.extend_from_slice(gx);
    input.extend_from_slice(gd);
    input.extend_from_slice(feat);
    let cache = params.trunk.forward(&input);
    let hidden = params.trunk.output(&cache);
    let mut s = Vec::new();
    params.head_sigma.forward(hidden, &mut s);
    let mut c = Vec::new();
    params.head_color.forward(hidden, &mut c);
    Ok(FieldEval {
        color: [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])],
        sigma: softplus(s[0]),
        cache,
        pre_sigma: s[0],
        pre_color: [c[0], c[1], c[2]],
    })
}

/// Backprop through one field evaluation. Returns dL/d(input) split as
/// (d_gx, d_gd, d_feat).
pub fn field_backward(
    params: &FieldParams,
    eval: &FieldEval,
    d_sigma: f64,
    d_color: &[f64; 3],
    grad: &mut FieldGrad,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hidden = params.trunk.output(&eval.cache);
    let width = hidden.len();

    let ds_pre = [d_sigma * softplus_deriv(eval.pre_sigma)];
    let mut d_hidden_s = vec![0.0; width];
    params
        .head_sigma
        .backward(hidden, &ds_pre, &mut grad.head_sigma, &mut d_hidden_s);

    let dc_pre: Vec<f64> = (0..3)
        .map(|i| d_color[i] * sigmoid_deriv(eval.pre_color[i]))
        .collect();
    let mut d_hidden_c = vec![0.0; width];
    params
        .head_color
        .backward(hidden, &dc_pre, &mut grad.head_color, &mut d_hidden_c);

    for (a, b) in d_hidden_s.iter_mut().zip(&d_hidden_c) {
        *a += b;
    }
    let d_input = params.trunk.backward(&eval.cache, &d_hidden_s, &mut grad.trunk);

    let n_gx = 3 + 6 * params.shape.levels_pos;
    let n_gd = 3 + 6 * params.shape.levels_dir;
    (
        d_input[..n_gx].to_vec(),
        d_input[n_gx..n_gx + n_gd].to_vec(),
        d_input[n_gx + n_gd..].to_vec(),
    )
}

/// k (mean, std) pairs along one ray, sorted by construction where noted.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture1D {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl GaussianMixture1D {
    pub fn k(&self) -> usize {
        self.means.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussPredictorShape {
    pub k: usize,
    pub channels: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl GaussPredictorShape {
    /// Per-point (normalized distance ⊕ feature), flattened in sorted order.
    pub fn input_dim(&self) -> usize {
        self.k * (1 + self.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussPredictorParams {
    pub shape: GaussPredictorShape,
    pub trunk: Mlp,
    /// 2k raw outputs: (raw_mean_i, raw_std_i) pairs.
    pub head: Linear,
}

impl GaussPredictorParams {
    pub fn init(shape: GaussPredictorShape, rng: &mut impl Rng) -> GaussPredictorParams {
        let mut dims = vec![shape.input_dim()];
        dims.extend(std::iter::repeat(shape.hidden_width).take(shape.hidden_layers));
        // Zero head weights keep the initial mixture independent of the
        // features, but the mean-slot biases must differ or every component
        // starts (and, under symmetric gradients, stays) identical. Spread
        // the initial means over the stratum midpoints of [t_n, t_f] by
        // putting the logit of each midpoint fraction in the bias.
        let mut head = Linear::zeros(shape.hidden_width, 2 * shape.k);
        for i in 0..shape.k {
            let frac = (i as f64 + 0.5) / shape.k as f64;
            head.bias[2 * i] = (frac / (1.0 - frac)).ln();
        }
        GaussPredictorParams {
            shape,
            trunk: Mlp::kaiming(&dims, rng),
            head,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussGrad {
    pub trunk: MlpGrad,
    pub head: LinearGrad,
}

impl GaussGrad {
    pub fn zeros_like(p: &GaussPredictorParams) -> GaussGrad {
        GaussGrad {
            trunk: MlpGrad::zeros_like(&p.trunk),
            head: LinearGrad::zeros_like(&p.head),
        }
    }

    pub fn add_assign(&mut self, other: &GaussGrad) {
        self.trunk.add_assign(&other.trunk);
        self.head.add_assign(&other.head);
    }
}

#[derive(Debug, Clone)]
pub struct MixtureEval {
    pub mixture: GaussianMixture1D,
    cache: MlpCache,
    raw: Vec<f64>,
    t_near: f64,
    t_far: f64,
}

/// Predict the mixture from k probe points: sorted distances and their
/// feature vectors. Means are squashed into [t_n, t_f], stds floored.
pub fn predict_mixture(
    params: &GaussPredictorParams,
    distances: &[f64],
    feats: &[Vec<f64>],
    t_near: f64,
    t_far: f64,
) -> Result<MixtureEval> {
    let k = params.shape.k;
    if distances.len() != k || feats.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "expected {k} probe points, got {} distances / {} features",
            distances.len(),
            feats.len()
        )));
    }
    let mut input = Vec::with_capacity(params.shape.input_dim());
    for (d, f) in distances.iter().zip(feats) {
        if f.len() != params.shape.channels {
            return Err(Error::ShapeMismatch(format!(
                "feature has {} channels, predictor expects {}",
                f.len(),
                params.shape.channels
            )));
        }
        input.push((d - t_near) / (t_far - t_near));
        input.extend_from_slice(f);
    }
    let cache = params.trunk.forward(&input);
    let mut raw = Vec::new();
    params.head.forward(params.trunk.output(&cache), &mut raw);
    let mut means = Vec::with_capacity(k);
    let mut stds = Vec::with_capacity(k);
    for i in 0..k {
        means.push(t_near + sigmoid(raw[2 * i]) * (t_far - t_near));
        stds.push(STD_FLOOR + softplus(raw[2 * i + 1]));
    }
    Ok(MixtureEval {
        mixture: GaussianMixture1D { means, stds },
        cache,
        raw,
        t_near,
        t_far,
    })
}

/// Backprop through predict_mixture. Returns dL/d(input) as per-point
/// (d_distance, d_feature) pairs; the distance component is discarded by
/// callers (probe distances are fixed).
pub fn predict_mixture_backward(
    params: &GaussPredictorParams,
    eval: &MixtureEval,
    d_means: &[f64],
    d_stds: &[f64],
    grad: &mut GaussGrad,
) -> Vec<Vec<f64>> {
    let k = params.shape.k;
    let span = eval.t_far - eval.t_near;
    let mut d_raw = vec![0.0; 2 * k];
    for i in 0..k {
        d_raw[2 * i] = d_means[i] * span * sigmoid_deriv(eval.raw[2 * i]);
        d_raw[2 * i + 1] = d_stds[i] * softplus_deriv(eval.raw[2 * i + 1]);
    }
    let hidden = params.trunk.output(&eval.cache);
    let mut d_hidden = vec![0.0; hidden.len()];
    params
        .head
        .backward(hidden, &d_raw, &mut grad.head, &mut d_hidden);
    let d_input = params.trunk.backward(&eval.cache, &d_hidden, &mut grad.trunk);

    let stride = 1 + params.shape.channels;
    (0..k)
        .map(|i| d_input[i * stride + 1..(i + 1) * stride].to_vec())
        .collect()
}

impl ParamSet for FieldParams {
    fn num_params(&self) -> usize {
        self.trunk.num_params() + self.head_sigma.num_params() + self.head_color.num_params()
    }
    fn write_params(&self, out: &mut Vec<f64>) {
        self.trunk.write_params(out);
        self.head_sigma.write_params(out);
        self.head_color.write_params(out);
    }
    fn read_params(&mut self, data: &mut impl Iterator<Item = f64>) {
        self.trunk.read_params(data);
        self.head_sigma.read_params(data);
        self.head_color.read_params(data);
    }
}

impl GradSet for FieldGrad {
    fn write_grads(&self, out: &mut Vec<f64>) {
        self.trunk.write_grads(out);
        self.head_sigma.write_grads(out);
        self.head_color.write_grads(out);
    }
}

impl ParamSet for GaussPredictorParams {
    fn num_params(&self) -> usize {
        self.trunk.num_params() + self.head.num_params()
    }
    fn write_params(&self, out: &mut Vec<f64>) {
        self.trunk.write_params(out);
        self.head.write_params(out);
    }
    fn read_params(&mut self, data: &mut impl Iterator<Item = f64>) {
        self.trunk.read_params(data);
        self.head.read_params(data);
    }
}

impl GradSet for GaussGrad {
    fn write_grads(&self, out: &mut Vec<f64>) {
        self.trunk.write_grads(out);
        self.head.write_grads(out);
    }
}
