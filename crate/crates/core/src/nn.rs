//! Dense layers, activations and the Adam optimizer for the fixed training
//! pipeline. Backward passes are hand-derived; there is no general autodiff
//! graph.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub fn relu_deriv(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn sigmoid_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), overflow-safe.
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// d softplus / dx = sigmoid(x).
#[inline]
pub fn softplus_deriv(x: f64) -> f64 {
    sigmoid(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major out_dim x in_dim.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Kaiming-style uniform fan-in init.
    pub fn kaiming(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Linear {
        let bound = (6.0 / in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Linear {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Linear {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim);
        out.clear();
        out.reserve(self.out_dim);
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(acc);
        }
    }

    /// Accumulates parameter gradients into `grad` and writes dL/dx into `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut LinearGrad, dx: &mut [f64]) {
        debug_assert_eq!(dy.len(), self.out_dim);
        debug_assert_eq!(dx.len(), self.in_dim);
        dx.fill(0.0);
        for o in 0..self.out_dim {
            let g = dy[o];
            grad.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearGrad {
    pub fn zeros_like(l: &Linear) -> LinearGrad {
        LinearGrad {
            weight: vec![0.0; l.weight.len()],
            bias: vec![0.0; l.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &LinearGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

/// ReLU MLP trunk: hidden layers all ReLU, no activation on the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Pre-activations and post-activations per layer, for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub input: Vec<f64>,
    /// Pre-activation output of every layer.
    pub pre: Vec<Vec<f64>>,
    /// Post-activation output of every layer (last layer: identical to pre).
    pub post: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub layers: Vec<LinearGrad>,
}

impl MlpGrad {
    pub fn zeros_like(mlp: &Mlp) -> MlpGrad {
        MlpGrad {
            layers: mlp.layers.iter().map(LinearGrad::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }
}

impl Mlp {
    /// dims = [in, h1, ..., out]; final layer linear.
    pub fn kaiming(dims: &[usize], rng: &mut impl Rng) -> Mlp {
        let layers = dims
            .windows(2)
            .map(|w| Linear::kaiming(w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, x: &[f64]) -> MlpCache {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let n = self.layers.len();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut y = Vec::new();
            layer.forward(&cur, &mut y);
            pre.push(y.clone());
            if li + 1 < n {
                for v in &mut y {
                    *v = relu(*v);
                }
            }
            post.push(y.clone());
            cur = y;
        }
        MlpCache {
            input: x.to_vec(),
            pre,
            post,
        }
    }

    pub fn output<'a>(&self, cache: &'a MlpCache) -> &'a [f64] {
        cache.post.last().expect("mlp has layers")
    }

    /// Backprop from dL/d(output); accumulates into `grad`, returns dL/d(input).
    pub fn backward(&self, cache: &MlpCache, dy_out: &[f64], grad: &mut MlpGrad) -> Vec<f64> {
        let n = self.layers.len();
        let mut dy = dy_out.to_vec();
        for li in (0..n).rev() {
            if li + 1 < n {
                // undo ReLU of this layer's output
                for (d, p) in dy.iter_mut().zip(&cache.pre[li]) {
                    *d *= relu_deriv(*p);
                }
            }
            let x = if li == 0 {
                &cache.input
            } else {
                &cache.post[li - 1]
            };
            let mut dx = vec![0.0; self.layers[li].in_dim];
            self.layers[li].backward(x, &dy, &mut grad.layers[li], &mut dx);
            dy = dx;
        }
        dy
    }
}

/// Flat parameter access shared by the optimizer and the checkpoint codec.
pub trait ParamSet {
    fn num_params(&self) -> usize;
    fn write_params(&self, out: &mut Vec<f64>);
    fn read_params(&mut self, data: &mut impl Iterator<Item = f64>);
}

impl ParamSet for Linear {
    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
    }
    fn read_params(&mut self, data: &mut impl Iterator<Item = f64>) {
        for w in &mut self.weight {
            *w = data.next().expect("parameter payload too short");
        }
        for b in &mut self.bias {
            *b = data.next().expect("parameter payload too short");
        }
    }
}

impl ParamSet for Mlp {
    fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }
    fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            l.write_params(out);
        }
    }
    fn read_params(&mut self, data: &mut impl Iterator<Item = f64>) {
        for l in &mut self.layers {
            l.read_params(data);
        }
    }
}

/// Gradient counterpart of `ParamSet::write_params` ordering.
pub trait GradSet {
    fn write_grads(&self, out: &mut Vec<f64>);
}

impl GradSet for LinearGrad {
    fn write_grads(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
    }
}

impl GradSet for MlpGrad {
    fn write_grads(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            l.write_grads(out);
        }
    }
}

/// Adam with optional decoupled weight decay (decay 0 by default).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// One update step on a flat parameter vector.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Deterministic stream seeding: one independent generator per
/// (seed, domain, index) triple, stable under any parallel schedule.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    // splitmix-style mixing of the triple into one 64-bit seed
    let mut z = seed
        .wrapping_add(domain.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(index.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// Standard normal draw via Box-Muller; two uniforms per call keeps the
/// stream layout platform-independent.
pub fn normal_draw(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub mod fd {
    //! Central finite-difference helpers for gradient tests (unit and
    //! integration suites).

    /// Relative error between analytic and numeric derivative, guarded for
    /// near-zero pairs (central differences drown in roundoff there).
    pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
        let diff = (analytic - numeric).abs();
        let denom = analytic.abs().max(numeric.abs());
        if denom < 1e-6 || diff < 1e-9 {
            0.0
        } else {
            diff / denom
        }
    }

    /// Central difference of a scalar function along one coordinate.
    pub fn central<F: FnMut(&[f64]) -> f64>(x: &[f64], i: usize, h: f64, mut f: F) -> f64 {
        let mut xp = x.to_vec();
        xp[i] += h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        (fp - fm) / (2.0 * h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activations_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(0.0) - (2.0f64).ln()).abs() < 1e-15);
        assert_eq!(relu(-1.0), 0.0);
        assert_eq!(relu(2.5), 2.5);
    }

    #[test]
    fn softplus_stable_for_large_inputs() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-100.0) > 0.0);
        assert!(softplus(-100.0) < 1e-40);
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut rng = stream_rng(1, 0, 0);
        let layer = Linear::kaiming(4, 3, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dy: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut grad = LinearGrad::zeros_like(&layer);
        let mut dx = vec![0.0; 4];
        layer.backward(&x, &dy, &mut grad, &mut dx);

        // loss = dy . layer(x)
        let loss = |l: &Linear, x: &[f64]| {
            let mut y = Vec::new();
            l.forward(x, &mut y);
            y.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            xp[i] += h;
            let fp = loss(&layer, &xp);
            xp[i] = x[i] - h;
            let fm = loss(&layer, &xp);
            assert!(fd::rel_err(dx[i], (fp - fm) / (2.0 * h)) < 1e-7);
        }
        for wi in 0..layer.weight.len() {
            let mut lp = layer.clone();
            lp.weight[wi] += h;
            let fp = loss(&lp, &x);
            lp.weight[wi] = layer.weight[wi] - h;
            let fm = loss(&lp, &x);
            assert!(fd::rel_err(grad.weight[wi], (fp - fm) / (2.0 * h)) < 1e-7);
        }
    }

    #[test]
    fn mlp_backward_matches_fd() {
        let mut rng = stream_rng(2, 0, 0);
        let mlp = Mlp::kaiming(&[5, 8, 8, 2], &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dy = [0.7, -0.3];

        let cache = mlp.forward(&x);
        let mut grad = MlpGrad::zeros_like(&mlp);
        let dx = mlp.backward(&cache, &dy, &mut grad);

        let loss = |m: &Mlp, x: &[f64]| {
            let c = m.forward(x);
            m.output(&c).iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let fp = loss(&mlp, &xp);
            xp[i] = x[i] - h;
            let fm = loss(&mlp, &xp);
            assert!(fd::rel_err(dx[i], (fp - fm) / (2.0 * h)) < 1e-6);
        }
        // spot-check a few weights in each layer
        for li in 0..mlp.layers.len() {
            for wi in [0usize, 3, 7] {
                let wi = wi % mlp.layers[li].weight.len();
                let mut mp = mlp.clone();
                mp.layers[li].weight[wi] += h;
                let fp = loss(&mp, &x);
                mp.layers[li].weight[wi] = mlp.layers[li].weight[wi] - h;
                let fm = loss(&mp, &x);
                assert!(fd::rel_err(grad.layers[li].weight[wi], (fp - fm) / (2.0 * h)) < 1e-6);
            }
        }
    }

    #[test]
    fn param_roundtrip_preserves_mlp() {
        let mut rng = stream_rng(3, 0, 0);
        let mlp = Mlp::kaiming(&[4, 6, 3], &mut rng);
        let mut out = Vec::new();
        mlp.write_params(&mut out);
        assert_eq!(out.len(), mlp.num_params());
        let mut copy = Mlp::kaiming(&[4, 6, 3], &mut rng);
        copy.read_params(&mut out.iter().copied());
        assert_eq!(copy, mlp);
    }

    #[test]
    fn adam_decreases_quadratic() {
        let mut params = vec![5.0, -3.0];
        let mut adam = Adam::new(2, 0.1);
        for _ in 0..500 {
            let grads: Vec<f64> = params.iter().map(|p| 2.0 * p).collect();
            adam.step(&mut params, &grads);
        }
        assert!(params.iter().all(|p| p.abs() < 1e-2));
    }

    #[test]
    fn stream_rng_is_stable_and_disjoint() {
        let a: Vec<u64> = {
            let mut r = stream_rng(42, 1, 7);
            (0..4).map(|_| r.gen()).collect()
        };
        let b: Vec<u64> = {
            let mut r = stream_rng(42, 1, 7);
            (0..4).map(|_| r.gen()).collect()
        };
        assert_eq!(a, b);
        let c: Vec<u64> = {
            let mut r = stream_rng(42, 1, 8);
            (0..4).map(|_| r.gen()).collect()
        };
        assert_ne!(a, c);
    }

    #[test]
    fn normal_draw_moments() {
        let mut rng = stream_rng(9, 0, 0);
        let n = 20000;
        let draws: Vec<f64> = (0..n).map(|_| normal_draw(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03);
        assert!((var - 1.0).abs() < 0.05);
    }
}
