//! Conditioning feature extractor: planar convolutions on the input image,
//! a gather-remap onto a uniform (θ, φ) grid with enlarged field of view,
//! and two further convolutions on the spherical grid so that cells outside
//! the input FOV pick up features from receptive-field spill.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{spherical_of_dir, spherical_to_grid, FovBounds, Intrinsics};
use crate::img::ImageBuf;
use crate::nn::{relu, relu_deriv, GradSet, ParamSet};

/// Dense H × W × C tensor, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(h: usize, w: usize, c: usize) -> Tensor3 {
        Tensor3 {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, ch: usize) -> &mut f64 {
        &mut self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn from_image(img: &ImageBuf) -> Tensor3 {
        Tensor3 {
            h: img.height,
            w: img.width,
            c: 3,
            data: img.data.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PadMode {
    /// Out-of-bounds taps contribute zero.
    Zero,
    /// Out-of-bounds taps read the nearest edge cell.
    Clamp,
}

/// 3×3 convolution. Weight layout: [out_ch][in_ch][ky][kx].
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub pad: PadMode,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2dGrad {
    pub fn zeros_like(c: &Conv2d) -> Conv2dGrad {
        Conv2dGrad {
            weight: vec![0.0; c.weight.len()],
            bias: vec![0.0; c.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &Conv2dGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

impl Conv2d {
    pub fn kaiming(
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        pad: PadMode,
        rng: &mut impl Rng,
    ) -> Conv2d {
        let fan_in = (in_ch * 9) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Conv2d {
            in_ch,
            out_ch,
            stride,
            pad,
            weight: (0..out_ch * in_ch * 9)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            bias: vec![0.0; out_ch],
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    #[inline]
    fn tap(&self, dim: usize, i: isize) -> Option<usize> {
        if i >= 0 && (i as usize) < dim {
            Some(i as usize)
        } else {
            match self.pad {
                PadMode::Zero => None,
                PadMode::Clamp => Some(i.clamp(0, dim as isize - 1) as usize),
            }
        }
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        assert_eq!(x.c, self.in_ch);
        let (oh, ow) = self.out_size(x.h, x.w);
        let mut out = Tensor3::zeros(oh, ow, self.out_ch);
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..self.out_ch {
                    let mut acc = self.bias[oc];
                    for ky in 0..3 {
                        let Some(iy) = self.tap(x.h, (oy * self.stride + ky) as isize - 1)
                        else {
                            continue;
                        };
                        for kx in 0..3 {
                            let Some(ix) =
                                self.tap(x.w, (ox * self.stride + kx) as isize - 1)
                            else {
                                continue;
                            };
                            let wbase = ((oc * self.in_ch) * 3 + ky) * 3 + kx;
                            for ic in 0..self.in_ch {
                                acc += self.weight[wbase + ic * 9] * x.at(iy, ix, ic);
                            }
                        }
                    }
                    *out.at_mut(oy, ox, oc) = acc;
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients and dL/d(input) from dL/d(output).
    pub fn backward(&self, x: &Tensor3, dy: &Tensor3, grad: &mut Conv2dGrad, dx: &mut Tensor3) {
        let (oh, ow) = self.out_size(x.h, x.w);
        assert_eq!((dy.h, dy.w, dy.c), (oh, ow, self.out_ch));
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..self.out_ch {
                    let g = dy.at(oy, ox, oc);
                    if g == 0.0 {
                        continue;
                    }
                    grad.bias[oc] += g;
                    for ky in 0..3 {
                        let Some(iy) = self.tap(x.h, (oy * self.stride + ky) as isize - 1)
                        else {
                            continue;
                        };
                        for kx in 0..3 {
                            let Some(ix) =
                                self.tap(x.w, (ox * self.stride + kx) as isize - 1)
                            else {
                                continue;
                            };
                            let wbase = ((oc * self.in_ch) * 3 + ky) * 3 + kx;
                            for ic in 0..self.in_ch {
                                grad.weight[wbase + ic * 9] += g * x.at(iy, ix, ic);
                                *dx.at_mut(iy, ix, ic) += g * self.weight[wbase + ic * 9];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl ParamSet for Conv2d {
    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
    }
    fn read_params(&mut self, data: &mut impl Iterator<Item = f64>) {
        for w in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            *w = data.next().expect("parameter stream exhausted");
        }
    }
}

/// Conditioning features over the spherical (θ, φ) domain.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub data: Tensor3,
    pub fov: FovBounds,
}

/// Four bilinear taps into a 2D lattice: corner (row, col) pairs + weights.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTaps {
    pub corners: [(usize, usize); 4],
    pub weights: [f64; 4],
}

/// Clamp-to-edge bilinear taps at continuous (row, col).
pub fn bilinear_taps(h: usize, w: usize, row: f64, col: f64) -> BilinearTaps {
    let row = row.clamp(0.0, h as f64 - 1.0);
    let col = col.clamp(0.0, w as f64 - 1.0);
    let r0 = row.floor() as usize;
    let c0 = col.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = row - r0 as f64;
    let fc = col - c0 as f64;
    BilinearTaps {
        corners: [(r0, c0), (r0, c1), (r1, c0), (r1, c1)],
        weights: [
            (1.0 - fr) * (1.0 - fc),
            (1.0 - fr) * fc,
            fr * (1.0 - fc),
            fr * fc,
        ],
    }
}

impl FeatureGrid {
    pub fn channels(&self) -> usize {
        self.data.c
    }

    /// Bilinear taps for a camera-frame point, or None when the point is at
    /// or behind the image plane or maps outside the grid.
    pub fn taps_for_point(&self, x: &Vector3<f64>) -> Option<BilinearTaps> {
        let s = spherical_of_dir(x)?;
        let g = spherical_to_grid(&s, &self.fov, (self.data.h, self.data.w));
        if !g.in_fov {
            return None;
        }
        Some(bilinear_taps(self.data.h, self.data.w, g.row, g.col))
    }

    /// Feature vector at a camera-frame point. Out-of-domain points return
    /// the zero vector with `false`.
    pub fn sample_features(&self, x: &Vector3<f64>) -> (Vec<f64>, bool) {
        match self.taps_for_point(x) {
            Some(taps) => (self.gather(&taps), true),
            None => (vec![0.0; self.data.c], false),
        }
    }

    pub fn gather(&self, taps: &BilinearTaps) -> Vec<f64> {
        let mut out = vec![0.0; self.data.c];
        for (cn, wt) in taps.corners.iter().zip(taps.weights) {
            for (o, ch) in out.iter_mut().zip(0..self.data.c) {
                *o += wt * self.data.at(cn.0, cn.1, ch);
            }
        }
        out
    }

    /// Scatter dL/d(feature vector) back into a grid-shaped gradient.
    pub fn scatter_grad(taps: &BilinearTaps, d_feat: &[f64], d_grid: &mut Tensor3) {
        for (cn, wt) in taps.corners.iter().zip(taps.weights) {
            for (ch, df) in d_feat.iter().enumerate() {
                *d_grid.at_mut(cn.0, cn.1, ch) += wt * df;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Extra field of view (radians) added around the input camera FOV.
    pub fov_margin: f64,
}

impl Default for EncoderShape {
    fn default() -> EncoderShape {
        EncoderShape {
            channels: 32,
            grid_h: 64,
            grid_w: 64,
            fov_margin: 40.0f64.to_radians(),
        }
    }
}

/// Three stride-2 planar convolutions, then two stride-1 convolutions on the
/// remapped spherical grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub shape: EncoderShape,
    pub planar: Vec<Conv2d>,
    pub spherical: Vec<Conv2d>,
}

impl EncoderParams {
    pub fn init(shape: EncoderShape, rng: &mut impl Rng) -> EncoderParams {
        let c = shape.channels;
        EncoderParams {
            shape,
            planar: vec![
                Conv2d::kaiming(3, 8, 2, PadMode::Zero, rng),
                Conv2d::kaiming(8, 16, 2, PadMode::Zero, rng),
                Conv2d::kaiming(16, c, 2, PadMode::Zero, rng),
            ],
            spherical: vec![
                Conv2d::kaiming(c, c, 1, PadMode::Clamp, rng),
                Conv2d::kaiming(c, c, 1, PadMode::Clamp, rng),
            ],
        }
    }

    pub fn output_fov(&self, k: &Intrinsics) -> FovBounds {
        FovBounds::of_camera(k).enlarged(self.shape.fov_margin)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderGrad {
    pub planar: Vec<Conv2dGrad>,
    pub spherical: Vec<Conv2dGrad>,
}

impl EncoderGrad {
    pub fn zeros_like(p: &EncoderParams) -> EncoderGrad {
        EncoderGrad {
            planar: p.planar.iter().map(Conv2dGrad::zeros_like).collect(),
            spherical: p.spherical.iter().map(Conv2dGrad::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &EncoderGrad) {
        for (a, b) in self.planar.iter_mut().zip(&other.planar) {
            a.add_assign(b);
        }
        for (a, b) in self.spherical.iter_mut().zip(&other.spherical) {
            a.add_assign(b);
        }
    }
}

/// Everything the encoder backward pass needs: per-conv inputs,
/// pre-activation outputs, and the remap taps per spherical cell.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    planar_inputs: Vec<Tensor3>,
    planar_pre: Vec<Tensor3>,
    remap_taps: Vec<Option<BilinearTaps>>,
    sph_inputs: Vec<Tensor3>,
    sph_pre: Vec<Tensor3>,
}

/// Remap source location for one spherical cell: its (θ, φ) center pulled
/// back through the inverse spherical mapping to a planar-feature-map
/// coordinate, or None when it falls outside the input image.
fn remap_source(
    cell: (usize, usize),
    grid: (usize, usize),
    fov: &FovBounds,
    k: &Intrinsics,
    feat: (usize, usize),
) -> Option<BilinearTaps> {
    let (row, col) = cell;
    let (gh, gw) = grid;
    let theta =
        fov.theta_min + col as f64 / (gw as f64 - 1.0) * (fov.theta_max - fov.theta_min);
    let phi = fov.phi_min + row as f64 / (gh as f64 - 1.0) * (fov.phi_max - fov.phi_min);
    // invert the mapping: theta = pi - atan2(1, r_x); phi = acos(-r_y / r)
    let a = std::f64::consts::PI - theta;
    let r_x = a.cos() / a.sin();
    let r_y = -phi.cos() * (r_x * r_x + 1.0).sqrt() / phi.sin();
    let px = k.fx * r_x + k.cx;
    let py = k.fy * r_y + k.cy;
    if px < 0.0 || px > (k.width - 1) as f64 || py < 0.0 || py > (k.height - 1) as f64 {
        return None;
    }
    // planar features are downsampled 8x; feature cell o is centered on
    // image pixel 8o under stride-2, pad-1 convolutions
    Some(bilinear_taps(feat.0, feat.1, py / 8.0, px / 8.0))
}

pub fn encode_with_cache(
    params: &EncoderParams,
    image: &ImageBuf,
    k: &Intrinsics,
) -> Result<(FeatureGrid, EncodeCache)> {
    if image.width != k.width || image.height != k.height {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} does not match intrinsics {}x{}",
            image.width, image.height, k.width, k.height
        )));
    }
    let fov = params.output_fov(k);
    let (gh, gw) = (params.shape.grid_h, params.shape.grid_w);

    let mut planar_inputs = Vec::new();
    let mut planar_pre = Vec::new();
    let mut cur = Tensor3::from_image(image);
    for conv in &params.planar {
        let pre = conv.forward(&cur);
        planar_inputs.push(cur);
        planar_pre.push(pre.clone());
        let mut post = pre;
        for v in &mut post.data {
            *v = relu(*v);
        }
        cur = post;
    }

    let mut remapped = Tensor3::zeros(gh, gw, params.shape.channels);
    let mut remap_taps = Vec::with_capacity(gh * gw);
    for row in 0..gh {
        for col in 0..gw {
            let taps = remap_source((row, col), (gh, gw), &fov, k, (cur.h, cur.w));
            if let Some(t) = &taps {
                for ch in 0..params.shape.channels {
                    let mut acc = 0.0;
                    for (cn, wt) in t.corners.iter().zip(t.weights) {
                        acc += wt * cur.at(cn.0, cn.1, ch);
                    }
                    *remapped.at_mut(row, col, ch) = acc;
                }
            }
            remap_taps.push(taps);
        }
    }

    let mut sph_inputs = Vec::new();
    let mut sph_pre = Vec::new();
    let mut cur = remapped;
    let last = params.spherical.len() - 1;
    for (li, conv) in params.spherical.iter().enumerate() {
        let pre = conv.forward(&cur);
        sph_inputs.push(cur);
        sph_pre.push(pre.clone());
        let mut post = pre;
        if li < last {
            for v in &mut post.data {
                *v = relu(*v);
            }
        }
        cur = post;
    }

    Ok((
        FeatureGrid { data: cur, fov },
        EncodeCache {
            planar_inputs,
            planar_pre,
            remap_taps,
            sph_inputs,
            sph_pre,
        },
    ))
}

pub fn encode(params: &EncoderParams, image: &ImageBuf, k: &Intrinsics) -> Result<FeatureGrid> {
    encode_with_cache(params, image, k).map(|(g, _)| g)
}

/// Backprop dL/d(grid data) through the whole encoder; the image is fixed.
pub fn encoder_backward(
    params: &EncoderParams,
    cache: &EncodeCache,
    d_grid: &Tensor3,
    grad: &mut EncoderGrad,
) {
    let last = params.spherical.len() - 1;
    let mut dy = d_grid.clone();
    for li in (0..params.spherical.len()).rev() {
        if li < last {
            for (d, p) in dy.data.iter_mut().zip(&cache.sph_pre[li].data) {
                *d *= relu_deriv(*p);
            }
        }
        let x = &cache.sph_inputs[li];
        let mut dx = Tensor3::zeros(x.h, x.w, x.c);
        params.spherical[li].backward(x, &dy, &mut grad.spherical[li], &mut dx);
        dy = dx;
    }

    // remap backward: scatter each cell's gradient to its planar taps
    let pin = cache.planar_pre.last().expect("planar layers");
    let mut d_planar = Tensor3::zeros(pin.h, pin.w, pin.c);
    for (idx, taps) in cache.remap_taps.iter().enumerate() {
        let Some(t) = taps else { continue };
        let (row, col) = (idx / dy.w, idx % dy.w);
        for ch in 0..dy.c {
            let g = dy.at(row, col, ch);
            for (cn, wt) in t.corners.iter().zip(t.weights) {
                *d_planar.at_mut(cn.0, cn.1, ch) += wt * g;
            }
        }
    }

    let mut dy = d_planar;
    for li in (0..params.planar.len()).rev() {
        for (d, p) in dy.data.iter_mut().zip(&cache.planar_pre[li].data) {
            *d *= relu_deriv(*p);
        }
        let x = &cache.planar_inputs[li];
        let mut dx = Tensor3::zeros(x.h, x.w, x.c);
        params.planar[li].backward(x, &dy, &mut grad.planar[li], &mut dx);
        dy = dx;
    }
}

impl ParamSet for EncoderParams {
    fn num_params(&self) -> usize {
        self.planar
            .iter()
            .chain(&self.spherical)
            .map(ParamSet::num_params)
            .sum()
    }
    fn write_params(&self, out: &mut Vec<f64>) {
        for c in self.planar.iter().chain(&self.spherical) {
            c.write_params(out);
        }
    }
    fn read_params(&mut self, data: &mut impl Iterator<Item = f64>) {
        for c in self.planar.iter_mut().chain(self.spherical.iter_mut()) {
            c.read_params(data);
        }
    }
}

impl GradSet for EncoderGrad {
    fn write_grads(&self, out: &mut Vec<f64>) {
        for g in self.planar.iter().chain(&self.spherical) {
            out.extend_from_slice(&g.weight);
            out.extend_from_slice(&g.bias);
        }
    }
}
