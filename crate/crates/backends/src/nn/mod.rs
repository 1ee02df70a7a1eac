//! Inference-only f32 building blocks on `ndarray`, laid out like the
//! PyTorch modules whose checkpoints they load.
//!
//! Feature maps are `[C, H, W]` (batch size one); token sequences are
//! `[tokens, features]`.

mod interp;
mod weights;

pub use interp::{resize_bicubic, BicubicMode};
pub use weights::Weights;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Upper bound on im2col buffer elements per band.
const IM2COL_BAND_ELEMS: usize = 1 << 22;
/// Logits per attention block.
const ATTN_BLOCK_ELEMS: usize = 1 << 20;

#[derive(Clone, Debug)]
pub struct Linear {
    /// `[in, out]`
    wt: Array2<f32>,
    b: Option<Array1<f32>>,
}

impl Linear {
    pub fn new(weight: Array2<f32>, bias: Option<Array1<f32>>) -> Self {
        Linear { wt: weight.t().as_standard_layout().into_owned(), b: bias }
    }

    pub fn load(w: &Weights, bias: bool) -> Result<Self> {
        let weight = w.get2("weight")?;
        let b = if bias { Some(w.get1("bias")?) } else { None };
        if let Some(b) = &b {
            if b.len() != weight.nrows() {
                return Err(w.malformed("bias length differs from output width"));
            }
        }
        Ok(Linear::new(weight, b))
    }

    /// Loads a bias if the checkpoint has one.
    pub fn load_auto(w: &Weights) -> Result<Self> {
        Linear::load(w, w.has("bias"))
    }

    pub fn in_features(&self) -> usize {
        self.wt.nrows()
    }

    pub fn out_features(&self) -> usize {
        self.wt.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.wt);
        if let Some(b) = &self.b {
            y += b;
        }
        y
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    /// `[out, in * kh * kw]`
    w: Array2<f32>,
    b: Option<Array1<f32>>,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    /// top, bottom, left, right
    pad: [usize; 4],
}

impl Conv2d {
    pub fn new(weight: ndarray::Array4<f32>, bias: Option<Array1<f32>>, stride: usize, padding: usize) -> Self {
        let (cout, cin, kh, kw) = weight.dim();
        let w = weight
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("contiguous conv weight");
        Conv2d { w, b: bias, cin, kh, kw, stride, pad: [padding; 4] }
    }

    pub fn load(w: &Weights, stride: usize, padding: usize) -> Result<Self> {
        let weight = w.get4("weight")?;
        let b = if w.has("bias") { Some(w.get1("bias")?) } else { None };
        Ok(Conv2d::new(weight, b, stride, padding))
    }

    /// Asymmetric padding (top, bottom, left, right).
    pub fn with_padding(mut self, pad: [usize; 4]) -> Self {
        self.pad = pad;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &Array3<f32>) -> Result<Array3<f32>> {
        let (c, h, w) = x.dim();
        if c != self.cin {
            return Err(Error::Shape(format!("conv expects {} channels, got {c}", self.cin)));
        }
        let [pt, pb, pl, pr] = self.pad;
        if h + pt + pb < self.kh || w + pl + pr < self.kw {
            return Err(Error::Shape(format!("input {h}x{w} smaller than kernel")));
        }
        let ho = (h + pt + pb - self.kh) / self.stride + 1;
        let wo = (w + pl + pr - self.kw) / self.stride + 1;
        let cout = self.w.nrows();
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");

        let mut out = if self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == [0; 4] {
            let flat = ArrayView2::from_shape((c, h * w), xs).expect("contiguous input");
            self.w.dot(&flat)
        } else {
            let k = c * self.kh * self.kw;
            let band_rows = (IM2COL_BAND_ELEMS / (k * wo).max(1)).clamp(1, ho);
            let bands: Vec<usize> = (0..ho).step_by(band_rows).collect();
            let parts: Vec<Array2<f32>> = bands
                .par_iter()
                .map(|&y0| {
                    let rows = band_rows.min(ho - y0);
                    let cols = self.im2col(xs, (c, h, w), y0, rows, wo);
                    self.w.dot(&cols)
                })
                .collect();
            let mut out = Array2::<f32>::zeros((cout, ho * wo));
            for (&y0, part) in bands.iter().zip(parts) {
                let n = part.ncols();
                out.slice_mut(s![.., y0 * wo..y0 * wo + n]).assign(&part);
            }
            out
        };
        if let Some(b) = &self.b {
            for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(b.iter()) {
                row += bv;
            }
        }
        Ok(out.into_shape_with_order((cout, ho, wo)).expect("conv output shape"))
    }

    fn im2col(&self, xs: &[f32], (c, h, w): (usize, usize, usize), y0: usize, rows: usize, wo: usize) -> Array2<f32> {
        let (kh, kw, stride) = (self.kh, self.kw, self.stride);
        let [pt, _, pl, _] = self.pad;
        let n = rows * wo;
        let mut cols = vec![0f32; c * kh * kw * n];
        for ci in 0..c {
            let plane = &xs[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let r = (ci * kh + ky) * kw + kx;
                    let dst = &mut cols[r * n..(r + 1) * n];
                    for oy in 0..rows {
                        let iy = ((y0 + oy) * stride + ky) as isize - pt as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((c * kh * kw, n), cols).expect("im2col shape")
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    groups: usize,
    eps: f32,
    gamma: Array1<f32>,
    beta: Array1<f32>,
}

impl GroupNorm {
    pub fn load(w: &Weights, groups: usize, eps: f32) -> Result<Self> {
        let gamma = w.get1("weight")?;
        let beta = w.get1("bias")?;
        if groups == 0 || gamma.len() % groups != 0 {
            return Err(w.malformed(&format!("{} channels not divisible into {groups} groups", gamma.len())));
        }
        Ok(GroupNorm { groups, eps, gamma, beta })
    }

    pub fn forward(&self, x: &Array3<f32>) -> Result<Array3<f32>> {
        let (c, h, w) = x.dim();
        if c != self.gamma.len() {
            return Err(Error::Shape(format!("group norm expects {} channels, got {c}", self.gamma.len())));
        }
        let per = c / self.groups;
        let mut out = x.as_standard_layout().into_owned();
        let hw = h * w;
        let data = out.as_slice_mut().expect("standard layout");
        data.par_chunks_mut(per * hw).enumerate().for_each(|(g, chunk)| {
            let n = chunk.len() as f64;
            let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + self.eps as f64).sqrt();
            for (ci, plane) in chunk.chunks_mut(hw).enumerate() {
                let ch = g * per + ci;
                let (ga, be) = (self.gamma[ch] as f64, self.beta[ch] as f64);
                for v in plane {
                    *v = (((*v as f64) - mean) * inv * ga + be) as f32;
                }
            }
        });
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    eps: f32,
    gamma: Array1<f32>,
    beta: Array1<f32>,
}

impl LayerNorm {
    pub fn load(w: &Weights, eps: f32) -> Result<Self> {
        Ok(LayerNorm { eps, gamma: w.get1("weight")?, beta: w.get1("bias")? })
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut out = x.as_standard_layout().into_owned();
        let d = out.ncols();
        out.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut row| {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + self.eps as f64).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (((*v as f64) - mean) * inv) as f32 * self.gamma[i] + self.beta[i];
            }
        });
        out
    }
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Exact (erf) GELU.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x / std::f32::consts::SQRT_2))
}

pub fn quick_gelu(x: f32) -> f32 {
    x / (1.0 + (-1.702 * x).exp())
}

pub fn gelu_tanh(x: f32) -> f32 {
    let c = (2.0 / std::f32::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    GeluTanh,
    QuickGelu,
    Silu,
    Relu,
}

impl Activation {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "gelu" => Activation::Gelu,
            "gelu_new" | "gelu_pytorch_tanh" | "gelu-approximate" => Activation::GeluTanh,
            "quick_gelu" => Activation::QuickGelu,
            "silu" | "swish" => Activation::Silu,
            "relu" => Activation::Relu,
            _ => return None,
        })
    }

    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::GeluTanh => gelu_tanh(x),
            Activation::QuickGelu => quick_gelu(x),
            Activation::Silu => silu(x),
            Activation::Relu => x.max(0.0),
        }
    }
}

/// `[C, H, W]` to tokens `[H * W, C]`.
pub fn to_tokens(x: &Array3<f32>) -> Array2<f32> {
    let (c, h, w) = x.dim();
    x.view()
        .into_shape_with_order((c, h * w))
        .map(|v| v.t().as_standard_layout().into_owned())
        .unwrap_or_else(|_| {
            x.as_standard_layout()
                .into_owned()
                .into_shape_with_order((c, h * w))
                .expect("reshape")
                .t()
                .as_standard_layout()
                .into_owned()
        })
}

/// Tokens `[H * W, C]` back to `[C, H, W]`.
pub fn from_tokens(t: &Array2<f32>, h: usize, w: usize) -> Array3<f32> {
    let c = t.ncols();
    t.t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h, w))
        .expect("token count equals h * w")
}

/// `[tokens, heads * d]` to `[heads, tokens, d]`.
pub fn split_heads(x: ArrayView2<f32>, heads: usize) -> Result<Array3<f32>> {
    let (n, width) = x.dim();
    if heads == 0 || width % heads != 0 {
        return Err(Error::Shape(format!("width {width} not divisible by {heads} heads")));
    }
    let d = width / heads;
    Ok(Array3::from_shape_fn((heads, n, d), |(h, i, j)| x[[i, h * d + j]]))
}

/// Multi-head scaled dot-product attention over `[tokens, heads * d]`
/// inputs, returning `[tokens_q, heads * d]`. `scale` defaults to `1/√d`.
pub fn attention(
    q: ArrayView2<f32>,
    k: ArrayView2<f32>,
    v: ArrayView2<f32>,
    heads: usize,
    scale: Option<f32>,
) -> Result<Array2<f32>> {
    let (nq, width) = q.dim();
    if k.ncols() != width || v.ncols() != width || k.nrows() != v.nrows() {
        return Err(Error::Shape(format!(
            "attention operands q {:?}, k {:?}, v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if heads == 0 || width % heads != 0 {
        return Err(Error::Shape(format!("width {width} not divisible by {heads} heads")));
    }
    let d = width / heads;
    let scale = scale.unwrap_or(1.0 / (d as f32).sqrt());
    let head_outputs: Vec<Array2<f32>> = (0..heads)
        .into_par_iter()
        .map(|h| {
            let qh = q.slice(s![.., h * d..(h + 1) * d]).mapv(|x| x * scale);
            let kh = k.slice(s![.., h * d..(h + 1) * d]);
            let vh = v.slice(s![.., h * d..(h + 1) * d]);
            let mut out = Array2::<f32>::zeros((nq, d));
            // keep the logit block cache-sized
            let rows = (ATTN_BLOCK_ELEMS / k.nrows().max(1)).clamp(8, nq.max(8));
            for q0 in (0..nq).step_by(rows) {
                let q1 = (q0 + rows).min(nq);
                let mut weights = qh.slice(s![q0..q1, ..]).dot(&kh.t());
                let sums = exp_rows(&mut weights);
                let mut block = weights.dot(&vh);
                for (mut row, s) in block.axis_iter_mut(Axis(0)).zip(sums) {
                    row /= s;
                }
                out.slice_mut(s![q0..q1, ..]).assign(&block);
            }
            out
        })
        .collect();
    let mut out = Array2::<f32>::zeros((nq, width));
    for (h, o) in head_outputs.into_iter().enumerate() {
        out.slice_mut(s![.., h * d..(h + 1) * d]).assign(&o);
    }
    Ok(out)
}

/// Replaces each row by `exp(x - max)` and returns the row sums.
fn exp_rows(x: &mut Array2<f32>) -> Vec<f32> {
    x.axis_iter_mut(Axis(0))
        .map(|mut row| {
            let row = row.as_slice_mut().expect("rows of an owned standard-layout array");
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            for v in row.iter_mut() {
                *v = fast_exp(*v - max);
            }
            row.iter().sum()
        })
        .collect()
}

/// In-place `softmax(scale * x)` per row.
pub fn softmax_rows(x: &mut Array2<f32>, scale: f32) {
    x.mapv_inplace(|v| v * scale);
    let sums = exp_rows(x);
    for (mut row, s) in x.axis_iter_mut(Axis(0)).zip(sums) {
        row /= s;
    }
}

/// `exp` for arguments at most zero, accurate to a few ulp. Branch-free
/// so that loops over it vectorize.
#[inline(always)]
pub fn fast_exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0;
    let x = x.max(-87.0);
    let shifted = x * LOG2E + ROUND;
    let n = shifted - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.987_569_1e-4;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    // the low mantissa bits of `shifted` hold n
    let biased = shifted.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127);
    y * f32::from_bits(biased << 23)
}

pub fn upsample_nearest2x(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

/// Sinusoidal embedding of a scalar timestep as in diffusers' `Timesteps`:
/// frequencies `exp(-ln(max_period) * i / (half - shift))`, sin then cos
/// unless `flip_sin_to_cos`.
pub fn timestep_embedding(t: f32, dim: usize, flip_sin_to_cos: bool, shift: f32) -> Array1<f32> {
    let half = dim / 2;
    let mut emb = Array1::<f32>::zeros(dim);
    for i in 0..half {
        let exponent = -(10000f32.ln()) * i as f32 / (half as f32 - shift);
        let arg = t * exponent.exp();
        let (sin, cos) = (arg.sin(), arg.cos());
        if flip_sin_to_cos {
            emb[i] = cos;
            emb[half + i] = sin;
        } else {
            emb[i] = sin;
            emb[half + i] = cos;
        }
    }
    emb
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4};

    #[test]
    fn fast_exp_is_accurate() {
        for i in 0..=17_400 {
            let x = -(i as f32) * 0.005;
            let (got, want) = (fast_exp(x) as f64, (x as f64).exp());
            assert!((got - want).abs() <= 4.0 * f32::EPSILON as f64 * want, "exp({x}) = {got}, want {want}");
        }
        assert_eq!(fast_exp(0.0), 1.0);
        assert!(fast_exp(-200.0) < 1e-37);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let w = Array4::from_shape_fn((2, 3, 3, 3), |(o, i, y, x)| (o * 27 + i * 9 + y * 3 + x) as f32 * 0.01 - 0.2);
        let x = Array3::from_shape_fn((3, 5, 6), |(c, y, xx)| ((c * 31 + y * 7 + xx) % 11) as f32 - 5.0);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let conv = Conv2d::new(w.clone(), Some(array![0.5, -1.0]), stride, pad);
            let out = conv.forward(&x).unwrap();
            let (ho, wo) = ((5 + 2 * pad - 3) / stride + 1, (6 + 2 * pad - 3) / stride + 1);
            assert_eq!(out.dim(), (2, ho, wo));
            for o in 0..2 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = if o == 0 { 0.5 } else { -1.0 };
                        for i in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                        acc += w[[o, i, ky, kx]] * x[[i, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        assert!((out[[o, oy, ox]] - acc).abs() < 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn asymmetric_padding() {
        let w = Array4::from_elem((1, 1, 3, 3), 1.0f32);
        let conv = Conv2d::new(w, None, 2, 0).with_padding([0, 1, 0, 1]);
        let x = Array3::from_elem((1, 4, 4), 1.0f32);
        let out = conv.forward(&x).unwrap();
        assert_eq!(out.dim(), (1, 2, 2));
        assert_eq!(out[[0, 0, 0]], 9.0);
        assert_eq!(out[[0, 1, 1]], 4.0);
    }

    #[test]
    fn attention_single_head_matches_manual() {
        let q = array![[1.0f32, 0.0]];
        let k = array![[1.0f32, 0.0], [0.0, 1.0]];
        let out = attention(q.view(), k.view(), k.view(), 1, None).unwrap();
        assert!((out[[0, 0]] - 0.66976).abs() < 1e-4);
    }

    #[test]
    fn token_layout_round_trip() {
        let x = Array3::from_shape_fn((3, 2, 4), |(c, y, xx)| (c * 100 + y * 10 + xx) as f32);
        let t = to_tokens(&x);
        assert_eq!(t.dim(), (8, 3));
        assert_eq!(t[[5, 2]], 211.0);
        assert_eq!(from_tokens(&t, 2, 4), x);
    }

    #[test]
    fn activations() {
        assert!((gelu(1.0) - 0.841_344_7).abs() < 1e-6);
        assert!((silu(1.0) - 0.731_058_6).abs() < 1e-6);
        assert!((quick_gelu(1.0) - 0.845_796_5).abs() < 1e-6);
        assert!((gelu_tanh(1.0) - 0.841_192).abs() < 1e-5);
    }

    #[test]
    fn timestep_embedding_layout() {
        let e = timestep_embedding(0.0, 8, true, 0.0);
        assert_eq!(e.as_slice().unwrap(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let e = timestep_embedding(2.0, 4, false, 1.0);
        assert!((e[0] - 2f32.sin()).abs() < 1e-6);
        assert!((e[1] - (2.0 * (-(10000f32.ln())).exp()).sin()).abs() < 1e-6);
    }
}
