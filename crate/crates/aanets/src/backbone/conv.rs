//! Direct 2-D convolution kernels (stride 1, zero padding, square odd kernels)
//! plus the ReLU helpers used by the residual stacks.
//!
//! The forward kernel optionally applies one scale factor per output filter,
//! which is how the scaling branches reuse the frozen base weights without
//! materializing a scaled copy.

use ndarray::{Array1, Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Parameters of one convolution layer: `weight[out, in, ky, kx]` and a bias
/// per output filter.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl ConvParams {
    pub fn zeros(out_c: usize, in_c: usize, kernel: usize) -> Self {
        Self {
            weight: Array4::zeros((out_c, in_c, kernel, kernel)),
            bias: Array1::zeros(out_c),
        }
    }

    /// He-normal weight init, zero bias.
    pub fn he_init<R: Rng>(out_c: usize, in_c: usize, kernel: usize, rng: &mut R) -> Self {
        let std = (2.0 / (in_c * kernel * kernel) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let weight =
            Array4::from_shape_fn((out_c, in_c, kernel, kernel), |_| dist.sample(rng));
        Self {
            weight,
            bias: Array1::zeros(out_c),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Gradients for one convolution layer. For scaled evaluation `weight` holds
/// the gradient with respect to the *effective* (scaled) weights; callers
/// contract it against the base weights to recover per-filter scale gradients.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl ConvGrads {
    pub fn zeros_like(params: &ConvParams) -> Self {
        Self {
            weight: Array4::zeros(params.weight.raw_dim()),
            bias: Array1::zeros(params.bias.raw_dim()),
        }
    }
}

/// Same-padding convolution; `scale` multiplies every weight of filter `o`
/// by `scale[o]` (biases are never scaled).
pub fn conv2d_forward(params: &ConvParams, scale: Option<&[f64]>, x: &Array3<f64>) -> Array3<f64> {
    let (out_c, in_c, k, _) = (
        params.out_channels(),
        params.in_channels(),
        params.kernel(),
        (),
    );
    let (xc, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    debug_assert_eq!(xc, in_c, "input channel mismatch");
    debug_assert_eq!(k % 2, 1, "kernel must be odd");
    let pad = k / 2;

    let xs = x.as_slice().expect("standard layout");
    let ws = params.weight.as_slice().expect("standard layout");
    let mut out = vec![0.0f64; out_c * h * w];

    for o in 0..out_c {
        for i in 0..in_c {
            for ky in 0..k {
                let y_lo = pad.saturating_sub(ky);
                let y_hi = (h + pad - ky).min(h);
                for kx in 0..k {
                    let wv = ws[((o * in_c + i) * k + ky) * k + kx];
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad - kx).min(w);
                    for y in y_lo..y_hi {
                        let iy = y + ky - pad;
                        let o_row = (o * h + y) * w;
                        let i_row = (i * h + iy) * w;
                        for xx in x_lo..x_hi {
                            let ix = xx + kx - pad;
                            out[o_row + xx] += wv * xs[i_row + ix];
                        }
                    }
                }
            }
        }
        let s = scale.map_or(1.0, |s| s[o]);
        let b = params.bias[o];
        for v in &mut out[o * h * w..(o + 1) * h * w] {
            *v = b + s * *v;
        }
    }

    Array3::from_shape_vec((out_c, h, w), out).expect("shape")
}

/// Backward pass of [`conv2d_forward`]. Returns the gradient with respect to
/// the effective weights and bias, plus the gradient flowing into the input.
pub fn conv2d_backward(
    params: &ConvParams,
    scale: Option<&[f64]>,
    x: &Array3<f64>,
    dout: &Array3<f64>,
) -> (ConvGrads, Array3<f64>) {
    let (out_c, in_c, k) = (params.out_channels(), params.in_channels(), params.kernel());
    let (h, w) = (x.shape()[1], x.shape()[2]);
    debug_assert_eq!(dout.shape(), &[out_c, h, w]);
    let pad = k / 2;

    let xs = x.as_slice().expect("standard layout");
    let ws = params.weight.as_slice().expect("standard layout");
    let ds = dout.as_slice().expect("standard layout");

    let mut dw = vec![0.0f64; out_c * in_c * k * k];
    let mut dbias = vec![0.0f64; out_c];
    let mut dx = vec![0.0f64; in_c * h * w];

    for o in 0..out_c {
        let s = scale.map_or(1.0, |s| s[o]);
        let d_plane = &ds[o * h * w..(o + 1) * h * w];
        dbias[o] = d_plane.iter().sum();
        for i in 0..in_c {
            for ky in 0..k {
                let y_lo = pad.saturating_sub(ky);
                let y_hi = (h + pad - ky).min(h);
                for kx in 0..k {
                    let widx = ((o * in_c + i) * k + ky) * k + kx;
                    let w_eff = s * ws[widx];
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad - kx).min(w);
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let iy = y + ky - pad;
                        let d_row = y * w;
                        let i_row = (i * h + iy) * w;
                        for xx in x_lo..x_hi {
                            let ix = xx + kx - pad;
                            let d = d_plane[d_row + xx];
                            acc += d * xs[i_row + ix];
                            dx[i_row + ix] += w_eff * d;
                        }
                    }
                    dw[widx] = acc;
                }
            }
        }
    }

    let grads = ConvGrads {
        weight: Array4::from_shape_vec((out_c, in_c, k, k), dw).expect("shape"),
        bias: Array1::from_vec(dbias),
    };
    (grads, Array3::from_shape_vec((in_c, h, w), dx).expect("shape"))
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Propagates `dr` through ReLU using its stored output `r` (`r > 0` marks
/// the active units; the subgradient at 0 is taken as 0).
pub fn relu_backward(r: &Array3<f64>, dr: &Array3<f64>) -> Array3<f64> {
    let mut out = dr.clone();
    out.zip_mut_with(r, |d, &rv| {
        if rv <= 0.0 {
            *d = 0.0;
        }
    });
    out
}
