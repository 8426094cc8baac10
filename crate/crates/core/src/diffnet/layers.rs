//! Forward and backward kernels on channel-major (`c, y, x`) buffers.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

/// Channel-major activation extent. Flattened vectors are `(n, 1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Dims { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Resolved geometry of one convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub input: Dims,
    pub output: Dims,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

impl ConvGeom {
    pub fn new(input: Dims, out_channels: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> Option<Self> {
        if kh == 0 || kw == 0 || stride == 0 {
            return None;
        }
        let (oh, ow, pad_h, pad_w) = match padding {
            Padding::Valid => {
                if input.h < kh || input.w < kw {
                    return None;
                }
                ((input.h - kh) / stride + 1, (input.w - kw) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let oh = input.h.div_ceil(stride);
                let ow = input.w.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(input.h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(input.w);
                (oh, ow, ph, pw)
            }
        };
        if oh == 0 || ow == 0 {
            return None;
        }
        Some(ConvGeom {
            input,
            output: Dims::new(out_channels, oh, ow),
            kh,
            kw,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            padded_h: input.h + pad_h,
            padded_w: input.w + pad_w,
        })
    }

    pub fn weight_len(&self) -> usize {
        self.output.c * self.input.c * self.kh * self.kw
    }

    fn pad(&self, x: &[f64]) -> Vec<f64> {
        let (ph, pw) = (self.padded_h, self.padded_w);
        let mut out = vec![0.0; self.input.c * ph * pw];
        for c in 0..self.input.c {
            for y in 0..self.input.h {
                let src = &x[(c * self.input.h + y) * self.input.w..][..self.input.w];
                let dst = &mut out[(c * ph + y + self.pad_top) * pw + self.pad_left..][..self.input.w];
                dst.copy_from_slice(src);
            }
        }
        out
    }

    /// Weights are `[out][in][ky][kx]`.
    pub fn forward(&self, x: &[f64], weights: &[f64], bias: &[f64]) -> Vec<f64> {
        let padded = self.pad(x);
        let Dims { c: oc_n, h: oh, w: ow } = self.output;
        let (ph, pw, s) = (self.padded_h, self.padded_w, self.stride);
        let mut out = vec![0.0; self.output.len()];
        for oc in 0..oc_n {
            let plane = &mut out[oc * oh * ow..][..oh * ow];
            plane.iter_mut().for_each(|v| *v = bias[oc]);
            for ic in 0..self.input.c {
                let src = &padded[ic * ph * pw..][..ph * pw];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let w = weights[((oc * self.input.c + ic) * self.kh + ky) * self.kw + kx];
                        for oy in 0..oh {
                            let row = &src[(oy * s + ky) * pw + kx..];
                            let dst = &mut plane[oy * ow..][..ow];
                            if s == 1 {
                                for (d, v) in dst.iter_mut().zip(&row[..ow]) {
                                    *d += w * v;
                                }
                            } else {
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d += w * row[ox * s];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `dw`/`db`; returns the input
    /// gradient when `want_input` is set.
    pub fn backward(
        &self,
        x: &[f64],
        weights: &[f64],
        dout: &[f64],
        dw: Option<(&mut [f64], &mut [f64])>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let Dims { c: oc_n, h: oh, w: ow } = self.output;
        let (ph, pw, s) = (self.padded_h, self.padded_w, self.stride);
        if let Some((dw, db)) = dw {
            let padded = self.pad(x);
            for oc in 0..oc_n {
                let g = &dout[oc * oh * ow..][..oh * ow];
                db[oc] += g.iter().sum::<f64>();
                for ic in 0..self.input.c {
                    let src = &padded[ic * ph * pw..][..ph * pw];
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let row = &src[(oy * s + ky) * pw + kx..];
                                let grow = &g[oy * ow..][..ow];
                                if s == 1 {
                                    acc += grow.iter().zip(&row[..ow]).map(|(a, b)| a * b).sum::<f64>();
                                } else {
                                    acc += grow.iter().enumerate().map(|(ox, a)| a * row[ox * s]).sum::<f64>();
                                }
                            }
                            dw[((oc * self.input.c + ic) * self.kh + ky) * self.kw + kx] += acc;
                        }
                    }
                }
            }
        }
        if !want_input {
            return None;
        }
        let mut dpad = vec![0.0; self.input.c * ph * pw];
        for oc in 0..oc_n {
            let g = &dout[oc * oh * ow..][..oh * ow];
            for ic in 0..self.input.c {
                let dst_plane = &mut dpad[ic * ph * pw..][..ph * pw];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let w = weights[((oc * self.input.c + ic) * self.kh + ky) * self.kw + kx];
                        for oy in 0..oh {
                            let grow = &g[oy * ow..][..ow];
                            let row = &mut dst_plane[(oy * s + ky) * pw + kx..];
                            if s == 1 {
                                for (d, v) in row[..ow].iter_mut().zip(grow) {
                                    *d += w * v;
                                }
                            } else {
                                for (ox, v) in grow.iter().enumerate() {
                                    row[ox * s] += w * v;
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut dx = vec![0.0; self.input.len()];
        for c in 0..self.input.c {
            for y in 0..self.input.h {
                let src = &dpad[(c * ph + y + self.pad_top) * pw + self.pad_left..][..self.input.w];
                dx[(c * self.input.h + y) * self.input.w..][..self.input.w].copy_from_slice(src);
            }
        }
        Some(dx)
    }
}

pub(crate) fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Derivative taken as 0 at exactly 0.
pub(crate) fn relu_backward(x: &[f64], dout: &[f64]) -> Vec<f64> {
    x.iter().zip(dout).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
}

pub(crate) fn pool_output(input: Dims, size: usize) -> Option<Dims> {
    if size == 0 || input.h < size || input.w < size {
        return None;
    }
    Some(Dims::new(input.c, input.h / size, input.w / size))
}

/// Non-overlapping max pooling. Returns the pooled values and, per output,
/// the flat input index of the first row-major maximum in its window.
pub(crate) fn maxpool_forward(x: &[f64], input: Dims, size: usize) -> (Vec<f64>, Vec<u32>) {
    let out = pool_output(input, size).expect("validated pool geometry");
    let mut values = Vec::with_capacity(out.len());
    let mut argmax = Vec::with_capacity(out.len());
    for c in 0..out.c {
        for oy in 0..out.h {
            for ox in 0..out.w {
                let mut best_idx = (c * input.h + oy * size) * input.w + ox * size;
                let mut best = x[best_idx];
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = (c * input.h + oy * size + dy) * input.w + ox * size + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                values.push(best);
                argmax.push(best_idx as u32);
            }
        }
    }
    (values, argmax)
}

pub(crate) fn maxpool_backward(input_len: usize, argmax: &[u32], dout: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&i, &g) in argmax.iter().zip(dout) {
        dx[i as usize] += g;
    }
    dx
}

/// Weights are `[out][in]`.
pub(crate) fn dense_forward(x: &[f64], weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| b + weights[o * n_in..][..n_in].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

pub(crate) fn dense_backward(
    x: &[f64],
    weights: &[f64],
    dout: &[f64],
    dw: Option<(&mut [f64], &mut [f64])>,
    want_input: bool,
) -> Option<Vec<f64>> {
    let n_in = x.len();
    if let Some((dw, db)) = dw {
        for (o, &g) in dout.iter().enumerate() {
            db[o] += g;
            for (d, v) in dw[o * n_in..][..n_in].iter_mut().zip(x) {
                *d += g * v;
            }
        }
    }
    if !want_input {
        return None;
    }
    let mut dx = vec![0.0; n_in];
    for (o, &g) in dout.iter().enumerate() {
        for (d, w) in dx.iter_mut().zip(&weights[o * n_in..][..n_in]) {
            *d += g * w;
        }
    }
    Some(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        let g = ConvGeom::new(Dims::new(1, 28, 28), 16, 3, 3, 1, Padding::Same).unwrap();
        assert_eq!(g.output, Dims::new(16, 28, 28));
        assert_eq!((g.pad_top, g.pad_left), (1, 1));
        let g = ConvGeom::new(Dims::new(1, 7, 7), 2, 3, 3, 2, Padding::Same).unwrap();
        assert_eq!(g.output, Dims::new(2, 4, 4));
        let g = ConvGeom::new(Dims::new(1, 7, 7), 2, 3, 3, 2, Padding::Valid).unwrap();
        assert_eq!(g.output, Dims::new(2, 3, 3));
        assert!(ConvGeom::new(Dims::new(1, 2, 2), 1, 3, 3, 1, Padding::Valid).is_none());
    }

    #[test]
    fn maxpool_tie_routes_to_first_row_major_element() {
        let x = vec![5.0, 5.0, 5.0, 5.0];
        let (v, arg) = maxpool_forward(&x, Dims::new(1, 2, 2), 2);
        assert_eq!(v, vec![5.0]);
        assert_eq!(arg, vec![0]);
        assert_eq!(maxpool_backward(4, &arg, &[1.5]), vec![1.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_kink_has_zero_derivative() {
        assert_eq!(relu_backward(&[-1.0, 0.0, 2.0], &[1.0, 1.0, 1.0]), vec![0.0, 0.0, 1.0]);
    }
}
