//! Plain-loop compute kernels for the five layer types.
//!
//! Each kernel partitions its output into disjoint slices (per sample, or per
//! output channel for weight gradients) and is driven through
//! [`crate::parallel`], so threading never changes results. The forward pass
//! is f32; the backward pass carries gradients in f64 until they land in the
//! f32 gradient tensors. Per-cell sums over batch, spatial positions, and
//! channels would otherwise eat most of the equivalence budget between the
//! single-pass and pairwise gradient routes.

use crate::parallel::{for_each_chunk, for_each_chunk_pair};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    pub fn in_spatial(&self) -> usize {
        self.in_h * self.in_w
    }
    pub fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub(crate) fn conv2d_forward(
    d: &ConvDims,
    batch: usize,
    input: &[f32],
    weights: &[f32],
    biases: &[f32],
    output: &mut [f32],
) {
    let in_spatial = d.in_spatial();
    let out_spatial = d.out_spatial();
    let ksq = d.kernel * d.kernel;
    debug_assert_eq!(input.len(), batch * d.in_ch * in_spatial);
    debug_assert_eq!(output.len(), batch * d.out_ch * out_spatial);

    // One disjoint output plane per (sample, out channel).
    for_each_chunk(output, out_spatial, |idx, plane| {
        let b = idx / d.out_ch;
        let oc = idx % d.out_ch;
        let in_base = b * d.in_ch * in_spatial;
        let bias = biases[oc];
        for oy in 0..d.out_h {
            for ox in 0..d.out_w {
                let mut sum = bias;
                for ic in 0..d.in_ch {
                    let w_base = (oc * d.in_ch + ic) * ksq;
                    let in_c = in_base + ic * in_spatial;
                    for ky in 0..d.kernel {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.in_h as isize {
                            continue;
                        }
                        let row = in_c + iy as usize * d.in_w;
                        let w_row = w_base + ky * d.kernel;
                        for kx in 0..d.kernel {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.in_w as isize {
                                continue;
                            }
                            sum += input[row + ix as usize] * weights[w_row + kx];
                        }
                    }
                }
                plane[oy * d.out_w + ox] = sum;
            }
        }
    });
}

/// Overwrites `in_grad` with the gradient w.r.t. the layer input.
pub(crate) fn conv2d_backward_input(
    d: &ConvDims,
    batch: usize,
    weights: &[f32],
    out_grad: &[f64],
    in_grad: &mut [f64],
) {
    let in_spatial = d.in_spatial();
    let out_spatial = d.out_spatial();
    let ksq = d.kernel * d.kernel;
    let per_sample = d.in_ch * in_spatial;
    debug_assert_eq!(in_grad.len(), batch * per_sample);

    for_each_chunk(in_grad, per_sample, |b, sample| {
        sample.iter_mut().for_each(|v| *v = 0.0);
        let g_base = b * d.out_ch * out_spatial;
        for oc in 0..d.out_ch {
            let g_plane = g_base + oc * out_spatial;
            for oy in 0..d.out_h {
                for ox in 0..d.out_w {
                    let g = out_grad[g_plane + oy * d.out_w + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ic in 0..d.in_ch {
                        let w_base = (oc * d.in_ch + ic) * ksq;
                        let in_c = ic * in_spatial;
                        for ky in 0..d.kernel {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.in_h as isize {
                                continue;
                            }
                            let row = in_c + iy as usize * d.in_w;
                            let w_row = w_base + ky * d.kernel;
                            for kx in 0..d.kernel {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.in_w as isize {
                                    continue;
                                }
                                sample[row + ix as usize] += g * weights[w_row + kx] as f64;
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Adds parameter gradients into f64 accumulators laid out like the
/// weight/bias tensors.
pub(crate) fn conv2d_backward_params(
    d: &ConvDims,
    batch: usize,
    input: &[f32],
    out_grad: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let in_spatial = d.in_spatial();
    let out_spatial = d.out_spatial();
    let ksq = d.kernel * d.kernel;
    let w_per_oc = d.in_ch * ksq;
    debug_assert_eq!(grad_w.len(), d.out_ch * w_per_oc);
    debug_assert_eq!(grad_b.len(), d.out_ch);

    // One disjoint (weight slice, bias cell) per output channel.
    for_each_chunk_pair(grad_w, w_per_oc, grad_b, 1, |oc, w_slice, b_cell| {
        for b in 0..batch {
            let in_base = b * d.in_ch * in_spatial;
            let g_plane = (b * d.out_ch + oc) * out_spatial;
            for oy in 0..d.out_h {
                for ox in 0..d.out_w {
                    let g = out_grad[g_plane + oy * d.out_w + ox];
                    if g == 0.0 {
                        continue;
                    }
                    b_cell[0] += g;
                    for ic in 0..d.in_ch {
                        let in_c = in_base + ic * in_spatial;
                        let w_base = ic * ksq;
                        for ky in 0..d.kernel {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.in_h as isize {
                                continue;
                            }
                            let row = in_c + iy as usize * d.in_w;
                            let w_row = w_base + ky * d.kernel;
                            for kx in 0..d.kernel {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.in_w as isize {
                                    continue;
                                }
                                w_slice[w_row + kx] += g * input[row + ix as usize] as f64;
                            }
                        }
                    }
                }
            }
        }
    });
}

pub(crate) fn fc_forward(
    in_dim: usize,
    out_dim: usize,
    batch: usize,
    input: &[f32],
    weights: &[f32],
    biases: &[f32],
    output: &mut [f32],
) {
    debug_assert_eq!(weights.len(), out_dim * in_dim);
    debug_assert_eq!(output.len(), batch * out_dim);
    for_each_chunk(output, out_dim, |b, out| {
        let x = &input[b * in_dim..(b + 1) * in_dim];
        for (j, o) in out.iter_mut().enumerate() {
            let row = &weights[j * in_dim..(j + 1) * in_dim];
            let mut sum = biases[j];
            for (xi, wi) in x.iter().zip(row) {
                sum += xi * wi;
            }
            *o = sum;
        }
    });
}

pub(crate) fn fc_backward_input(
    in_dim: usize,
    out_dim: usize,
    batch: usize,
    weights: &[f32],
    out_grad: &[f64],
    in_grad: &mut [f64],
) {
    debug_assert_eq!(in_grad.len(), batch * in_dim);
    for_each_chunk(in_grad, in_dim, |b, sample| {
        sample.iter_mut().for_each(|v| *v = 0.0);
        let g = &out_grad[b * out_dim..(b + 1) * out_dim];
        for (j, gj) in g.iter().enumerate() {
            if *gj == 0.0 {
                continue;
            }
            let row = &weights[j * in_dim..(j + 1) * in_dim];
            for (s, w) in sample.iter_mut().zip(row) {
                *s += gj * *w as f64;
            }
        }
    });
}

pub(crate) fn fc_backward_params(
    in_dim: usize,
    out_dim: usize,
    batch: usize,
    input: &[f32],
    out_grad: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    // One disjoint (weight row, bias cell) per output neuron.
    for_each_chunk_pair(grad_w, in_dim, grad_b, 1, |j, w_row, b_cell| {
        for b in 0..batch {
            let g = out_grad[b * out_dim + j];
            if g == 0.0 {
                continue;
            }
            b_cell[0] += g;
            let x = &input[b * in_dim..(b + 1) * in_dim];
            for (w, xi) in w_row.iter_mut().zip(x) {
                *w += g * *xi as f64;
            }
        }
    });
}

pub(crate) fn relu_forward(input: &[f32], output: &mut [f32]) {
    for (o, i) in output.iter_mut().zip(input) {
        *o = if *i > 0.0 { *i } else { 0.0 };
    }
}

/// ReLU subgradient at 0 is 0.
pub(crate) fn relu_backward(input: &[f32], out_grad: &[f64], in_grad: &mut [f64]) {
    for ((g_in, g_out), x) in in_grad.iter_mut().zip(out_grad).zip(input) {
        *g_in = if *x > 0.0 { *g_out } else { 0.0 };
    }
}

/// Max pooling with window `k`, stride `k`, no padding; trailing rows/columns
/// that do not fill a window are dropped. `argmax` records the winning
/// in-plane offset for each output cell.
pub(crate) fn maxpool_forward(
    channels: usize,
    in_h: usize,
    in_w: usize,
    k: usize,
    batch: usize,
    input: &[f32],
    output: &mut [f32],
    argmax: &mut [u32],
) {
    let out_h = in_h / k;
    let out_w = in_w / k;
    let in_spatial = in_h * in_w;
    let out_spatial = out_h * out_w;
    debug_assert_eq!(output.len(), batch * channels * out_spatial);
    debug_assert_eq!(argmax.len(), output.len());

    for_each_chunk_pair(output, out_spatial, argmax, out_spatial, |idx, out, arg| {
        let b = idx / channels;
        let c = idx % channels;
        let plane = &input[(b * channels + c) * in_spatial..(b * channels + c + 1) * in_spatial];
        for py in 0..out_h {
            for px in 0..out_w {
                let mut best = f32::NEG_INFINITY;
                let mut best_at = 0u32;
                for dy in 0..k {
                    let iy = py * k + dy;
                    for dx in 0..k {
                        let ix = px * k + dx;
                        let v = plane[iy * in_w + ix];
                        if v > best {
                            best = v;
                            best_at = (iy * in_w + ix) as u32;
                        }
                    }
                }
                out[py * out_w + px] = best;
                arg[py * out_w + px] = best_at;
            }
        }
    });
}

pub(crate) fn maxpool_backward(
    channels: usize,
    in_h: usize,
    in_w: usize,
    k: usize,
    batch: usize,
    out_grad: &[f64],
    argmax: &[u32],
    in_grad: &mut [f64],
) {
    let out_h = in_h / k;
    let out_w = in_w / k;
    let in_spatial = in_h * in_w;
    let out_spatial = out_h * out_w;
    let per_sample = channels * in_spatial;
    debug_assert_eq!(in_grad.len(), batch * per_sample);

    for_each_chunk(in_grad, per_sample, |b, sample| {
        sample.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..channels {
            let o_base = (b * channels + c) * out_spatial;
            let i_base = c * in_spatial;
            for cell in 0..out_spatial {
                sample[i_base + argmax[o_base + cell] as usize] += out_grad[o_base + cell];
            }
        }
    });
}

pub(crate) fn global_avg_pool_forward(
    channels: usize,
    spatial: usize,
    batch: usize,
    input: &[f32],
    output: &mut [f32],
) {
    debug_assert_eq!(output.len(), batch * channels);
    let inv = 1.0 / spatial as f32;
    for_each_chunk(output, channels, |b, out| {
        for (c, o) in out.iter_mut().enumerate() {
            let plane = &input[(b * channels + c) * spatial..(b * channels + c + 1) * spatial];
            let mut sum = 0.0f32;
            for v in plane {
                sum += v;
            }
            *o = sum * inv;
        }
    });
}

pub(crate) fn global_avg_pool_backward(
    channels: usize,
    spatial: usize,
    batch: usize,
    out_grad: &[f64],
    in_grad: &mut [f64],
) {
    let inv = 1.0 / spatial as f64;
    let per_sample = channels * spatial;
    debug_assert_eq!(in_grad.len(), batch * per_sample);
    for_each_chunk(in_grad, per_sample, |b, sample| {
        for c in 0..channels {
            let g = out_grad[b * channels + c] * inv;
            for v in &mut sample[c * spatial..(c + 1) * spatial] {
                *v = g;
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_1x1_conv_passes_image_through() {
        let d = ConvDims {
            in_ch: 1,
            out_ch: 1,
            kernel: 1,
            stride: 1,
            pad: 0,
            in_h: 3,
            in_w: 3,
            out_h: 3,
            out_w: 3,
        };
        let img: Vec<f32> = (0..9).map(|v| v as f32 / 10.0).collect();
        let mut out = vec![0.0; 9];
        conv2d_forward(&d, 1, &img, &[1.0], &[0.0], &mut out);
        assert_eq!(out, img);
    }

    #[test]
    fn relu_matches_definition() {
        let mut out = vec![0.0; 3];
        relu_forward(&[-1.0, 0.0, 2.0], &mut out);
        assert_eq!(out, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let input = vec![1.0, 4.0, 2.0, 3.0];
        let mut out = vec![0.0; 1];
        let mut arg = vec![0u32; 1];
        maxpool_forward(1, 2, 2, 2, 1, &input, &mut out, &mut arg);
        assert_eq!(out[0], 4.0);
        let mut in_grad = vec![0.0f64; 4];
        maxpool_backward(1, 2, 2, 2, 1, &[1.5], &arg, &mut in_grad);
        assert_eq!(in_grad, vec![0.0, 1.5, 0.0, 0.0]);
    }

    #[test]
    fn gap_averages_each_channel() {
        let input = vec![1.0, 3.0, 0.0, 8.0];
        let mut out = vec![0.0; 2];
        global_avg_pool_forward(2, 2, 1, &input, &mut out);
        assert_eq!(out, vec![2.0, 4.0]);
    }
}
