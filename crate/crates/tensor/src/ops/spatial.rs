//! Pooling, resampling and channel plumbing on `[B, C, H, W]` tensors.

use crate::error::{config_err, dim_err, Result};
use crate::real::Real;
use crate::tensor::{expect_rank, Tensor};

/// Returns the pooled tensor and, per output cell, the flat input index that
/// won the window. Ties go to the first cell in row-major window order.
pub fn max_pool2d_forward<T: Real>(input: &Tensor<T>, window: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    expect_rank("max_pool2d", input, 4)?;
    let (b, c, h, w) = input.dims4();
    if window == 0 || h % window != 0 || w % window != 0 {
        return config_err(
            "max_pool2d",
            format!("extent {h}x{w} is not divisible by window {window}"),
        );
    }
    let (oh, ow) = (h / window, w / window);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * window * w + ox * window;
                let mut best = x[best_idx];
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * window + dy) * w + ox * window + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_vec(&[b, c, oh, ow], out)?, argmax))
}

pub fn max_pool2d_backward<T: Real>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] = d[idx] + g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling: every value becomes a 2x2 block.
pub fn upsample2x_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("upsample2x", input, 4)?;
    let (b, c, h, w) = input.dims4();
    let (oh, ow) = (2 * h, 2 * w);
    let x = input.data();
    let mut out = vec![T::zero(); b * c * oh * ow];
    for plane in 0..b * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                let v = src[y * w + xx];
                let o = 2 * y * ow + 2 * xx;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + ow] = v;
                dst[o + ow + 1] = v;
            }
        }
    }
    Tensor::from_vec(&[b, c, oh, ow], out)
}

pub fn upsample2x_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let ow = 2 * w;
    let g = grad_out.data();
    let mut dx = vec![T::zero(); b * c * h * w];
    for plane in 0..b * c {
        let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let o = 2 * y * ow + 2 * x;
                dx[plane * h * w + y * w + x] = src[o] + src[o + 1] + src[o + ow] + src[o + ow + 1];
            }
        }
    }
    Tensor::from_vec(input_shape, dx).expect("upsample grad shape")
}

/// Concatenate along the channel axis. A tensor with zero channels is the identity.
pub fn concat_channels_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("concat_channels", a, 4)?;
    expect_rank("concat_channels", b, 4)?;
    let (ba, ca, ha, wa) = a.dims4();
    let (bb, cb, hb, wb) = b.dims4();
    if ba != bb || ha != hb || wa != wb {
        return dim_err(
            "concat_channels",
            format!("cannot concatenate {:?} with {:?}", a.shape(), b.shape()),
        );
    }
    let plane = ha * wa;
    let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
    for n in 0..ba {
        out.extend_from_slice(&a.data()[n * ca * plane..(n + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[n * cb * plane..(n + 1) * cb * plane]);
    }
    Tensor::from_vec(&[ba, ca + cb, ha, wa], out)
}

pub fn concat_channels_backward<T: Real>(
    a_shape: &[usize],
    b_shape: &[usize],
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (batch, ca, h, w) = (a_shape[0], a_shape[1], a_shape[2], a_shape[3]);
    let cb = b_shape[1];
    let plane = h * w;
    let g = grad_out.data();
    let mut da = Vec::with_capacity(batch * ca * plane);
    let mut db = Vec::with_capacity(batch * cb * plane);
    for n in 0..batch {
        let start = n * (ca + cb) * plane;
        da.extend_from_slice(&g[start..start + ca * plane]);
        db.extend_from_slice(&g[start + ca * plane..start + (ca + cb) * plane]);
    }
    (
        Tensor::from_vec(a_shape, da).expect("concat grad a"),
        Tensor::from_vec(b_shape, db).expect("concat grad b"),
    )
}

/// Per-channel spatial mean: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("global_avg_pool", input, 4)?;
    let (b, c, h, w) = input.dims4();
    let plane = h * w;
    let inv = T::one() / T::of(plane as f64);
    let out = input
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[b, c], out)
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let plane = input_shape[2] * input_shape[3];
    let inv = T::one() / T::of(plane as f64);
    let mut dx = Vec::with_capacity(grad_out.numel() * plane);
    for &g in grad_out.data() {
        dx.extend(std::iter::repeat(g * inv).take(plane));
    }
    Tensor::from_vec(input_shape, dx).expect("gap grad shape")
}

/// `out[b, c, :, :] = input[b, c, :, :] * gate[b, c]`.
pub fn scale_channels_forward<T: Real>(input: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("scale_channels", input, 4)?;
    let (b, c, h, w) = input.dims4();
    if gate.shape() != [b, c] {
        return dim_err(
            "scale_channels",
            format!("gate {:?} does not match input {:?}", gate.shape(), input.shape()),
        );
    }
    let plane = h * w;
    let mut out = input.data().to_vec();
    for (chunk, &g) in out.chunks_mut(plane).zip(gate.data()) {
        chunk.iter_mut().for_each(|v| *v = *v * g);
    }
    Tensor::from_vec(input.shape(), out)
}

pub fn scale_channels_backward<T: Real>(
    input: &Tensor<T>,
    gate: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let plane = input.shape()[2] * input.shape()[3];
    let mut dx = grad_out.data().to_vec();
    let mut dg = Vec::with_capacity(gate.numel());
    for ((chunk, x), &g) in dx
        .chunks_mut(plane)
        .zip(input.data().chunks(plane))
        .zip(gate.data())
    {
        let mut acc = T::zero();
        for (d, &xv) in chunk.iter_mut().zip(x) {
            acc = acc + *d * xv;
            *d = *d * g;
        }
        dg.push(acc);
    }
    (
        Tensor::from_vec(input.shape(), dx).expect("scale grad x"),
        Tensor::from_vec(gate.shape(), dg).expect("scale grad gate"),
    )
}
