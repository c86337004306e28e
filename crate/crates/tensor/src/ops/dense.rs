//! Batch normalization, elementwise activations and the affine layer.

use crate::error::{dim_err, Result};
use crate::real::{matmul, Real};
use crate::tensor::{expect_rank, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running per-channel statistics consumed in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Saved forward state for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mode: NormMode,
}

fn check_bn<T: Real>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    expect_rank("batch_norm2d", input, 4)?;
    let (b, c, h, w) = input.dims4();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return dim_err(
            "batch_norm2d",
            format!("gamma {:?} / beta {:?} do not match {c} channels", gamma.shape(), beta.shape()),
        );
    }
    Ok((b, c, h * w))
}

pub fn batch_norm2d_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<&mut RunningStats<T>>,
    mode: NormMode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (batch, channels, plane) = check_bn(input, gamma, beta)?;
    if let Some(r) = &running {
        if r.channels() != channels {
            return dim_err("batch_norm2d", format!("running stats hold {} channels, input has {channels}", r.channels()));
        }
    }
    let x = input.data();
    let eps = T::of(BN_EPS);
    let count = batch * plane;
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    match mode {
        NormMode::Train => {
            let inv_n = T::one() / T::of(count as f64);
            for c in 0..channels {
                let mut s = T::zero();
                for n in 0..batch {
                    let off = (n * channels + c) * plane;
                    s = s + x[off..off + plane].iter().copied().sum::<T>();
                }
                let m = s * inv_n;
                let mut sq = T::zero();
                for n in 0..batch {
                    let off = (n * channels + c) * plane;
                    sq = sq + x[off..off + plane].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
                mean[c] = m;
                var[c] = sq * inv_n;
            }
            if let Some(r) = running {
                let mom = T::of(BN_MOMENTUM);
                let unbias = if count > 1 {
                    T::of(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                for c in 0..channels {
                    r.mean[c] = (T::one() - mom) * r.mean[c] + mom * mean[c];
                    r.var[c] = (T::one() - mom) * r.var[c] + mom * var[c] * unbias;
                }
            }
        }
        NormMode::Eval => match running {
            Some(r) => {
                mean.copy_from_slice(&r.mean);
                var.copy_from_slice(&r.var);
            }
            None => return Err(crate::TensorError::Usage("eval-mode batch norm needs running statistics".into())),
        },
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * plane;
            let (m, s, g, b) = (mean[c], inv_std[c], gamma.data()[c], beta.data()[c]);
            for i in off..off + plane {
                let h = (x[i] - m) * s;
                xhat[i] = h;
                out[i] = g * h + b;
            }
        }
    }
    Ok((Tensor::from_vec(input.shape(), out)?, BnCache { xhat, inv_std, mode }))
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batch_norm2d_backward<T: Real>(
    shape: &[usize],
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
    grad_out: &Tensor<T>,
) -> BnGrads<T> {
    let (batch, channels, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let dy = grad_out.data();
    let xhat = &cache.xhat;
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * plane;
            for i in off..off + plane {
                dbeta[c] = dbeta[c] + dy[i];
                dgamma[c] = dgamma[c] + dy[i] * xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    let count = T::of((batch * plane) as f64);
    for c in 0..channels {
        let g = gamma.data()[c];
        let s = cache.inv_std[c];
        for n in 0..batch {
            let off = (n * channels + c) * plane;
            for i in off..off + plane {
                dx[i] = match cache.mode {
                    // dx = g*s/N * (N*dy - sum(dy) - xhat*sum(dy*xhat))
                    NormMode::Train => g * s / count * (count * dy[i] - dbeta[c] - xhat[i] * dgamma[c]),
                    NormMode::Eval => g * s * dy[i],
                };
            }
        }
    }
    BnGrads {
        input: Tensor::from_vec(shape, dx).expect("bn grad x"),
        gamma: Tensor::from_vec(&[channels], dgamma).expect("bn grad gamma"),
        beta: Tensor::from_vec(&[channels], dbeta).expect("bn grad beta"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn activation_forward<T: Real>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => input.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

/// `output` is the forward result; both derivatives are cheapest from it.
/// The relu subgradient at exactly zero is zero.
pub fn activation_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| match kind {
            Activation::Relu => {
                if y > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => g * y * (T::one() - y),
        })
        .collect();
    Tensor::from_vec(output.shape(), data).expect("activation grad shape")
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `[B, F] x [G, F]^T + bias[G] -> [B, G]`.
pub fn linear_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    expect_rank("linear", input, 2)?;
    expect_rank("linear", weight, 2)?;
    let (b, f) = (input.shape()[0], input.shape()[1]);
    let (g, wf) = (weight.shape()[0], weight.shape()[1]);
    if f != wf {
        return dim_err("linear", format!("input has {f} features, weight expects {wf}"));
    }
    let mut out = vec![T::zero(); b * g];
    if let Some(bias) = bias {
        if bias.shape() != [g] {
            return dim_err("linear", format!("bias {:?} does not match {g} outputs", bias.shape()));
        }
        for row in out.chunks_mut(g) {
            row.copy_from_slice(bias.data());
        }
    }
    matmul(b, f, g, input.data(), false, weight.data(), true, T::one(), &mut out);
    Tensor::from_vec(&[b, g], out)
}

pub fn linear_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, f) = (input.shape()[0], input.shape()[1]);
    let g = weight.shape()[0];
    let mut dx = vec![T::zero(); b * f];
    matmul(b, g, f, grad_out.data(), false, weight.data(), false, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); g * f];
    matmul(g, b, f, grad_out.data(), true, input.data(), false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); g];
    for row in grad_out.data().chunks(g) {
        for (a, &v) in db.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    (
        Tensor::from_vec(&[b, f], dx).expect("linear grad x"),
        Tensor::from_vec(&[g, f], dw).expect("linear grad w"),
        Tensor::from_vec(&[g], db).expect("linear grad b"),
    )
}
