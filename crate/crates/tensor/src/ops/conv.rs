//! Direct 2-D cross-correlation lowered to GEMM through an im2col buffer.

use rayon::prelude::*;

use crate::error::{config_err, dim_err, Result};
use crate::real::{matmul, Real};
use crate::tensor::{expect_rank, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new<T: Real>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        expect_rank("conv2d", input, 4)?;
        expect_rank("conv2d", kernel, 4)?;
        let (batch, in_channels, height, width) = input.dims4();
        let (out_channels, k_in, kh, kw) = kernel.dims4();
        if k_in != in_channels {
            return dim_err(
                "conv2d",
                format!("kernel expects {k_in} input channels, input has {in_channels}"),
            );
        }
        if kh != kw || kh == 0 {
            return config_err("conv2d", format!("kernel must be square and non-empty, got {kh}x{kw}"));
        }
        if let Some(b) = bias {
            if b.shape() != [out_channels] {
                return dim_err(
                    "conv2d",
                    format!("bias shape {:?} does not match {out_channels} output channels", b.shape()),
                );
            }
        }
        if stride == 0 {
            return config_err("conv2d", "stride must be >= 1");
        }
        let extent = |n: usize| -> Result<usize> {
            let padded = n + 2 * padding;
            if padded < kh || (padded - kh) % stride != 0 {
                return config_err(
                    "conv2d",
                    format!("extent {n} with kernel {kh}, stride {stride}, padding {padding} gives no integer output size"),
                );
            }
            Ok((padded - kh) / stride + 1)
        };
        Ok(Self {
            batch,
            in_channels,
            out_channels,
            height,
            width,
            kernel: kh,
            stride,
            padding,
            out_height: extent(height)?,
            out_width: extent(width)?,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_item(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// 1x1, stride 1, no padding: the input item already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Real>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let (oh, ow) = (g.out_height, g.out_width);
    let plane = oh * ow;
    for c in 0..g.in_channels {
        let src = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let (oh, ow) = (g.out_height, g.out_width);
    let plane = oh * ow;
    for c in 0..g.in_channels {
        let dst = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, ConvGeometry)> {
    let g = ConvGeometry::new(input, kernel, bias, stride, padding)?;
    let plane = g.out_plane();
    let item_out = g.out_channels * plane;
    let mut out = vec![T::zero(); g.batch * item_out];
    let x = input.data();
    let w = kernel.data();
    out.par_chunks_mut(item_out)
        .enumerate()
        .for_each(|(b, y)| {
            let xb = &x[b * g.in_item()..(b + 1) * g.in_item()];
            if let Some(bias) = bias {
                for (co, chunk) in y.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bias.data()[co]);
                }
            }
            if g.is_pointwise() {
                matmul(g.out_channels, g.patch_len(), plane, w, false, xb, false, T::one(), y);
            } else {
                let mut cols = vec![T::zero(); g.patch_len() * plane];
                im2col(&g, xb, &mut cols);
                matmul(g.out_channels, g.patch_len(), plane, w, false, &cols, false, T::one(), y);
            }
        });
    let shape = [g.batch, g.out_channels, g.out_height, g.out_width];
    Ok((Tensor::from_vec(&shape, out)?, g))
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let item_out = g.out_channels * plane;
    let patch = g.patch_len();
    let x = input.data();
    let w = kernel.data();
    let dy = grad_out.data();

    // Per-item partial results, reduced in batch order below so the sum
    // does not depend on scheduling.
    let partials: Vec<(Vec<T>, Vec<T>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * g.in_item()..(b + 1) * g.in_item()];
            let dyb = &dy[b * item_out..(b + 1) * item_out];
            let mut dk = Vec::new();
            let mut dx = Vec::new();
            if want_kernel {
                dk = vec![T::zero(); g.out_channels * patch];
                if g.is_pointwise() {
                    matmul(g.out_channels, plane, patch, dyb, false, xb, true, T::zero(), &mut dk);
                } else {
                    let mut cols = vec![T::zero(); patch * plane];
                    im2col(g, xb, &mut cols);
                    matmul(g.out_channels, plane, patch, dyb, false, &cols, true, T::zero(), &mut dk);
                }
            }
            if want_input {
                dx = vec![T::zero(); g.in_item()];
                if g.is_pointwise() {
                    matmul(patch, g.out_channels, plane, w, true, dyb, false, T::zero(), &mut dx);
                } else {
                    let mut dcols = vec![T::zero(); patch * plane];
                    matmul(patch, g.out_channels, plane, w, true, dyb, false, T::zero(), &mut dcols);
                    col2im(g, &dcols, &mut dx);
                }
            }
            (dx, dk)
        })
        .collect();

    let input_grad = want_input.then(|| {
        let mut data = Vec::with_capacity(g.batch * g.in_item());
        for (dx, _) in &partials {
            data.extend_from_slice(dx);
        }
        Tensor::from_vec(input.shape(), data).expect("input grad shape")
    });
    let kernel_grad = want_kernel.then(|| {
        let mut acc = vec![T::zero(); g.out_channels * patch];
        for (_, dk) in &partials {
            for (a, &v) in acc.iter_mut().zip(dk) {
                *a = *a + v;
            }
        }
        Tensor::from_vec(kernel.shape(), acc).expect("kernel grad shape")
    });
    let bias_grad = want_bias.then(|| {
        let mut acc = vec![T::zero(); g.out_channels];
        for b in 0..g.batch {
            for (co, a) in acc.iter_mut().enumerate() {
                let start = b * item_out + co * plane;
                *a = *a + dy[start..start + plane].iter().copied().sum::<T>();
            }
        }
        Tensor::from_vec(&[g.out_channels], acc).expect("bias grad shape")
    });
    ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias: bias_grad,
    }
}
