//! im2col-based cross-correlation kernels.

use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let &[n, c, h, w] = input else {
            return Err(shape_err!("conv2d input must be [N,C,H,W], got {:?}", input));
        };
        let &[k, kc, kh, kw] = kernel else {
            return Err(shape_err!("conv2d kernel must be [K,C,kh,kw], got {:?}", kernel));
        };
        if kc != c {
            return Err(shape_err!("conv2d: input has {c} channels, kernel expects {kc}"));
        }
        if bias != [k] {
            return Err(shape_err!("conv2d: bias shape {:?} does not match {k} output channels", bias));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d: stride must be positive"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(shape_err!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one sample `[C,H,W]` into `[C·kh·kw, Ho·Wo]`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let p = g.out_plane();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((ci * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.ho {
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *d = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let p = g.out_plane();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((ci * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>, g: &ConvGeometry) -> Tensor<T> {
    let (pl, p) = (g.patch_len(), g.out_plane());
    let in_sample = g.c * g.h * g.w;
    let out_sample = g.k * p;
    let mut out = vec![T::zero(); g.n * out_sample];
    let mut cols = vec![T::zero(); pl * p];
    for s in 0..g.n {
        im2col(&input.data()[s * in_sample..(s + 1) * in_sample], g, &mut cols);
        let y = &mut out[s * out_sample..(s + 1) * out_sample];
        T::gemm_raw(g.k, pl, p, kernel.data(), (pl, 1), &cols, (p, 1), T::zero(), y, (p, 1));
        for (plane, &b) in y.chunks_exact_mut(p).zip(bias.data()) {
            plane.iter_mut().for_each(|v| *v += b);
        }
    }
    Tensor::from_parts_unchecked(vec![g.n, g.k, g.ho, g.wo], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Tensor<T>,
}

pub(crate) fn backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeometry,
    want_input: bool,
    want_kernel: bool,
) -> ConvGrads<T> {
    let (pl, p) = (g.patch_len(), g.out_plane());
    let in_sample = g.c * g.h * g.w;
    let out_sample = g.k * p;

    let mut db = vec![0.0f64; g.k];
    for s in 0..g.n {
        for (acc, plane) in db.iter_mut().zip(grad_out.data()[s * out_sample..(s + 1) * out_sample].chunks_exact(p)) {
            *acc += plane.iter().map(|v| v.f64()).sum::<f64>();
        }
    }
    let bias = Tensor::from_parts_unchecked(vec![g.k], db.into_iter().map(T::of).collect());

    let mut dk = want_kernel.then(|| vec![T::zero(); g.k * pl]);
    let mut dx = want_input.then(|| vec![T::zero(); g.n * in_sample]);
    let mut cols = vec![T::zero(); pl * p];
    let mut dcols = vec![T::zero(); pl * p];
    for s in 0..g.n {
        let gy = &grad_out.data()[s * out_sample..(s + 1) * out_sample];
        if let Some(dk) = dk.as_mut() {
            im2col(&input.data()[s * in_sample..(s + 1) * in_sample], g, &mut cols);
            // dK[K,PL] += dY[K,P] · colsᵀ
            T::gemm_raw(g.k, p, pl, gy, (p, 1), &cols, (1, p), T::one(), dk, (pl, 1));
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[PL,P] = Kᵀ · dY
            T::gemm_raw(pl, g.k, p, kernel.data(), (1, pl), gy, (p, 1), T::zero(), &mut dcols, (p, 1));
            col2im(&dcols, g, &mut dx[s * in_sample..(s + 1) * in_sample]);
        }
    }
    ConvGrads {
        input: dx.map(|d| Tensor::from_parts_unchecked(input.shape().to_vec(), d)),
        kernel: dk.map(|d| Tensor::from_parts_unchecked(kernel.shape().to_vec(), d)),
        bias,
    }
}

#[cfg(test)]
mod tests {
    use crate::numerics::Tape;

    use super::*;

    #[test]
    fn unit_kernel_is_identity() {
        let data: Vec<f32> = (0..2 * 3 * 4).map(|v| v as f32 * 0.1).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([2, 1, 3, 4], data.clone()).unwrap());
        let k = tape.constant(Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap());
        let b = tape.constant(Tensor::zeros([1]).unwrap());
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0f32).unwrap());
        let k = tape.constant(Tensor::full([1, 1, 3, 3], 1.0f32).unwrap());
        let b = tape.constant(Tensor::zeros([1]).unwrap());
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn output_geometry() {
        let g = ConvGeometry::new(&[1, 2, 5, 5], &[3, 2, 3, 3], &[3], 2, 1).unwrap();
        assert_eq!((g.ho, g.wo), (3, 3));
        let g = ConvGeometry::new(&[1, 1, 32, 32], &[16, 1, 3, 3], &[16], 1, 1).unwrap();
        assert_eq!((g.ho, g.wo), (32, 32));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ConvGeometry::new(&[1, 2, 5, 5], &[3, 1, 3, 3], &[3], 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 1, 2, 2], &[1, 1, 3, 3], &[1], 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 1, 5, 5], &[2, 1, 3, 3], &[3], 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 5, 5], &[2, 1, 3, 3], &[2], 1, 0).is_err());
    }
}
