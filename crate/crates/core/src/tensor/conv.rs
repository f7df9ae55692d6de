//! Convolution (im2col + GEMM) and bilinear resampling kernels.

use super::Scalar;
use crate::error::{Error, Result};

/// Reflect an out-of-range index back into `0..n` (edge pixel not repeated).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

#[derive(Debug, Clone)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (cin, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input must be [C, H, W], got {input:?}"),
                ))
            }
        };
        let (cout, kcin, kh, kw) = match *kernel {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be [Cout, Cin, kH, kW], got {kernel:?}"),
                ))
            }
        };
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input channels: kernel expects {kcin}, input has {cin}"),
            ));
        }
        if bias != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias must be [{cout}], got {bias:?}"),
            ));
        }
        // Even kernels have no centre tap, so only unpadded (valid) mode is allowed.
        if pad > 0 && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(Error::shape(
                "conv2d",
                format!("padded convolution needs odd kernel height/width, got {kh}x{kw}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if pad >= h || pad >= w {
            return Err(Error::shape(
                "conv2d",
                format!("reflection padding {pad} needs height and width > {pad}, got {h}x{w}"),
            ));
        }
        if h + 2 * pad < kh {
            return Err(Error::shape(
                "conv2d",
                format!("height {h} (+2*{pad} padding) smaller than kernel height {kh}"),
            ));
        }
        if w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("width {w} (+2*{pad} padding) smaller than kernel width {kw}"),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let rows = (0..ho)
            .flat_map(|oy| {
                (0..kh).map(move |ki| reflect((oy * stride + ki) as isize - pad as isize, h))
            })
            .collect();
        let cols = (0..wo)
            .flat_map(|ox| {
                (0..kw).map(move |kj| reflect((ox * stride + kj) as isize - pad as isize, w))
            })
            .collect();
        Ok(Self {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            rows,
            cols,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    pub fn im2col<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let p = self.pixels();
        let mut out = vec![T::zero(); self.patch_len() * p];
        for c in 0..self.cin {
            let plane = &input[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for oy in 0..self.ho {
                        let src = &plane[self.rows[oy * self.kh + ki] * self.w..];
                        let dst = &mut out[row + oy * self.wo..row + (oy + 1) * self.wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src[self.cols[ox * self.kw + kj]];
                        }
                    }
                }
            }
        }
        out
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let p = self.pixels();
        let mut out = vec![T::zero(); self.cin * self.h * self.w];
        for c in 0..self.cin {
            let plane = &mut out[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for oy in 0..self.ho {
                        let base = self.rows[oy * self.kh + ki] * self.w;
                        let src = &cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        for (ox, &v) in src.iter().enumerate() {
                            plane[base + self.cols[ox * self.kw + kj]] += v;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward<T: Scalar>(&self, cols: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
        let p = self.pixels();
        let k = self.patch_len();
        let mut out = vec![T::zero(); self.cout * p];
        T::gemm(
            self.cout,
            k,
            p,
            T::one(),
            kernel,
            (k as isize, 1),
            cols,
            (p as isize, 1),
            T::zero(),
            &mut out,
            (p as isize, 1),
        );
        for (row, &b) in out.chunks_exact_mut(p).zip(bias) {
            row.iter_mut().for_each(|v| *v += b);
        }
        out
    }

    /// Returns (d_input, d_kernel, d_bias).
    pub fn backward<T: Scalar>(
        &self,
        grad_out: &[T],
        cols: &[T],
        kernel: &[T],
        need_input: bool,
    ) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
        let p = self.pixels();
        let k = self.patch_len();
        let d_bias = grad_out.chunks_exact(p).map(|row| row.iter().copied().sum()).collect();
        let mut d_kernel = vec![T::zero(); self.cout * k];
        T::gemm(
            self.cout,
            p,
            k,
            T::one(),
            grad_out,
            (p as isize, 1),
            cols,
            (1, p as isize),
            T::zero(),
            &mut d_kernel,
            (k as isize, 1),
        );
        let d_input = need_input.then(|| {
            let mut d_cols = vec![T::zero(); k * p];
            T::gemm(
                k,
                self.cout,
                p,
                T::one(),
                kernel,
                (1, k as isize),
                grad_out,
                (p as isize, 1),
                T::zero(),
                &mut d_cols,
                (p as isize, 1),
            );
            self.col2im(&d_cols)
        });
        (d_input, d_kernel, d_bias)
    }
}

/// One output coordinate's two source taps along an axis.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn taps(n: usize, factor: usize) -> Vec<Tap> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let w_hi = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - w_hi,
                w_hi,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub(crate) struct Upsample {
    c: usize,
    h: usize,
    w: usize,
    ys: Vec<Tap>,
    xs: Vec<Tap>,
}

impl Upsample {
    pub fn new(shape: &[usize], factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let (c, h, w) = match *shape {
            [c, h, w] if h > 0 && w > 0 => (c, h, w),
            _ => {
                return Err(Error::shape(
                    "upsample_bilinear",
                    format!("input must be non-empty [C, H, W], got {shape:?}"),
                ))
            }
        };
        Ok(Self {
            c,
            h,
            w,
            ys: taps(h, factor),
            xs: taps(w, factor),
        })
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.c, self.ys.len(), self.xs.len()]
    }

    pub fn forward<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let (oh, ow) = (self.ys.len(), self.xs.len());
        let mut out = Vec::with_capacity(self.c * oh * ow);
        for c in 0..self.c {
            let plane = &input[c * self.h * self.w..];
            for ty in &self.ys {
                let (r0, r1) = (&plane[ty.lo * self.w..], &plane[ty.hi * self.w..]);
                let (wy0, wy1) = (T::of(ty.w_lo), T::of(ty.w_hi));
                for tx in &self.xs {
                    let (wx0, wx1) = (T::of(tx.w_lo), T::of(tx.w_hi));
                    let top = r0[tx.lo] * wx0 + r0[tx.hi] * wx1;
                    let bottom = r1[tx.lo] * wx0 + r1[tx.hi] * wx1;
                    out.push(top * wy0 + bottom * wy1);
                }
            }
        }
        out
    }

    pub fn backward<T: Scalar>(&self, grad_out: &[T]) -> Vec<T> {
        let (oh, ow) = (self.ys.len(), self.xs.len());
        let mut d = vec![T::zero(); self.c * self.h * self.w];
        for c in 0..self.c {
            let plane = &mut d[c * self.h * self.w..(c + 1) * self.h * self.w];
            let g = &grad_out[c * oh * ow..(c + 1) * oh * ow];
            for (oy, ty) in self.ys.iter().enumerate() {
                let (wy0, wy1) = (T::of(ty.w_lo), T::of(ty.w_hi));
                for (ox, tx) in self.xs.iter().enumerate() {
                    let v = g[oy * ow + ox];
                    let (wx0, wx1) = (T::of(tx.w_lo), T::of(tx.w_hi));
                    plane[ty.lo * self.w + tx.lo] += v * wy0 * wx0;
                    plane[ty.lo * self.w + tx.hi] += v * wy0 * wx1;
                    plane[ty.hi * self.w + tx.lo] += v * wy1 * wx0;
                    plane[ty.hi * self.w + tx.hi] += v * wy1 * wx1;
                }
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 5), 3);
    }

    #[test]
    fn output_extent_formula() {
        let g = ConvGeom::new(&[1, 64, 64], &[1, 1, 3, 3], &[1], 2, 1).unwrap();
        assert_eq!((g.ho, g.wo), (32, 32));
        let g = ConvGeom::new(&[1, 7, 9], &[1, 1, 3, 5], &[1], 1, 0).unwrap();
        assert_eq!((g.ho, g.wo), (5, 5));
    }

    #[test]
    fn rejects_bad_shapes() {
        let err = ConvGeom::new(&[2, 8, 8], &[1, 3, 3, 3], &[1], 1, 1).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
        assert!(ConvGeom::new(&[1, 8, 8], &[1, 1, 2, 2], &[1], 1, 1).is_err());
        assert!(ConvGeom::new(&[1, 8, 8], &[1, 1, 2, 2], &[1], 1, 0).is_ok());
        assert!(ConvGeom::new(&[1, 8, 8], &[1, 1, 3, 3], &[2], 1, 1).is_err());
        assert!(ConvGeom::new(&[1, 1, 8], &[1, 1, 3, 3], &[1], 1, 1).is_err());
    }
}
