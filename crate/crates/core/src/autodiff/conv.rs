//! Geometry and im2col/col2im helpers shared by the convolution ops.

use crate::error::{Error, Result};

/// Kernel size, stride and zero padding per spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    /// The 4x4, stride 2, padding 1 block used throughout the encoder/decoder.
    pub const DOWN4: ConvGeometry = ConvGeometry {
        kernel: (4, 4),
        stride: (2, 2),
        padding: (1, 1),
    };

    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Output spatial size of a forward convolution. Rejects inputs whose
    /// padded extent is not an exact multiple of the stride.
    pub fn conv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            let padded = n + 2 * p;
            if padded < k || (padded - k) % s != 0 {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    detail: format!(
                        "spatial size {n} incompatible with kernel {k}, stride {s}, padding {p}"
                    ),
                });
            }
            Ok((padded - k) / s + 1)
        };
        Ok((
            axis(h, self.kernel.0, self.stride.0, self.padding.0)?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }

    /// Output spatial size of the transposed convolution.
    pub fn transposed_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            let full = (n - 1) * s + k;
            if n == 0 || full < 2 * p {
                return Err(Error::InvalidShape {
                    op: "conv_transpose2d",
                    detail: format!("spatial size {n} too small"),
                });
            }
            Ok(full - 2 * p)
        };
        Ok((
            axis(h, self.kernel.0, self.stride.0, self.padding.0)?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }
}

/// Unfolds one image `x[c, h, w]` into `col[c*kh*kw, oh*ow]`.
pub fn im2col(
    x: &[f64],
    c: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    g: &ConvGeometry,
    col: &mut [f64],
) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let plane = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oi in 0..oh {
                    let ii = (oi * sh + ki) as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        dst[oi * ow..(oi + 1) * ow].fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + ii as usize) * w..(ci * h + ii as usize + 1) * w];
                    for oj in 0..ow {
                        let jj = (oj * sw + kj) as isize - pw as isize;
                        dst[oi * ow + oj] = if jj < 0 || jj >= w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds `col[c*kh*kw, oh*ow]` back into `x[c, h, w]`, accumulating overlaps.
pub fn col2im(
    col: &[f64],
    c: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    g: &ConvGeometry,
    x: &mut [f64],
) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let plane = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oi in 0..oh {
                    let ii = (oi * sh + ki) as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = (ci * h + ii as usize) * w;
                    for oj in 0..ow {
                        let jj = (oj * sw + kj) as isize - pw as isize;
                        if jj >= 0 && jj < w as isize {
                            x[base + jj as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn down4_halves_even_sizes_and_rejects_odd() {
        let g = ConvGeometry::DOWN4;
        assert_eq!(g.conv_output(32, 8).unwrap(), (16, 4));
        assert!(g.conv_output(7, 8).is_err());
        assert_eq!(g.transposed_output(16, 4).unwrap(), (32, 8));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::new((3, 2), (2, 1), (1, 0));
        let (c, h, w) = (2, 5, 4);
        let (oh, ow) = g.conv_output(h, w).unwrap();
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.3).sin()).collect();
        let rows = c * 6;
        let y: Vec<f64> = (0..rows * oh * ow).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut col = vec![0.0; rows * oh * ow];
        im2col(&x, c, (h, w), (oh, ow), &g, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; c * h * w];
        col2im(&y, c, (h, w), (oh, ow), &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
