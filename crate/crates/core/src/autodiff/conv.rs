//! im2col / col2im kernels for strided 2-D convolutions on channel-major
//! (`C × H × W`) flattened rows.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Geometry of a square-kernel convolution from `in_c × in_h × in_w` to
/// `out_c × out_h × out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let out_h = (in_h + 2 * pad - kernel) / stride + 1;
        let out_w = (in_w + 2 * pad - kernel) / stride + 1;
        Self {
            in_c,
            in_h,
            in_w,
            out_c,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }

    /// Rows of the patch matrix: `in_c · k · k`.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// The same geometry seen from the output side, as used by the
    /// transposed convolution that inverts the spatial downsampling.
    pub fn transposed(&self) -> ConvGeom {
        ConvGeom {
            in_c: self.out_c,
            in_h: self.out_h,
            in_w: self.out_w,
            out_c: self.in_c,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            out_h: self.in_h,
            out_w: self.in_w,
        }
    }

    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Gather the patches of one image into a `(in_c·k·k) × (out_h·out_w)` matrix.
pub fn im2col<T: Scalar>(image: &[T], geom: &ConvGeom) -> Array2<T> {
    let k = geom.kernel;
    let mut cols = Array2::<T>::zeros((geom.patch_len(), geom.positions()));
    for c in 0..geom.in_c {
        let plane = &image[c * geom.in_h * geom.in_w..(c + 1) * geom.in_h * geom.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                for oy in 0..geom.out_h {
                    for ox in 0..geom.out_w {
                        if let Some((y, x)) = geom.source(oy, ox, ky, kx) {
                            dst[oy * geom.out_w + ox] = plane[y * geom.in_w + x];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a patch matrix back onto an image (adjoint of [`im2col`]).
pub fn col2im<T: Scalar>(cols: &Array2<T>, geom: &ConvGeom, image: &mut [T]) {
    let k = geom.kernel;
    for c in 0..geom.in_c {
        let plane = &mut image[c * geom.in_h * geom.in_w..(c + 1) * geom.in_h * geom.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = cols.row(row);
                for oy in 0..geom.out_h {
                    for ox in 0..geom.out_w {
                        if let Some((y, x)) = geom.source(oy, ox, ky, kx) {
                            plane[y * geom.in_w + x] += src[oy * geom.out_w + ox];
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
    fn reference_stack_halves_spatial_dims() {
        let g1 = ConvGeom::new(1, 32, 32, 32, 4, 2, 1);
        assert_eq!((g1.out_h, g1.out_w), (16, 16));
        let g2 = ConvGeom::new(32, 16, 16, 64, 4, 2, 1);
        let g3 = ConvGeom::new(64, 8, 8, 64, 4, 2, 1);
        assert_eq!((g2.out_h, g3.out_h), (8, 4));
        let t = g3.transposed();
        assert_eq!((t.in_h, t.out_h, t.in_c, t.out_c), (4, 8, 64, 64));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y.
        let geom = ConvGeom::new(2, 6, 6, 3, 4, 2, 1);
        let x: Vec<f64> = (0..geom.in_len()).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y = Array2::from_shape_fn((geom.patch_len(), geom.positions()), |(r, c)| {
            ((r * 3 + c * 5) % 13) as f64 - 6.0
        });
        let lhs: f64 = (&im2col(&x, &geom) * &y).sum();
        let mut back = vec![0.0; geom.in_len()];
        col2im(&y, &geom, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
