use super::Scalar;

/// Output length of a zero-padded convolution along one axis:
/// `floor((len + 2 * pad - kernel) / stride) + 1`.
pub(crate) fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || len + 2 * pad < kernel {
        return None;
    }
    Some((len + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1x1 stride-1 unpadded convolutions read the input directly.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
    fn valid(&self, k: usize, len: usize, out: usize) -> (usize, usize) {
        // input index = o * stride + k - pad must lie in [0, len)
        let s = self.stride;
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        let hi = if len + self.pad > k {
            ((len + self.pad - k - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds one `C x H x W` image into a `(C*kh*kw) x (out_h*out_w)` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.col_cols();
    let s = g.stride;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid(ki, g.height, g.out_h);
            for kj in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid(kj, g.width, g.out_w);
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let dst = &mut cols[row..row + p];
                dst.fill(T::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ki - g.pad;
                    let src_row = &plane[iy * g.width..(iy + 1) * g.width];
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if s == 1 {
                        let ix0 = ox_lo + kj - g.pad;
                        drow[ox_lo..ox_hi].copy_from_slice(&src_row[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            drow[ox] = src_row[ox * s + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back into an image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.col_cols();
    let s = g.stride;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid(ki, g.height, g.out_h);
            for kj in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid(kj, g.width, g.out_w);
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let src = &cols[row..row + p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ki - g.pad;
                    let drow = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in ox_lo..ox_hi {
                        drow[ox * s + kj - g.pad] += srow[ox];
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
    fn output_length_matches_pyramid() {
        assert_eq!(conv_out_len(54, 3, 2, 1), Some(27));
        assert_eq!(conv_out_len(27, 3, 2, 1), Some(14));
        assert_eq!(conv_out_len(14, 3, 1, 1), Some(14));
        assert_eq!(conv_out_len(14, 3, 2, 1), Some(7));
        assert_eq!(conv_out_len(72, 3, 2, 1), Some(36));
        assert_eq!(conv_out_len(36, 3, 2, 1), Some(18));
        assert_eq!(conv_out_len(54, 1, 2, 0), Some(27));
        assert_eq!(conv_out_len(2, 5, 1, 1), None);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let (c, h, w, k) = (2, 5, 6, 3);
            let g = ConvGeom {
                channels: c,
                height: h,
                width: w,
                kh: k,
                kw: k,
                stride,
                pad,
                out_h: conv_out_len(h, k, stride, pad).unwrap(),
                out_w: conv_out_len(w, k, stride, pad).unwrap(),
            };
            let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
            let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
                .map(|i| (i as f64 * 0.3).cos())
                .collect();
            let mut cols = vec![0.0; y.len()];
            im2col(&x, &g, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&y, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "stride {stride} pad {pad}");
        }
    }
}
