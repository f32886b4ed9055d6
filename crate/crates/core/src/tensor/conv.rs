/// Index relation between a "big" and a "small" spatial grid shared by
/// strided convolutions and their transposes.
///
/// Small cell `(sy, sx)` with kernel tap `(ky, kx)` touches big cell
/// `(sy * stride - pad + ky, sx * stride - pad + kx)` when it is in range.
/// A convolution reads the big grid (its input) into patches of the small
/// grid (its output); a transposed convolution scatters small-grid patches
/// into the big grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub big_h: usize,
    pub big_w: usize,
    pub small_h: usize,
    pub small_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub channels: usize,
}

impl ConvGeometry {
    /// Width of one patch row: `kernel * kernel * channels`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn small_cells(&self) -> usize {
        self.small_h * self.small_w
    }

    pub fn big_len(&self) -> usize {
        self.big_h * self.big_w * self.channels
    }

    #[inline]
    fn big_index(&self, sy: usize, sx: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (sy * self.stride + ky).checked_sub(self.pad)?;
        let x = (sx * self.stride + kx).checked_sub(self.pad)?;
        if y < self.big_h && x < self.big_w {
            Some((y * self.big_w + x) * self.channels)
        } else {
            None
        }
    }

    /// Copies patches of `big` (`[big_h, big_w, channels]`) into `cols`
    /// (`[small_cells, patch_len]`); out-of-range taps read zero.
    pub fn gather(&self, big: &[f64], cols: &mut [f64]) {
        let c = self.channels;
        let pl = self.patch_len();
        debug_assert_eq!(big.len(), self.big_len());
        debug_assert_eq!(cols.len(), self.small_cells() * pl);
        for sy in 0..self.small_h {
            for sx in 0..self.small_w {
                let row = &mut cols[(sy * self.small_w + sx) * pl..][..pl];
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let dst = &mut row[(ky * self.kernel + kx) * c..][..c];
                        match self.big_index(sy, sx, ky, kx) {
                            Some(src) => dst.copy_from_slice(&big[src..src + c]),
                            None => dst.fill(0.0),
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`gather`](Self::gather): accumulates `cols` into `big`.
    pub fn scatter_add(&self, cols: &[f64], big: &mut [f64]) {
        let c = self.channels;
        let pl = self.patch_len();
        debug_assert_eq!(big.len(), self.big_len());
        debug_assert_eq!(cols.len(), self.small_cells() * pl);
        for sy in 0..self.small_h {
            for sx in 0..self.small_w {
                let row = &cols[(sy * self.small_w + sx) * pl..][..pl];
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        if let Some(dst) = self.big_index(sy, sx, ky, kx) {
                            let src = &row[(ky * self.kernel + kx) * c..][..c];
                            for (d, s) in big[dst..dst + c].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}
