//! Strided convolution geometry and the column transforms shared by
//! convolution and transposed convolution.
//!
//! All convolutions are handled as 3-D; a 2-D convolution is the special case
//! with unit depth, unit kernel depth and no depth padding.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    /// Channels on the "image" side (convolution input, transposed-convolution output).
    pub image_ch: usize,
    /// Channels on the "feature" side (convolution output, transposed-convolution input).
    pub feat_ch: usize,
    pub image_sp: [usize; 3],
    pub feat_sp: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    /// Geometry of a convolution applied to an image of spatial size `image_sp`.
    /// Returns `None` when the kernel does not fit.
    pub fn for_conv(
        image_ch: usize,
        feat_ch: usize,
        image_sp: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Option<Self> {
        let mut feat_sp = [0; 3];
        for d in 0..3 {
            let padded = image_sp[d] + 2 * pad[d];
            if stride[d] == 0 || kernel[d] == 0 || padded < kernel[d] {
                return None;
            }
            feat_sp[d] = (padded - kernel[d]) / stride[d] + 1;
        }
        Some(Self {
            image_ch,
            feat_ch,
            image_sp,
            feat_sp,
            kernel,
            stride,
            pad,
        })
    }

    /// Geometry of a transposed convolution applied to features of spatial
    /// size `feat_sp`; the image side is `(f - 1)·s - 2p + k`.
    pub fn for_transposed(
        feat_ch: usize,
        image_ch: usize,
        feat_sp: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Option<Self> {
        let mut image_sp = [0; 3];
        for d in 0..3 {
            if feat_sp[d] == 0 || stride[d] == 0 || kernel[d] == 0 {
                return None;
            }
            let full = (feat_sp[d] - 1) * stride[d] + kernel[d];
            if full <= 2 * pad[d] {
                return None;
            }
            image_sp[d] = full - 2 * pad[d];
        }
        Some(Self {
            image_ch,
            feat_ch,
            image_sp,
            feat_sp,
            kernel,
            stride,
            pad,
        })
    }

    /// Rows of the column matrix (`image_ch · kd · kh · kw`).
    pub fn col_rows(&self) -> usize {
        self.image_ch * self.kernel.iter().product::<usize>()
    }

    /// Columns of the column matrix (number of feature positions).
    pub fn col_cols(&self) -> usize {
        self.feat_sp.iter().product()
    }

    pub fn image_len(&self) -> usize {
        self.image_ch * self.image_sp.iter().product::<usize>()
    }

    pub fn feat_len(&self) -> usize {
        self.feat_ch * self.col_cols()
    }

    /// Walks every (column row, feature position, image index) triple with an
    /// in-bounds image index.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [k0, k1, k2] = self.kernel;
        let [s0, s1, s2] = self.stride;
        let [p0, p1, p2] = self.pad;
        let [i0, i1, i2] = self.image_sp;
        let [o0, o1, o2] = self.feat_sp;
        let npos = o0 * o1 * o2;
        let img_plane = i0 * i1 * i2;
        for c in 0..self.image_ch {
            for a in 0..k0 {
                for b in 0..k1 {
                    for e in 0..k2 {
                        let row = ((c * k0 + a) * k1 + b) * k2 + e;
                        let row_base = row * npos;
                        for od in 0..o0 {
                            let id = (od * s0 + a) as isize - p0 as isize;
                            if id < 0 || id >= i0 as isize {
                                continue;
                            }
                            for oh in 0..o1 {
                                let ih = (oh * s1 + b) as isize - p1 as isize;
                                if ih < 0 || ih >= i1 as isize {
                                    continue;
                                }
                                let img_row =
                                    c * img_plane + (id as usize * i1 + ih as usize) * i2;
                                let pos_row = row_base + (od * o1 + oh) * o2;
                                for ow in 0..o2 {
                                    let iw = (ow * s2 + e) as isize - p2 as isize;
                                    if iw < 0 || iw >= i2 as isize {
                                        continue;
                                    }
                                    f(pos_row + ow, img_row + iw as usize, row);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Unfolds one image (`image_ch × image_sp`) into a `col_rows × col_cols` matrix.
    pub fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        debug_assert_eq!(image.len(), self.image_len());
        debug_assert_eq!(cols.len(), self.col_rows() * self.col_cols());
        cols.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_tap(|ci, ii, _| cols[ci] = image[ii]);
    }

    /// Adjoint of [`Self::im2col`]: scatter-adds columns back into an image.
    pub fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        debug_assert_eq!(image.len(), self.image_len());
        debug_assert_eq!(cols.len(), self.col_rows() * self.col_cols());
        self.for_each_tap(|ci, ii, _| image[ii] = image[ii] + cols[ci]);
    }
}
