//! im2col convolution kernels on raw NCHW buffers.
//!
//! The whole batch is unfolded into one `(C·F·F) × (N·Ho·Wo)` column matrix so
//! that small spatial extents still produce a single reasonably shaped GEMM.
//! Transposed convolution is the adjoint of [`conv2d_forward`] and reuses the
//! input-gradient path.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Zero-padding vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding.
    Valid,
    /// Symmetric zero padding of `(span - 1) / 2`; defined for odd effective spans.
    Same,
}

/// Effective spatial span of an `f`-tap filter at the given dilation.
pub fn effective_span(f: usize, dilation: usize) -> usize {
    f + (f - 1) * (dilation - 1)
}

/// Resolved geometry of a 2-D convolution, viewed in the forward direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn pad_for(op: &'static str, padding: Padding, span: usize) -> Result<usize> {
    match padding {
        Padding::Valid => Ok(0),
        Padding::Same if span % 2 == 1 => Ok((span - 1) / 2),
        Padding::Same => Err(Error::Invalid(format!(
            "{op}: \"same\" padding needs an odd effective span, got {span}"
        ))),
    }
}

impl ConvGeom {
    /// Geometry of `conv2d(input [N,C,H,W], filters [O,C,F,F])`.
    pub fn conv(
        input: [usize; 4],
        filters: [usize; 4],
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [n, c, h, w] = input;
        let [o, fc, fh, fw] = filters;
        if fc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                axis: "input channels (filter axis 1)".into(),
                expected: c,
                got: fc,
            });
        }
        if fh != fw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                axis: "filter width (axis 3)".into(),
                expected: fh,
                got: fw,
            });
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::Invalid("conv2d: stride and dilation must be >= 1".into()));
        }
        let span = effective_span(fh, dilation);
        let pad = pad_for("conv2d", padding, span)?;
        if h + 2 * pad < span || w + 2 * pad < span {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                axis: "spatial extent (axes 2/3)".into(),
                expected: span,
                got: h.min(w) + 2 * pad,
            });
        }
        Ok(Self {
            batch: n,
            in_ch: c,
            in_h: h,
            in_w: w,
            out_ch: o,
            kernel: fh,
            stride,
            dilation,
            pad,
            out_h: (h + 2 * pad - span) / stride + 1,
            out_w: (w + 2 * pad - span) / stride + 1,
        })
    }

    /// Geometry of `conv2d_transpose(input [N,Ci,H,W], filters [Ci,Co,F,F])`,
    /// expressed as the forward convolution it is the adjoint of.
    ///
    /// Output extent is `H·stride` for `Same` and `(H-1)·stride + F` for `Valid`.
    pub fn transpose(input: [usize; 4], filters: [usize; 4], stride: usize, padding: Padding) -> Result<Self> {
        let [n, ci, h, w] = input;
        let [fi, co, fh, fw] = filters;
        if fi != ci {
            return Err(Error::ShapeMismatch {
                op: "conv2d_transpose",
                axis: "input channels (filter axis 0)".into(),
                expected: ci,
                got: fi,
            });
        }
        if fh != fw {
            return Err(Error::ShapeMismatch {
                op: "conv2d_transpose",
                axis: "filter width (axis 3)".into(),
                expected: fh,
                got: fw,
            });
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d_transpose: stride must be >= 1".into()));
        }
        let pad = pad_for("conv2d_transpose", padding, fh)?;
        let (oh, ow) = match padding {
            Padding::Same => (h * stride, w * stride),
            Padding::Valid => ((h - 1) * stride + fh, (w - 1) * stride + fh),
        };
        let g = Self {
            batch: n,
            in_ch: co,
            in_h: oh,
            in_w: ow,
            out_ch: ci,
            kernel: fh,
            stride,
            dilation: 1,
            pad,
            out_h: (oh + 2 * pad - fh) / stride + 1,
            out_w: (ow + 2 * pad - fh) / stride + 1,
        };
        debug_assert_eq!((g.out_h, g.out_w), (h, w));
        Ok(g)
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_ch * self.in_h * self.in_w
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_ch * self.out_h * self.out_w
    }

    pub fn filter_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }

    fn rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn cols(&self) -> usize {
        self.batch * self.plane()
    }

    /// Output columns `ox` whose input coordinate `ox*stride + off` lies in `0..in_w`.
    fn valid_range(&self, off: isize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = if (extent as isize) <= off {
            0
        } else {
            (((extent as isize) - off + s - 1) / s).min(out_extent as isize)
        };
        (lo as usize, (hi.max(lo)) as usize)
    }
}

/// Unfold `x` into a `(C·F·F) × (N·Ho·Wo)` matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (plane, ncols) = (g.plane(), g.cols());
    let mut cols = vec![T::zero(); g.rows() * ncols];
    let f = g.kernel;
    for c in 0..g.in_ch {
        for ki in 0..f {
            let off_y = (ki * g.dilation) as isize - g.pad as isize;
            let (y0, y1) = g.valid_range(off_y, g.in_h, g.out_h);
            for kj in 0..f {
                let off_x = (kj * g.dilation) as isize - g.pad as isize;
                let (x0, x1) = g.valid_range(off_x, g.in_w, g.out_w);
                let row = (c * f + ki) * f + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oy in y0..y1 {
                        let iy = (oy * g.stride) as isize + off_y;
                        let src_row = &src[iy as usize * g.in_w..][..g.in_w];
                        let d = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride == 1 {
                            let base = (x0 as isize + off_x) as usize;
                            d[x0..x1].copy_from_slice(&src_row[base..base + (x1 - x0)]);
                        } else {
                            for ox in x0..x1 {
                                d[ox] = src_row[((ox * g.stride) as isize + off_x) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a column matrix back into an NCHW buffer, summing overlaps.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (plane, ncols) = (g.plane(), g.cols());
    let mut x = vec![T::zero(); g.input_len()];
    let f = g.kernel;
    for c in 0..g.in_ch {
        for ki in 0..f {
            let off_y = (ki * g.dilation) as isize - g.pad as isize;
            let (y0, y1) = g.valid_range(off_y, g.in_h, g.out_h);
            for kj in 0..f {
                let off_x = (kj * g.dilation) as isize - g.pad as isize;
                let (x0, x1) = g.valid_range(off_x, g.in_w, g.out_w);
                let row = (c * f + ki) * f + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut x[(n * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oy in y0..y1 {
                        let iy = (oy * g.stride) as isize + off_y;
                        let d = &mut dst[iy as usize * g.in_w..][..g.in_w];
                        let s = &src[oy * g.out_w..(oy + 1) * g.out_w];
                        for ox in x0..x1 {
                            d[((ox * g.stride) as isize + off_x) as usize] += s[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[O, N·P]` → `[N, O, P]`.
fn channel_major_to_nchw<T: Real>(src: &[T], batch: usize, ch: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for o in 0..ch {
        for n in 0..batch {
            out[(n * ch + o) * plane..][..plane].copy_from_slice(&src[(o * batch + n) * plane..][..plane]);
        }
    }
    out
}

/// `[N, O, P]` → `[O, N·P]`.
fn nchw_to_channel_major<T: Real>(src: &[T], batch: usize, ch: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for n in 0..batch {
        for o in 0..ch {
            out[(o * batch + n) * plane..][..plane].copy_from_slice(&src[(n * ch + o) * plane..][..plane]);
        }
    }
    out
}

/// Cross-correlation `y[n,o] = Σ_c w[o,c] ⋆ x[n,c]`.
pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = im2col(x, g);
    let mut y = vec![T::zero(); g.out_ch * g.cols()];
    T::gemm(false, false, g.out_ch, g.cols(), g.rows(), T::one(), w, &cols, T::zero(), &mut y);
    channel_major_to_nchw(&y, g.batch, g.out_ch, g.plane())
}

/// Gradient of [`conv2d_forward`] with respect to its input.
pub fn conv2d_grad_input<T: Real>(dy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let dy = nchw_to_channel_major(dy, g.batch, g.out_ch, g.plane());
    let mut dcols = vec![T::zero(); g.rows() * g.cols()];
    T::gemm(true, false, g.rows(), g.cols(), g.out_ch, T::one(), w, &dy, T::zero(), &mut dcols);
    col2im(&dcols, g)
}

/// Gradient of [`conv2d_forward`] with respect to its filters.
pub fn conv2d_grad_filter<T: Real>(dy: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let dy = nchw_to_channel_major(dy, g.batch, g.out_ch, g.plane());
    let cols = im2col(x, g);
    let mut dw = vec![T::zero(); g.filter_len()];
    T::gemm(false, true, g.out_ch, g.rows(), g.cols(), T::one(), &dy, &cols, T::zero(), &mut dw);
    dw
}
