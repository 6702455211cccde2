//! Multiscale dilated convolution blocks.
//!
//! One `F×F` filter bank is applied at dilations `1..=S` and the per-scale
//! outputs are mixed with learned per-filter scalars `k`. Because dilated
//! taps of centered filters all land on one `E×E` grid with
//! `E = F + (S-1)(F-1)`, the block is computed as a single convolution with a
//! sparse composed filter. The Full-Rank variant keeps the same sparse layout
//! but trains every populated position independently.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::Padding;
use crate::error::{invalid, Error, Result};
pub use crate::graph::composed_span;
use crate::graph::{for_each_tap, Graph, Var};
use crate::init;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MdcVariant {
    Standard,
    #[serde(rename = "full")]
    FullRank,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MdcParams<T> {
    /// Tied weights: base bank `[N,C,F,F]` and scale weights `[N,S]`.
    Standard { base: Tensor<T>, k: Tensor<T> },
    /// Untied weights `[N,C,E,E]` on the multiscale layout.
    FullRank { full: Tensor<T>, filter: usize, scales: usize },
}

/// Populated positions of the `E×E` composed grid.
pub fn layout_mask(filter: usize, scales: usize) -> Vec<bool> {
    let e = composed_span(filter, scales);
    let mut mask = vec![false; e * e];
    for_each_tap(1, 1, filter, scales, |_, dst, _, _| mask[dst] = true);
    mask
}

fn check_filter(filter: usize, scales: usize) -> Result<()> {
    if filter % 2 == 0 {
        return Err(invalid(format!("MDC filter size must be odd, got {filter}")));
    }
    if scales == 0 {
        return Err(invalid("MDC needs at least one dilation scale"));
    }
    Ok(())
}

impl<T: Real> MdcParams<T> {
    pub fn standard(base: Tensor<T>, k: Tensor<T>) -> Result<Self> {
        let [n, _, f, f2] = base.dims4("mdc")?;
        if f != f2 {
            return Err(Error::ShapeMismatch {
                op: "mdc",
                axis: "filter width (axis 3)".into(),
                expected: f,
                got: f2,
            });
        }
        let [kn, s] = k.dims2("mdc")?;
        check_filter(f, s)?;
        if kn != n {
            return Err(Error::ShapeMismatch {
                op: "mdc",
                axis: "scale weights rows (filters)".into(),
                expected: n,
                got: kn,
            });
        }
        Ok(Self::Standard { base, k })
    }

    /// Full-rank weights; off-layout positions are zeroed.
    pub fn full_rank(mut full: Tensor<T>, filter: usize, scales: usize) -> Result<Self> {
        check_filter(filter, scales)?;
        let e = composed_span(filter, scales);
        let [_, _, h, w] = full.dims4("mdc")?;
        if h != e || w != e {
            return Err(Error::ShapeMismatch {
                op: "mdc",
                axis: "composed span (axes 2/3)".into(),
                expected: e,
                got: h.max(w),
            });
        }
        apply_layout(full.data_mut(), filter, scales);
        Ok(Self::FullRank { full, filter, scales })
    }

    /// DCGAN-normal base weights with `k[·,1] = 1`, `k[·,s>1] = 0.1`.
    pub fn init_standard<R: Rng + ?Sized>(
        filters: usize,
        channels: usize,
        filter: usize,
        scales: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_filter(filter, scales)?;
        let base = init::normal([filters, channels, filter, filter], std, rng);
        let k = Tensor::from_fn([filters, scales], |i| if i % scales == 0 { T::one() } else { T::lit(0.1) });
        Self::standard(base, k)
    }

    /// Orthogonal initialization over the populated positions only.
    pub fn init_full_rank<R: Rng + ?Sized>(
        filters: usize,
        channels: usize,
        filter: usize,
        scales: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_filter(filter, scales)?;
        let e = composed_span(filter, scales);
        let mask = layout_mask(filter, scales);
        let populated: Vec<usize> = (0..e * e).filter(|&i| mask[i]).collect();
        let cols = channels * populated.len();
        let dense: Vec<T> = init::orthogonal(filters, cols, gain, rng);
        let mut full = Tensor::zeros([filters, channels, e, e]);
        let data = full.data_mut();
        for n in 0..filters {
            for c in 0..channels {
                for (p, &pos) in populated.iter().enumerate() {
                    data[(n * channels + c) * e * e + pos] = dense[n * cols + c * populated.len() + p];
                }
            }
        }
        Self::full_rank(full, filter, scales)
    }

    pub fn variant(&self) -> MdcVariant {
        match self {
            Self::Standard { .. } => MdcVariant::Standard,
            Self::FullRank { .. } => MdcVariant::FullRank,
        }
    }

    /// `(N, C, F, S)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        match self {
            Self::Standard { base, k } => {
                let s = base.shape();
                (s[0], s[1], s[2], k.shape()[1])
            }
            Self::FullRank { full, filter, scales } => (full.shape()[0], full.shape()[1], *filter, *scales),
        }
    }

    pub fn composed_span(&self) -> usize {
        let (_, _, f, s) = self.dims();
        composed_span(f, s)
    }

    /// Number of trainable reals: `N·C·F² + N·S` (Standard) or
    /// `N·C·|layout|` (Full-Rank).
    pub fn trainable_count(&self) -> usize {
        match self {
            Self::Standard { base, k } => base.len() + k.len(),
            Self::FullRank { full, filter, scales } => {
                let (n, c) = (full.shape()[0], full.shape()[1]);
                n * c * layout_mask(*filter, *scales).iter().filter(|&&b| b).count()
            }
        }
    }

    /// The `[N,C,E,E]` sparse filter the block convolves with.
    pub fn compose_filter(&self) -> Tensor<T> {
        match self {
            Self::Standard { base, k } => {
                let (n, c, f, s) = self.dims();
                let e = composed_span(f, s);
                let (wd, kd) = (base.data(), k.data());
                let mut out = vec![T::zero(); n * c * e * e];
                for_each_tap(n, c, f, s, |src, dst, filt, sc| out[dst] += kd[filt * s + sc] * wd[src]);
                Tensor::new([n, c, e, e], out).expect("composed shape")
            }
            Self::FullRank { full, .. } => full.clone(),
        }
    }

    /// Record this block's parameters on `g` as trainable leaves.
    pub fn bind(&self, g: &mut Graph<T>) -> MdcVars {
        match self {
            Self::Standard { base, k } => MdcVars::Standard {
                base: g.param(base.clone()),
                k: g.param(k.clone()),
            },
            Self::FullRank { full, filter, scales } => {
                let mask = layout_tensor::<T>(full.shape(), *filter, *scales);
                MdcVars::FullRank {
                    full: g.param(full.clone()),
                    mask: g.constant(mask),
                }
            }
        }
    }
}

/// Graph handles of a bound MDC block.
#[derive(Debug, Clone, Copy)]
pub enum MdcVars {
    Standard { base: Var, k: Var },
    FullRank { full: Var, mask: Var },
}

impl MdcVars {
    /// Composed filter as a differentiable node. Full-Rank weights pass
    /// through the layout mask, so off-layout positions get zero gradient.
    pub fn filter<T: Real>(&self, g: &mut Graph<T>) -> Result<Var> {
        match *self {
            MdcVars::Standard { base, k } => g.mdc_compose(base, k),
            MdcVars::FullRank { full, mask } => g.mul(full, mask),
        }
    }
}

/// 0/1 tensor of the given `[N,C,E,E]` shape marking the layout.
pub fn layout_tensor<T: Real>(shape: &[usize], filter: usize, scales: usize) -> Tensor<T> {
    let mask = layout_mask(filter, scales);
    let plane = mask.len();
    Tensor::from_fn(shape.to_vec(), |i| if mask[i % plane] { T::one() } else { T::zero() })
}

/// Zero every off-layout entry of an `[N,C,E,E]` buffer.
pub fn apply_layout<T: Real>(data: &mut [T], filter: usize, scales: usize) {
    let mask = layout_mask(filter, scales);
    let plane = mask.len();
    for (i, v) in data.iter_mut().enumerate() {
        if !mask[i % plane] {
            *v = T::zero();
        }
    }
}

/// Block output `conv2d(x, compose_filter(params))`.
pub fn mdc_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    vars: &MdcVars,
    stride: usize,
    padding: Padding,
) -> Result<Var> {
    let w = vars.filter(g)?;
    g.conv2d(x, w, stride, 1, padding)
}

/// Parameter gradients of an MDC block.
#[derive(Debug, Clone)]
pub enum MdcGrads<T> {
    Standard { base: Tensor<T>, k: Tensor<T> },
    FullRank { full: Tensor<T> },
}

/// Gradients of `<upstream, mdc_forward(x)>` with respect to the block parameters.
pub fn mdc_gradients<T: Real>(
    params: &MdcParams<T>,
    x: &Tensor<T>,
    upstream: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<MdcGrads<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = params.bind(&mut g);
    let y = mdc_forward(&mut g, xv, &vars, stride, padding)?;
    let up = g.constant(upstream.clone());
    let p = g.mul(y, up)?;
    let loss = g.sum(p);
    g.backward(loss)?;
    let grad = |g: &Graph<T>, v: Var| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()));
    Ok(match vars {
        MdcVars::Standard { base, k } => MdcGrads::Standard {
            base: grad(&g, base),
            k: grad(&g, k),
        },
        MdcVars::FullRank { full, .. } => MdcGrads::FullRank { full: grad(&g, full) },
    })
}

/// Spatial span and stride of one layer, for receptive-field arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpan {
    pub span: usize,
    pub stride: usize,
}

impl LayerSpan {
    pub fn conv(filter: usize, dilation: usize, stride: usize) -> Self {
        Self {
            span: crate::conv::effective_span(filter, dilation),
            stride,
        }
    }

    /// An MDC block written `FdS`, e.g. `5d2`.
    pub fn mdc(filter: usize, scales: usize, stride: usize) -> Self {
        Self {
            span: composed_span(filter, scales),
            stride,
        }
    }
}

/// Receptive field of a stack: `r ← r + (span-1)·jump`, `jump ← jump·stride`.
pub fn receptive_field(layers: &[LayerSpan]) -> usize {
    let (mut rf, mut jump) = (1, 1);
    for l in layers {
        rf += (l.span - 1) * jump;
        jump *= l.stride;
    }
    rf
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn composed_sizes() {
        assert_eq!(composed_span(5, 2), 9);
        assert_eq!(composed_span(3, 3), 7);
        assert_eq!(composed_span(3, 1), 3);
    }

    #[test]
    fn layout_counts() {
        // 5d2: two 5×5 grids sharing a 3×3 sub-grid
        assert_eq!(layout_mask(5, 2).iter().filter(|&&b| b).count(), 25 + 25 - 9);
        assert_eq!(layout_mask(3, 1).iter().filter(|&&b| b).count(), 9);
    }

    #[test]
    fn even_filter_rejected() {
        let base = Tensor::<f64>::zeros([2, 1, 4, 4]);
        let k = Tensor::<f64>::zeros([2, 2]);
        assert!(MdcParams::standard(base, k).is_err());
    }

    #[test]
    fn zero_scale_weights_compose_to_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let base = Tensor::<f64>::randn([3, 2, 3, 3], 1.0, &mut rng);
        let p = MdcParams::standard(base, Tensor::zeros([3, 3])).unwrap();
        assert!(p.compose_filter().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standard_parameter_count() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let p = MdcParams::<f32>::init_standard(64, 64, 5, 2, 0.02, &mut rng).unwrap();
        assert_eq!(p.trainable_count(), 64 * 64 * 25 + 64 * 2);
        if let MdcParams::Standard { k, .. } = &p {
            assert_eq!(&k.data()[..2], &[1.0, 0.1]);
        }
    }

    #[test]
    fn receptive_fields() {
        assert_eq!(receptive_field(&[LayerSpan::mdc(5, 2, 1)]), 9);
        assert_eq!(receptive_field(&[LayerSpan::mdc(3, 3, 1), LayerSpan::mdc(3, 3, 1)]), 13);
        assert_eq!(receptive_field(&[LayerSpan::conv(1, 1, 1)]), 1);
        assert_eq!(receptive_field(&[LayerSpan::conv(3, 1, 2), LayerSpan::conv(3, 1, 1)]), 7);
    }
}
