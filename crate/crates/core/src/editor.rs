//! Neural photo editing: brush strokes become gradient steps on the latent
//! code, and the model's change is carried onto the real photo through a
//! smoothed mask.
//!
//! All images here are `[3,H,W]` in `[0, 1]`; the generator's `[-1, 1]`
//! range is converted at its boundary.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::ian::{IanModel, Mode};
use crate::imaging::{to_model, to_unit};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 0.05;

/// Anything that maps latents to images and images to latent means.
pub trait LatentGenerator<T: Real> {
    fn latent_dim(&self) -> usize;
    /// `[channels, height, width]`.
    fn image_shape(&self) -> [usize; 3];
    /// Model-space output `[B,C,H,W]` for `z: [B, latent]` as a graph node.
    fn generate_on(&self, g: &mut Graph<T>, z: Var) -> Result<Var>;
    /// Posterior mean and log-variance `[latent]` for a model-space image `[1,C,H,W]`.
    fn encode_image(&self, x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)>;
}

impl<T: Real> LatentGenerator<T> for IanModel<T> {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn image_shape(&self) -> [usize; 3] {
        self.config.image_shape()
    }

    fn generate_on(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let b = self.bind(g);
        self.generator(g, &b, z, Mode::Eval, &mut Vec::new())
    }

    fn encode_image(&self, x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
        let post = self.encode(x)?;
        Ok((post.mu.into_data(), post.logvar.into_data()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Brush {
    /// Pixel coordinates of the center (column, row).
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub color: [f64; 3],
    pub step: f64,
}

impl Brush {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius >= 1.0 && self.radius.is_finite()) {
            return Err(invalid(format!("brush radius must be ≥ 1, got {}", self.radius)));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid("brush color components must be in [0, 1]"));
        }
        if !(self.step >= 0.0 && self.step.is_finite()) {
            return Err(invalid(format!("brush step must be a finite nonnegative number, got {}", self.step)));
        }
        if !(self.x.is_finite() && self.y.is_finite()) {
            return Err(invalid("brush center must be finite"));
        }
        Ok(())
    }

    /// Hard disc of covered pixels as a `[H,W]` 0/1 mask and its pixel count.
    pub fn footprint(&self, height: usize, width: usize) -> (Vec<bool>, usize) {
        let r2 = self.radius * self.radius;
        let mut count = 0;
        let mask = (0..height * width)
            .map(|i| {
                let (py, px) = ((i / width) as f64, (i % width) as f64);
                let hit = (px - self.x).powi(2) + (py - self.y).powi(2) <= r2;
                count += hit as usize;
                hit
            })
            .collect();
        (mask, count)
    }
}

/// Generator output at `z` mapped to `[0, 1]`, as a node.
fn unit_output<T: Real>(model: &impl LatentGenerator<T>, g: &mut Graph<T>, z: Var) -> Result<Var> {
    let out = model.generate_on(g, z)?;
    let shifted = g.add_scalar(out, T::one());
    Ok(g.mul_scalar(shifted, T::lit(0.5)))
}

fn latent_leaf<T: Real>(g: &mut Graph<T>, z: &[T], requires_grad: bool) -> Var {
    g.leaf(Tensor::new([1, z.len()], z.to_vec()).expect("nonempty latent"), requires_grad)
}

/// Mean squared difference between the brush color and the output under the
/// brush disc, plus the latent gradient of that loss. `None` if the disc
/// misses the image.
pub fn patch_loss_and_grad<T: Real>(
    model: &impl LatentGenerator<T>,
    z: &[T],
    brush: &Brush,
    with_grad: bool,
) -> Result<Option<(T, Vec<T>)>> {
    let [c, h, w] = model.image_shape();
    let (disc, count) = brush.footprint(h, w);
    if count == 0 {
        return Ok(None);
    }
    let plane = h * w;
    let mask = Tensor::from_fn([1, c, h, w], |i| if disc[i % plane] { T::one() } else { T::zero() });
    let target = Tensor::from_fn([1, c, h, w], |i| T::lit(brush.color[(i / plane) % 3]));
    let mut g = Graph::new();
    let zv = latent_leaf(&mut g, z, with_grad);
    let out = unit_output(model, &mut g, zv)?;
    let tv = g.constant(target);
    let mv = g.constant(mask);
    let d = g.sub(out, tv)?;
    let sq = g.square(d);
    let masked = g.mul(sq, mv)?;
    let s = g.sum(masked);
    let loss = g.mul_scalar(s, T::lit(1.0 / (count * c) as f64));
    let value = g.value(loss).item();
    let grad = if with_grad {
        g.backward(loss)?;
        g.take_grad(zv).map(Tensor::into_data).unwrap_or_else(|| vec![T::zero(); z.len()])
    } else {
        Vec::new()
    };
    Ok(Some((value, grad)))
}

/// `-∂ patch_loss / ∂z`; all zeros when the brush misses the image.
pub fn brush_gradient<T: Real>(model: &impl LatentGenerator<T>, z: &[T], brush: &Brush) -> Result<Vec<T>> {
    Ok(match patch_loss_and_grad(model, z, brush, true)? {
        Some((_, g)) => g.into_iter().map(|v| -v).collect(),
        None => vec![T::zero(); z.len()],
    })
}

/// Normalized 1-D Gaussian taps, radius `ceil(3σ)`; `[1]` for `σ = 0`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable blur of a `[H,W]` plane, edges clamped.
pub fn gaussian_blur<T: Real>(plane: &[T], h: usize, w: usize, sigma: f64) -> Vec<T> {
    let k: Vec<T> = gaussian_kernel(sigma).into_iter().map(T::lit).collect();
    if k.len() == 1 {
        return plane.to_vec();
    }
    let r = (k.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * plane[y * w + clampi(x as isize + d, w)])
                .sum();
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[clampi(y as isize + d, h) * w + x])
                .sum();
        }
    }
    out
}

/// `min(blur(mean_c |Δ|), 1)` as a `[H,W]` plane.
pub fn compute_mask<T: Real>(delta: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let [c, h, w] = match delta.shape() {
        [c, h, w] => [*c, *h, *w],
        s => return Err(invalid(format!("mask needs a CHW difference, got {s:?}"))),
    };
    let plane = h * w;
    let d = delta.data();
    let inv = T::lit(1.0 / c as f64);
    let mean: Vec<T> = (0..plane).map(|i| (0..c).map(|ch| d[ch * plane + i].abs()).sum::<T>() * inv).collect();
    let blurred = gaussian_blur(&mean, h, w, sigma);
    Tensor::new([h, w], blurred.into_iter().map(|v| v.min(T::one())).collect())
}

/// `Y = X̂ + MΔ + (1-M)(X - X̂)`, evaluated as `(1-M)·X + M·(X̂ + Δ)` so
/// that `M = 0` returns `X` and `M = 1` returns `X̂ + Δ` exactly. Not clamped.
pub fn transfer_edit<T: Real>(x: &Tensor<T>, xhat: &Tensor<T>, delta: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_same_shape("transfer_edit", xhat)?;
    x.expect_same_shape("transfer_edit", delta)?;
    let [_, h, w] = match x.shape() {
        [c, h, w] => [*c, *h, *w],
        s => return Err(invalid(format!("transfer_edit needs CHW images, got {s:?}"))),
    };
    if mask.shape() != [h, w] {
        return Err(invalid(format!("mask shape {:?} does not match {h}×{w}", mask.shape())));
    }
    let plane = h * w;
    let (xd, hd, dd, md) = (x.data(), xhat.data(), delta.data(), mask.data());
    Ok(Tensor::from_fn(x.shape().to_vec(), |i| {
        let m = md[i % plane];
        (T::one() - m) * xd[i] + m * (hd[i] + dd[i])
    }))
}

pub fn clamp_unit<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v.max(T::zero()).min(T::one()))
}

/// Editing state for one photo.
#[derive(Debug, Clone, PartialEq)]
pub struct EditSession<T> {
    original: Tensor<T>,
    mu: Vec<T>,
    logvar: Vec<T>,
    z: Vec<T>,
    /// `G(μ)` in `[0, 1]`.
    initial: Tensor<T>,
    current: Tensor<T>,
    delta: Tensor<T>,
    mask: Tensor<T>,
    output: Tensor<T>,
    history: Vec<Vec<T>>,
    sigma: f64,
}

impl<T: Real> EditSession<T> {
    /// Start a session on `x` (`[3,H,W]` in `[0, 1]`) with mask blur `sigma`.
    pub fn new(model: &impl LatentGenerator<T>, x: Tensor<T>, sigma: f64) -> Result<Self> {
        let shape = model.image_shape();
        if x.shape() != shape {
            return Err(invalid(format!("image shape {:?} does not match model {shape:?}", x.shape())));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(invalid("mask blur must be finite and nonnegative"));
        }
        let batched = to_model(&x).reshape([1, shape[0], shape[1], shape[2]])?;
        let (mu, logvar) = model.encode_image(&batched)?;
        let initial = render(model, &mu)?;
        let mut s = Self {
            original: x,
            z: mu.clone(),
            mu,
            logvar,
            current: initial.clone(),
            delta: Tensor::zeros(initial.shape().to_vec()),
            mask: Tensor::zeros([shape[1], shape[2]]),
            output: Tensor::zeros(initial.shape().to_vec()),
            initial,
            history: Vec::new(),
            sigma,
        };
        s.output = s.compose()?;
        Ok(s)
    }

    /// Default blur: image size / 32.
    pub fn default_sigma(model: &impl LatentGenerator<T>) -> f64 {
        model.image_shape()[1] as f64 / 32.0
    }

    fn compose(&self) -> Result<Tensor<T>> {
        Ok(clamp_unit(&transfer_edit(&self.original, &self.initial, &self.delta, &self.mask)?))
    }

    /// Recompute everything downstream of `z`.
    fn refresh(&mut self, model: &impl LatentGenerator<T>) -> Result<()> {
        let current = render(model, &self.z)?;
        let delta = current.zip_map(&self.initial, |a, b| a - b)?;
        let mask = compute_mask(&delta, self.sigma)?;
        self.current = current;
        self.delta = delta;
        self.mask = mask;
        self.output = self.compose()?;
        Ok(())
    }

    fn move_to(&mut self, model: &impl LatentGenerator<T>, z: Vec<T>) -> Result<()> {
        let previous = std::mem::replace(&mut self.z, z);
        if let Err(e) = self.refresh(model) {
            self.z = previous;
            return Err(e);
        }
        self.history.push(previous);
        Ok(())
    }

    /// One gradient step on the latent toward the brush color.
    pub fn apply_brush(&mut self, model: &impl LatentGenerator<T>, brush: &Brush) -> Result<()> {
        brush.validate()?;
        let grad = brush_gradient(model, &self.z, brush)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("brush gradient".into()));
        }
        let step = T::lit(brush.step);
        let z = self.z.iter().zip(&grad).map(|(&z, &g)| z + step * g).collect();
        self.move_to(model, z)
    }

    pub fn set_latent(&mut self, model: &impl LatentGenerator<T>, index: usize, value: f64) -> Result<()> {
        if index >= self.z.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.z.len(),
            });
        }
        if !value.is_finite() {
            return Err(invalid("latent value must be finite"));
        }
        let mut z = self.z.clone();
        z[index] = T::lit(value);
        self.move_to(model, z)
    }

    /// Step back to the previous latent; `false` if there is none.
    pub fn undo(&mut self, model: &impl LatentGenerator<T>) -> Result<bool> {
        let Some(previous) = self.history.pop() else {
            return Ok(false);
        };
        self.z = previous;
        self.refresh(model)?;
        Ok(true)
    }

    pub fn reset(&mut self) {
        self.z = self.mu.clone();
        self.current = self.initial.clone();
        self.delta = Tensor::zeros(self.initial.shape().to_vec());
        self.mask = Tensor::zeros(self.mask.shape().to_vec());
        self.output = self.compose().expect("shapes fixed at creation");
        self.history.clear();
    }

    pub fn patch_loss(&self, model: &impl LatentGenerator<T>, brush: &Brush) -> Result<Option<T>> {
        Ok(patch_loss_and_grad(model, &self.z, brush, false)?.map(|(l, _)| l))
    }

    pub fn original(&self) -> &Tensor<T> {
        &self.original
    }
    pub fn latents(&self) -> &[T] {
        &self.z
    }
    pub fn posterior(&self) -> (&[T], &[T]) {
        (&self.mu, &self.logvar)
    }
    pub fn reconstruction(&self) -> &Tensor<T> {
        &self.initial
    }
    pub fn current(&self) -> &Tensor<T> {
        &self.current
    }
    pub fn delta(&self) -> &Tensor<T> {
        &self.delta
    }
    pub fn mask(&self) -> &Tensor<T> {
        &self.mask
    }
    /// Edited photo, clamped to `[0, 1]`.
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
    pub fn history_len(&self) -> usize {
        self.history.len()
    }
    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// `G(z)` in `[0, 1]` as `[3,H,W]`.
pub fn render<T: Real>(model: &impl LatentGenerator<T>, z: &[T]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let zv = latent_leaf(&mut g, z, false);
    let out = model.generate_on(&mut g, zv)?;
    to_unit(g.value(out)).reshape(model.image_shape().to_vec())
}
