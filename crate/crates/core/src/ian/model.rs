//! Generator, discriminator trunk/head and the encoder head on top of the
//! discriminator's final conv layer.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::Padding;
use crate::error::{invalid, Error, Result};
use crate::graph::{BatchStats, BnMode, Graph, Var};
use crate::init;
use crate::mdc::{layout_tensor, MdcParams};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const LEAK: f64 = 0.2;
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
const INIT_STD: f64 = 0.02;
const PLAIN_FILTER: usize = 5;

/// Ternary class indices of the discriminator head.
pub const REAL: usize = 0;
pub const GENERATED: usize = 1;
pub const RECONSTRUCTED: usize = 2;

/// How the generator's hidden stages are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MdcMode {
    /// Plain 5×5 transposed convolutions.
    Off,
    Standard,
    /// Full-Rank MDC: independent weights on the dilated layout.
    Full,
}

impl fmt::Display for MdcMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MdcMode::Off => "off",
            MdcMode::Standard => "standard",
            MdcMode::Full => "full",
        })
    }
}

impl FromStr for MdcMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(MdcMode::Off),
            "standard" => Ok(MdcMode::Standard),
            "full" => Ok(MdcMode::Full),
            other => Err(invalid(format!("unknown mdc mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    /// Channels of the last hidden generator stage; doubles toward the seed.
    pub g_width: usize,
    /// Channels of the first discriminator conv; doubles per layer.
    pub d_width: usize,
    pub mdc: MdcMode,
    pub mdc_filter: usize,
    pub mdc_scales: usize,
    pub mbd_kernels: usize,
    pub mbd_dim: usize,
}

impl ModelConfig {
    pub fn new(image_size: usize, latent_dim: usize) -> Self {
        Self {
            image_size,
            channels: 3,
            latent_dim,
            g_width: 32,
            d_width: 32,
            mdc: MdcMode::Standard,
            mdc_filter: 5,
            mdc_scales: 2,
            mbd_kernels: 32,
            mbd_dim: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 8 || !s.is_power_of_two() {
            return Err(invalid(format!("image size must be a power of two ≥ 8, got {s}")));
        }
        if self.latent_dim == 0 || self.g_width == 0 || self.d_width == 0 || self.channels == 0 {
            return Err(invalid("latent_dim, widths and channels must be positive"));
        }
        if self.mdc_filter % 2 == 0 || self.mdc_scales == 0 {
            return Err(invalid("mdc filter must be odd and scales ≥ 1"));
        }
        if self.mbd_kernels == 0 || self.mbd_dim == 0 {
            return Err(invalid("minibatch discrimination sizes must be positive"));
        }
        Ok(())
    }

    /// Number of stride-2 stages between the 4×4 seed and the image.
    pub fn stages(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }

    /// Generator channels after stage `i` (`0` is the seed).
    pub fn g_channels(&self, i: usize) -> usize {
        self.g_width << (self.stages() - 1 - i)
    }

    pub fn d_channels(&self, i: usize) -> usize {
        self.d_width << i
    }

    /// Length of the flattened final discriminator conv features.
    pub fn feature_len(&self) -> usize {
        self.d_channels(self.stages() - 1) * 16
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}

/// Train or eval mode for batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named batch statistics gathered in train mode, keyed by the norm layer prefix.
pub type StatsLog<T> = Vec<(String, BatchStats<T>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct IanModel<T> {
    pub config: ModelConfig,
    /// Trainable tensors.
    pub params: BTreeMap<String, Tensor<T>>,
    /// Batch-norm running statistics (`<layer>.mean`, `<layer>.var`).
    pub buffers: BTreeMap<String, Tensor<T>>,
}

/// Graph handles for every parameter of a model.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
    masks: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// Substitute the handle used for `name`.
    pub fn set(&mut self, name: &str, v: Var) {
        *self.vars.get_mut(name).expect("known parameter") = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Discriminator conv outputs for one batch, shallowest first.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub layers: Vec<Var>,
}

impl FeatureStack {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least one conv layer")
    }
}

impl<T: Real> IanModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let mut bn = |name: &str, ch: usize, params: &mut BTreeMap<String, Tensor<T>>| {
            params.insert(format!("{name}.gamma"), Tensor::ones([ch]));
            params.insert(format!("{name}.beta"), Tensor::zeros([ch]));
            buffers.insert(format!("{name}.mean"), Tensor::zeros([ch]));
            buffers.insert(format!("{name}.var"), Tensor::ones([ch]));
        };
        let stages = c.stages();

        // generator
        let c0 = c.g_channels(0);
        params.insert("g.fc.w".into(), init::normal([c0 * 16, c.latent_dim], INIT_STD, rng));
        bn("g.bn0", c0, &mut params);
        for i in 1..stages {
            let (cin, cout) = (c.g_channels(i - 1), c.g_channels(i));
            let name = format!("g.up{i}");
            match c.mdc {
                MdcMode::Off => {
                    params.insert(format!("{name}.w"), init::normal([cin, cout, PLAIN_FILTER, PLAIN_FILTER], INIT_STD, rng));
                }
                MdcMode::Standard => {
                    let MdcParams::Standard { base, k } =
                        MdcParams::init_standard(cin, cout, c.mdc_filter, c.mdc_scales, INIT_STD, rng)?
                    else {
                        unreachable!()
                    };
                    params.insert(format!("{name}.w"), base);
                    params.insert(format!("{name}.k"), k);
                }
                MdcMode::Full => {
                    let MdcParams::FullRank { full, .. } =
                        MdcParams::init_full_rank(cin, cout, c.mdc_filter, c.mdc_scales, 1.0, rng)?
                    else {
                        unreachable!()
                    };
                    params.insert(format!("{name}.full"), full);
                }
            }
            bn(&format!("g.bn{i}"), cout, &mut params);
        }
        let last = c.g_channels(stages - 1);
        params.insert("g.out.w".into(), init::normal([last, c.channels, PLAIN_FILTER, PLAIN_FILTER], INIT_STD, rng));
        params.insert("g.out.b".into(), Tensor::zeros([c.channels]));

        // discriminator trunk
        for i in 0..stages {
            let cin = if i == 0 { c.channels } else { c.d_channels(i - 1) };
            let cout = c.d_channels(i);
            params.insert(format!("d.conv{i}.w"), init::normal([cout, cin, PLAIN_FILTER, PLAIN_FILTER], INIT_STD, rng));
            if i == 0 {
                params.insert("d.conv0.b".into(), Tensor::zeros([cout]));
            } else {
                bn(&format!("d.bn{i}"), cout, &mut params);
            }
        }
        let q = c.feature_len();
        params.insert("d.mbd.proj".into(), init::normal([c.mbd_kernels * c.mbd_dim, q], INIT_STD, rng));
        // zero head: uniform predictions at start, whatever the batch-sized
        // minibatch statistics are
        params.insert("d.head.w".into(), Tensor::zeros([3, q + c.mbd_kernels]));
        params.insert("d.head.b".into(), Tensor::zeros([3]));

        // encoder head
        for head in ["mu", "logvar"] {
            params.insert(format!("e.{head}.w"), init::normal([c.latent_dim, q], INIT_STD, rng));
            params.insert(format!("e.{head}.b"), Tensor::zeros([c.latent_dim]));
        }
        Ok(Self { config, params, buffers })
    }

    /// Parameters belonging to the generator.
    pub fn is_generator(name: &str) -> bool {
        name.starts_with("g.")
    }

    pub fn is_discriminator(name: &str) -> bool {
        name.starts_with("d.")
    }

    pub fn is_encoder(name: &str) -> bool {
        name.starts_with("e.")
    }

    /// Conv filter banks (rank 4), the ones orthogonal regularization targets.
    pub fn conv_banks(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, t)| t.rank() == 4)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Layout mask for a Full-Rank MDC weight, `None` for anything else.
    pub fn layout_of(&self, name: &str) -> Option<Tensor<T>> {
        name.ends_with(".full").then(|| {
            layout_tensor(self.params[name].shape(), self.config.mdc_filter, self.config.mdc_scales)
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Record every parameter on `g` as a leaf without gradient tracking.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let mut vars = BTreeMap::new();
        let mut masks = BTreeMap::new();
        for (name, t) in &self.params {
            vars.insert(name.clone(), g.leaf(t.clone(), false));
            if let Some(mask) = self.layout_of(name) {
                masks.insert(name.clone(), g.constant(mask));
            }
        }
        Bound { vars, masks }
    }

    fn norm(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        name: &str,
        mode: Mode,
        stats: &mut StatsLog<T>,
    ) -> Result<Var> {
        let gamma = b.get(&format!("{name}.gamma"));
        let beta = b.get(&format!("{name}.beta"));
        match mode {
            Mode::Train => {
                let (y, s) = g.batch_norm(x, gamma, beta, BnMode::Train)?;
                stats.push((name.to_string(), s.expect("train mode yields stats")));
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.buffers[&format!("{name}.mean")].data();
                let var = self.buffers[&format!("{name}.var")].data();
                Ok(g.batch_norm(x, gamma, beta, BnMode::Eval { mean, var })?.0)
            }
        }
    }

    /// Transposed-conv filter of hidden generator stage `i`.
    fn stage_filter(&self, g: &mut Graph<T>, b: &Bound, i: usize) -> Result<Var> {
        let name = format!("g.up{i}");
        match self.config.mdc {
            MdcMode::Off => Ok(b.get(&format!("{name}.w"))),
            MdcMode::Standard => g.mdc_compose(b.get(&format!("{name}.w")), b.get(&format!("{name}.k"))),
            MdcMode::Full => {
                let full = format!("{name}.full");
                g.mul(b.get(&full), b.masks[&full])
            }
        }
    }

    /// `G(z)` for `z: [B, latent]`, images in `(-1, 1)`.
    pub fn generator(&self, g: &mut Graph<T>, b: &Bound, z: Var, mode: Mode, stats: &mut StatsLog<T>) -> Result<Var> {
        let c = &self.config;
        let batch = g.shape(z)[0];
        let h = g.dense(z, b.get("g.fc.w"), None)?;
        let h = g.reshape(h, [batch, c.g_channels(0), 4, 4])?;
        let h = self.norm(g, b, h, "g.bn0", mode, stats)?;
        let mut h = g.relu(h);
        for i in 1..c.stages() {
            let w = self.stage_filter(g, b, i)?;
            let up = g.conv2d_transpose(h, w, 2, Padding::Same)?;
            let up = self.norm(g, b, up, &format!("g.bn{i}"), mode, stats)?;
            h = g.relu(up);
        }
        let out = g.conv2d_transpose(h, b.get("g.out.w"), 2, Padding::Same)?;
        let out = g.add_bias(out, b.get("g.out.b"))?;
        Ok(g.tanh(out))
    }

    /// Discriminator conv stack; every post-activation output is kept.
    pub fn trunk(&self, g: &mut Graph<T>, b: &Bound, x: Var, mode: Mode, stats: &mut StatsLog<T>) -> Result<FeatureStack> {
        let c = &self.config;
        let want = [g.shape(x).first().copied().unwrap_or(0), c.channels, c.image_size, c.image_size];
        if g.shape(x) != want {
            return Err(Error::ShapeMismatch {
                op: "discriminator input",
                axis: "image shape".into(),
                expected: c.image_size,
                got: g.shape(x).last().copied().unwrap_or(0),
            });
        }
        let mut layers = Vec::with_capacity(c.stages());
        let mut h = x;
        for i in 0..c.stages() {
            let y = g.conv2d(h, b.get(&format!("d.conv{i}.w")), 2, 1, Padding::Same)?;
            let y = if i == 0 {
                g.add_bias(y, b.get("d.conv0.b"))?
            } else {
                self.norm(g, b, y, &format!("d.bn{i}"), mode, stats)?
            };
            h = g.leaky_relu(y, T::lit(LEAK));
            layers.push(h);
        }
        Ok(FeatureStack { layers })
    }

    /// Ternary logits `[B, 3]` from the final conv features, through
    /// minibatch discrimination.
    pub fn head(&self, g: &mut Graph<T>, b: &Bound, last: Var) -> Result<Var> {
        let c = &self.config;
        let flat = g.flatten(last)?;
        let m = g.dense(flat, b.get("d.mbd.proj"), None)?;
        let o = g.minibatch_l1(m, c.mbd_kernels, c.mbd_dim)?;
        let joined = g.concat(&[flat, o], 1)?;
        g.dense(joined, b.get("d.head.w"), Some(b.get("d.head.b")))
    }

    /// `(μ, log σ²)` from the final conv features alone.
    pub fn encoder_head(&self, g: &mut Graph<T>, b: &Bound, last: Var) -> Result<(Var, Var)> {
        let flat = g.flatten(last)?;
        let mu = g.dense(flat, b.get("e.mu.w"), Some(b.get("e.mu.b")))?;
        let lv = g.dense(flat, b.get("e.logvar.w"), Some(b.get("e.logvar.b")))?;
        let lv = g.clamp(lv, T::lit(LOGVAR_MIN), T::lit(LOGVAR_MAX));
        Ok((mu, lv))
    }

    /// Eval-mode posterior for a batch of images in `[-1, 1]`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Posterior<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let feats = self.trunk(&mut g, &b, xv, Mode::Eval, &mut Vec::new())?;
        let (mu, lv) = self.encoder_head(&mut g, &b, feats.last())?;
        Ok(Posterior {
            mu: g.value(mu).clone(),
            logvar: g.value(lv).clone(),
        })
    }

    /// Eval-mode `G(z)` for `z: [B, latent]`.
    pub fn generate(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_latent(z)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let zv = g.constant(z.clone());
        let x = self.generator(&mut g, &b, zv, Mode::Eval, &mut Vec::new())?;
        Ok(g.value(x).clone())
    }

    /// Eval-mode ternary probabilities and conv features for `x` (batch ≥ 2).
    pub fn discriminate(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let feats = self.trunk(&mut g, &b, xv, Mode::Eval, &mut Vec::new())?;
        let logits = self.head(&mut g, &b, feats.last())?;
        let p = g.softmax(logits, 1)?;
        Ok((g.value(p).clone(), feats.layers.iter().map(|&v| g.value(v).clone()).collect()))
    }

    fn check_latent(&self, z: &Tensor<T>) -> Result<()> {
        if z.rank() != 2 || z.shape()[1] != self.config.latent_dim {
            return Err(Error::ShapeMismatch {
                op: "generate",
                axis: "latent (axis 1)".into(),
                expected: self.config.latent_dim,
                got: z.shape().get(1).copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    /// Fold train-mode batch statistics into the running buffers.
    pub fn update_running(&mut self, stats: &StatsLog<T>, momentum: f64) {
        let mo = T::lit(momentum);
        for (name, s) in stats {
            let unbias = if s.count > 1 {
                T::lit(s.count as f64 / (s.count - 1) as f64)
            } else {
                T::one()
            };
            let mean = self.buffers.get_mut(&format!("{name}.mean")).expect("known norm layer");
            for (r, &m) in mean.data_mut().iter_mut().zip(&s.mean) {
                *r = (T::one() - mo) * *r + mo * m;
            }
            let var = self.buffers.get_mut(&format!("{name}.var")).expect("known norm layer");
            for (r, &v) in var.data_mut().iter_mut().zip(&s.var) {
                *r = (T::one() - mo) * *r + mo * v * unbias;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> IanModel<U> {
        IanModel {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Diagonal Gaussian `q(Z|X)`; both tensors `[B, latent]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior<T> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

impl<T: Real> Posterior<T> {
    /// `μ + exp(½ log σ²)·ε`.
    pub fn reparameterize(&self, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.mu.expect_same_shape("reparameterize", eps)?;
        let half = T::lit(0.5);
        let sd = self.logvar.map(|v| (half * v).exp());
        let noise = sd.zip_map(eps, |s, e| s * e)?;
        self.mu.zip_map(&noise, |m, n| m + n)
    }
}
