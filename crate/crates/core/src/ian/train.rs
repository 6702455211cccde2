//! One simultaneous update of D and of G/E from a single forward pass.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{Adam, AdamConfig};
use crate::regularizers::{ortho_grad, ortho_penalty};
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::losses;
use super::model::{Bound, FeatureStack, IanModel, Mode, StatsLog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adv: f64,
    pub img: f64,
    pub feature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            img: 3.0,
            feature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    /// Orthogonal regularization strength; 0 disables.
    pub ortho: f64,
    /// Ternary adversarial loss; `false` falls back to real-vs-fake.
    pub ternary: bool,
    pub adam: AdamConfig,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            ortho: 1e-4,
            ternary: true,
            adam: AdamConfig::default(),
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

/// Every loss term of one step. Serializes to the per-step log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    #[serde(rename = "L_img")]
    pub l_img: f64,
    #[serde(rename = "L_feature")]
    pub l_feature: f64,
    #[serde(rename = "L_Gadv")]
    pub l_gadv: f64,
    #[serde(rename = "L_Dadv")]
    pub l_dadv: f64,
    #[serde(rename = "KL")]
    pub kl: f64,
    #[serde(rename = "ortho_G")]
    pub ortho_g: f64,
    #[serde(rename = "ortho_D")]
    pub ortho_d: f64,
    #[serde(rename = "total_G")]
    pub total_g: f64,
    #[serde(skip, default)]
    pub weights: LossWeights,
}

impl LossReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialize")
    }
}

/// Graph nodes of the composite objective.
#[derive(Debug, Clone)]
pub struct Objective<T> {
    pub l_dadv: Var,
    pub l_gadv: Var,
    pub l_img: Var,
    pub l_feature: Var,
    /// KL term as it enters the objective (per latent dimension).
    pub kl: Var,
    /// `λ_adv·L_Gadv + λ_img·L_img + λ_feature·L_feature + KL`.
    pub total: Var,
    /// Generator output for `[z; z_rec]`; D's update does not see through it.
    pub generated: Var,
    pub mu: Var,
    pub logvar: Var,
    pub features: FeatureStack,
    /// Batch statistics of the encode pass and the generator pass.
    pub stats: StatsLog<T>,
}

/// Build the full objective for real batch `x`, prior draws `z` and
/// reparameterization noise `eps` on `g`, using handles `b`.
pub fn objective<T: Real>(
    model: &IanModel<T>,
    g: &mut Graph<T>,
    b: &Bound,
    x: Var,
    z: Var,
    eps: Var,
    cfg: &TrainConfig,
) -> Result<Objective<T>> {
    let batch = g.shape(x)[0];
    if batch < 2 {
        return Err(Error::BatchTooSmall {
            op: "train_step",
            batch,
            min: 2,
        });
    }
    let mut stats = Vec::new();

    let enc = model.trunk(g, b, x, Mode::Train, &mut stats)?;
    let (mu, logvar) = model.encoder_head(g, b, enc.last())?;
    let half = g.mul_scalar(logvar, T::lit(0.5));
    let sd = g.exp(half);
    let noise = g.mul(sd, eps)?;
    let z_rec = g.add(mu, noise)?;

    let zz = g.concat(&[z, z_rec], 0)?;
    let generated = model.generator(g, b, zz, Mode::Train, &mut stats)?;
    let x_rec = g.slice_rows(generated, batch, 2 * batch)?;

    // D's own batch statistics from this pass are not kept
    let joint = g.concat(&[x, generated], 0)?;
    let features = model.trunk(g, b, joint, Mode::Train, &mut Vec::new())?;
    let logits = model.head(g, b, features.last())?;
    let logp = g.log_softmax(logits, 1)?;
    let lp_x = g.slice_rows(logp, 0, batch)?;
    let lp_gz = g.slice_rows(logp, batch, 2 * batch)?;
    let lp_gex = g.slice_rows(logp, 2 * batch, 3 * batch)?;

    let l_dadv = if cfg.ternary {
        losses::ternary_d_loss(g, lp_x, lp_gz, lp_gex)?
    } else {
        losses::binary_d_loss(g, lp_x, lp_gz, lp_gex)?
    };
    let l_gadv = losses::ternary_g_loss(g, lp_gz, lp_gex)?;
    let l_img = losses::pixel_loss(g, x, x_rec)?;
    let mut fa = Vec::with_capacity(features.layers.len());
    let mut fb = Vec::with_capacity(features.layers.len());
    for &f in &features.layers {
        fa.push(g.slice_rows(f, 0, batch)?);
        fb.push(g.slice_rows(f, 2 * batch, 3 * batch)?);
    }
    let l_feature = losses::feature_loss(g, &fa, &fb)?;
    let kl_sum = losses::kl_divergence(g, mu, logvar)?;
    let kl = g.mul_scalar(kl_sum, T::lit(1.0 / model.config.latent_dim as f64));

    let w = cfg.weights;
    let a = g.mul_scalar(l_gadv, T::lit(w.adv));
    let i = g.mul_scalar(l_img, T::lit(w.img));
    let f = g.mul_scalar(l_feature, T::lit(w.feature));
    let t = g.add(a, i)?;
    let t = g.add(t, f)?;
    let total = g.add(t, kl)?;

    Ok(Objective {
        l_dadv,
        l_gadv,
        l_img,
        l_feature,
        kl,
        total,
        generated,
        mu,
        logvar,
        features,
        stats,
    })
}

/// Everything one step computes before touching the weights.
#[derive(Debug, Clone)]
pub struct StepGradients<T> {
    pub report: LossReport,
    /// Gradients of `L_Dadv` (+ ortho) for discriminator parameters only.
    pub d: BTreeMap<String, Tensor<T>>,
    /// Gradients of the composite objective (+ ortho) for G and E only.
    pub ge: BTreeMap<String, Tensor<T>>,
    pub stats: StatsLog<T>,
}

fn finite<T: Real>(name: &str, v: T) -> Result<f64> {
    let f = v.as_f64();
    if f.is_finite() {
        Ok(f)
    } else {
        Err(Error::NonFinite(format!("{name} = {f}")))
    }
}

fn collect<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    loss: Var,
    stop: &[Var],
    select: impl Fn(&str) -> bool,
) -> Result<BTreeMap<String, Tensor<T>>> {
    let chosen: Vec<(String, Var)> = b.iter().filter(|(n, _)| select(n)).map(|(n, v)| (n.to_string(), v)).collect();
    for &(_, v) in &chosen {
        g.set_requires_grad(v, true)?;
    }
    g.zero_grad();
    g.backward_stopping(loss, stop)?;
    let mut out = BTreeMap::new();
    for (name, v) in chosen {
        let grad = g.take_grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()));
        if !grad.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        out.insert(name, grad);
        g.set_requires_grad(v, false)?;
    }
    Ok(out)
}

/// Losses and isolated gradients of one step, weights untouched.
pub fn step_gradients<T: Real>(
    model: &IanModel<T>,
    cfg: &TrainConfig,
    step: u64,
    x: &Tensor<T>,
    z: &Tensor<T>,
    eps: &Tensor<T>,
) -> Result<StepGradients<T>> {
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let xv = g.constant(x.clone());
    let zv = g.constant(z.clone());
    let ev = g.constant(eps.clone());
    let obj = objective(model, &mut g, &b, xv, zv, ev, cfg)?;

    let val = |v: Var| g.value(v).item();
    let l_dadv = finite("L_Dadv", val(obj.l_dadv))?;
    let l_gadv = finite("L_Gadv", val(obj.l_gadv))?;
    let l_img = finite("L_img", val(obj.l_img))?;
    let l_feature = finite("L_feature", val(obj.l_feature))?;
    let kl = finite("KL", val(obj.kl))?;
    let objective_total = finite("total_G", val(obj.total))?;

    let mut d = collect(&mut g, &b, obj.l_dadv, &[obj.generated], IanModel::<T>::is_discriminator)?;
    let mut ge = collect(&mut g, &b, obj.total, &[], |n| {
        IanModel::<T>::is_generator(n) || IanModel::<T>::is_encoder(n)
    })?;

    let (mut ortho_g, mut ortho_d) = (0.0, 0.0);
    for name in model.conv_banks() {
        let w = &model.params[&name];
        let p = finite(&format!("ortho({name})"), ortho_penalty(w))?;
        let is_g = IanModel::<T>::is_generator(&name);
        *(if is_g { &mut ortho_g } else { &mut ortho_d }) += p;
        if cfg.ortho > 0.0 {
            let mut og = ortho_grad(w).scale(T::lit(cfg.ortho));
            if let Some(mask) = model.layout_of(&name) {
                og = og.zip_map(&mask, |a, m| a * m)?;
            }
            let slot = if is_g { &mut ge } else { &mut d };
            slot.get_mut(&name).expect("bank has a gradient").add_assign(&og);
        }
    }
    let report = LossReport {
        step,
        l_img,
        l_feature,
        l_gadv,
        l_dadv,
        kl,
        ortho_g,
        ortho_d,
        total_g: objective_total + cfg.ortho * ortho_g,
        weights: cfg.weights,
    };
    Ok(StepGradients {
        report,
        d,
        ge,
        stats: obj.stats,
    })
}

/// Noise for step `step`: `(z, eps)`, each `[batch, latent]` standard normal.
pub fn step_noise<T: Real>(seed: u64, step: u64, batch: usize, latent: usize) -> (Tensor<T>, Tensor<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let z = Tensor::randn([batch, latent], 1.0, &mut rng);
    let eps = Tensor::randn([batch, latent], 1.0, &mut rng);
    (z, eps)
}

/// Model plus optimizer state, advanced one batch at a time.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: IanModel<T>,
    pub optim: Adam<T>,
    pub config: TrainConfig,
    /// Completed steps.
    pub step: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: IanModel<T>, config: TrainConfig) -> Self {
        Self {
            model,
            optim: Adam::new(config.adam),
            config,
            step: 0,
        }
    }

    /// One step with noise drawn from `(seed, step)`.
    pub fn train_step(&mut self, x: &Tensor<T>) -> Result<LossReport> {
        if x.rank() != 4 {
            return Err(invalid("train_step expects an NCHW batch"));
        }
        let (z, eps) = step_noise(self.config.seed, self.step, x.shape()[0], self.model.config.latent_dim);
        self.train_step_with(x, &z, &eps)
    }

    pub fn train_step_with(&mut self, x: &Tensor<T>, z: &Tensor<T>, eps: &Tensor<T>) -> Result<LossReport> {
        let grads = step_gradients(&self.model, &self.config, self.step + 1, x, z, eps)?;
        self.optim.begin_step();
        for (name, grad) in grads.d.iter().chain(&grads.ge) {
            let p = self.model.params.get_mut(name).expect("known parameter");
            self.optim.update(name, p, grad);
        }
        self.model.update_running(&grads.stats, self.config.bn_momentum);
        self.step += 1;
        Ok(grads.report)
    }
}
