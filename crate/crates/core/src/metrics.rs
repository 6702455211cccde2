//! Reconstruction distances, a classifier-based sample-quality score, and
//! the factorial ablation harness built on them.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conv::Padding;
use crate::data::gather;
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::ian::{fit, FitOptions, IanModel, MdcMode, ModelConfig, TrainConfig, Trainer};
use crate::imaging::to_unit;
use crate::init;
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Rows processed per forward pass in batched evaluation.
const EVAL_CHUNK: usize = 250;

/// Root mean squared difference over all elements.
pub fn pixel_l2<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    x.expect_same_shape("pixel_l2", y)?;
    let ss: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    Ok((ss / x.len() as f64).sqrt())
}

/// Apply `f` to consecutive row blocks of `x` and stack the results.
pub fn in_chunks<T: Real>(x: &Tensor<T>, f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        parts.push(f(&x.slice_rows(start, end)?)?);
        start = end;
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub classes: usize,
    pub width: usize,
    pub feature_dim: usize,
}

impl ClassifierConfig {
    pub fn new(image_size: usize, classes: usize) -> Self {
        Self {
            image_size,
            classes,
            width: 16,
            feature_dim: 64,
        }
    }

    fn stages(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }

    fn channels(&self, i: usize) -> usize {
        (self.width << i).min(4 * self.width)
    }
}

/// Small all-conv classifier used as the fixed feature extractor for the
/// evaluation metrics. No batch norm, so evaluation is per-sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalClassifier<T> {
    pub config: ClassifierConfig,
    pub params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> EvalClassifier<T> {
    pub fn new(config: ClassifierConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        if config.image_size < 8 || !config.image_size.is_power_of_two() || config.classes < 2 {
            return Err(invalid("classifier needs a power-of-two image size ≥ 8 and ≥ 2 classes"));
        }
        let mut params = BTreeMap::new();
        let mut conv = |name: String, cin: usize, cout: usize, params: &mut BTreeMap<String, Tensor<T>>| {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            params.insert(format!("{name}.w"), init::normal([cout, cin, 3, 3], std, rng));
            params.insert(format!("{name}.b"), Tensor::zeros([cout]));
        };
        let stages = config.stages();
        conv("c0".into(), 3, config.channels(0), &mut params);
        for i in 0..stages {
            conv(format!("c{}", i + 1), config.channels(i), config.channels(i + 1), &mut params);
        }
        let last = config.channels(stages);
        conv(format!("c{}", stages + 1), last, last, &mut params);
        let flat = last * 16;
        params.insert("fc.w".into(), init::normal([config.feature_dim, flat], (2.0 / flat as f64).sqrt(), rng));
        params.insert("fc.b".into(), Tensor::zeros([config.feature_dim]));
        params.insert(
            "out.w".into(),
            init::normal([config.classes, config.feature_dim], (1.0 / config.feature_dim as f64).sqrt(), rng),
        );
        params.insert("out.b".into(), Tensor::zeros([config.classes]));
        Ok(Self { config, params })
    }

    fn bind(&self, g: &mut Graph<T>, train: bool) -> BTreeMap<String, Var> {
        self.params.iter().map(|(n, t)| (n.clone(), g.leaf(t.clone(), train))).collect()
    }

    /// `(features, logits)` for model-space images.
    fn forward(&self, g: &mut Graph<T>, p: &BTreeMap<String, Var>, x: Var) -> Result<(Var, Var)> {
        let stages = self.config.stages();
        let mut h = x;
        for i in 0..stages + 2 {
            let stride = if i >= 1 && i <= stages { 2 } else { 1 };
            let y = g.conv2d(h, p[&format!("c{i}.w")], stride, 1, Padding::Same)?;
            let y = g.add_bias(y, p[&format!("c{i}.b")])?;
            h = g.leaky_relu(y, T::lit(0.1));
        }
        let flat = g.flatten(h)?;
        let f = g.dense(flat, p["fc.w"], Some(p["fc.b"]))?;
        let f = g.relu(f);
        let logits = g.dense(f, p["out.w"], Some(p["out.b"]))?;
        Ok((f, logits))
    }

    fn eval(&self, x: &Tensor<T>, probs: bool) -> Result<Tensor<T>> {
        in_chunks(x, |chunk| {
            let mut g = Graph::new();
            let p = self.bind(&mut g, false);
            let xv = g.constant(chunk.clone());
            let (f, logits) = self.forward(&mut g, &p, xv)?;
            let out = if probs { g.softmax(logits, 1)? } else { f };
            Ok(g.value(out).clone())
        })
    }

    /// Final hidden-layer features `[B, feature_dim]`.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval(x, false)
    }

    /// Class posteriors `[B, classes]`.
    pub fn probabilities(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval(x, true)
    }

    pub fn accuracy(&self, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let p = self.probabilities(x)?;
        let k = self.config.classes;
        let hits = p
            .data()
            .chunks(k)
            .zip(labels)
            .filter(|(row, &l)| {
                let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
                best == l
            })
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Cross-entropy training with Adam; returns the last epoch's mean loss.
    pub fn train(&mut self, x: &Tensor<T>, labels: &[usize], epochs: usize, batch: usize, seed: u64) -> Result<f64> {
        let n = x.shape()[0];
        if labels.len() != n || n < batch || batch == 0 {
            return Err(invalid("classifier training needs one label per image and at least one batch"));
        }
        if labels.iter().any(|&l| l >= self.config.classes) {
            return Err(invalid("label out of range"));
        }
        let mut adam = Adam::new(AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            ..AdamConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut last = f64::NAN;
        let k = self.config.classes;
        for _ in 0..epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let steps = n / batch;
            for s in 0..steps {
                let idx = &order[s * batch..(s + 1) * batch];
                let mut g = Graph::new();
                let p = self.bind(&mut g, true);
                let xv = g.constant(gather(x, idx));
                let onehot = Tensor::from_fn([batch, k], |i| if labels[idx[i / k]] == i % k { T::one() } else { T::zero() });
                let (_, logits) = self.forward(&mut g, &p, xv)?;
                let lp = g.log_softmax(logits, 1)?;
                let oh = g.constant(onehot);
                let picked = g.mul(lp, oh)?;
                let s = g.sum(picked);
                let loss = g.mul_scalar(s, T::lit(-1.0 / batch as f64));
                total += g.value(loss).item().as_f64();
                g.backward(loss)?;
                adam.begin_step();
                for (name, v) in &p {
                    let grad = g.take_grad(*v).expect("every parameter is used");
                    adam.update(name, self.params.get_mut(name).expect("known"), &grad);
                }
            }
            last = total / steps as f64;
            if !last.is_finite() {
                return Err(Error::NonFinite("classifier loss".into()));
            }
        }
        Ok(last)
    }
}

/// Mean over the batch of the L2 distance between classifier features.
pub fn feature_l2<T: Real>(clf: &EvalClassifier<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    x.expect_same_shape("feature_l2", y)?;
    let (fx, fy) = (clf.features(x)?, clf.features(y)?);
    let d = clf.config.feature_dim;
    let rows = fx.data().chunks(d).zip(fy.data().chunks(d));
    let total: f64 = rows
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / x.shape()[0] as f64)
}

/// `exp(E_x KL(p(y|x) ‖ p(y)))` on each of `splits` equal parts of `probs`
/// (`[N, K]`, rows summing to 1); returns the mean and population standard
/// deviation over parts.
pub fn quality_score<T: Real>(probs: &Tensor<T>, splits: usize) -> Result<(f64, f64)> {
    let [n, k] = match probs.shape() {
        [n, k] => [*n, *k],
        s => return Err(invalid(format!("expected [N, K] probabilities, got {s:?}"))),
    };
    if splits == 0 || n < splits * 10 {
        return Err(invalid(format!("{n} samples are too few for {splits} splits of at least 10")));
    }
    let part = n / splits;
    let rows: Vec<&[T]> = probs.data().chunks(k).collect();
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let chunk = &rows[s * part..(s + 1) * part];
        let mut marginal = vec![0.0; k];
        for row in chunk {
            for (m, p) in marginal.iter_mut().zip(row.iter()) {
                *m += p.as_f64() / part as f64;
            }
        }
        let mean_kl: f64 = chunk
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&marginal)
                    .filter(|(p, _)| p.as_f64() > 0.0)
                    .map(|(p, m)| p.as_f64() * (p.as_f64().ln() - m.ln()))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / part as f64;
        scores.push(mean_kl.exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

/// Reconstructions `G(μ(x))` of model-space images.
pub fn reconstruct<T: Real>(model: &IanModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    in_chunks(x, |chunk| model.generate(&model.encode(chunk)?.mu))
}

/// `n` samples `G(z)`, `z ~ N(0, I)` drawn from `seed`.
pub fn sample<T: Real>(model: &IanModel<T>, n: usize, seed: u64) -> Result<Tensor<T>> {
    let z = Tensor::randn([n, model.config.latent_dim], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    in_chunks(&z, |chunk| model.generate(chunk))
}

/// One switchable modification per axis of the factorial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    pub mdc: bool,
    pub ortho: bool,
    pub ternary: bool,
}

/// All eight combinations, plain baseline first, full model last.
pub fn factorial() -> Vec<AblationFlags> {
    (0..8)
        .map(|i| AblationFlags {
            mdc: i & 1 != 0,
            ortho: i & 2 != 0,
            ternary: i & 4 != 0,
        })
        .collect()
}

/// Shared settings for every configuration of an ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationBudget {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Coefficient used when the ortho flag is on.
    pub ortho_coefficient: f64,
    pub epochs: usize,
    pub batch: usize,
    pub samples: usize,
    pub splits: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mdc: bool,
    pub ortho: bool,
    pub ternary: bool,
    pub pixel: Option<f64>,
    pub feature: Option<f64>,
    pub score_mean: Option<f64>,
    pub score_std: Option<f64>,
    pub config_hash: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| invalid(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<AblationRow>, _>>()
            .map_err(|e| invalid(format!("csv: {e}")))?;
        Ok(Self { rows })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn configure(flags: AblationFlags, budget: &AblationBudget) -> (ModelConfig, TrainConfig) {
    let mut model = budget.model.clone();
    model.mdc = if flags.mdc { MdcMode::Standard } else { MdcMode::Off };
    let mut train = budget.train.clone();
    train.ortho = if flags.ortho { budget.ortho_coefficient } else { 0.0 };
    train.ternary = flags.ternary;
    train.seed = budget.seed;
    (model, train)
}

/// Short hex digest identifying everything that determines a row.
pub fn config_hash(flags: AblationFlags, budget: &AblationBudget) -> String {
    let (model, train) = configure(flags, budget);
    let blob = serde_json::json!({
        "model": model,
        "train": train,
        "epochs": budget.epochs,
        "batch": budget.batch,
        "samples": budget.samples,
        "splits": budget.splits,
    });
    let digest = Sha256::digest(blob.to_string().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn ablation_row<T: Real>(
    flags: AblationFlags,
    budget: &AblationBudget,
    train_images: &Tensor<T>,
    held_out: &Tensor<T>,
    clf: &EvalClassifier<T>,
) -> Result<(f64, f64, f64, f64)> {
    let (model_cfg, train_cfg) = configure(flags, budget);
    let model = IanModel::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(budget.seed))?;
    let mut trainer = Trainer::new(model, train_cfg);
    fit(&mut trainer, train_images, &FitOptions::new(budget.epochs, budget.batch), |_| Ok(()))?;
    let model = trainer.model;
    let recon = reconstruct(&model, held_out)?;
    let pixel = pixel_l2(&to_unit(held_out), &to_unit(&recon))?;
    let feature = feature_l2(clf, held_out, &recon)?;
    let samples = sample(&model, budget.samples, budget.seed)?;
    let (score_mean, score_std) = quality_score(&clf.probabilities(&samples)?, budget.splits)?;
    for v in [pixel, feature, score_mean, score_std] {
        if !v.is_finite() {
            return Err(Error::NonFinite("evaluation metric".into()));
        }
    }
    Ok((pixel, feature, score_mean, score_std))
}

/// Train and evaluate every configuration with identical seeds and budget.
/// A configuration that fails is reported in its row; the others still run.
pub fn run_ablation<T: Real>(
    configs: &[AblationFlags],
    train_images: &Tensor<T>,
    held_out: &Tensor<T>,
    clf: &EvalClassifier<T>,
    budget: &AblationBudget,
) -> Result<AblationReport> {
    if configs.is_empty() {
        return Err(invalid("ablation needs at least one configuration"));
    }
    let rows = configs
        .iter()
        .map(|&flags| {
            let config_hash = config_hash(flags, budget);
            let base = AblationRow {
                mdc: flags.mdc,
                ortho: flags.ortho,
                ternary: flags.ternary,
                pixel: None,
                feature: None,
                score_mean: None,
                score_std: None,
                config_hash,
                error: None,
            };
            match ablation_row(flags, budget, train_images, held_out, clf) {
                Ok((p, f, m, s)) => AblationRow {
                    pixel: Some(p),
                    feature: Some(f),
                    score_mean: Some(m),
                    score_std: Some(s),
                    ..base
                },
                Err(e) => {
                    log::warn!("ablation config {flags:?} failed: {e}");
                    AblationRow {
                        error: Some(e.to_string()),
                        ..base
                    }
                }
            }
        })
        .collect();
    Ok(AblationReport { rows })
}
