//! Epoch loop over an in-memory dataset with periodic checkpoints.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::gather;
use crate::error::{invalid, Result};
use crate::graph::Graph;
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::train::{objective, step_noise, LossReport, Trainer};

/// Keeps shuffling independent of the per-step noise streams.
const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4521;
/// Batch and noise stream for norm recalibration, apart from training.
const NORM_SALT: u64 = 0x4e4f_524d_5354_4154;

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Steps between checkpoints; one is always written at the end.
    pub checkpoint_every: u64,
    /// Metadata and tensors carried into every checkpoint written.
    pub base: Checkpoint,
    /// Stop early once this many steps are done.
    pub stop_after: Option<u64>,
    /// Batches used to re-estimate norm statistics once all epochs are
    /// done; 0 keeps the running averages. Runs cut short by `stop_after`
    /// are left alone so resuming stays exact.
    pub recalibrate_batches: usize,
}

impl FitOptions {
    pub fn new(epochs: usize, batch: usize) -> Self {
        Self {
            epochs,
            batch,
            checkpoint_path: None,
            checkpoint_every: 500,
            base: Checkpoint::default(),
            stop_after: None,
            recalibrate_batches: 50,
        }
    }
}

/// Sample order for one epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Train from `trainer.step` until `epochs` full passes are done. Each epoch
/// drops its last partial batch. Resuming from a checkpoint continues the
/// exact same batch and noise sequence.
pub fn fit<T: Real>(
    trainer: &mut Trainer<T>,
    images: &Tensor<T>,
    opts: &FitOptions,
    mut on_step: impl FnMut(&LossReport) -> Result<()>,
) -> Result<()> {
    let n = images.shape()[0];
    if opts.batch < 2 || n < 2 * opts.batch {
        return Err(invalid(format!(
            "need at least two batches of ≥ 2 images, have {n} images at batch {}",
            opts.batch
        )));
    }
    let per_epoch = (n / opts.batch) as u64;
    let total = per_epoch * opts.epochs as u64;
    let stop = opts.stop_after.map_or(total, |s| s.min(total));
    let save = |trainer: &Trainer<T>| -> Result<()> {
        if let Some(path) = &opts.checkpoint_path {
            let mut ckpt = opts.base.clone();
            ckpt.store_trainer(trainer);
            ckpt.metadata.insert("epochs".into(), opts.epochs.into());
            ckpt.metadata.insert("batch".into(), opts.batch.into());
            ckpt.save(path)?;
        }
        Ok(())
    };
    let mut order: Option<(u64, Vec<usize>)> = None;
    while trainer.step < stop {
        let epoch = trainer.step / per_epoch;
        let pos = (trainer.step % per_epoch) as usize;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(trainer.config.seed, epoch, n)));
        }
        let idx = &order.as_ref().expect("just set").1[pos * opts.batch..(pos + 1) * opts.batch];
        let report = trainer.train_step(&gather(images, idx))?;
        on_step(&report)?;
        if opts.checkpoint_every > 0 && trainer.step % opts.checkpoint_every == 0 && trainer.step < stop {
            save(trainer)?;
        }
    }
    if trainer.step == total && opts.recalibrate_batches > 0 {
        recalibrate_norms(trainer, images, opts.batch, opts.recalibrate_batches)?;
    }
    save(trainer)
}

/// Replace the batch-norm running averages with statistics pooled over
/// `batches` train-mode forward passes of the current weights.
///
/// The running averages trail weights that keep moving under adversarial
/// updates, so eval-mode outputs drift from what the final network does.
/// Batches and noise come from their own fixed stream; the optimizer and
/// step count are untouched.
pub fn recalibrate_norms<T: Real>(trainer: &mut Trainer<T>, images: &Tensor<T>, batch: usize, batches: usize) -> Result<()> {
    let n = images.shape()[0];
    let batches = batches.min(n / batch.max(1));
    if batch < 2 || batches == 0 {
        return Err(invalid(format!("cannot recalibrate from {n} images at batch {batch}")));
    }
    let seed = trainer.config.seed ^ NORM_SALT;
    let order = epoch_order(seed, 0, n);
    let latent = trainer.model.config.latent_dim;
    // per layer: Σ count·mean, Σ count·(var + mean²), Σ count
    let mut pooled: BTreeMap<String, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for i in 0..batches {
        let x = gather(images, &order[i * batch..(i + 1) * batch]);
        let (z, eps) = step_noise::<T>(seed, i as u64, batch, latent);
        let mut g = Graph::new();
        let b = trainer.model.bind(&mut g);
        let (xv, zv, ev) = (g.constant(x), g.constant(z), g.constant(eps));
        let obj = objective(&trainer.model, &mut g, &b, xv, zv, ev, &trainer.config)?;
        for (name, s) in obj.stats {
            let e = pooled
                .entry(name)
                .or_insert_with(|| (vec![0.0; s.mean.len()], vec![0.0; s.mean.len()], 0));
            let w = s.count as f64;
            for (j, (&m, &v)) in s.mean.iter().zip(&s.var).enumerate() {
                let (m, v) = (m.as_f64(), v.as_f64());
                e.0[j] += w * m;
                e.1[j] += w * (v + m * m);
            }
            e.2 += s.count;
        }
    }
    for (name, (sum, sq, count)) in pooled {
        let c = count as f64;
        let unbias = if count > 1 { c / (c - 1.0) } else { 1.0 };
        let mean: Vec<f64> = sum.iter().map(|s| s / c).collect();
        let var: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| (q / c - m * m).max(0.0) * unbias).collect();
        let buffers = &mut trainer.model.buffers;
        for (suffix, values) in [("mean", mean), ("var", var)] {
            let t = buffers.get_mut(&format!("{name}.{suffix}")).expect("known norm layer");
            for (r, v) in t.data_mut().iter_mut().zip(values) {
                *r = T::lit(v);
            }
        }
    }
    Ok(())
}
