//! Training loop: place-balanced batches, MS loss, AdamW with the epoch
//! schedule. Epochs are fractional: step `s` sits at epoch `s / batches_per_epoch`.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::TokenSet;
use crate::io::batch::{BatchItem, PlaceBalancedSampler};
use crate::io::checkpoint::Checkpoint;
use crate::io::manifest::DatasetManifest;
use crate::io::synth::SyntheticDataset;
use crate::loss::{batch_loss, Batch, MsParams};
use crate::model::Model;
use crate::optim::{adamw_step, default_groups, param_groups, AdamWConfig, OptimState, Schedule};
use crate::tensor::Matrix;

/// Database images with their place labels.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    pub images: Vec<(TokenSet, TokenSet)>,
}

impl TrainingSet {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let labels = manifest.place_labels()?;
        let mut ids = Vec::with_capacity(labels.len());
        let mut images = Vec::with_capacity(labels.len());
        for e in &manifest.database {
            images.push(manifest.load_pair(&e.id, &e.dino, &e.clip)?);
            ids.push(e.id.clone());
        }
        Ok(Self { ids, labels, images })
    }

    pub fn from_synthetic(ds: &SyntheticDataset) -> Self {
        let db: Vec<_> = ds.database().collect();
        Self {
            ids: db.iter().map(|i| i.id.clone()).collect(),
            labels: db.iter().map(|i| format!("p{:03}", i.place)).collect(),
            images: db.iter().map(|i| (i.dino.clone(), i.clip.clone())).collect(),
        }
    }

    pub fn dims(&self) -> Result<(usize, usize)> {
        let (d, c) = self
            .images
            .first()
            .ok_or_else(|| Error::invalid("training set is empty"))?;
        Ok((d.dim(), c.dim()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub schedule: Schedule,
    pub adamw: AdamWConfig,
    pub ms: MsParams,
    pub group_multipliers: std::collections::BTreeMap<String, f64>,
    pub decay_all: bool,
    pub epochs: f64,
    pub max_steps: Option<u64>,
    pub places_per_batch: usize,
    pub images_per_place: usize,
    pub seed: u64,
}

impl TrainOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            schedule: cfg.opt.schedule(),
            adamw: cfg.opt.adamw(),
            ms: cfg.ms,
            group_multipliers: cfg.opt.group_multipliers.clone(),
            decay_all: cfg.opt.decay_all,
            epochs: cfg.train.epochs,
            max_steps: cfg.train.max_steps,
            places_per_batch: cfg.train.places_per_batch,
            images_per_place: cfg.train.images_per_place,
            seed: cfg.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: f64,
    pub loss: f64,
    pub lr: f64,
    pub pairs: usize,
}

impl StepLog {
    /// One line of the `step loss lr` log.
    pub fn line(&self) -> String {
        format!("{} {:.8e} {:.8e}", self.step, self.loss, self.lr)
    }
}

pub struct Trainer {
    pub model: Model,
    pub optim: OptimState,
    pub step: u64,
    data: TrainingSet,
    sampler: PlaceBalancedSampler,
    opts: TrainOptions,
    cached_epoch: Option<(u64, Vec<Vec<BatchItem>>)>,
}

impl Trainer {
    pub fn new(model: Model, data: TrainingSet, opts: TrainOptions) -> Result<Self> {
        let optim = OptimState::new(opts.adamw, &model.params());
        Self::assemble(model, optim, 0, data, opts)
    }

    /// Continues from a checkpoint; the step counter carries on.
    pub fn resume(ck: &Checkpoint, data: TrainingSet, opts: TrainOptions) -> Result<Self> {
        let model = ck.restore()?;
        let optim = match &ck.optim {
            Some(o) => OptimState {
                config: opts.adamw,
                ..o.clone()
            },
            None => OptimState::new(opts.adamw, &model.params()),
        };
        Self::assemble(model, optim, ck.step, data, opts)
    }

    fn assemble(mut model: Model, optim: OptimState, step: u64, data: TrainingSet, opts: TrainOptions) -> Result<Self> {
        opts.schedule.validate()?;
        opts.ms.validate()?;
        let (d, c) = data.dims()?;
        if (d, c) != (model.config.dino_dim, model.config.clip_dim) {
            return Err(Error::invalid(format!(
                "model expects token dims ({}, {}), data has ({d}, {c})",
                model.config.dino_dim, model.config.clip_dim
            )));
        }
        let groups = default_groups(&opts.group_multipliers)?;
        param_groups(&mut model.params_mut(), &groups)?;
        if opts.decay_all {
            for p in model.params_mut() {
                p.decay = true;
            }
        }
        let sampler = PlaceBalancedSampler::new(&data.labels, opts.places_per_batch, opts.images_per_place, opts.seed)?;
        if sampler.batches_per_epoch() == 0 {
            return Err(Error::invalid("dataset yields no complete batch"));
        }
        Ok(Self {
            model,
            optim,
            step,
            data,
            sampler,
            opts,
            cached_epoch: None,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sampler.batches_per_epoch()
    }

    /// Total steps for the configured epochs, capped by `max_steps`.
    pub fn total_steps(&self) -> u64 {
        let by_epochs = (self.opts.epochs * self.batches_per_epoch() as f64).ceil() as u64;
        self.opts.max_steps.map_or(by_epochs, |m| m.min(by_epochs))
    }

    pub fn epoch_at(&self, step: u64) -> f64 {
        step as f64 / self.batches_per_epoch() as f64
    }

    fn batch_for(&mut self, step: u64) -> Vec<BatchItem> {
        let bpe = self.batches_per_epoch() as u64;
        let epoch = step / bpe;
        if self.cached_epoch.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.cached_epoch = Some((epoch, self.sampler.epoch(epoch)));
        }
        self.cached_epoch.as_ref().expect("epoch cached").1[(step % bpe) as usize].clone()
    }

    /// Loss on the batch of `step` without updating anything.
    pub fn evaluate_batch(&mut self, step: u64) -> Result<f64> {
        let items = self.batch_for(step);
        let batch = self.forward_batch(&items)?.0;
        Ok(batch_loss(&batch, &self.opts.ms)?.0)
    }

    fn forward_batch(&self, items: &[BatchItem]) -> Result<(Batch, Vec<crate::model::ModelCache>)> {
        let dim = self.model.config.descriptor_dim();
        let mut data = Vec::with_capacity(items.len() * dim);
        let mut caches = Vec::with_capacity(items.len());
        for it in items {
            let (dino, clip) = &self.data.images[it.image];
            let (desc, cache) = self.model.forward(dino, clip)?;
            if desc.degenerate {
                return Err(Error::Numerical(format!(
                    "degenerate descriptor for {}",
                    self.data.ids[it.image]
                )));
            }
            data.extend_from_slice(&desc.values);
            caches.push(cache);
        }
        let labels = items.iter().map(|it| it.label).collect();
        Ok((Batch::new(Matrix::from_vec(items.len(), dim, data)?, labels)?, caches))
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let epoch = self.epoch_at(step);
        let lr = self.opts.schedule.lr_at(epoch);
        let items = self.batch_for(step);
        let (batch, caches) = self.forward_batch(&items)?;
        let (loss, d_desc, mined) = batch_loss(&batch, &self.opts.ms)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {step}")));
        }
        self.model.zero_grad();
        for (i, cache) in caches.iter().enumerate() {
            self.model.backward(cache, d_desc.row(i))?;
        }
        adamw_step(&mut self.model.params_mut(), &mut self.optim, lr)?;
        self.step += 1;
        Ok(StepLog {
            step,
            epoch,
            loss,
            lr,
            pairs: mined.count(),
        })
    }

    /// Steps until `total_steps`, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let total = self.total_steps();
        let mut logs = Vec::new();
        while self.step < total {
            let log = self.step()?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, self.step, Some(&self.optim))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::HeadConfig;
    use crate::fusion::FusionVariant;
    use crate::io::synth::{generate_synthetic, SynthSpec};
    use crate::model::ModelConfig;

    fn setup(max_steps: u64) -> Trainer {
        let ds = generate_synthetic(&SynthSpec {
            places: 6,
            images_per_place: 3,
            dim: 6,
            tokens: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        let model = Model::init(
            ModelConfig {
                dino_dim: 6,
                clip_dim: 6,
                fusion: FusionVariant::Residual,
                head: HeadConfig {
                    blocks: 1,
                    queries_per_block: 3,
                    ..HeadConfig::default()
                },
            },
            3,
        )
        .unwrap();
        let opts = TrainOptions {
            epochs: 100.0,
            max_steps: Some(max_steps),
            places_per_batch: 3,
            images_per_place: 3,
            ..TrainOptions::from_config(&RunConfig::default())
        };
        Trainer::new(model, TrainingSet::from_synthetic(&ds), opts).unwrap()
    }

    #[test]
    fn zero_steps_leaves_model_unchanged() {
        let mut t = setup(0);
        let before = t.checkpoint();
        assert!(t.run(|_| {}).unwrap().is_empty());
        assert_eq!(t.checkpoint(), before);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mut full = setup(6);
        full.run(|_| {}).unwrap();

        let mut first = setup(3);
        first.run(|_| {}).unwrap();
        let ck = first.checkpoint();
        let mut opts = first.opts.clone();
        opts.max_steps = Some(6);
        let mut second = Trainer::resume(&ck, first.data.clone(), opts).unwrap();
        assert_eq!(second.step, 3);
        let logs = second.run(|_| {}).unwrap();
        assert_eq!(logs.first().unwrap().step, 3);
        assert_eq!(second.checkpoint(), full.checkpoint());
    }

    #[test]
    fn epoch_is_fractional() {
        let t = setup(1);
        assert_eq!(t.batches_per_epoch(), 2);
        assert_eq!(t.epoch_at(3), 1.5);
    }
}
