//! Epoch loop shared by both training stages: shuffling, per-step noise,
//! loss logging, per-epoch checkpoints and resumption.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{self, Checkpoint, CheckpointManifest, LossSummary, StageLock, LOSSES_FILE, MANIFEST_FILE, MANIFEST_VERSION};
use super::config::TrainRunConfig;
use crate::error::{Error, IoContext, Result};
use crate::ganloss::{multi_disc_train_step, Discriminator, Generator, LossCsv, LossRecord, ProjectionBank, StepConfig};
use crate::nn::params::{normal, sha256_hex};
use crate::nn::{Archive, RmsProp, Tensor};
use crate::seed::{self, stream};

pub const GENERATOR_ROLE: &str = "generator";
pub const DISCRIMINATORS_ROLE: &str = "discriminators";
pub const PROJECTIONS_KEY: &str = "projections";

/// A generator, its K discriminators, their optimizers and the projections.
pub struct Adversarial<G, D> {
    pub generator: G,
    pub gen_opt: RmsProp,
    pub discriminators: Vec<D>,
    pub disc_opts: Vec<RmsProp>,
    pub bank: ProjectionBank,
}

impl<G: Generator, D: Discriminator> Adversarial<G, D> {
    pub fn new(generator: G, discriminators: Vec<D>, bank: ProjectionBank, lr: f64) -> Self {
        let disc_opts = discriminators.iter().map(|_| RmsProp::new(lr)).collect();
        Self { generator, gen_opt: RmsProp::new(lr), discriminators, disc_opts, bank }
    }

    pub fn step(&mut self, real: &Tensor, z: &Tensor, cfg: &StepConfig) -> Result<LossRecord> {
        multi_disc_train_step(
            &mut self.generator,
            &mut self.gen_opt,
            &mut self.discriminators,
            &mut self.disc_opts,
            &self.bank,
            real,
            z,
            cfg,
        )
    }

    pub fn generator_archive(&self) -> Archive {
        let mut a = Archive::default();
        a.push_store("", self.generator.params());
        self.gen_opt.export_state("rmsprop.", self.generator.params(), &mut a);
        a
    }

    pub fn discriminators_archive(&self) -> Archive {
        let mut a = Archive::default();
        for (k, (d, opt)) in self.discriminators.iter().zip(&self.disc_opts).enumerate() {
            a.push_store(&format!("d{k}."), d.params());
            opt.export_state(&format!("d{k}.rmsprop."), d.params(), &mut a);
        }
        a
    }

    pub fn param_hashes(&self) -> BTreeMap<String, String> {
        let joined: String = self.discriminators.iter().map(|d| d.params().content_hash()).collect();
        BTreeMap::from([
            (GENERATOR_ROLE.to_string(), self.generator.params().content_hash()),
            (DISCRIMINATORS_ROLE.to_string(), sha256_hex(joined.as_bytes())),
            (PROJECTIONS_KEY.to_string(), self.bank.hash()),
        ])
    }

    /// Restores parameters and optimizer state from a checkpoint of the same run.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let g = ck.archive(GENERATOR_ROLE)?;
        g.load_store("", self.generator.params_mut())?;
        self.gen_opt.import_state("rmsprop.", self.generator.params(), &g)?;
        let d = ck.archive(DISCRIMINATORS_ROLE)?;
        for (k, (disc, opt)) in self.discriminators.iter_mut().zip(&mut self.disc_opts).enumerate() {
            d.load_store(&format!("d{k}."), disc.params_mut())?;
            opt.import_state(&format!("d{k}.rmsprop."), disc.params(), &d)?;
        }
        let recorded = ck.manifest.param_hashes.get(PROJECTIONS_KEY);
        if recorded.is_some_and(|h| *h != self.bank.hash()) {
            return Err(Error::HashMismatch {
                path: ck.dir.clone(),
                expected: recorded.cloned().unwrap_or_default(),
                found: self.bank.hash(),
            });
        }
        Ok(())
    }
}

/// Optional observers of training progress.
#[derive(Default)]
pub struct Hooks<'a> {
    pub on_step: Option<&'a (dyn Fn(&LossRecord) + Sync)>,
    pub on_epoch: Option<&'a (dyn Fn(&CheckpointManifest) + Sync)>,
}

/// Batches of item indices for one epoch, shuffled with a seed derived from
/// `(seed, epoch)` so a resumed run sees the same order.
pub fn epoch_batches(n_items: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::mix(seed, stream::EPOCH_SHUFFLE + epoch as u64)));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn step_noise(seed: u64, step: u64, batch: usize, latent_dim: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(seed, stream::STEP_NOISE + step));
    normal(&mut rng, &[batch, latent_dim], 0.0, 1.0)
}

/// Runs (or resumes) `cfg.epochs` epochs over `n_items` items, writing one
/// checkpoint per epoch and a final manifest into `dir`.
///
/// `batch` builds the real batch for a list of item indices; `annotate` may
/// add stage-specific fields to each manifest and veto it with an error.
pub fn run_stage<G: Generator, D: Discriminator>(
    dir: &Path,
    cfg: &TrainRunConfig,
    models: &mut Adversarial<G, D>,
    n_items: usize,
    batch: impl Fn(&[usize]) -> Result<Tensor>,
    mut annotate: impl FnMut(&mut CheckpointManifest) -> Result<()>,
    hooks: &Hooks<'_>,
) -> Result<CheckpointManifest> {
    if n_items == 0 {
        return Err(Error::Config("no training items".into()));
    }
    std::fs::create_dir_all(dir).at(dir)?;
    if dir.join(MANIFEST_FILE).exists() {
        return Err(Error::AlreadyComplete(dir.to_path_buf()));
    }
    let _lock = StageLock::acquire(dir)?;
    let losses_path = dir.join(LOSSES_FILE);

    let mut start_epoch = 0;
    let mut summary = LossSummary::default();
    let mut last = None;
    if let Some(ck) = checkpoint::latest_epoch(dir)? {
        if ck.manifest.config != *cfg {
            return Err(Error::Config(format!(
                "{} holds checkpoints of a different configuration",
                dir.display()
            )));
        }
        models.restore(&ck)?;
        start_epoch = ck.manifest.epoch;
        summary = ck.manifest.loss_summary.clone();
        checkpoint::trim_losses(&losses_path, summary.steps)?;
        log::info!("resuming {} after epoch {start_epoch}", dir.display());
        last = Some(ck.manifest);
    }
    let mut csv = LossCsv::open(&losses_path)?;
    let latent = models.generator.latent_dim();

    for epoch in start_epoch..cfg.epochs {
        let (mut gen_sum, mut d_sum, mut n) = (0.0, 0.0, 0u64);
        for items in epoch_batches(n_items, cfg.batch_size, cfg.seed, epoch) {
            let real = batch(&items)?;
            let z = step_noise(cfg.seed, summary.steps, items.len(), latent);
            let step_cfg = StepConfig { stage: cfg.stage, step: summary.steps, mode: cfg.gen_loss_mode, update_generator: true };
            let rec = models.step(&real, &z, &step_cfg)?;
            csv.append(&rec)?;
            if let Some(f) = hooks.on_step {
                f(&rec);
            }
            gen_sum += rec.generator_loss;
            d_sum += rec.d_mean();
            n += 1;
            summary.steps += 1;
            summary.last_gen_loss = rec.generator_loss;
            summary.last_d_loss_mean = rec.d_mean();
        }
        summary.epoch_gen_loss_mean = gen_sum / n as f64;
        summary.epoch_d_loss_mean = d_sum / n as f64;
        let mut manifest = CheckpointManifest {
            format_version: MANIFEST_VERSION,
            stage: cfg.stage,
            config: cfg.clone(),
            epoch: epoch + 1,
            complete: false,
            archives: BTreeMap::new(),
            param_hashes: models.param_hashes(),
            loss_summary: summary.clone(),
            frame_generator: None,
            created: String::new(),
            code_version: checkpoint::code_version(),
        };
        annotate(&mut manifest)?;
        let (ga, da) = (models.generator_archive(), models.discriminators_archive());
        let written = checkpoint::write_epoch(dir, manifest, &[(GENERATOR_ROLE, &ga), (DISCRIMINATORS_ROLE, &da)])?;
        log::info!(
            "{} epoch {}/{}: gen {:.4} disc {:.4}",
            cfg.stage,
            epoch + 1,
            cfg.epochs,
            summary.epoch_gen_loss_mean,
            summary.epoch_d_loss_mean
        );
        if let Some(f) = hooks.on_epoch {
            f(&written);
        }
        last = Some(written);
    }
    let last = last.ok_or_else(|| Error::Config("zero epochs configured".into()))?;
    checkpoint::finalize(dir, &last)
}
