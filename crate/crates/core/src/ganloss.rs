//! Adversarial losses, the frozen random-projection bank and the shared
//! multi-discriminator training step.

use std::collections::HashSet;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::nn::{BatchStats, ConvGeom, Graph, ParamStore, Real, RmsProp, Tensor, Var};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sum::<f64>() / n
}

/// `-log D(x) - log(1 - D(G(z)))`, each term averaged over its batch.
pub fn disc_loss(d_real: &[f64], d_fake: &[f64]) -> f64 {
    mean(d_real.iter().map(|&p| -clamp_prob(p).ln())) + mean(d_fake.iter().map(|&p| -(1.0 - clamp_prob(p)).ln()))
}

/// Non-saturating generator loss `-log D(G(z))`, averaged over the batch.
pub fn gen_loss_single(d_fake: &[f64]) -> f64 {
    mean(d_fake.iter().map(|&p| -clamp_prob(p).ln()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenLossMode {
    #[default]
    Mean,
    Sum,
}

impl GenLossMode {
    pub fn reduce(self, per_disc: &[f64]) -> f64 {
        let s: f64 = per_disc.iter().sum();
        match self {
            Self::Sum => s,
            Self::Mean => s / per_disc.len() as f64,
        }
    }
}

impl fmt::Display for GenLossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Sum => "sum",
        })
    }
}

impl FromStr for GenLossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            other => Err(Error::Config(format!("unknown generator loss mode {other:?} (mean|sum)"))),
        }
    }
}

/// Generator loss against K discriminators, one probability each.
pub fn gen_loss_multi(d_fakes: &[f64], mode: GenLossMode) -> f64 {
    let per: Vec<f64> = d_fakes.iter().map(|&p| -clamp_prob(p).ln()).collect();
    mode.reduce(&per)
}

fn neg_mean_log<T: Real>(g: &mut Graph<T>, p: Var) -> Var {
    let c = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let l = g.ln(c);
    let m = g.mean(l);
    g.affine(m, -1.0, 0.0)
}

/// Graph form of [`disc_loss`] over batched probabilities.
pub fn disc_loss_graph<T: Real>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let real = neg_mean_log(g, d_real);
    let one_minus = g.affine(d_fake, -1.0, 1.0);
    let fake = neg_mean_log(g, one_minus);
    g.add(real, fake)
}

/// Per-discriminator graph form of [`gen_loss_single`].
pub fn gen_loss_graph<T: Real>(g: &mut Graph<T>, d_fake: Var) -> Var {
    neg_mean_log(g, d_fake)
}

/// Reduces per-discriminator generator losses according to `mode`.
pub fn reduce_graph<T: Real>(g: &mut Graph<T>, per_disc: &[Var], mode: GenLossMode) -> Result<Var> {
    let s = g.add_n(per_disc)?;
    Ok(match mode {
        GenLossMode::Sum => s,
        GenLossMode::Mean => g.affine(s, 1.0 / per_disc.len() as f64, 0.0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Default for ProjectionGeom {
    fn default() -> Self {
        Self { kernel: 8, stride: 4, pad: 0 }
    }
}

impl ProjectionGeom {
    pub fn out_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let [_, h, w] = ConvGeom::new2d(self.kernel, self.stride, self.pad).conv_out([1, height, width])?;
        Ok((h, w))
    }
}

/// K fixed single-channel kernels with unit L2 norm. Kernels are plain data
/// and never enter a parameter store, so no optimizer can reach them.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionBank {
    geom: ProjectionGeom,
    seed: u64,
    kernels: Vec<Tensor<f32>>,
}

impl ProjectionBank {
    pub fn new(k: usize, geom: ProjectionGeom, seed: u64) -> Result<Self> {
        if k == 0 || geom.kernel == 0 || geom.stride == 0 {
            return Err(Error::Config(format!("projection bank needs K >= 1 and a non-empty kernel (K={k}, {geom:?})")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = geom.kernel * geom.kernel;
        let kernels = (0..k)
            .map(|_| {
                let raw: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                Tensor::new(&[1, 1, geom.kernel, geom.kernel], raw.iter().map(|v| (v / norm) as f32).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { geom, seed, kernels })
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn geom(&self) -> ProjectionGeom {
        self.geom
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kernel(&self, k: usize) -> &Tensor<f32> {
        &self.kernels[k]
    }

    /// SHA-256 over the kernel values.
    pub fn hash(&self) -> String {
        let bytes: Vec<u8> = self.kernels.iter().flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes())).collect();
        crate::nn::params::sha256_hex(&bytes)
    }

    /// Projects `[B, 1, H, W]` frames or `[B, 1, T, H, W]` clips with kernel `k`;
    /// clips are projected frame by frame with the same kernel.
    pub fn project<T: Real>(&self, g: &mut Graph<T>, k: usize, x: Var) -> Result<Var> {
        if k >= self.len() {
            return Err(Error::Shape(format!("projection index {k} out of range for K={}", self.len())));
        }
        let shape = g.value(x).shape().to_vec();
        if !(shape.len() == 4 || shape.len() == 5) || shape[1] != 1 {
            return Err(Error::Shape(format!(
                "projection expects [B, 1, H, W] or [B, 1, T, H, W] input, got {shape:?}"
            )));
        }
        let ProjectionGeom { kernel, stride, pad } = self.geom;
        let (w, geom) = if shape.len() == 4 {
            (self.kernels[k].cast::<T>(), ConvGeom::new2d(kernel, stride, pad))
        } else {
            (
                self.kernels[k].cast::<T>().reshape(&[1, 1, 1, kernel, kernel])?,
                ConvGeom::new3d([1, kernel, kernel], [1, stride, stride], [0, pad, pad]),
            )
        };
        let w = g.constant(w);
        g.conv(x, w, None, geom)
    }

    /// Eager form of [`Self::project`].
    pub fn apply(&self, k: usize, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = self.project(&mut g, k, v)?;
        Ok(g.value(y).clone())
    }
}

pub trait Discriminator: Send + Sync {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Probabilities `[B, 1]` for a batch of projected inputs.
    fn forward(&self, g: &mut Graph, x: Var, track: bool) -> Result<Var>;
}

pub trait Generator {
    fn latent_dim(&self) -> usize;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Training-mode pass from noise `[B, latent_dim]` with tracked parameters;
    /// also returns any batch-norm statistics to commit after the update.
    fn forward_train(&self, g: &mut Graph, z: Var) -> Result<(Var, Vec<BatchStats<f32>>)>;
    fn commit_stats(&mut self, _stats: &[BatchStats<f32>]) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Frames,
    Video,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Frames => "frames",
            Self::Video => "video",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub stage: Stage,
    pub per_discriminator_loss: Vec<f64>,
    pub generator_loss: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,stage,gen_loss,d_loss_min,d_loss_mean,d_loss_max";

    pub fn d_min(&self) -> f64 {
        self.per_discriminator_loss.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn d_max(&self) -> f64 {
        self.per_discriminator_loss.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn d_mean(&self) -> f64 {
        mean(self.per_discriminator_loss.iter().copied())
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            self.step,
            self.stage,
            self.generator_loss,
            self.d_min(),
            self.d_mean(),
            self.d_max()
        )
    }
}

/// Append-only loss log; the header is written when the file is new or empty.
pub struct LossCsv {
    path: PathBuf,
    file: std::fs::File,
}

impl LossCsv {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new().create(true).append(true).open(path).at(path)?;
        if file.metadata().at(path)?.len() == 0 {
            writeln!(file, "{}", LossRecord::CSV_HEADER).at(path)?;
        }
        Ok(Self { path: path.to_path_buf(), file })
    }

    pub fn append(&mut self, record: &LossRecord) -> Result<()> {
        writeln!(self.file, "{}", record.csv_row()).at(&self.path)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepConfig {
    pub stage: Stage,
    pub step: u64,
    pub mode: GenLossMode,
    /// When false the generator is evaluated but left untouched.
    pub update_generator: bool,
}

fn check_finite(value: f64, cfg: &StepConfig, k: Option<usize>) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Divergence { stage: cfg.stage.to_string(), step: cfg.step, discriminator: k, value })
    }
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0] as f64
}

/// One iteration: every discriminator k is updated on projection k of the real
/// batch and of a shared generated batch, then the generator takes one step on
/// the reduced loss against the updated discriminators.
#[allow(clippy::too_many_arguments)]
pub fn multi_disc_train_step<G: Generator, D: Discriminator>(
    generator: &mut G,
    gen_opt: &mut RmsProp,
    discriminators: &mut [D],
    disc_opts: &mut [RmsProp],
    bank: &ProjectionBank,
    real: &Tensor,
    z: &Tensor,
    cfg: &StepConfig,
) -> Result<LossRecord> {
    let k_count = discriminators.len();
    if k_count == 0 || k_count != bank.len() || k_count != disc_opts.len() {
        return Err(Error::Config(format!(
            "{k_count} discriminators, {} optimizers and {} projections must agree and be non-zero",
            disc_opts.len(),
            bank.len()
        )));
    }
    if real.ndim() == 0 || real.dim(0) == 0 {
        return Err(Error::Shape("empty real batch".into()));
    }
    let mut uids = HashSet::new();
    if !discriminators.iter().all(|d| uids.insert(d.params().uid())) || uids.contains(&generator.params().uid()) {
        return Err(Error::Config("discriminators must own distinct parameter sets".into()));
    }
    if z.ndim() != 2 || z.dim(1) != generator.latent_dim() {
        return Err(Error::LatentMismatch(format!(
            "noise has shape {:?}, generator expects [B, {}]",
            z.shape(),
            generator.latent_dim()
        )));
    }

    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let (fake, stats) = generator.forward_train(&mut g, zv)?;
    let fake_batch = g.value(fake).clone();
    if fake_batch.shape()[1..] != real.shape()[1..] {
        return Err(Error::Shape(format!(
            "generated batch {:?} does not match real batch {:?}",
            fake_batch.shape(),
            real.shape()
        )));
    }

    let d_losses: Vec<f64> = discriminators
        .par_iter_mut()
        .zip(disc_opts.par_iter_mut())
        .enumerate()
        .map(|(k, (d, opt))| {
            let mut dg = Graph::new();
            let r = dg.constant(real.clone());
            let f = dg.constant(fake_batch.clone());
            let pr = bank.project(&mut dg, k, r)?;
            let pf = bank.project(&mut dg, k, f)?;
            let dr = d.forward(&mut dg, pr, true)?;
            let df = d.forward(&mut dg, pf, true)?;
            let loss = disc_loss_graph(&mut dg, dr, df)?;
            let value = check_finite(scalar(&dg, loss), cfg, Some(k))?;
            let grads = dg.backward(loss)?;
            let pg = dg.param_grads(&grads, d.params());
            opt.step(d.params_mut(), &pg)?;
            Ok(value)
        })
        .collect::<Result<_>>()?;

    let mut per = Vec::with_capacity(k_count);
    for (k, d) in discriminators.iter().enumerate() {
        let pf = bank.project(&mut g, k, fake)?;
        let p = d.forward(&mut g, pf, false)?;
        let l = gen_loss_graph(&mut g, p);
        check_finite(scalar(&g, l), cfg, Some(k))?;
        per.push(l);
    }
    let loss = reduce_graph(&mut g, &per, cfg.mode)?;
    let generator_loss = check_finite(scalar(&g, loss), cfg, None)?;
    if cfg.update_generator {
        let grads = g.backward(loss)?;
        let pg = g.param_grads(&grads, generator.params());
        gen_opt.step(generator.params_mut(), &pg)?;
        generator.commit_stats(&stats);
    }
    Ok(LossRecord { step: cfg.step, stage: cfg.stage, per_discriminator_loss: d_losses, generator_loss })
}
