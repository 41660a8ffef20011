//! Frame generator G_F (a DCGAN-style decoder) and its projection
//! discriminators.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ballsim::{Dataset, Frame};
use crate::error::{Error, Result};
use crate::ganloss::{Discriminator, Generator, ProjectionBank, Stage};
use crate::nn::layers::BN_MOMENTUM;
use crate::nn::params::normal;
use crate::nn::{Archive, BatchNorm, BatchStats, Bound, Conv, ConvGeom, ConvTranspose2d, Graph, Init, Linear, ParamStore, Tensor, Var};
use crate::pipeline::checkpoint::{Checkpoint, CheckpointManifest};
use crate::pipeline::config::TrainRunConfig;
use crate::pipeline::trainer::{self, Adversarial};
use crate::seed::{self, stream};

pub const LATENT_DIM: usize = 100;
const DCGAN_STD: f64 = 0.02;
const LEAK: f64 = 0.2;

/// `latent -> channels[0] @ 4x4 -> channels[1] @ 8x8 -> ... -> 1 @ size`,
/// each stage a transposed convolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameGenSpec {
    pub latent_dim: usize,
    pub channels: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl Default for FrameGenSpec {
    fn default() -> Self {
        Self { latent_dim: LATENT_DIM, channels: vec![256, 128, 64], height: 32, width: 32 }
    }
}

impl FrameGenSpec {
    pub fn validate(&self) -> Result<()> {
        let size = 4usize.checked_shl(self.channels.len() as u32).unwrap_or(0);
        if self.latent_dim == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(format!("frame generator needs a latent and non-empty widths: {self:?}")));
        }
        if self.height != size || self.width != size {
            return Err(Error::Config(format!(
                "{} upsampling stages give {size}x{size} frames, configured {}x{}",
                self.channels.len(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}

pub struct FrameGenerator {
    spec: FrameGenSpec,
    store: ParamStore,
    deconvs: Vec<ConvTranspose2d>,
    norms: Vec<BatchNorm>,
}

impl FrameGenerator {
    pub fn new(spec: &FrameGenSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let init = Init::Normal(DCGAN_STD);
        let mut deconvs = Vec::new();
        let mut norms = Vec::new();
        let mut c_in = spec.latent_dim;
        for (i, &c) in spec.channels.iter().enumerate() {
            let geom = if i == 0 { ConvGeom::new2d(4, 1, 0) } else { ConvGeom::new2d(4, 2, 1) };
            deconvs.push(ConvTranspose2d::new(&mut store, &format!("deconv{i}"), c_in, c, geom, false, init, &mut rng));
            norms.push(BatchNorm::new(&mut store, &format!("bn{i}"), c, &mut rng));
            c_in = c;
        }
        let n = spec.channels.len();
        deconvs.push(ConvTranspose2d::new(&mut store, &format!("deconv{n}"), c_in, 1, ConvGeom::new2d(4, 2, 1), true, init, &mut rng));
        Ok(Self { spec: spec.clone(), store, deconvs, norms })
    }

    pub fn spec(&self) -> &FrameGenSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Frames `[B, 1, H, W]` in `[0, 1]` from latents `[B, latent_dim]`.
    /// `train` selects batch statistics (and returns them) over population ones.
    pub fn forward(&self, g: &mut Graph, z: Var, train: bool, track: bool) -> Result<(Var, Vec<BatchStats<f32>>)> {
        let zs = g.value(z).shape().to_vec();
        if zs.len() != 2 || zs[1] != self.spec.latent_dim {
            return Err(Error::LatentMismatch(format!(
                "frame generator expects [B, {}] latents, got {zs:?}",
                self.spec.latent_dim
            )));
        }
        let p = Bound::new(&self.store, track);
        let mut x = g.reshape(z, &[zs[0], zs[1], 1, 1])?;
        let mut stats = Vec::new();
        for (i, deconv) in self.deconvs.iter().enumerate() {
            x = deconv.forward(g, p, x)?;
            if let Some(bn) = self.norms.get(i) {
                x = if train {
                    let (y, s) = bn.forward_train(g, p, x)?;
                    stats.push(s);
                    y
                } else {
                    bn.forward_eval(g, p, x)?
                };
                x = g.relu(x);
            }
        }
        let t = g.tanh(x);
        Ok((g.affine(t, 0.5, 0.5), stats))
    }

    /// Eval-mode decoding of `[B, latent_dim]` latents.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let (y, _) = self.forward(&mut g, zv, false, false)?;
        Ok(g.value(y).clone())
    }

    pub fn archive(&self) -> Archive {
        let mut a = Archive::default();
        a.push_store("", &self.store);
        a
    }

    pub fn from_archive(spec: &FrameGenSpec, archive: &Archive) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        archive.load_store("", &mut model.store)?;
        Ok(model)
    }

    /// Loads G_F from a frame-stage checkpoint and checks its parameter hash.
    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let ck = Checkpoint::open(path)?;
        ck.expect_stage(Stage::Frames)?;
        let model = Self::from_archive(&ck.manifest.config.arch.frame_gen, &ck.archive(trainer::GENERATOR_ROLE)?)?;
        if let Some(expected) = ck.manifest.param_hashes.get(trainer::GENERATOR_ROLE) {
            let found = model.store.content_hash();
            if &found != expected {
                return Err(Error::HashMismatch { path: ck.dir.clone(), expected: expected.clone(), found });
            }
        }
        Ok((model, ck))
    }
}

impl Generator for FrameGenerator {
    fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward_train(&self, g: &mut Graph, z: Var) -> Result<(Var, Vec<BatchStats<f32>>)> {
        self.forward(g, z, true, true)
    }

    fn commit_stats(&mut self, stats: &[BatchStats<f32>]) {
        for (bn, s) in self.norms.iter().zip(stats) {
            bn.update_running(&mut self.store, s, BN_MOMENTUM);
        }
    }
}

/// Convolutions over the projected frame: the first keeps the size
/// (3x3, pad 1), later ones halve it (4x4, stride 2, pad 1); then a linear
/// unit and a sigmoid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameDiscSpec {
    pub channels: Vec<usize>,
}

impl Default for FrameDiscSpec {
    fn default() -> Self {
        Self { channels: vec![32, 64] }
    }
}

pub struct FrameDiscriminator {
    store: ParamStore,
    convs: Vec<Conv>,
    head: Linear,
}

impl FrameDiscriminator {
    /// `input` is the projected frame size `(h, w)`.
    pub fn new(spec: &FrameDiscSpec, input: (usize, usize), seed: u64) -> Result<Self> {
        if spec.channels.is_empty() {
            return Err(Error::Config("frame discriminator needs at least one convolution".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let init = Init::Normal(DCGAN_STD);
        let mut convs = Vec::new();
        let (mut c_in, mut size) = (1, [1, input.0, input.1]);
        for (i, &c) in spec.channels.iter().enumerate() {
            let geom = if i == 0 { ConvGeom::new2d(3, 1, 1) } else { ConvGeom::new2d(4, 2, 1) };
            size = geom.conv_out(size)?;
            convs.push(Conv::new(&mut store, &format!("conv{i}"), c_in, c, geom, true, init, &mut rng));
            c_in = c;
        }
        let head = Linear::new(&mut store, "head", c_in * size[1] * size[2], 1, true, init, &mut rng);
        Ok(Self { store, convs, head })
    }
}

impl Discriminator for FrameDiscriminator {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, g: &mut Graph, x: Var, track: bool) -> Result<Var> {
        let p = Bound::new(&self.store, track);
        let b = g.value(x).dim(0);
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, p, h)?;
            h = g.leaky_relu(h, LEAK);
        }
        let n = g.value(h).numel() / b;
        let flat = g.reshape(h, &[b, n])?;
        let o = self.head.forward(g, p, flat)?;
        Ok(g.sigmoid(o))
    }
}

pub type FrameGan = Adversarial<FrameGenerator, FrameDiscriminator>;

/// Fresh stage-1 models for `cfg`, all initialized from `cfg.seed`.
pub fn build_frame_gan(cfg: &TrainRunConfig) -> Result<FrameGan> {
    let arch = &cfg.arch;
    let bank = ProjectionBank::new(cfg.k, arch.projection, seed::mix(cfg.seed, stream::PROJECTIONS))?;
    let projected = arch.projection.out_size(arch.frame_gen.height, arch.frame_gen.width)?;
    let generator = FrameGenerator::new(&arch.frame_gen, seed::mix(cfg.seed, stream::GENERATOR_INIT))?;
    let discriminators = (0..cfg.k)
        .map(|k| FrameDiscriminator::new(&arch.frame_disc, projected, seed::mix(cfg.seed, stream::DISCRIMINATOR_INIT + k as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Adversarial::new(generator, discriminators, bank, cfg.learning_rate))
}

/// Stacks frames `(clip, frame)` of the dataset into `[B, 1, H, W]` in `[0, 1]`.
pub fn frame_batch(data: &Dataset, entries: &[(u32, u32)]) -> Result<Tensor> {
    let (h, w) = (data.header.height as usize, data.header.width as usize);
    let mut out = Vec::with_capacity(entries.len() * h * w);
    for &(c, f) in entries {
        if c >= data.header.n_clips || f >= data.header.n_frames {
            return Err(Error::Corrupt(format!("frames index entry ({c}, {f}) outside the dataset")));
        }
        out.extend(data.frame_raw(c as usize, f as usize).iter().map(|&b| b as f32 / 255.0));
    }
    Tensor::new(&[entries.len(), 1, h, w], out)
}

/// Stage-1 training over the frames index next to the dataset `cfg.dataset`.
pub fn train_frame_gan(cfg: &TrainRunConfig, out_dir: &Path, hooks: &trainer::Hooks) -> Result<CheckpointManifest> {
    cfg.validate()?;
    if cfg.stage != Stage::Frames {
        return Err(Error::Config(format!("train_frame_gan given a {} config", cfg.stage)));
    }
    let data = Dataset::open(&cfg.dataset)?;
    let paths = crate::ballsim::DatasetPaths::for_data(&cfg.dataset);
    let index = crate::ballsim::read_index(&paths.index)?;
    let spec = &cfg.arch.frame_gen;
    if (data.header.height as usize, data.header.width as usize) != (spec.height, spec.width) {
        return Err(Error::Config(format!(
            "dataset frames are {}x{}, generator produces {}x{}",
            data.header.height, data.header.width, spec.height, spec.width
        )));
    }
    let mut models = build_frame_gan(cfg)?;
    let bank_hash = models.bank.hash();
    let manifest = trainer::run_stage(
        out_dir,
        cfg,
        &mut models,
        index.len(),
        |items| frame_batch(&data, &items.iter().map(|&i| index[i]).collect::<Vec<_>>()),
        |_m| Ok(()),
        hooks,
    )?;
    debug_assert_eq!(models.bank.hash(), bank_hash);
    Ok(manifest)
}

/// Converts `[N, 1, H, W]` to frames.
pub fn tensor_to_frames(t: &Tensor) -> Result<Vec<Frame>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Shape(format!("expected [N, 1, H, W] frames, got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    Ok(t.data().chunks_exact(h * w).map(|c| Frame { height: h, width: w, pixels: c.to_vec() }).collect())
}

/// Draws `n` latents from the standard normal prior.
pub fn prior_latents(n: usize, latent_dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(seed, stream::SAMPLING));
    normal(&mut rng, &[n, latent_dim], 0.0, 1.0)
}

/// `n` eval-mode samples of a trained frame generator.
pub fn sample_frames(generator: &FrameGenerator, n: usize, seed: u64) -> Result<Vec<Frame>> {
    let mut frames = Vec::with_capacity(n);
    let z = prior_latents(n, generator.spec.latent_dim, seed);
    const CHUNK: usize = 256;
    for start in (0..n).step_by(CHUNK) {
        let len = CHUNK.min(n - start);
        frames.extend(tensor_to_frames(&generator.decode(&z.narrow(0, start, len)?)?)?);
    }
    Ok(frames)
}

/// Mean L2 distance over all unordered pairs.
pub fn mean_pairwise_l2(frames: &[Frame]) -> f64 {
    let n = frames.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = frames[i]
                .pixels
                .iter()
                .zip(&frames[j].pixels)
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum();
            total += d.sqrt();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

pub fn mean_intensity(frames: &[Frame]) -> f64 {
    let n: usize = frames.iter().map(|f| f.pixels.len()).sum();
    frames.iter().flat_map(|f| f.pixels.iter()).map(|&p| p as f64).sum::<f64>() / n.max(1) as f64
}

/// Shared read-only handle for composing with the video generator.
pub type SharedFrameGenerator = Arc<FrameGenerator>;
