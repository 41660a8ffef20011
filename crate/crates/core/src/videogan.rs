//! Video generator G_V: a dense encoder whose output is cut into per-step
//! features, two bidirectional LSTM layers and a shared per-step head that
//! emits one frame latent per time step. Frames come from a frozen G_F.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ballsim::{Dataset, VideoClip};
use crate::error::{Error, Result};
use crate::framegan::{prior_latents, tensor_to_frames, FrameGenerator, LATENT_DIM};
use crate::ganloss::{Discriminator, Generator, ProjectionBank, Stage};
use crate::nn::{Archive, BatchStats, BiLstm, Bound, Conv, ConvGeom, Graph, Init, Linear, ParamStore, Tensor, Var};
use crate::pipeline::checkpoint::{manifest_path, Checkpoint, CheckpointManifest, FrameGenRef};
use crate::pipeline::config::TrainRunConfig;
use crate::pipeline::trainer::{self, Adversarial};
use crate::seed::{self, stream};

const DCGAN_STD: f64 = 0.02;
const LEAK: f64 = 0.2;
pub const FRAME_GENERATOR_KEY: &str = "frame_generator";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoGenSpec {
    pub latent_dim: usize,
    /// Widths of the dense encoder; the last is `steps * step_features`.
    pub encoder: Vec<usize>,
    pub steps: usize,
    /// Per-direction hidden size of each bidirectional LSTM layer.
    pub lstm_hidden: Vec<usize>,
    /// Size of each emitted frame latent.
    pub out_dim: usize,
}

impl Default for VideoGenSpec {
    fn default() -> Self {
        Self { latent_dim: 100, encoder: vec![512, 1024, 2048, 3840], steps: 30, lstm_hidden: vec![128, 256], out_dim: LATENT_DIM }
    }
}

impl VideoGenSpec {
    pub fn validate(&self) -> Result<()> {
        let last = *self.encoder.last().ok_or_else(|| Error::Config("video encoder needs at least one layer".into()))?;
        if self.steps == 0 || last % self.steps != 0 {
            return Err(Error::Config(format!("encoder output {last} does not split into {} steps", self.steps)));
        }
        if self.lstm_hidden.is_empty() || self.latent_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config(format!("incomplete video generator spec {self:?}")));
        }
        Ok(())
    }

    pub fn step_features(&self) -> usize {
        self.encoder.last().copied().unwrap_or(0) / self.steps.max(1)
    }
}

/// `steps x dim` latents, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSequence {
    pub steps: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl LatentSequence {
    pub fn step(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(&[self.steps, self.dim], self.values.clone()).expect("consistent sequence")
    }
}

pub struct VideoGenerator {
    spec: VideoGenSpec,
    store: ParamStore,
    encoder: Vec<Linear>,
    lstms: Vec<BiLstm>,
    head: Linear,
}

impl VideoGenerator {
    pub fn new(spec: &VideoGenSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut width = spec.latent_dim;
        let mut encoder = Vec::new();
        for (i, &w) in spec.encoder.iter().enumerate() {
            encoder.push(Linear::new(&mut store, &format!("enc{i}"), width, w, true, Init::FanIn, &mut rng));
            width = w;
        }
        let mut features = spec.step_features();
        let mut lstms = Vec::new();
        for (i, &h) in spec.lstm_hidden.iter().enumerate() {
            let l = BiLstm::new(&mut store, &format!("lstm{i}"), features, h, &mut rng);
            features = l.output_features();
            lstms.push(l);
        }
        let head = Linear::new(&mut store, "head", features, spec.out_dim, true, Init::FanIn, &mut rng);
        Ok(Self { spec: spec.clone(), store, encoder, lstms, head })
    }

    pub fn spec(&self) -> &VideoGenSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Dense encoder output `[B, steps * step_features]`.
    pub fn encode(&self, g: &mut Graph, z: Var, track: bool) -> Result<Var> {
        let zs = g.value(z).shape().to_vec();
        if zs.len() != 2 || zs[1] != self.spec.latent_dim {
            return Err(Error::LatentMismatch(format!(
                "video generator expects [B, {}] noise, got {zs:?}",
                self.spec.latent_dim
            )));
        }
        let p = Bound::new(&self.store, track);
        let mut x = z;
        for (i, layer) in self.encoder.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i + 1 < self.encoder.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    /// Step-major split of the encoder output: step `t` is features
    /// `[t * F, (t + 1) * F)`.
    pub fn split_steps(&self, g: &mut Graph, encoded: Var) -> Result<Vec<Var>> {
        let f = self.spec.step_features();
        (0..self.spec.steps).map(|t| g.narrow(encoded, 1, t * f, f)).collect()
    }

    /// Recurrent block and head over per-step features; returns one
    /// `[B, out_dim]` latent per step.
    pub fn decode_steps(&self, g: &mut Graph, steps: &[Var], track: bool) -> Result<Vec<Var>> {
        let p = Bound::new(&self.store, track);
        let mut xs = steps.to_vec();
        for l in &self.lstms {
            xs = l.forward(g, p, &xs)?;
        }
        xs.iter().map(|&x| self.head.forward(g, p, x)).collect()
    }

    /// Latents `[B, steps, out_dim]`.
    pub fn forward(&self, g: &mut Graph, z: Var, track: bool) -> Result<Var> {
        let b = g.value(z).dim(0);
        let enc = self.encode(g, z, track)?;
        let steps = self.split_steps(g, enc)?;
        let lat = self.decode_steps(g, &steps, track)?;
        let flat = g.concat(&lat, 1)?;
        g.reshape(flat, &[b, self.spec.steps, self.spec.out_dim])
    }

    pub fn latents(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let y = self.forward(&mut g, zv, false)?;
        Ok(g.value(y).clone())
    }

    pub fn archive(&self) -> Archive {
        let mut a = Archive::default();
        a.push_store("", &self.store);
        a
    }

    pub fn from_archive(spec: &VideoGenSpec, archive: &Archive) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        archive.load_store("", &mut model.store)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let ck = Checkpoint::open(path)?;
        ck.expect_stage(Stage::Video)?;
        let model = Self::from_archive(&ck.manifest.config.arch.video_gen, &ck.archive(trainer::GENERATOR_ROLE)?)?;
        if let Some(expected) = ck.manifest.param_hashes.get(trainer::GENERATOR_ROLE) {
            let found = model.store.content_hash();
            if &found != expected {
                return Err(Error::HashMismatch { path: ck.dir.clone(), expected: expected.clone(), found });
            }
        }
        Ok((model, ck))
    }
}

fn check_compatible(gv: &VideoGenerator, gf: &FrameGenerator) -> Result<()> {
    if gv.spec.out_dim != gf.spec().latent_dim {
        return Err(Error::LatentMismatch(format!(
            "video generator emits {}-dim latents, frame generator takes {}",
            gv.spec.out_dim,
            gf.spec().latent_dim
        )));
    }
    Ok(())
}

/// Decodes `[B, T, D]` latents through G_F frame by frame into `[B, 1, T, H, W]`.
fn frames_for_latents(g: &mut Graph, gf: &FrameGenerator, latents: Var) -> Result<Var> {
    let s = g.value(latents).shape().to_vec();
    let flat = g.reshape(latents, &[s[0] * s[1], s[2]])?;
    let (frames, _) = gf.forward(g, flat, false, false)?;
    let (h, w) = (gf.spec().height, gf.spec().width);
    g.reshape(frames, &[s[0], 1, s[1], h, w])
}

/// G_V composed with a frozen G_F, as trained in the video stage.
pub struct VideoTrainee {
    pub video: VideoGenerator,
    pub frames: Arc<FrameGenerator>,
}

impl Generator for VideoTrainee {
    fn latent_dim(&self) -> usize {
        self.video.spec.latent_dim
    }

    fn params(&self) -> &ParamStore {
        &self.video.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.video.store
    }

    fn forward_train(&self, g: &mut Graph, z: Var) -> Result<(Var, Vec<BatchStats<f32>>)> {
        let lat = self.video.forward(g, z, true)?;
        Ok((frames_for_latents(g, &self.frames, lat)?, Vec::new()))
    }
}

/// 3-D convolutions over a projected clip `[B, 1, T, h, w]`; the last layer
/// covers the whole remaining extent and gives a single logit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoDiscSpec {
    pub channels: [usize; 3],
}

impl Default for VideoDiscSpec {
    fn default() -> Self {
        Self { channels: [16, 32, 64] }
    }
}

impl VideoDiscSpec {
    pub fn geometry() -> [ConvGeom; 3] {
        [
            ConvGeom::new3d([3, 4, 4], [1, 2, 2], [1, 1, 1]),
            ConvGeom::new3d([3, 3, 3], [2, 1, 1], [1, 1, 1]),
            ConvGeom::new3d([3, 3, 3], [2, 1, 1], [1, 0, 0]),
        ]
    }
}

pub struct VideoDiscriminator {
    store: ParamStore,
    convs: Vec<Conv>,
    head: Conv,
}

impl VideoDiscriminator {
    /// `input` is `[T, h, w]` of the projected clip.
    pub fn new(spec: &VideoDiscSpec, input: [usize; 3], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let init = Init::Normal(DCGAN_STD);
        let mut size = input;
        let mut c_in = 1;
        let mut convs = Vec::new();
        for (i, (geom, &c)) in VideoDiscSpec::geometry().into_iter().zip(&spec.channels).enumerate() {
            size = geom.conv_out(size)?;
            convs.push(Conv::new(&mut store, &format!("conv{i}"), c_in, c, geom, true, init, &mut rng));
            c_in = c;
        }
        let geom = ConvGeom::new3d(size, [1, 1, 1], [0, 0, 0]);
        let head = Conv::new(&mut store, "head", c_in, 1, geom, true, init, &mut rng);
        Ok(Self { store, convs, head })
    }
}

impl Discriminator for VideoDiscriminator {
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
        let o = self.head.forward(g, p, h)?;
        let o = g.reshape(o, &[b, 1])?;
        Ok(g.sigmoid(o))
    }
}

pub type VideoGan = Adversarial<VideoTrainee, VideoDiscriminator>;

pub fn build_video_gan(cfg: &TrainRunConfig, frames: Arc<FrameGenerator>) -> Result<VideoGan> {
    let arch = &cfg.arch;
    let video = VideoGenerator::new(&arch.video_gen, seed::mix(cfg.seed, stream::GENERATOR_INIT))?;
    check_compatible(&video, &frames)?;
    let bank = ProjectionBank::new(cfg.k, arch.projection, seed::mix(cfg.seed, stream::PROJECTIONS))?;
    let (h, w) = arch.projection.out_size(frames.spec().height, frames.spec().width)?;
    let input = [arch.video_gen.steps, h, w];
    let discriminators = (0..cfg.k)
        .map(|k| VideoDiscriminator::new(&arch.video_disc, input, seed::mix(cfg.seed, stream::DISCRIMINATOR_INIT + k as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Adversarial::new(VideoTrainee { video, frames }, discriminators, bank, cfg.learning_rate))
}

/// Stacks clips into `[B, 1, T, H, W]` in `[0, 1]`.
pub fn clip_batch(data: &Dataset, clips: &[usize]) -> Result<Tensor> {
    let h = &data.header;
    let mut out = Vec::with_capacity(clips.len() * h.clip_bytes());
    for &c in clips {
        if c >= data.n_clips() {
            return Err(Error::Corrupt(format!("clip {c} outside the dataset")));
        }
        out.extend(data.clip_raw(c).iter().map(|&b| b as f32 / 255.0));
    }
    Tensor::new(&[clips.len(), 1, h.n_frames as usize, h.height as usize, h.width as usize], out)
}

/// Stage-2 training: G_V against K video discriminators through the frozen
/// frame generator named by `cfg.frame_checkpoint`.
pub fn train_video_gan(cfg: &TrainRunConfig, out_dir: &Path, hooks: &trainer::Hooks) -> Result<CheckpointManifest> {
    cfg.validate()?;
    if cfg.stage != Stage::Video {
        return Err(Error::Config(format!("train_video_gan given a {} config", cfg.stage)));
    }
    let frame_ck_path = cfg.frame_checkpoint.as_deref().expect("validated");
    let (gf, _) = FrameGenerator::load(frame_ck_path)?;
    let gf = Arc::new(gf);
    let frozen_hash = gf.store().content_hash();
    let data = Dataset::open(&cfg.dataset)?;
    let h = &data.header;
    if h.n_frames as usize != cfg.arch.video_gen.steps
        || (h.height as usize, h.width as usize) != (gf.spec().height, gf.spec().width)
    {
        return Err(Error::Config(format!(
            "dataset clips are {}x{}x{}, models expect {}x{}x{}",
            h.n_frames,
            h.height,
            h.width,
            cfg.arch.video_gen.steps,
            gf.spec().height,
            gf.spec().width
        )));
    }
    let mut models = build_video_gan(cfg, Arc::clone(&gf))?;
    let frame_ref = FrameGenRef { manifest: manifest_path(frame_ck_path), param_hash: frozen_hash.clone() };
    let check_frozen = |gf: &FrameGenerator| -> Result<()> {
        let now = gf.store().content_hash();
        if now != frozen_hash {
            return Err(Error::FrozenViolation { before: frozen_hash.clone(), after: now });
        }
        Ok(())
    };
    let manifest = trainer::run_stage(
        out_dir,
        cfg,
        &mut models,
        data.n_clips(),
        |items| clip_batch(&data, items),
        |m| {
            check_frozen(&gf)?;
            m.param_hashes.insert(FRAME_GENERATOR_KEY.into(), frozen_hash.clone());
            m.frame_generator = Some(frame_ref.clone());
            Ok(())
        },
        hooks,
    )?;
    check_frozen(&models.generator.frames)?;
    Ok(manifest)
}

/// Samples videos from G_V through any compatible G_F.
pub struct VideoSampler {
    video: Arc<VideoGenerator>,
    frames: Arc<FrameGenerator>,
}

impl VideoSampler {
    pub fn new(video: Arc<VideoGenerator>, frames: Arc<FrameGenerator>) -> Result<Self> {
        check_compatible(&video, &frames)?;
        Ok(Self { video, frames })
    }

    /// Loads G_V and, unless `frame_ckpt` is given, the G_F it was trained with
    /// (whose hash must match the one recorded at training time).
    pub fn load(video_ckpt: &Path, frame_ckpt: Option<&Path>) -> Result<Self> {
        let (video, ck) = VideoGenerator::load(video_ckpt)?;
        let frames = match frame_ckpt {
            Some(p) => FrameGenerator::load(p)?.0,
            None => {
                let r = ck
                    .manifest
                    .frame_generator
                    .as_ref()
                    .ok_or_else(|| Error::Corrupt("video checkpoint does not name its frame generator".into()))?;
                let path = resolve(&ck.dir, &r.manifest);
                let (gf, _) = FrameGenerator::load(&path)?;
                let found = gf.store().content_hash();
                if found != r.param_hash {
                    return Err(Error::HashMismatch { path, expected: r.param_hash.clone(), found });
                }
                gf
            }
        };
        Self::new(Arc::new(video), Arc::new(frames))
    }

    pub fn video(&self) -> &Arc<VideoGenerator> {
        &self.video
    }

    pub fn frames(&self) -> &Arc<FrameGenerator> {
        &self.frames
    }

    /// The same G_V composed with a different G_F; nothing is retrained.
    pub fn swap_frame_generator(&self, frames: Arc<FrameGenerator>) -> Result<Self> {
        Self::new(Arc::clone(&self.video), frames)
    }

    /// One clip and its latents per row of `z_v` (`[B, latent_dim]`).
    pub fn generate(&self, z_v: &Tensor) -> Result<Vec<(VideoClip, LatentSequence)>> {
        let lat = self.video.latents(z_v)?;
        let (b, t, d) = (lat.dim(0), lat.dim(1), lat.dim(2));
        let frames = tensor_to_frames(&self.frames.decode(&lat.reshape(&[b * t, d])?)?)?;
        Ok(frames
            .chunks_exact(t)
            .zip(lat.data().chunks_exact(t * d))
            .map(|(f, l)| {
                (VideoClip { frames: f.to_vec() }, LatentSequence { steps: t, dim: d, values: l.to_vec() })
            })
            .collect())
    }

    /// `n` videos from prior noise seeded by `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<(VideoClip, LatentSequence)>> {
        let z = prior_latents(n, self.video.spec.latent_dim, seed);
        let mut out = Vec::with_capacity(n);
        const CHUNK: usize = 8;
        for start in (0..n).step_by(CHUNK) {
            out.extend(self.generate(&z.narrow(0, start, CHUNK.min(n - start))?)?);
        }
        Ok(out)
    }
}

/// Resolves a manifest-recorded path: absolute paths and paths that exist as
/// given are kept, others are taken relative to `base`.
fn resolve(base: &Path, recorded: &Path) -> PathBuf {
    if recorded.is_absolute() || recorded.exists() {
        recorded.to_path_buf()
    } else {
        base.join(recorded)
    }
}
