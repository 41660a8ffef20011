//! Bouncing-balls simulation, rasterization and the binary clip dataset.
//!
//! Balls live in the unit box. Each step advances positions, reflects wall
//! contacts (with a position clamp) and then resolves pairwise overlaps once
//! with equal-mass elastic collisions.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub radius: f64,
    pub speed: f64,
    pub dt: f64,
    pub max_placement_attempts: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        Self { radius: 0.12, speed: 0.05, dt: 1.0, max_placement_attempts: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub radius: f64,
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
}

impl WorldState {
    pub fn n_balls(&self) -> usize {
        self.positions.len()
    }

    /// `sum |v_i|^2`.
    pub fn kinetic_energy(&self) -> f64 {
        self.velocities.iter().map(|v| v[0] * v[0] + v[1] * v[1]).sum()
    }

    pub fn is_contained(&self) -> bool {
        let (lo, hi) = (self.radius, 1.0 - self.radius);
        self.positions.iter().all(|p| p.iter().all(|&c| (lo..=hi).contains(&c)))
    }
}

/// Places `n_balls` non-overlapping balls uniformly at random with velocity
/// directions uniform on the circle and fixed speed.
pub fn init_world(rng_seed: u64, n_balls: usize, params: &SimParams) -> Result<WorldState> {
    let r = params.radius;
    if n_balls == 0 || !(r > 0.0 && r < 0.5) {
        return Err(Error::Config(format!("need n_balls >= 1 and 0 < radius < 0.5 (got {n_balls}, {r})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut positions: Vec<[f64; 2]> = Vec::with_capacity(n_balls);
    let mut attempts = 0;
    while positions.len() < n_balls {
        if attempts == params.max_placement_attempts {
            return Err(Error::CannotPlaceBalls { n_balls, radius: r, attempts });
        }
        attempts += 1;
        let p = [rng.random_range(r..=1.0 - r), rng.random_range(r..=1.0 - r)];
        let clear = positions.iter().all(|q| {
            let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
            dx * dx + dy * dy > 4.0 * r * r
        });
        if clear {
            positions.push(p);
        }
    }
    let velocities = (0..n_balls)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            [params.speed * theta.cos(), params.speed * theta.sin()]
        })
        .collect();
    Ok(WorldState { radius: r, positions, velocities })
}

fn reflect_axis(pos: &mut f64, vel: &mut f64, r: f64) {
    let (lo, hi) = (r, 1.0 - r);
    if *pos < lo {
        *pos = 2.0 * lo - *pos;
        *vel = vel.abs();
    } else if *pos > hi {
        *pos = 2.0 * hi - *pos;
        *vel = -vel.abs();
    }
    *pos = pos.clamp(lo, hi);
}

/// Advances the world by `dt`, returning the new state.
pub fn step(world: &WorldState, dt: f64) -> WorldState {
    let r = world.radius;
    let mut next = world.clone();
    for (p, v) in next.positions.iter_mut().zip(next.velocities.iter_mut()) {
        for axis in 0..2 {
            p[axis] += v[axis] * dt;
            reflect_axis(&mut p[axis], &mut v[axis], r);
        }
    }
    let n = next.n_balls();
    for i in 0..n {
        for j in i + 1..n {
            let (pi, pj) = (next.positions[i], next.positions[j]);
            let d = [pj[0] - pi[0], pj[1] - pi[1]];
            let dist2 = d[0] * d[0] + d[1] * d[1];
            if dist2 >= 4.0 * r * r || dist2 == 0.0 {
                continue;
            }
            let dist = dist2.sqrt();
            let nrm = [d[0] / dist, d[1] / dist];
            let (vi, vj) = (next.velocities[i], next.velocities[j]);
            let vi_n = vi[0] * nrm[0] + vi[1] * nrm[1];
            let vj_n = vj[0] * nrm[0] + vj[1] * nrm[1];
            // exchange normal components only while approaching
            if vi_n - vj_n > 0.0 {
                let dv = vj_n - vi_n;
                next.velocities[i] = [vi[0] + dv * nrm[0], vi[1] + dv * nrm[1]];
                next.velocities[j] = [vj[0] - dv * nrm[0], vj[1] - dv * nrm[1]];
            }
            let push = 0.5 * (2.0 * r - dist);
            for axis in 0..2 {
                next.positions[i][axis] = (pi[axis] - push * nrm[axis]).clamp(r, 1.0 - r);
                next.positions[j][axis] = (pj[axis] + push * nrm[axis]).clamp(r, 1.0 - r);
            }
        }
    }
    next
}

/// `height x width` grayscale raster, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0.0; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Self {
        Self { height, width, pixels: bytes.iter().map(|&b| b as f32 / 255.0).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn reversed(&self) -> Self {
        Self { frames: self.frames.iter().rev().cloned().collect() }
    }
}

/// Pixel `(row, col)` has its center at `((col + 0.5) / w, (row + 0.5) / h)`;
/// it is lit when that center lies strictly inside some ball.
pub fn render(world: &WorldState, height: usize, width: usize) -> Frame {
    let mut frame = Frame::zeros(height, width);
    let r2 = world.radius * world.radius;
    for row in 0..height {
        let cy = (row as f64 + 0.5) / height as f64;
        for col in 0..width {
            let cx = (col as f64 + 0.5) / width as f64;
            let lit = world.positions.iter().any(|p| {
                let (dx, dy) = (cx - p[0], cy - p[1]);
                dx * dx + dy * dy < r2
            });
            if lit {
                frame.pixels[row * width + col] = 1.0;
            }
        }
    }
    frame
}

/// Seed of clip `clip_index`, independent of generation order.
pub fn clip_seed(base_seed: u64, clip_index: u64) -> u64 {
    crate::seed::mix(base_seed, clip_index)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub n_balls: usize,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub sim: SimParams,
}

pub fn generate_clip(base_seed: u64, clip_index: u64, spec: &ClipSpec) -> Result<VideoClip> {
    if spec.n_frames == 0 {
        return Err(Error::Config("clips need at least one frame".into()));
    }
    let mut world = init_world(clip_seed(base_seed, clip_index), spec.n_balls, &spec.sim)?;
    let mut frames = Vec::with_capacity(spec.n_frames);
    for i in 0..spec.n_frames {
        if i > 0 {
            world = step(&world, spec.sim.dt);
        }
        frames.push(render(&world, spec.height, spec.width));
    }
    Ok(VideoClip { frames })
}

pub const DATASET_MAGIC: &[u8; 8] = b"BBALLSV1";
pub const DATASET_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 36;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub n_clips: u32,
    pub n_frames: u32,
    pub height: u32,
    pub width: u32,
    pub base_seed: u64,
}

impl DatasetHeader {
    pub fn frame_bytes(&self) -> usize {
        self.height as usize * self.width as usize
    }

    pub fn clip_bytes(&self) -> usize {
        self.n_frames as usize * self.frame_bytes()
    }

    pub fn payload_len(&self) -> usize {
        self.n_clips as usize * self.clip_bytes()
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..8].copy_from_slice(DATASET_MAGIC);
        out[8..12].copy_from_slice(&DATASET_VERSION.to_le_bytes());
        out[12..16].copy_from_slice(&self.n_clips.to_le_bytes());
        out[16..20].copy_from_slice(&self.n_frames.to_le_bytes());
        out[20..24].copy_from_slice(&self.height.to_le_bytes());
        out[24..28].copy_from_slice(&self.width.to_le_bytes());
        out[28..36].copy_from_slice(&self.base_seed.to_le_bytes());
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corrupt(format!("dataset header needs {HEADER_LEN} bytes, got {}", bytes.len())));
        }
        if &bytes[..8] != DATASET_MAGIC {
            return Err(Error::Corrupt("not a bouncing-balls dataset (bad magic)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != DATASET_VERSION {
            return Err(Error::Version { what: "dataset", found: version, expected: DATASET_VERSION });
        }
        Ok(Self {
            n_clips: u32_at(12),
            n_frames: u32_at(16),
            height: u32_at(20),
            width: u32_at(24),
            base_seed: u64::from_le_bytes(bytes[28..36].try_into().unwrap()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_clips: usize,
    pub clip: ClipSpec,
    pub base_seed: u64,
    /// Number of `(clip, frame)` pairs in the frame-training index.
    pub index_frames: usize,
}

/// Sidecar metadata written next to the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: DatasetConfig,
    pub dataset_sha256: String,
    pub index_sha256: String,
}

pub struct DatasetPaths {
    pub data: PathBuf,
    pub index: PathBuf,
    pub meta: PathBuf,
}

impl DatasetPaths {
    pub fn for_data(data: &Path) -> Self {
        Self {
            data: data.to_path_buf(),
            index: data.with_extension("index"),
            meta: data.with_extension("json"),
        }
    }
}

/// Uniformly samples `(clip, frame)` pairs with a seed derived from the dataset seed.
pub fn sample_frames_index(config: &DatasetConfig) -> Vec<(u32, u32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::mix(config.base_seed, crate::seed::stream::FRAMES_INDEX));
    (0..config.index_frames)
        .map(|_| {
            (
                rng.random_range(0..config.n_clips as u32),
                rng.random_range(0..config.clip.n_frames as u32),
            )
        })
        .collect()
}

fn clip_bytes(clip: &VideoClip) -> Vec<u8> {
    clip.frames.iter().flat_map(|f| f.to_bytes()).collect()
}

/// Generates clips `[start, start + count)` in parallel; output order is by index.
pub fn generate_clip_bytes(config: &DatasetConfig, start: usize, count: usize) -> Result<Vec<Vec<u8>>> {
    (start..start + count)
        .into_par_iter()
        .map(|i| generate_clip(config.base_seed, i as u64, &config.clip).map(|c| clip_bytes(&c)))
        .collect()
}

/// Writes the dataset file, its frames index and a JSON sidecar.
pub fn build_dataset(config: &DatasetConfig, out: &Path) -> Result<DatasetPaths> {
    use sha2::{Digest, Sha256};

    if config.n_clips == 0 || config.n_clips > u32::MAX as usize {
        return Err(Error::Config(format!("n_clips {} out of range", config.n_clips)));
    }
    let paths = DatasetPaths::for_data(out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let header = DatasetHeader {
        n_clips: config.n_clips as u32,
        n_frames: config.clip.n_frames as u32,
        height: config.clip.height as u32,
        width: config.clip.width as u32,
        base_seed: config.base_seed,
    };
    let file = File::create(&paths.data).at(&paths.data)?;
    let mut w = BufWriter::new(file);
    let mut hasher = Sha256::new();
    let hb = header.to_bytes();
    w.write_all(&hb).at(&paths.data)?;
    hasher.update(hb);
    const CHUNK: usize = 512;
    let mut start = 0;
    while start < config.n_clips {
        let count = CHUNK.min(config.n_clips - start);
        for clip in generate_clip_bytes(config, start, count)? {
            w.write_all(&clip).at(&paths.data)?;
            hasher.update(&clip);
        }
        start += count;
    }
    w.flush().at(&paths.data)?;
    let dataset_sha256 = hex::encode(hasher.finalize());

    let index = sample_frames_index(config);
    let index_bytes = encode_index(&index);
    std::fs::write(&paths.index, &index_bytes).at(&paths.index)?;

    let meta = DatasetMeta {
        config: config.clone(),
        dataset_sha256,
        index_sha256: crate::nn::params::sha256_hex(&index_bytes),
    };
    std::fs::write(&paths.meta, serde_json::to_vec_pretty(&meta)?).at(&paths.meta)?;
    Ok(paths)
}

/// Reuses the dataset at `out` when its sidecar records the same config and
/// the file still hashes to the recorded digest; otherwise builds it. A
/// sidecar for a different config is an error rather than an overwrite.
pub fn ensure_dataset(config: &DatasetConfig, out: &Path) -> Result<DatasetPaths> {
    let paths = DatasetPaths::for_data(out);
    if !paths.meta.exists() {
        return build_dataset(config, out);
    }
    let meta: DatasetMeta = serde_json::from_slice(&std::fs::read(&paths.meta).at(&paths.meta)?)?;
    if meta.config != *config {
        return Err(Error::Config(format!("{} was generated with a different config", out.display())));
    }
    let found = crate::nn::params::sha256_file(&paths.data)?;
    if found != meta.dataset_sha256 {
        return Err(Error::HashMismatch { path: paths.data, expected: meta.dataset_sha256, found });
    }
    Ok(paths)
}

pub fn encode_index(index: &[(u32, u32)]) -> Vec<u8> {
    index.iter().flat_map(|&(c, f)| c.to_le_bytes().into_iter().chain(f.to_le_bytes())).collect()
}

pub fn read_index(path: &Path) -> Result<Vec<(u32, u32)>> {
    let bytes = std::fs::read(path).at(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Corrupt(format!("{}: index length {} is not a multiple of 8", path.display(), bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| {
            (u32::from_le_bytes(c[..4].try_into().unwrap()), u32::from_le_bytes(c[4..].try_into().unwrap()))
        })
        .collect())
}

/// Dataset loaded into memory.
pub struct Dataset {
    pub header: DatasetHeader,
    payload: Vec<u8>,
}

impl Dataset {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path).at(path)?;
        let mut hb = [0u8; HEADER_LEN];
        file.read_exact(&mut hb).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Corrupt(format!("{}: truncated header", path.display())),
            _ => Error::Io { path: path.into(), source: e },
        })?;
        let header = DatasetHeader::parse(&hb)?;
        let mut payload = Vec::with_capacity(header.payload_len());
        file.read_to_end(&mut payload).at(path)?;
        if payload.len() != header.payload_len() {
            return Err(Error::Corrupt(format!(
                "{}: header declares {} payload bytes, file has {}",
                path.display(),
                header.payload_len(),
                payload.len()
            )));
        }
        Ok(Self { header, payload })
    }

    pub fn n_clips(&self) -> usize {
        self.header.n_clips as usize
    }

    pub fn clip_raw(&self, clip: usize) -> &[u8] {
        let n = self.header.clip_bytes();
        &self.payload[clip * n..(clip + 1) * n]
    }

    pub fn frame_raw(&self, clip: usize, frame: usize) -> &[u8] {
        let n = self.header.frame_bytes();
        &self.clip_raw(clip)[frame * n..(frame + 1) * n]
    }

    pub fn clip(&self, clip: usize) -> VideoClip {
        let (h, w) = (self.header.height as usize, self.header.width as usize);
        VideoClip {
            frames: (0..self.header.n_frames as usize)
                .map(|f| Frame::from_bytes(h, w, self.frame_raw(clip, f)))
                .collect(),
        }
    }
}
