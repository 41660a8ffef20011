//! End-to-end experiment runs.
//!
//! Both experiments share one run directory per preset:
//!
//! ```text
//! <run>/
//!   config.toml             full preset; a rerun must match it
//!   status.log              append-only stage events
//!   steps/<step>.json       completion marker and result of each step
//!   data/balls-{n}.bin      datasets (+ .index, .json)
//!   frames-{n}/             stage-1 checkpoints, G_F trained on n balls
//!   video-3/                stage-2 checkpoints
//!   samples/                frame grids and video strips
//!   eval/                   MSE tables, isomap figure and points
//! ```
//!
//! A completed step is never redone, so reruns only fill in what is missing.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::checkpoint::{write_atomic, MANIFEST_FILE};
use super::config::Preset;
use super::trainer::Hooks;
use crate::ballsim::{ensure_dataset, ClipSpec};
use crate::error::{Error, IoContext, Result};
use crate::evalsuite::{self, Condition, MseReport};
use crate::framegan::{sample_frames, train_frame_gan, FrameGenerator};
use crate::videogan::{train_video_gan, VideoSampler};

/// Environment variable naming the directory that holds run directories.
pub const RUNS_ENV: &str = "FRAMEWALK_RUNS";
/// Ball count of the video-stage dataset.
pub const VIDEO_BALLS: usize = 3;
/// Videos embedded in the latent-manifold figure.
pub const FIGURE_VIDEOS: usize = 6;
const STRIP_SEPARATOR: usize = 1;

pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn for_preset(preset: &Preset) -> Self {
        Self::new(runs_root().join(&preset.name))
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn status_log(&self) -> PathBuf {
        self.root.join("status.log")
    }

    pub fn step_marker(&self, step: &str) -> PathBuf {
        self.root.join("steps").join(format!("{step}.json"))
    }

    pub fn dataset(&self, n_balls: usize) -> PathBuf {
        self.root.join("data").join(format!("balls-{n_balls}.bin"))
    }

    pub fn frames_dir(&self, n_balls: usize) -> PathBuf {
        self.root.join(format!("frames-{n_balls}"))
    }

    pub fn video_dir(&self) -> PathBuf {
        self.root.join(format!("video-{VIDEO_BALLS}"))
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

/// A run directory bound to one preset.
pub struct Run<'a> {
    pub layout: RunLayout,
    pub preset: Preset,
    pub hooks: Hooks<'a>,
}

impl<'a> Run<'a> {
    /// Opens (or creates) the run directory, recording the preset on first
    /// use and refusing a preset that differs from the recorded one.
    pub fn open(layout: RunLayout, preset: Preset, hooks: Hooks<'a>) -> Result<Self> {
        std::fs::create_dir_all(&layout.root).at(&layout.root)?;
        let path = layout.config();
        let text = preset.to_toml();
        if path.exists() {
            let recorded: Preset = toml::from_str(&std::fs::read_to_string(&path).at(&path)?)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if recorded != preset {
                return Err(Error::Config(format!(
                    "{} was created with a different configuration; use a new run directory",
                    layout.root.display()
                )));
            }
        } else {
            write_atomic(&path, text.as_bytes())?;
        }
        Ok(Self { layout, preset, hooks })
    }

    fn log(&self, event: &str) -> Result<()> {
        let path = self.layout.status_log();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).at(&path)?;
        writeln!(f, "{} {event}", chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)).at(&path)
    }

    /// Runs `f` unless its marker exists, in which case the recorded result is
    /// returned. Failures are logged and leave no marker, so a rerun retries.
    fn step<T: Serialize + DeserializeOwned>(&self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let marker = self.layout.step_marker(name);
        if marker.exists() {
            return Ok(serde_json::from_slice(&std::fs::read(&marker).at(&marker)?)?);
        }
        self.log(&format!("start {name}"))?;
        match f() {
            Ok(value) => {
                let dir = marker.parent().expect("marker has a parent");
                std::fs::create_dir_all(dir).at(dir)?;
                write_atomic(&marker, &serde_json::to_vec_pretty(&value)?)?;
                self.log(&format!("done {name}"))?;
                Ok(value)
            }
            Err(e) => {
                self.log(&format!("failed {name}: {e}"))?;
                Err(e)
            }
        }
    }

    fn clip_spec(&self, n_balls: usize) -> ClipSpec {
        self.preset.dataset_config(n_balls).clip
    }

    pub fn dataset(&self, n_balls: usize) -> Result<PathBuf> {
        let out = self.layout.dataset(n_balls);
        self.step(&format!("data-{n_balls}"), || Ok(ensure_dataset(&self.preset.dataset_config(n_balls), &out)?.data))
    }

    /// Trains (or resumes) G_F on the `n_balls` dataset; returns the final manifest path.
    pub fn frames(&self, n_balls: usize) -> Result<PathBuf> {
        let data = self.dataset(n_balls)?;
        let dir = self.layout.frames_dir(n_balls);
        self.step(&format!("frames-{n_balls}"), || {
            tolerate_complete(train_frame_gan(&self.preset.frames_config(&data), &dir, &self.hooks))?;
            Ok(dir.join(MANIFEST_FILE))
        })
    }

    /// Trains (or resumes) G_V on the 3-ball dataset against the 3-ball G_F.
    pub fn video(&self) -> Result<PathBuf> {
        let frames = self.frames(VIDEO_BALLS)?;
        let data = self.dataset(VIDEO_BALLS)?;
        let dir = self.layout.video_dir();
        self.step("video", || {
            tolerate_complete(train_video_gan(&self.preset.video_config(&data, &frames), &dir, &self.hooks))?;
            Ok(dir.join(MANIFEST_FILE))
        })
    }

    fn mse_table(&self, name: &str, sampler: &VideoSampler, n_balls: usize) -> Result<MseTable> {
        let path = self.layout.eval().join(format!("mse-{name}.csv"));
        self.step(&format!("mse-{name}"), || {
            let (n, seed) = (self.preset.eval.n_videos, self.preset.seed);
            let steps = sampler.video().spec().steps;
            let reports = vec![
                MseReport::from_clips(Condition::Real, &evalsuite::real_clips(&self.clip_spec(n_balls), n, seed)?)?,
                MseReport::from_clips(Condition::Proposed, &evalsuite::proposed_clips(sampler, n, seed)?)?,
                MseReport::from_clips(
                    Condition::RandomLatent,
                    &evalsuite::random_latent_clips(sampler.frames(), n, steps, seed)?,
                )?,
            ];
            evalsuite::write_mse_csv(&reports, &path)?;
            Ok(MseTable { csv: path.clone(), reports })
        })
    }

    fn strips(&self, name: &str, sampler: &VideoSampler) -> Result<Vec<PathBuf>> {
        let stem = self.layout.samples().join(format!("{name}-strip"));
        self.step(&format!("strips-{name}"), || {
            let clips = evalsuite::proposed_clips(sampler, self.preset.eval.n_strips, self.preset.seed)?;
            evalsuite::export_strips(&clips, &stem, STRIP_SEPARATOR)
        })
    }

    fn grid(&self, n_balls: usize, frames: &FrameGenerator) -> Result<PathBuf> {
        let path = self.layout.samples().join(format!("frames-{n_balls}-grid.png"));
        self.step(&format!("grid-{n_balls}"), || {
            let samples = sample_frames(frames, self.preset.eval.grid_samples, self.preset.seed)?;
            evalsuite::export_grid(&samples, &path, STRIP_SEPARATOR)?;
            Ok(path.clone())
        })
    }

    fn isomap(&self, sampler: &VideoSampler) -> Result<IsomapFigure> {
        let eval = self.layout.eval();
        self.step("isomap", || {
            let e = &self.preset.eval;
            let points = evalsuite::collect_latent_points(sampler, FIGURE_VIDEOS, e.n_prior, e.n_interp_pairs, self.preset.seed)?;
            let (embedded, k) = evalsuite::embed_latent_points(&points, e.isomap_k, true)?;
            let figure = IsomapFigure {
                png: eval.join("isomap.png"),
                points_csv: eval.join("isomap-points.csv"),
                n_points: embedded.len(),
                k_neighbors: k,
            };
            evalsuite::write_scatter_png(&embedded, &figure.png, 640)?;
            evalsuite::write_points_csv(&embedded, &figure.points_csv)?;
            Ok(figure)
        })
    }
}

/// A stage that finished before its step marker was written counts as done.
fn tolerate_complete<T>(r: Result<T>) -> Result<()> {
    match r {
        Ok(_) | Err(Error::AlreadyComplete(_)) => Ok(()),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseTable {
    pub csv: PathBuf,
    pub reports: Vec<MseReport>,
}

impl MseTable {
    pub fn get(&self, condition: Condition) -> Option<&MseReport> {
        self.reports.iter().find(|r| r.condition == condition)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsomapFigure {
    pub png: PathBuf,
    pub points_csv: PathBuf,
    pub n_points: usize,
    /// Neighbourhood size used, which exceeds the configured one when that
    /// left the graph disconnected.
    pub k_neighbors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOne {
    pub dataset: PathBuf,
    pub frames_manifest: PathBuf,
    pub video_manifest: PathBuf,
    pub frame_grid: PathBuf,
    pub strips: Vec<PathBuf>,
    pub mse: MseTable,
    pub isomap: IsomapFigure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTwo {
    pub dataset: PathBuf,
    pub frames_manifest: PathBuf,
    pub video_manifest: PathBuf,
    pub frame_grid: PathBuf,
    pub strips: Vec<PathBuf>,
    pub mse: MseTable,
}

/// Same-dataset training of both stages on 3-ball clips, then sampling and
/// evaluation.
pub fn run_experiment_one(run: &Run) -> Result<ExperimentOne> {
    let video_manifest = run.video()?;
    let frames_manifest = run.frames(VIDEO_BALLS)?;
    let sampler = VideoSampler::load(&video_manifest, None)?;
    let result = ExperimentOne {
        dataset: run.dataset(VIDEO_BALLS)?,
        frame_grid: run.grid(VIDEO_BALLS, sampler.frames())?,
        strips: run.strips("video-3", &sampler)?,
        mse: run.mse_table("3ball", &sampler, VIDEO_BALLS)?,
        isomap: run.isomap(&sampler)?,
        frames_manifest,
        video_manifest,
    };
    run.log("exp1 complete")?;
    Ok(result)
}

/// Transfer: G_V trained on 3-ball clips drives a G_F trained on 1-ball
/// frames, with no further training.
pub fn run_experiment_two(run: &Run) -> Result<ExperimentTwo> {
    let video_manifest = run.video()?;
    let frames_manifest = run.frames(1)?;
    let (gf1, _) = FrameGenerator::load(&frames_manifest)?;
    let sampler = VideoSampler::load(&video_manifest, None)?.swap_frame_generator(Arc::new(gf1))?;
    let result = ExperimentTwo {
        dataset: run.dataset(1)?,
        frame_grid: run.grid(1, sampler.frames())?,
        strips: run.strips("transfer-1", &sampler)?,
        mse: run.mse_table("1ball-transfer", &sampler, 1)?,
        frames_manifest,
        video_manifest,
    };
    run.log("exp2 complete")?;
    Ok(result)
}
