use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use framewalk::ballsim::build_dataset;
use framewalk::evalsuite::{self, Condition, MseReport};
use framewalk::framegan::{sample_frames, train_frame_gan, FrameGenerator};
use framewalk::ganloss::{GenLossMode, LossRecord};
use framewalk::pipeline::experiment::{run_experiment_one, run_experiment_two, Run, RunLayout, RUNS_ENV};
use framewalk::pipeline::trainer::Hooks;
use framewalk::pipeline::{CheckpointManifest, Preset};
use framewalk::videogan::{train_video_gan, VideoSampler};

#[derive(Parser)]
#[command(name = "framewalk", version, about = "Two-stage video GAN on bouncing-ball clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct PresetArgs {
    /// Named preset: full, desk or ci.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// TOML file overriding preset fields (may name its own `base` preset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// How the generator combines its K per-discriminator losses.
    #[arg(long)]
    gen_loss: Option<GenLossMode>,
}

impl PresetArgs {
    fn load(&self) -> Result<Preset> {
        let mut p = match &self.config {
            Some(path) => Preset::from_file(path, &self.preset)?,
            None => Preset::named(&self.preset)?,
        };
        if let Some(mode) = self.gen_loss {
            p.gen_loss_mode = mode;
        }
        Ok(p)
    }
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    preset: PresetArgs,
    /// Dataset file written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of discriminators.
    #[arg(long = "K", visible_alias = "k")]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, visible_alias = "batch")]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a bouncing-balls dataset.
    GenData {
        #[command(flatten)]
        preset: PresetArgs,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 3)]
        balls: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Length of the frame-training index (defaults to the preset's).
        #[arg(long)]
        index_frames: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the frame generator against K projected discriminators.
    TrainFrames(StageArgs),
    /// Train the video generator through a frozen frame generator.
    TrainVideo {
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long)]
        frame_ckpt: PathBuf,
    },
    /// Sample frames from a frame-generator checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        seed: u64,
        /// PNG grid output.
        #[arg(long)]
        grid: PathBuf,
    },
    /// Sample videos, optionally through a different frame generator.
    SampleVideo {
        #[arg(long)]
        video_ckpt: PathBuf,
        #[arg(long)]
        frame_ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        seed: u64,
        /// Strip path; one `{stem}-{i}.png` per video.
        #[arg(long)]
        strip: PathBuf,
        /// Also write the latent sequences as CSV rows `video,step,z_0,...`.
        #[arg(long)]
        dump_latents: Option<PathBuf>,
    },
    /// Consecutive-frame MSE for one or all conditions, as CSV.
    EvalMse {
        #[command(flatten)]
        preset: PresetArgs,
        /// real, proposed, random or all.
        #[arg(long, default_value = "all")]
        condition: String,
        #[arg(long, default_value_t = 30)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        seed: u64,
        /// Ball count of the real clips.
        #[arg(long, default_value_t = 3)]
        balls: usize,
        #[arg(long)]
        video_ckpt: Option<PathBuf>,
        #[arg(long)]
        frame_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Isomap figure of video latents, prior samples and interpolations.
    EvalIsomap {
        #[arg(long)]
        video_ckpt: PathBuf,
        #[arg(long)]
        frame_ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 6)]
        videos: usize,
        #[arg(long, default_value_t = 60)]
        n_prior: usize,
        #[arg(long, default_value_t = 2)]
        pairs: usize,
        #[arg(long, default_value_t = 10)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        points_out: Option<PathBuf>,
        /// Grow k until the neighbourhood graph is connected instead of failing.
        #[arg(long)]
        grow_k: bool,
    },
    /// Experiment one: both stages on 3-ball clips, then samples and evaluation.
    Exp1(ExpArgs),
    /// Experiment two: the 3-ball video generator over a 1-ball frame generator.
    Exp2(ExpArgs),
}

#[derive(Args)]
struct ExpArgs {
    #[command(flatten)]
    preset: PresetArgs,
    /// Run directory (defaults to `$FRAMEWALK_RUNS/<preset>`).
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

fn log_step(rec: &LossRecord) {
    if rec.step.is_multiple_of(50) {
        info!("{} step {}: gen {:.4} disc {:.4}", rec.stage, rec.step, rec.generator_loss, rec.d_mean());
    }
}

fn hooks() -> Hooks<'static> {
    Hooks { on_step: Some(&log_step), on_epoch: None }
}

fn stage_preset(args: &StageArgs) -> Result<Preset> {
    let mut p = args.preset.load()?;
    if let Some(seed) = args.seed {
        p.seed = seed;
    }
    Ok(p)
}

fn apply_stage_overrides(args: &StageArgs, cfg: &mut framewalk::pipeline::TrainRunConfig) {
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
}

fn report(m: &CheckpointManifest, dir: &Path) {
    println!(
        "{} stage complete: {} epochs, {} steps, gen loss {:.4}, checkpoint {}",
        m.stage,
        m.epoch,
        m.loss_summary.steps,
        m.loss_summary.last_gen_loss,
        dir.display()
    );
}

fn conditions(s: &str) -> Result<Vec<Condition>> {
    if s == "all" {
        return Ok(Condition::ALL.to_vec());
    }
    s.split(',').map(|c| c.trim().parse().map_err(Into::into)).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { preset, clips, frames, balls, seed, index_frames, out } => {
            let p = preset.load()?;
            let mut cfg = p.dataset_config(balls);
            if let Some(n) = clips {
                cfg.n_clips = n;
            }
            if let Some(n) = frames {
                cfg.clip.n_frames = n;
            }
            if let Some(s) = seed {
                cfg.base_seed = s;
            }
            cfg.index_frames = index_frames.unwrap_or(cfg.index_frames);
            let paths = build_dataset(&cfg, &out)?;
            println!("wrote {} clips to {} (index {})", cfg.n_clips, paths.data.display(), paths.index.display());
        }
        Command::TrainFrames(args) => {
            let p = stage_preset(&args)?;
            let mut cfg = p.frames_config(&args.data);
            apply_stage_overrides(&args, &mut cfg);
            let m = train_frame_gan(&cfg, &args.out, &hooks())?;
            report(&m, &args.out);
        }
        Command::TrainVideo { stage: args, frame_ckpt } => {
            let p = stage_preset(&args)?;
            let mut cfg = p.video_config(&args.data, &frame_ckpt);
            apply_stage_overrides(&args, &mut cfg);
            let m = train_video_gan(&cfg, &args.out, &hooks())?;
            report(&m, &args.out);
        }
        Command::Sample { ckpt, n, seed, grid } => {
            let (gf, _) = FrameGenerator::load(&ckpt)?;
            let frames = sample_frames(&gf, n, seed)?;
            evalsuite::export_grid(&frames, &grid, 1)?;
            println!("wrote {n} samples to {}", grid.display());
        }
        Command::SampleVideo { video_ckpt, frame_ckpt, n, seed, strip, dump_latents } => {
            let sampler = VideoSampler::load(&video_ckpt, frame_ckpt.as_deref())?;
            let samples = sampler.sample(n, seed)?;
            let clips: Vec<_> = samples.iter().map(|(c, _)| c.clone()).collect();
            for p in evalsuite::export_strips(&clips, &strip, 1)? {
                println!("{}", p.display());
            }
            if let Some(path) = dump_latents {
                let mut text = String::new();
                for (v, (_, l)) in samples.iter().enumerate() {
                    for t in 0..l.steps {
                        let row: Vec<String> = l.step(t).iter().map(|x| x.to_string()).collect();
                        text.push_str(&format!("{v},{t},{}\n", row.join(",")));
                    }
                }
                std::fs::write(&path, text).with_context(|| path.display().to_string())?;
            }
        }
        Command::EvalMse { preset, condition, n, seed, balls, video_ckpt, frame_ckpt, out } => {
            let p = preset.load()?;
            let mut reports = Vec::new();
            for c in conditions(&condition)? {
                let clips = match c {
                    Condition::Real => evalsuite::real_clips(&p.dataset_config(balls).clip, n, seed)?,
                    Condition::Proposed => {
                        let Some(v) = &video_ckpt else {
                            bail!("condition {c} needs --video-ckpt");
                        };
                        evalsuite::proposed_clips(&VideoSampler::load(v, frame_ckpt.as_deref())?, n, seed)?
                    }
                    Condition::RandomLatent => match (&video_ckpt, &frame_ckpt) {
                        (Some(v), _) => {
                            let sampler = VideoSampler::load(v, frame_ckpt.as_deref())?;
                            evalsuite::random_latent_clips(sampler.frames(), n, sampler.video().spec().steps, seed)?
                        }
                        (None, Some(f)) => {
                            let (gf, _) = FrameGenerator::load(f)?;
                            evalsuite::random_latent_clips(&gf, n, p.data.frames, seed)?
                        }
                        (None, None) => bail!("condition {c} needs --video-ckpt or --frame-ckpt"),
                    },
                };
                let r = MseReport::from_clips(c, &clips)?;
                println!("{}", r.csv_row());
                reports.push(r);
            }
            evalsuite::write_mse_csv(&reports, &out)?;
        }
        Command::EvalIsomap { video_ckpt, frame_ckpt, k, videos, n_prior, pairs, seed, out, points_out, grow_k } => {
            let sampler = VideoSampler::load(&video_ckpt, frame_ckpt.as_deref())?;
            let points = evalsuite::collect_latent_points(&sampler, videos, n_prior, pairs, seed)?;
            let (embedded, used_k) = evalsuite::embed_latent_points(&points, k, grow_k)?;
            evalsuite::write_scatter_png(&embedded, &out, 640)?;
            if let Some(path) = points_out {
                evalsuite::write_points_csv(&embedded, &path)?;
            }
            println!("embedded {} points (k={used_k}) into {}", embedded.len(), out.display());
        }
        Command::Exp1(args) => {
            let run = open_run(&args)?;
            let r = run_experiment_one(&run)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Exp2(args) => {
            let run = open_run(&args)?;
            let r = run_experiment_two(&run)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
    }
    Ok(())
}

fn open_run(args: &ExpArgs) -> Result<Run<'static>> {
    let preset = args.preset.load()?;
    let layout = match &args.run_dir {
        Some(dir) => RunLayout::new(dir),
        None => RunLayout::for_preset(&preset),
    };
    info!("run directory {} (root from ${RUNS_ENV})", layout.root.display());
    Ok(Run::open(layout, preset, hooks())?)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
