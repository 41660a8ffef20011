//! Smoke-scale training through the real stage drivers.

use std::path::Path;
use std::sync::Arc;

use framewalk::ballsim::build_dataset;
use framewalk::framegan::{train_frame_gan, FrameGenerator};
use framewalk::ganloss::Stage;
use framewalk::pipeline::checkpoint::{latest_epoch, LOCK_FILE, MANIFEST_FILE};
use framewalk::pipeline::trainer::Hooks;
use framewalk::pipeline::{Checkpoint, CheckpointManifest, Preset, TrainRunConfig};
use framewalk::videogan::{train_video_gan, VideoGenerator, VideoSampler};
use framewalk::Error;

fn preset() -> Preset {
    Preset::ci()
        .with_overrides("[data]\nclips = 500\nindex_frames = 1000\n[frames]\nk = 4\nepochs = 2\n[video]\nk = 4\nepochs = 1\n")
        .unwrap()
}

fn frames_config(p: &Preset, data: &Path) -> TrainRunConfig {
    p.frames_config(data)
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let target = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &target);
        } else {
            std::fs::copy(e.path(), target).unwrap();
        }
    }
}

#[test]
fn two_stage_smoke_run() {
    let tmp = tempfile::tempdir().unwrap();
    let p = preset();
    let data = build_dataset(&p.dataset_config(3), &tmp.path().join("balls.bin")).unwrap().data;

    // stage 1: 1000 frames, K=4, 2 epochs
    let fdir = tmp.path().join("frames");
    let cfg = frames_config(&p, &data);
    let fm = train_frame_gan(&cfg, &fdir, &Hooks::default()).unwrap();
    assert!(fm.complete);
    assert_eq!(fm.epoch, 2);
    assert_eq!(fm.loss_summary.steps, 2 * 1000u64.div_ceil(64));
    for e in 1..=2 {
        let ck = Checkpoint::open(&fdir.join(format!("epoch-{e:03}"))).unwrap();
        assert_eq!(ck.manifest.epoch, e);
        assert_eq!(ck.manifest.param_hashes["projections"], fm.param_hashes["projections"]);
    }
    let rows = std::fs::read_to_string(fdir.join("losses.csv")).unwrap().lines().count();
    assert_eq!(rows as u64, 1 + fm.loss_summary.steps);
    assert!(!fdir.join(LOCK_FILE).exists());
    let text = std::fs::read_to_string(fdir.join(MANIFEST_FILE)).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(json["stage"], "frames");

    // a finished stage is never retrained in place
    assert!(matches!(train_frame_gan(&cfg, &fdir, &Hooks::default()), Err(Error::AlreadyComplete(_))));

    // stage 2: 500 clips, K=4, 1 epoch, through the frozen G_F
    let (gf, _) = FrameGenerator::load(&fdir).unwrap();
    let before = gf.store().content_hash();
    let vdir = tmp.path().join("video");
    let vm = train_video_gan(&p.video_config(&data, &fdir), &vdir, &Hooks::default()).unwrap();
    assert_eq!(vm.stage, Stage::Video);
    assert_eq!(vm.loss_summary.steps, 500u64.div_ceil(8));
    assert_eq!(vm.param_hashes["frame_generator"], before);
    assert_eq!(FrameGenerator::load(&fdir).unwrap().0.store().content_hash(), before);

    // sampling: clips are G_F applied to the emitted latents
    let sampler = VideoSampler::load(&vdir, None).unwrap();
    let samples = sampler.sample(2, 5).unwrap();
    for (clip, lat) in &samples {
        assert_eq!(clip.len(), 30);
        let direct = gf.decode(&lat.as_tensor()).unwrap();
        let flat: Vec<f32> = clip.frames.iter().flat_map(|f| f.pixels.clone()).collect();
        assert_eq!(direct.data(), &flat[..]);
    }

    // swapping G_F and swapping back is the identity
    let other = Arc::new(FrameGenerator::new(&p.frames_config(&data).arch.frame_gen, 99).unwrap());
    let back = sampler.swap_frame_generator(other).unwrap().swap_frame_generator(Arc::clone(sampler.frames())).unwrap();
    assert_eq!(back.sample(2, 5).unwrap(), samples);

    // a video checkpoint is not a frame checkpoint
    assert!(FrameGenerator::load(&vdir).is_err());
    assert!(VideoGenerator::load(&fdir).is_err());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let p = preset().with_overrides("[data]\nclips = 50\nindex_frames = 256\n").unwrap();
    let data = build_dataset(&p.dataset_config(2), &tmp.path().join("b.bin")).unwrap().data;
    let cfg = frames_config(&p, &data);

    let full = tmp.path().join("full");
    let fm = train_frame_gan(&cfg, &full, &Hooks::default()).unwrap();

    // an interrupted run: only the first epoch survived, plus a stale loss row
    let partial = tmp.path().join("partial");
    copy_dir(&full.join("epoch-001"), &partial.join("epoch-001"));
    let losses = std::fs::read_to_string(full.join("losses.csv")).unwrap();
    let kept: Vec<&str> = losses.lines().take(1 + 4 + 1).collect();
    std::fs::write(partial.join("losses.csv"), kept.join("\n") + "\n").unwrap();
    assert_eq!(latest_epoch(&partial).unwrap().unwrap().manifest.epoch, 1);

    let rm = train_frame_gan(&cfg, &partial, &Hooks::default()).unwrap();
    assert_eq!(rm.param_hashes, fm.param_hashes);
    assert_eq!(rm.loss_summary, fm.loss_summary);
    assert_eq!(std::fs::read_to_string(partial.join("losses.csv")).unwrap(), losses);

    // a different configuration cannot resume someone else's checkpoints
    let other = tmp.path().join("other");
    copy_dir(&full.join("epoch-001"), &other.join("epoch-001"));
    let mut changed = cfg.clone();
    changed.learning_rate = 1e-4;
    assert!(matches!(train_frame_gan(&changed, &other, &Hooks::default()), Err(Error::Config(_))));
}

#[test]
fn locked_stage_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let p = preset().with_overrides("[data]\nclips = 4\nindex_frames = 8\n").unwrap();
    let data = build_dataset(&p.dataset_config(1), &tmp.path().join("b.bin")).unwrap().data;
    let dir = tmp.path().join("f");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join(LOCK_FILE), b"").unwrap();
    assert!(matches!(train_frame_gan(&frames_config(&p, &data), &dir, &Hooks::default()), Err(Error::Locked(_))));
}

#[test]
fn damaged_checkpoints_are_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let p = preset().with_overrides("[data]\nclips = 4\nindex_frames = 64\n[frames]\nepochs = 1\n").unwrap();
    let data = build_dataset(&p.dataset_config(1), &tmp.path().join("b.bin")).unwrap().data;
    let dir = tmp.path().join("f");
    let m = train_frame_gan(&frames_config(&p, &data), &dir, &Hooks::default()).unwrap();

    // save -> load keeps hashes
    let loaded = CheckpointManifest::load(&dir).unwrap();
    assert_eq!(loaded, m);
    assert_eq!(FrameGenerator::load(&dir).unwrap().0.store().content_hash(), m.param_hashes["generator"]);

    let archive = dir.join(&m.archives["generator"].path);
    let bytes = std::fs::read(&archive).unwrap();
    std::fs::write(&archive, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(FrameGenerator::load(&dir), Err(Error::HashMismatch { .. })));
    std::fs::write(&archive, &bytes).unwrap();

    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap();
    std::fs::write(dir.join(MANIFEST_FILE), text.replace("\"format_version\": 1", "\"format_version\": 7")).unwrap();
    assert!(matches!(CheckpointManifest::load(&dir), Err(Error::Version { found: 7, .. })));
    assert!(matches!(CheckpointManifest::load(&tmp.path().join("nope")), Err(Error::MissingCheckpoint(_))));
}
