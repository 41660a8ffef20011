use framewalk::ganloss::{
    multi_disc_train_step, Discriminator, GenLossMode, Generator, LossCsv, LossRecord, ProjectionBank,
    ProjectionGeom, Stage, StepConfig,
};
use framewalk::nn::{BatchStats, Bound, Graph, Init, Linear, ParamStore, RmsProp, Tensor, Var};
use framewalk::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct ToyGen {
    store: ParamStore,
    layer: Linear,
}

impl ToyGen {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = Linear::new(&mut store, "fc", 2, 64, true, Init::FanIn, &mut rng);
        Self { store, layer }
    }
}

impl Generator for ToyGen {
    fn latent_dim(&self) -> usize {
        2
    }
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn forward_train(&self, g: &mut Graph, z: Var) -> Result<(Var, Vec<BatchStats<f32>>)> {
        let b = g.value(z).dim(0);
        let h = self.layer.forward(g, Bound::new(&self.store, true), z)?;
        let s = g.sigmoid(h);
        Ok((g.reshape(s, &[b, 1, 8, 8])?, Vec::new()))
    }
}

struct ToyDisc {
    store: ParamStore,
    layer: Linear,
}

impl ToyDisc {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = Linear::new(&mut store, "fc", 9, 1, true, Init::FanIn, &mut rng);
        Self { store, layer }
    }
}

impl Discriminator for ToyDisc {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn forward(&self, g: &mut Graph, x: Var, track: bool) -> Result<Var> {
        let b = g.value(x).dim(0);
        let flat = g.reshape(x, &[b, 9])?;
        let o = self.layer.forward(g, Bound::new(&self.store, track), flat)?;
        Ok(g.sigmoid(o))
    }
}

const GEOM: ProjectionGeom = ProjectionGeom { kernel: 4, stride: 2, pad: 0 };

/// Two fixed binary frames, alternating through the batch.
fn real_batch(b: usize) -> Tensor {
    Tensor::from_fn(&[b, 1, 8, 8], |i| {
        let (n, p) = (i / 64, i % 64);
        let (r, c) = (p / 8, p % 8);
        let lit = if n % 2 == 0 { r < 4 } else { c >= 5 };
        if lit {
            1.0
        } else {
            0.0
        }
    })
}

fn noise(b: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    framewalk::nn::params::normal(&mut rng, &[b, 2], 0.0, 1.0)
}

fn cfg(step: u64, update_generator: bool) -> StepConfig {
    StepConfig { stage: Stage::Frames, step, mode: GenLossMode::Mean, update_generator }
}

fn setup(k: usize, lr: f64) -> (ToyGen, RmsProp, Vec<ToyDisc>, Vec<RmsProp>, ProjectionBank) {
    let discs = (0..k).map(|i| ToyDisc::new(100 + i as u64)).collect();
    let opts = (0..k).map(|_| RmsProp::new(lr)).collect();
    (ToyGen::new(1), RmsProp::new(lr), discs, opts, ProjectionBank::new(k, GEOM, 5).unwrap())
}

#[test]
fn discriminator_losses_fall_with_frozen_generator() {
    let (mut gen, mut gopt, mut discs, mut dopts, bank) = setup(3, 0.01);
    let real = real_batch(8);
    let gen_before = gen.store.flat_trainable();
    let hash_before = bank.hash();
    let kernels_before: Vec<Tensor> = (0..3).map(|k| bank.kernel(k).clone()).collect();
    let mut first = None;
    let mut last = None;
    for step in 0..100 {
        let rec =
            multi_disc_train_step(&mut gen, &mut gopt, &mut discs, &mut dopts, &bank, &real, &noise(8, step), &cfg(step, false))
                .unwrap();
        first.get_or_insert(rec.clone());
        last = Some(rec);
    }
    let (first, last) = (first.unwrap(), last.unwrap());
    for k in 0..3 {
        assert!(
            last.per_discriminator_loss[k] < 0.5 * first.per_discriminator_loss[k],
            "disc {k}: {} -> {}",
            first.per_discriminator_loss[k],
            last.per_discriminator_loss[k]
        );
    }
    assert_eq!(gen.store.flat_trainable(), gen_before);
    assert_eq!(bank.hash(), hash_before);
    for k in 0..3 {
        assert_eq!(bank.kernel(k), &kernels_before[k]);
    }
}

#[test]
fn discriminators_update_independently() {
    let real = real_batch(4);
    let z = noise(4, 9);
    let (mut gen, mut gopt, mut discs, mut dopts, bank) = setup(2, 0.01);
    multi_disc_train_step(&mut gen, &mut gopt, &mut discs, &mut dopts, &bank, &real, &z, &cfg(0, true)).unwrap();

    // same discriminator 0 and projection 0, without discriminator 1 present
    let mut gen1 = ToyGen::new(1);
    let mut solo = vec![ToyDisc::new(100)];
    let mut solo_opt = vec![RmsProp::new(0.01)];
    let one = ProjectionBank::new(1, GEOM, 5).unwrap();
    assert_eq!(one.kernel(0), bank.kernel(0));
    multi_disc_train_step(&mut gen1, &mut RmsProp::new(0.01), &mut solo, &mut solo_opt, &one, &real, &z, &cfg(0, true)).unwrap();
    assert_eq!(solo[0].store.flat_trainable(), discs[0].store.flat_trainable());
}

#[test]
fn generator_update_leaves_discriminators_alone() {
    let real = real_batch(4);
    let z = noise(4, 3);
    let (mut gen_a, mut gopt_a, mut discs_a, mut dopts_a, bank) = setup(2, 0.01);
    let (mut gen_b, mut gopt_b, mut discs_b, mut dopts_b, _) = setup(2, 0.01);
    let before = gen_a.store.flat_trainable();
    multi_disc_train_step(&mut gen_a, &mut gopt_a, &mut discs_a, &mut dopts_a, &bank, &real, &z, &cfg(0, true)).unwrap();
    multi_disc_train_step(&mut gen_b, &mut gopt_b, &mut discs_b, &mut dopts_b, &bank, &real, &z, &cfg(0, false)).unwrap();
    assert_ne!(gen_a.store.flat_trainable(), before);
    assert_eq!(gen_b.store.flat_trainable(), before);
    for k in 0..2 {
        assert_eq!(discs_a[k].store.flat_trainable(), discs_b[k].store.flat_trainable());
    }
}

#[test]
fn divergence_names_the_discriminator() {
    let (mut gen, mut gopt, mut discs, mut dopts, bank) = setup(3, 0.01);
    let w = discs[1].layer.w;
    discs[1].store.get_mut(w).data_mut()[0] = f32::NAN;
    let err = multi_disc_train_step(&mut gen, &mut gopt, &mut discs, &mut dopts, &bank, &real_batch(4), &noise(4, 0), &cfg(7, true))
        .unwrap_err();
    match err {
        Error::Divergence { step: 7, discriminator: Some(1), ref stage, .. } => assert_eq!(stage, "frames"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("discriminator 1"));
}

#[test]
fn mismatched_counts_and_latents_are_rejected() {
    let (mut gen, mut gopt, mut discs, mut dopts, _) = setup(2, 0.01);
    let bank3 = ProjectionBank::new(3, GEOM, 5).unwrap();
    let real = real_batch(2);
    assert!(matches!(
        multi_disc_train_step(&mut gen, &mut gopt, &mut discs, &mut dopts, &bank3, &real, &noise(2, 0), &cfg(0, true)),
        Err(Error::Config(_))
    ));
    let bank = ProjectionBank::new(2, GEOM, 5).unwrap();
    let z = Tensor::zeros(&[2, 5]);
    assert!(matches!(
        multi_disc_train_step(&mut gen, &mut gopt, &mut discs, &mut dopts, &bank, &real, &z, &cfg(0, true)),
        Err(Error::LatentMismatch(_))
    ));
}

#[test]
fn loss_csv_appends_after_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("losses.csv");
    let rec = LossRecord { step: 3, stage: Stage::Video, per_discriminator_loss: vec![1.0, 2.0, 4.0], generator_loss: 0.5 };
    LossCsv::open(&path).unwrap().append(&rec).unwrap();
    LossCsv::open(&path).unwrap().append(&rec).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], LossRecord::CSV_HEADER);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], "3,video,0.500000,1.000000,2.333333,4.000000");
}
