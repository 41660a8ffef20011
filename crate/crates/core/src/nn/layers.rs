use rand::Rng;

use super::conv::ConvGeom;
use super::graph::{BatchStats, Graph, Var};
use super::params::{normal, uniform, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::Result;

/// A parameter store as seen by one forward pass. `track` decides whether the
/// pass records gradients for these parameters.
#[derive(Clone, Copy)]
pub struct Bound<'a, T: Real> {
    pub store: &'a ParamStore<T>,
    pub track: bool,
}

impl<'a, T: Real> Bound<'a, T> {
    pub fn new(store: &'a ParamStore<T>, track: bool) -> Self {
        Self { store, track }
    }

    pub fn var(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(self.store, id, self.track)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `N(0, std^2)` weights, zero bias (DCGAN convention).
    Normal(f64),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and bias.
    FanIn,
}

fn init_weight<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, init: Init) -> Tensor<T> {
    match init {
        Init::Normal(std) => normal(rng, shape, 0.0, std),
        Init::FanIn => uniform(rng, shape, 1.0 / (fan_in as f64).sqrt()),
    }
}

fn init_bias<T: Real, R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize, init: Init) -> Tensor<T> {
    match init {
        Init::Normal(_) => Tensor::zeros(&[n]),
        Init::FanIn => uniform(rng, &[n], 1.0 / (fan_in as f64).sqrt()),
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), init_weight(rng, &[out_features, in_features], in_features, init), true);
        let b = bias.then(|| store.add(format!("{name}.bias"), init_bias(rng, out_features, in_features, init), true));
        Self { w, b, in_features, out_features }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var) -> Result<Var> {
        let w = p.var(g, self.w);
        let b = self.b.map(|b| p.var(g, b));
        g.linear(x, w, b)
    }
}

/// 2-D or 3-D convolution; the weight rank follows `geom` (`kt == 1` with a
/// 4-D input is a 2-D convolution).
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeom,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let [kt, kh, kw] = geom.kernel;
        let shape: Vec<usize> = if kt == 1 { vec![c_out, c_in, kh, kw] } else { vec![c_out, c_in, kt, kh, kw] };
        let fan_in = c_in * geom.kernel_volume();
        let w = store.add(format!("{name}.weight"), init_weight(rng, &shape, fan_in, init), true);
        let b = bias.then(|| store.add(format!("{name}.bias"), init_bias(rng, c_out, fan_in, init), true));
        Self { w, b, geom }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var) -> Result<Var> {
        let w = p.var(g, self.w);
        let b = self.b.map(|b| p.var(g, b));
        g.conv(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: ConvGeom,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeom,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let [_, kh, kw] = geom.kernel;
        let fan_in = c_out * kh * kw;
        let w = store.add(format!("{name}.weight"), init_weight(rng, &[c_in, c_out, kh, kw], fan_in, init), true);
        let b = bias.then(|| store.add(format!("{name}.bias"), init_bias(rng, c_out, fan_in, init), true));
        Self { w, b, geom }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var) -> Result<Var> {
        let w = p.var(g, self.w);
        let b = self.b.map(|b| p.var(g, b));
        g.conv_transpose(x, w, b, self.geom)
    }
}

/// Weight of the newest batch in the population statistics.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over axis 1 with learned affine and population
/// statistics kept as (non-trainable) buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        let gamma = store.add(format!("{name}.weight"), normal(rng, &[channels], 1.0, 0.02), true);
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), true);
        let mean = store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false);
        let var = store.add(format!("{name}.running_var"), Tensor::full(&[channels], T::one()), false);
        Self { gamma, beta, mean, var, channels }
    }

    pub fn forward_train<T: Real>(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var) -> Result<(Var, BatchStats<T>)> {
        let gamma = p.var(g, self.gamma);
        let beta = p.var(g, self.beta);
        g.batch_norm_train(x, gamma, beta, BN_EPS)
    }

    pub fn forward_eval<T: Real>(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var) -> Result<Var> {
        let gamma = p.var(g, self.gamma);
        let beta = p.var(g, self.beta);
        let (mean, var) = (p.store.get(self.mean).data().to_vec(), p.store.get(self.var).data().to_vec());
        g.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
    }

    /// Exponential moving average of batch statistics into the population buffers.
    pub fn update_running<T: Real>(&self, store: &mut ParamStore<T>, stats: &BatchStats<T>, momentum: f64) {
        let m = T::from_f64_lossy(momentum);
        let one = T::one();
        for (buf, new) in [(self.mean, &stats.mean), (self.var, &stats.var)] {
            for (r, &s) in store.get_mut(buf).data_mut().iter_mut().zip(new.iter()) {
                *r = (one - m) * *r + m * s;
            }
        }
    }
}

/// One direction of an LSTM layer; gates are ordered input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub ih: Linear,
    pub hh: Linear,
    pub hidden: usize,
}

impl LstmDirection {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let ih = Linear {
            w: store.add(format!("{name}.weight_ih"), uniform(rng, &[4 * hidden, input], bound), true),
            b: Some(store.add(format!("{name}.bias"), uniform(rng, &[4 * hidden], bound), true)),
            in_features: input,
            out_features: 4 * hidden,
        };
        let hh = Linear {
            w: store.add(format!("{name}.weight_hh"), uniform(rng, &[4 * hidden, hidden], bound), true),
            b: None,
            in_features: hidden,
            out_features: 4 * hidden,
        };
        Self { ih, hh, hidden }
    }

    /// Runs over `xs` (each `[B, input]`), in reverse order when `reverse`.
    /// Returns hidden states aligned with `xs`.
    pub fn run<T: Real>(&self, g: &mut Graph<T>, p: Bound<'_, T>, xs: &[Var], reverse: bool) -> Result<Vec<Var>> {
        let h = self.hidden;
        let mut out = vec![None; xs.len()];
        let mut state: Option<(Var, Var)> = None;
        let order: Vec<usize> = if reverse { (0..xs.len()).rev().collect() } else { (0..xs.len()).collect() };
        for t in order {
            let mut gates = self.ih.forward(g, p, xs[t])?;
            if let Some((h_prev, _)) = state {
                let rec = self.hh.forward(g, p, h_prev)?;
                gates = g.add(gates, rec)?;
            }
            let i = g.narrow(gates, 1, 0, h)?;
            let f = g.narrow(gates, 1, h, h)?;
            let c_in = g.narrow(gates, 1, 2 * h, h)?;
            let o = g.narrow(gates, 1, 3 * h, h)?;
            let (i, c_in, o) = (g.sigmoid(i), g.tanh(c_in), g.sigmoid(o));
            let mut c = g.mul(i, c_in)?;
            if let Some((_, c_prev)) = state {
                let f = g.sigmoid(f);
                let keep = g.mul(f, c_prev)?;
                c = g.add(c, keep)?;
            }
            let tc = g.tanh(c);
            let h_t = g.mul(o, tc)?;
            state = Some((h_t, c));
            out[t] = Some(h_t);
        }
        Ok(out.into_iter().map(|v| v.expect("every step visited")).collect())
    }
}

/// Bidirectional LSTM layer: per-step output is `[forward | backward]`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: LstmDirection,
    pub bwd: LstmDirection,
}

impl BiLstm {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fwd: LstmDirection::new(store, &format!("{name}.fwd"), input, hidden, rng),
            bwd: LstmDirection::new(store, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    pub fn output_features(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bound<'_, T>, xs: &[Var]) -> Result<Vec<Var>> {
        let f = self.fwd.run(g, p, xs, false)?;
        let b = self.bwd.run(g, p, xs, true)?;
        f.into_iter().zip(b).map(|(f, b)| g.concat(&[f, b], 1)).collect()
    }
}
