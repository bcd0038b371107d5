//! Generative side: the recurrent learnable prior over object latents, the
//! appearance decoder, canvas composition and the pixel likelihood.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canvas::{Canvas, Glyph};
use crate::error::{AsrError, Result};
use crate::nn::{Bound, Linear, Lstm, LstmState, Mlp, ParamStore};
use crate::tape::{Graph, Tensor, Var};

/// Clamp applied to Bernoulli means before taking logs.
pub const BERNOULLI_CLAMP: f64 = 1e-4;

const LOGVAR_MIN: f64 = -8.0;
const LOGVAR_MAX: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseModel {
    Gaussian,
    Bernoulli,
}

impl NoiseModel {
    pub fn name(self) -> &'static str {
        match self {
            NoiseModel::Gaussian => "gaussian",
            NoiseModel::Bernoulli => "bernoulli",
        }
    }
}

/// Which prior the generative model uses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PriorMode {
    /// Recurrent prior whose parameters are learned.
    Learned,
    /// Independent objects: constant continuation probability and fixed
    /// Gaussians for location and scale.
    Fixed { continue_prob: f64 },
}

/// Architecture and likelihood settings shared by both networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub canvas_size: usize,
    pub glyph_size: usize,
    pub app_dim: usize,
    pub max_steps: usize,
    pub rnn_hidden: usize,
    pub encoder_hidden: usize,
    /// Hidden widths of the appearance encoder; the decoder mirrors them.
    pub mlp_hidden: [usize; 2],
    pub noise: NoiseModel,
    pub sigma: f64,
    pub prior: PriorMode,
    /// Every step emits an object: no presence decisions in either model.
    pub fixed_steps: bool,
    /// Pre-softplus scale mean at initialisation, in pixels.
    pub scale_init: f64,
    pub posterior_loc_std: f64,
    pub posterior_scale_std: f64,
    pub prior_loc_std: f64,
    pub prior_scale_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            canvas_size: 50,
            glyph_size: 20,
            app_dim: 50,
            max_steps: 3,
            rnn_hidden: 256,
            encoder_hidden: 256,
            mlp_hidden: [512, 256],
            noise: NoiseModel::Gaussian,
            sigma: 0.3,
            prior: PriorMode::Learned,
            fixed_steps: false,
            scale_init: 20.0,
            posterior_loc_std: 1.5,
            posterior_scale_std: 1.0,
            prior_loc_std: 12.5,
            prior_scale_std: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AsrError::Config(m.to_string()));
        if self.canvas_size == 0 || self.glyph_size == 0 || self.app_dim == 0 {
            return bad("canvas_size, glyph_size and app_dim must be positive");
        }
        if self.glyph_size > self.canvas_size {
            return bad("glyph_size must not exceed canvas_size");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if self.noise == NoiseModel::Gaussian && !(self.sigma > 0.0) {
            return bad("sigma must be positive for the gaussian noise model");
        }
        if let PriorMode::Fixed { continue_prob } = self.prior {
            if !(0.0..=1.0).contains(&continue_prob) {
                return bad("fixed prior continue_prob must lie in [0,1]");
            }
        }
        for s in [self.posterior_loc_std, self.posterior_scale_std, self.prior_loc_std, self.prior_scale_std] {
            if !(s > 0.0) {
                return bad("initial standard deviations must be positive");
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.canvas_size * self.canvas_size
    }

    pub fn glyph_pixels(&self) -> usize {
        self.glyph_size * self.glyph_size
    }

    /// Width of the encoded previous object fed to the prior recurrence.
    pub fn spatial_code(&self) -> usize {
        3
    }
}

/// Gaussian parameters as graph nodes (`logvar` is the log variance).
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub logvar: Var,
}

/// Pixel-space location head output: `S/2·(1 + o)` with log variance offset.
pub(crate) fn loc_params(g: &mut Graph, cfg: &ModelConfig, raw: Var, std0: f64) -> GaussianVars {
    let half = cfg.canvas_size as f64 / 2.0;
    let m = g.slice(raw, 0, 2);
    let m = g.scale(m, half);
    let mean = g.add_scalar(m, half);
    let lv = g.slice(raw, 2, 2);
    let lv = g.add_scalar(lv, 2.0 * std0.ln());
    let logvar = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
    GaussianVars { mean, logvar }
}

/// Pre-softplus scale head output around `scale_init`.
pub(crate) fn scale_params(g: &mut Graph, cfg: &ModelConfig, raw: Var, std0: f64) -> GaussianVars {
    let m = g.slice(raw, 0, 1);
    let m = g.scale(m, cfg.canvas_size as f64 / 4.0);
    let mean = g.add_scalar(m, cfg.scale_init);
    let lv = g.slice(raw, 1, 1);
    let lv = g.add_scalar(lv, 2.0 * std0.ln());
    let logvar = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
    GaussianVars { mean, logvar }
}

/// Normalised `(x, y, side)` code of object boxes, `B×3` from loc `B×2` and side `B×1`.
pub(crate) fn spatial_code(g: &mut Graph, cfg: &ModelConfig, loc: Var, side: Var) -> Var {
    let half = cfg.canvas_size as f64 / 2.0;
    let l = g.scale(loc, 1.0 / half);
    let l = g.add_scalar(l, -1.0);
    let s = g.scale(side, 1.0 / cfg.canvas_size as f64);
    g.concat(&[l, s])
}

/// Row sums of `log N(x; mean, exp(logvar))`, `B×1`.
pub fn gaussian_log_density(g: &mut Graph, x: Var, p: GaussianVars) -> Var {
    let d = g.sub(x, p.mean);
    let d2 = g.square(d);
    let nl = g.neg(p.logvar);
    let inv = g.exp(nl);
    let q = g.mul(d2, inv);
    let t = g.add(q, p.logvar);
    let t = g.add_scalar(t, (2.0 * PI).ln());
    let t = g.scale(t, -0.5);
    g.sum_cols(t)
}

/// Row sums of the standard normal log density, `B×1`.
pub fn standard_normal_log_density(g: &mut Graph, x: Var) -> Var {
    let x2 = g.square(x);
    let t = g.add_scalar(x2, (2.0 * PI).ln());
    let t = g.scale(t, -0.5);
    g.sum_cols(t)
}

/// Row sums of `KL(N(q) ‖ N(p))` over diagonal Gaussians, `B×1`.
pub fn gaussian_kl(g: &mut Graph, q: GaussianVars, p: GaussianVars) -> Var {
    let d = g.sub(q.mean, p.mean);
    let d2 = g.square(d);
    let vq = g.exp(q.logvar);
    let num = g.add(vq, d2);
    let nl = g.neg(p.logvar);
    let inv = g.exp(nl);
    let ratio = g.mul(num, inv);
    let lr = g.sub(p.logvar, q.logvar);
    let t = g.add(ratio, lr);
    let t = g.add_scalar(t, -1.0);
    let t = g.scale(t, 0.5);
    g.sum_cols(t)
}

/// Row sums of `KL(N(q) ‖ N(0, I))`, `B×1`.
pub fn standard_normal_kl(g: &mut Graph, q: GaussianVars) -> Var {
    let m2 = g.square(q.mean);
    let v = g.exp(q.logvar);
    let t = g.add(m2, v);
    let t = g.sub(t, q.logvar);
    let t = g.add_scalar(t, -1.0);
    let t = g.scale(t, 0.5);
    g.sum_cols(t)
}

/// Outputs of one prior transition on the graph.
#[derive(Clone, Copy, Debug)]
pub struct PriorHeads {
    /// Logit of continuing (`z_pres = 1`).
    pub pres_logit: Var,
    pub loc: GaussianVars,
    pub hidden: Option<Var>,
    pub state: Option<LstmState>,
}

/// Parameter handles of the generative model (θ).
#[derive(Clone, Debug)]
pub struct GenerativeNet {
    pub rnn: Lstm,
    pub pres_head: Linear,
    pub loc_head: Linear,
    pub scale_head: Linear,
    pub decoder: Mlp,
}

impl GenerativeNet {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.rnn_hidden;
        GenerativeNet {
            rnn: Lstm::new(store, "gen.prior_rnn", cfg.spatial_code(), h, rng),
            pres_head: Linear::new(store, "gen.pres_head", h, 1, rng),
            loc_head: Linear::new(store, "gen.loc_head", h, 4, rng),
            scale_head: Linear::new(store, "gen.scale_head", h + 2, 2, rng),
            decoder: Mlp::new(store, "gen.decoder", &[cfg.app_dim, cfg.mlp_hidden[1], cfg.mlp_hidden[0], cfg.glyph_pixels()], rng),
        }
    }

    pub fn initial_state(&self, g: &mut Graph, cfg: &ModelConfig, batch: usize) -> Option<LstmState> {
        match cfg.prior {
            PriorMode::Learned => Some(self.rnn.zero_state(g, batch)),
            PriorMode::Fixed { .. } => None,
        }
    }

    /// Continuation logit and location Gaussian given the previous object code.
    pub fn transition(&self, g: &mut Graph, p: &Bound, cfg: &ModelConfig, state: Option<LstmState>, prev_code: Var) -> PriorHeads {
        let batch = g.value(prev_code).rows;
        match (cfg.prior, state) {
            (PriorMode::Learned, Some(state)) => {
                let state = self.rnn.step(g, p, prev_code, state);
                let pres_logit = self.pres_head.forward(g, p, state.h);
                let raw = self.loc_head.forward(g, p, state.h);
                let loc = loc_params(g, cfg, raw, cfg.prior_loc_std);
                PriorHeads { pres_logit, loc, hidden: Some(state.h), state: Some(state) }
            }
            (PriorMode::Fixed { continue_prob }, _) => {
                let logit = (continue_prob / (1.0 - continue_prob)).ln();
                let pres_logit = g.constant(Tensor::full(batch, 1, logit));
                let zero = g.constant(Tensor::zeros(batch, 4));
                let loc = loc_params(g, cfg, zero, cfg.prior_loc_std);
                PriorHeads { pres_logit, loc, hidden: None, state: None }
            }
            (PriorMode::Learned, None) => panic!("learned prior stepped without recurrent state"),
        }
    }

    /// Pre-softplus scale Gaussian conditioned on the sampled location.
    pub fn scale_given_loc(&self, g: &mut Graph, p: &Bound, cfg: &ModelConfig, heads: &PriorHeads, loc: Var) -> GaussianVars {
        match heads.hidden {
            Some(h) => {
                let half = cfg.canvas_size as f64 / 2.0;
                let l = g.scale(loc, 1.0 / half);
                let l = g.add_scalar(l, -1.0);
                let inp = g.concat(&[h, l]);
                let raw = self.scale_head.forward(g, p, inp);
                scale_params(g, cfg, raw, cfg.prior_scale_std)
            }
            None => {
                let zero = g.constant(Tensor::zeros(g.value(loc).rows, 2));
                scale_params(g, cfg, zero, cfg.prior_scale_std)
            }
        }
    }

    /// Appearance codes `B×A` to glyphs `B×G²` in `[0, 1]`.
    pub fn decode(&self, g: &mut Graph, p: &Bound, app: Var) -> Var {
        let logits = self.decoder.forward(g, p, app);
        g.sigmoid(logits)
    }
}

/// Graph form of the pixel log-likelihood, `B×1`.
pub fn log_likelihood_graph(g: &mut Graph, cfg: &ModelConfig, x: Var, mean: Var) -> Var {
    match cfg.noise {
        NoiseModel::Gaussian => {
            let d = g.sub(x, mean);
            let d2 = g.square(d);
            let s = g.sum_cols(d2);
            let s = g.scale(s, -0.5 / (cfg.sigma * cfg.sigma));
            let c = -0.5 * (2.0 * PI * cfg.sigma * cfg.sigma).ln() * cfg.pixels() as f64;
            g.add_scalar(s, c)
        }
        NoiseModel::Bernoulli => {
            let m = g.clamp(mean, BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP);
            let lm = g.ln(m);
            let om = g.scale(m, -1.0);
            let om = g.add_scalar(om, 1.0);
            let lom = g.ln(om);
            let xv = g.value(x).clone();
            let ox = Tensor { rows: xv.rows, cols: xv.cols, data: xv.data.iter().map(|v| 1.0 - v).collect() };
            let ox = g.constant(ox);
            let a = g.mul(x, lm);
            let b = g.mul(ox, lom);
            let t = g.add(a, b);
            g.sum_cols(t)
        }
    }
}

/// Elementwise sum of contributions; clamped to `[δ, 1 − δ]` for the
/// Bernoulli model. An empty list yields a zero canvas of `size`.
pub fn compose_mean(contributions: &[Canvas], noise: NoiseModel, size: usize) -> Result<Canvas> {
    let mut out = Canvas::zeros(size);
    for c in contributions {
        if c.size != size {
            return Err(AsrError::Contract(format!("canvas of size {} composed into size {size}", c.size)));
        }
        for (o, v) in out.pixels.iter_mut().zip(&c.pixels) {
            *o += v;
        }
    }
    if noise == NoiseModel::Bernoulli {
        for o in &mut out.pixels {
            *o = o.clamp(BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP);
        }
    }
    Ok(out)
}

/// Sum over pixels of the per-pixel log density of `x` given `mean`.
pub fn log_likelihood(x: &Canvas, mean: &Canvas, noise: NoiseModel, sigma: f64) -> Result<f64> {
    if x.size != mean.size {
        return Err(AsrError::Contract(format!("image size {} vs mean size {}", x.size, mean.size)));
    }
    match noise {
        NoiseModel::Gaussian => {
            if !(sigma > 0.0) {
                return Err(AsrError::Contract("gaussian likelihood needs sigma > 0".into()));
            }
            let c = -0.5 * (2.0 * PI * sigma * sigma).ln();
            Ok(x.pixels.iter().zip(&mean.pixels).map(|(a, m)| c - 0.5 * (a - m) * (a - m) / (sigma * sigma)).sum())
        }
        NoiseModel::Bernoulli => {
            if x.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(AsrError::Contract("bernoulli likelihood needs pixels in [0,1]".into()));
            }
            Ok(x.pixels
                .iter()
                .zip(&mean.pixels)
                .map(|(a, m)| {
                    let m = m.clamp(BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP);
                    a * m.ln() + (1.0 - a) * (1.0 - m).ln()
                })
                .sum())
        }
    }
}

/// Glyph for a single appearance code.
pub(crate) fn decode_one(net: &GenerativeNet, store: &ParamStore, cfg: &ModelConfig, app: &[f64]) -> Result<Glyph> {
    if app.len() != cfg.app_dim {
        return Err(AsrError::Contract(format!("appearance code of length {} (expected {})", app.len(), cfg.app_dim)));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let a = g.constant(Tensor::from_vec(1, cfg.app_dim, app.to_vec()));
    let out = net.decode(&mut g, &p, a);
    let pixels = g.value(out).data.clone();
    if pixels.iter().any(|v| !v.is_finite()) {
        return Err(AsrError::Numeric("decoder produced non-finite pixels".into()));
    }
    Canvas::from_pixels(cfg.glyph_size, pixels)
}
