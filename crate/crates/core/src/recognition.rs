//! Recognition side: the amortized posterior over object counts and latents.
//!
//! The image is encoded once; the recurrence sees that embedding plus the
//! previous object at every step. The appearance posterior reads a `G×G`
//! crop of the image at the sampled box.

use rand::Rng;

use crate::canvas::read_glyphs;
use crate::generative::{loc_params, scale_params, GaussianVars, ModelConfig};
use crate::nn::{Bound, Linear, Lstm, LstmState, Mlp, ParamStore};
use crate::tape::{Graph, Var};

/// Outputs of one inference step before the location is sampled.
#[derive(Clone, Copy, Debug)]
pub struct InferHeads {
    pub pres_logit: Var,
    pub loc: GaussianVars,
    pub hidden: Var,
    pub state: LstmState,
}

/// Parameter handles of the recognition model (φ).
#[derive(Clone, Debug)]
pub struct RecognitionNet {
    pub encoder: Linear,
    pub rnn: Lstm,
    pub pres_head: Linear,
    pub loc_head: Linear,
    pub scale_head: Linear,
    pub app_encoder: Mlp,
}

impl RecognitionNet {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.rnn_hidden;
        let e = cfg.encoder_hidden;
        RecognitionNet {
            encoder: Linear::new(store, "rec.encoder", cfg.pixels(), e, rng),
            rnn: Lstm::new(store, "rec.rnn", e + cfg.spatial_code() + cfg.app_dim, h, rng),
            pres_head: Linear::new(store, "rec.pres_head", h, 1, rng),
            loc_head: Linear::new(store, "rec.loc_head", h, 4, rng),
            scale_head: Linear::new(store, "rec.scale_head", h + 2, 2, rng),
            app_encoder: Mlp::new(
                store,
                "rec.app_encoder",
                &[cfg.glyph_pixels(), cfg.mlp_hidden[0], cfg.mlp_hidden[1], 2 * cfg.app_dim],
                rng,
            ),
        }
    }

    /// Image embedding, computed once per image.
    pub fn encode(&self, g: &mut Graph, p: &Bound, images: Var) -> Var {
        let h = self.encoder.forward(g, p, images);
        g.relu(h)
    }

    pub fn initial_state(&self, g: &mut Graph, batch: usize) -> LstmState {
        self.rnn.zero_state(g, batch)
    }

    /// One inference step: continuation logit and location posterior.
    ///
    /// `prev` is the previous object's spatial code and appearance, `B×(3+A)`.
    pub fn step(&self, g: &mut Graph, p: &Bound, cfg: &ModelConfig, embed: Var, prev: Var, state: LstmState) -> InferHeads {
        let inp = g.concat(&[embed, prev]);
        let state = self.rnn.step(g, p, inp, state);
        let pres_logit = self.pres_head.forward(g, p, state.h);
        let raw = self.loc_head.forward(g, p, state.h);
        let loc = loc_params(g, cfg, raw, cfg.posterior_loc_std);
        InferHeads { pres_logit, loc, hidden: state.h, state }
    }

    /// Pre-softplus scale posterior conditioned on the sampled location.
    pub fn scale_given_loc(&self, g: &mut Graph, p: &Bound, cfg: &ModelConfig, heads: &InferHeads, loc: Var) -> GaussianVars {
        let half = cfg.canvas_size as f64 / 2.0;
        let l = g.scale(loc, 1.0 / half);
        let l = g.add_scalar(l, -1.0);
        let inp = g.concat(&[heads.hidden, l]);
        let raw = self.scale_head.forward(g, p, inp);
        scale_params(g, cfg, raw, cfg.posterior_scale_std)
    }

    /// Appearance posterior from the attention crop at `boxes` (`B×3`).
    pub fn app_posterior(&self, g: &mut Graph, p: &Bound, cfg: &ModelConfig, images: Var, boxes: Var) -> GaussianVars {
        let crop = read_glyphs(g, images, boxes, cfg.canvas_size, cfg.glyph_size);
        let out = self.app_encoder.forward(g, p, crop);
        let mean = g.slice(out, 0, cfg.app_dim);
        let lv = g.slice(out, cfg.app_dim, cfg.app_dim);
        let logvar = g.clamp(lv, -8.0, 8.0);
        GaussianVars { mean, logvar }
    }
}
