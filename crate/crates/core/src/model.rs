//! The full model: one parameter store holding the generative (`gen.*`) and
//! recognition (`rec.*`) groups, and the batched trajectory machinery shared
//! by training, evaluation and sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::canvas::{write_glyphs, Canvas, Glyph};
use crate::error::{AsrError, Result};
use crate::generative::{
    decode_one, gaussian_kl, gaussian_log_density, spatial_code, standard_normal_kl, standard_normal_log_density, GaussianVars,
    GenerativeNet, ModelConfig, PriorHeads, PriorMode,
};
use crate::latent::{induced_count_distribution, BoundingBox, CountDistribution, ObjectLatent, SceneLatent};
use crate::nn::{Bound, Linear, LstmState, ParamStore};
use crate::recognition::RecognitionNet;
use crate::tape::{log_sigmoid, sigmoid, softplus, Graph, Tensor, Var};

/// Which network a parameter-surgery helper addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Prior,
    Posterior,
}

/// How continuous latents are drawn along a posterior trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LatentDraw {
    /// Reparameterised sample `mean + std·ε`.
    #[default]
    Sample,
    /// Posterior mean (used for box read-out at evaluation).
    Mean,
}

/// Options for [`AsrModel::posterior_trajectory`].
#[derive(Clone, Debug, Default)]
pub struct TrajectoryOptions {
    pub draw: LatentDraw,
    /// Per-row object counts imposed instead of sampled presence decisions;
    /// imposed decisions contribute no log-probability to either model.
    pub forced_counts: Option<Vec<usize>>,
    /// Replace the sampled log-ratio of each Gaussian latent by its closed-form
    /// KL given the sampled parents. Presence terms stay sampled.
    pub analytic_kl: bool,
}

/// One unrolled step of a batched posterior trajectory.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub pres_logit: Var,
    pub continue_probs: Vec<f64>,
    /// A presence decision was sampled at this step (row was still running).
    pub decided: Vec<bool>,
    pub present: Vec<bool>,
    pub log_q_pres: Var,
    pub log_p_pres: Var,
    pub log_q_z: Var,
    pub log_p_z: Var,
    /// Masked per-row `log q − log p` contribution of this step.
    pub kl: Var,
    pub loc: Var,
    pub scale_raw: Var,
    pub side: Var,
    pub app: Var,
    /// `B×3` (cx, cy, side).
    pub boxes: Var,
    pub canvas: Var,
}

/// A batch of sampled posterior trajectories with prior densities evaluated
/// along them.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub counts: Vec<usize>,
    /// Composed canvas mean before any noise-model clamp, `B×S²`.
    pub mean: Var,
    pub log_q: Var,
    pub log_p: Var,
    pub kl: Var,
}

impl Trajectory {
    pub fn batch(&self) -> usize {
        self.counts.len()
    }

    /// Plain per-row scene descriptions.
    pub fn scenes(&self, g: &Graph) -> Vec<SceneLatent> {
        (0..self.batch())
            .map(|b| {
                let objects = self
                    .steps
                    .iter()
                    .filter(|s| s.present[b])
                    .map(|s| {
                        let bx = g.value(s.boxes).row(b);
                        ObjectLatent { loc: (bx[0], bx[1]), scale: bx[2], app: g.value(s.app).row(b).to_vec() }
                    })
                    .collect();
                SceneLatent {
                    objects,
                    continue_probs: self.steps.iter().map(|s| s.continue_probs[b]).collect(),
                    n: self.counts[b],
                    log_q: g.value(self.log_q).data[b],
                    log_p: g.value(self.log_p).data[b],
                }
            })
            .collect()
    }

    pub fn boxes(&self, g: &Graph, row: usize) -> Vec<BoundingBox> {
        self.steps
            .iter()
            .filter(|s| s.present[row])
            .map(|s| {
                let bx = g.value(s.boxes).row(row);
                BoundingBox::new(bx[0], bx[1], bx[2])
            })
            .collect()
    }
}

/// Count distribution induced by each row's continuation logits, `B×(K+1)`.
pub fn induced_counts_graph(g: &mut Graph, pres_logits: &[Var]) -> Var {
    assert!(!pres_logits.is_empty(), "no steps");
    let mut cols = Vec::with_capacity(pres_logits.len() + 1);
    let mut running: Option<Var> = None;
    for &logit in pres_logits {
        let p = g.sigmoid(logit);
        let stop = g.scale(p, -1.0);
        let stop = g.add_scalar(stop, 1.0);
        let mass = match running {
            Some(r) => g.mul(r, stop),
            None => stop,
        };
        cols.push(mass);
        running = Some(match running {
            Some(r) => g.mul(r, p),
            None => p,
        });
    }
    cols.push(running.expect("at least one step"));
    g.concat(&cols)
}

fn reparam(g: &mut Graph, p: GaussianVars, eps: Tensor, draw: LatentDraw) -> Var {
    match draw {
        LatentDraw::Mean => p.mean,
        LatentDraw::Sample => {
            let half = g.scale(p.logvar, 0.5);
            let std = g.exp(half);
            let e = g.constant(eps);
            let noise = g.mul(std, e);
            g.add(p.mean, noise)
        }
    }
}

fn normal_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(rows, cols, data)
}

fn mask(bits: &[bool]) -> Tensor {
    Tensor::from_vec(bits.len(), 1, bits.iter().map(|&b| b as u8 as f64).collect())
}

fn sign(bits: &[bool]) -> Tensor {
    Tensor::from_vec(bits.len(), 1, bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect())
}

/// Recurrent prior state for the plain single-scene API.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// One prior transition evaluated outside any training graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorTransition {
    pub continue_prob: f64,
    pub loc_mean: [f64; 2],
    pub loc_logvar: [f64; 2],
    pub next_state: PriorState,
    hidden: Vec<f64>,
}

/// Recognition state: the one-off image embedding plus the recurrence.
#[derive(Clone, Debug, PartialEq)]
pub struct InferState {
    pub embed: Vec<f64>,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// One inference step evaluated outside any training graph.
#[derive(Clone, Debug, PartialEq)]
pub struct InferTransition {
    pub continue_prob: f64,
    pub loc_mean: [f64; 2],
    pub loc_logvar: [f64; 2],
    pub next_state: InferState,
    hidden: Vec<f64>,
}

/// Log density of a univariate Gaussian.
pub fn normal_log_pdf(x: f64, mean: f64, logvar: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI).ln() + logvar + (x - mean).powi(2) * (-logvar).exp())
}

/// Inverse of softplus, recovering the pre-softplus scale from a box side.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

pub struct AsrModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub gen: GenerativeNet,
    pub rec: RecognitionNet,
}

impl AsrModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let gen = GenerativeNet::new(&mut params, &config, &mut rng);
        let rec = RecognitionNet::new(&mut params, &config, &mut rng);
        Ok(AsrModel { config, params, gen, rec })
    }

    fn pres_head(&self, side: Side) -> Linear {
        match side {
            Side::Prior => self.gen.pres_head,
            Side::Posterior => self.rec.pres_head,
        }
    }

    /// Make the continuation head emit a constant logit.
    pub fn set_pres_logit(&mut self, side: Side, logit: f64) {
        let head = self.pres_head(side);
        self.params.get_mut(head.w).data.iter_mut().for_each(|v| *v = 0.0);
        self.params.get_mut(head.b).data.iter_mut().for_each(|v| *v = logit);
    }

    /// Zero the continuation, location and scale heads of one network.
    pub fn zero_heads(&mut self, side: Side) {
        let heads = match side {
            Side::Prior => [self.gen.pres_head, self.gen.loc_head, self.gen.scale_head],
            Side::Posterior => [self.rec.pres_head, self.rec.loc_head, self.rec.scale_head],
        };
        for l in heads {
            self.params.get_mut(l.w).data.iter_mut().for_each(|v| *v = 0.0);
            self.params.get_mut(l.b).data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Zero the decoder's output layer so every glyph is uniformly 0.5.
    pub fn zero_decoder_output(&mut self) {
        let last = *self.gen.decoder.layers.last().expect("decoder has layers");
        self.params.get_mut(last.w).data.iter_mut().for_each(|v| *v = 0.0);
        self.params.get_mut(last.b).data.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Parameters that receive gradients under this configuration.
    pub fn trainable(&self, name: &str) -> bool {
        match self.config.prior {
            PriorMode::Learned => true,
            PriorMode::Fixed { .. } => {
                !name.starts_with("gen.prior_rnn")
                    && !name.starts_with("gen.pres_head")
                    && !name.starts_with("gen.loc_head")
                    && !name.starts_with("gen.scale_head")
            }
        }
    }

    pub fn images_tensor(&self, images: &[&Canvas]) -> Result<Tensor> {
        let s = self.config.canvas_size;
        let mut data = Vec::with_capacity(images.len() * s * s);
        for img in images {
            if img.size != s {
                return Err(AsrError::Contract(format!("image of size {} for a model of size {s}", img.size)));
            }
            data.extend_from_slice(&img.pixels);
        }
        Ok(Tensor::from_vec(images.len(), s * s, data))
    }

    /// Sample one posterior trajectory per image row and evaluate the prior
    /// along it. All `K` steps are unrolled for every row; steps after a
    /// row stops are masked out of every density and of the canvas.
    pub fn posterior_trajectory(&self, g: &mut Graph, p: &Bound, images: Var, rng: &mut impl Rng, opts: &TrajectoryOptions) -> Trajectory {
        let cfg = &self.config;
        let batch = g.value(images).rows;
        let k = cfg.max_steps;
        if let Some(fc) = &opts.forced_counts {
            assert_eq!(fc.len(), batch, "forced counts per row");
        }
        let embed = self.rec.encode(g, p, images);
        let mut q_state = self.rec.initial_state(g, batch);
        let mut p_state = self.gen.initial_state(g, cfg, batch);
        let mut prev_q = g.constant(Tensor::zeros(batch, cfg.spatial_code() + cfg.app_dim));
        let mut prev_p = g.constant(Tensor::zeros(batch, cfg.spatial_code()));
        let mut running = vec![true; batch];
        let mut counts = vec![0usize; batch];
        let mut steps = Vec::with_capacity(k);

        for t in 0..k {
            let u: Vec<f64> = (0..batch).map(|_| rng.gen::<f64>()).collect();
            let eps_loc = normal_tensor(rng, batch, 2);
            let eps_scale = normal_tensor(rng, batch, 1);
            let eps_app = normal_tensor(rng, batch, cfg.app_dim);

            let qh = self.rec.step(g, p, cfg, embed, prev_q, q_state);
            let ph = self.gen.transition(g, p, cfg, p_state, prev_p);

            let loc = reparam(g, qh.loc, eps_loc, opts.draw);
            let qs = self.rec.scale_given_loc(g, p, cfg, &qh, loc);
            let ps = self.gen.scale_given_loc(g, p, cfg, &ph, loc);
            let scale_raw = reparam(g, qs, eps_scale, opts.draw);
            let side = g.softplus(scale_raw);
            let boxes = g.concat(&[loc, side]);
            let qa = self.rec.app_posterior(g, p, cfg, images, boxes);
            let app = reparam(g, qa, eps_app, opts.draw);

            let lq_loc = gaussian_log_density(g, loc, qh.loc);
            let lq_scale = gaussian_log_density(g, scale_raw, qs);
            let lq_app = gaussian_log_density(g, app, qa);
            let lq = g.add(lq_loc, lq_scale);
            let log_q_z = g.add(lq, lq_app);
            let lp_loc = gaussian_log_density(g, loc, ph.loc);
            let lp_scale = gaussian_log_density(g, scale_raw, ps);
            let lp_app = standard_normal_log_density(g, app);
            let lp = g.add(lp_loc, lp_scale);
            let log_p_z = g.add(lp, lp_app);

            let continue_probs: Vec<f64> = g.value(qh.pres_logit).data.iter().map(|&l| sigmoid(l)).collect();
            let (decided, present): (Vec<bool>, Vec<bool>) = (0..batch)
                .map(|b| {
                    if cfg.fixed_steps {
                        (false, true)
                    } else if let Some(fc) = &opts.forced_counts {
                        (false, t < fc[b].min(k))
                    } else if running[b] {
                        (true, u[b] < continue_probs[b])
                    } else {
                        (false, false)
                    }
                })
                .unzip();

            let sg = g.constant(sign(&present));
            let ql = g.mul_col(qh.pres_logit, sg);
            let log_q_pres = g.log_sigmoid(ql);
            let pl = g.mul_col(ph.pres_logit, sg);
            let log_p_pres = g.log_sigmoid(pl);

            let dmask = g.constant(mask(&decided));
            let pmask = g.constant(mask(&present));
            let dpres = g.sub(log_q_pres, log_p_pres);
            let dpres = g.mul_col(dpres, dmask);
            let dz = if opts.analytic_kl {
                let k_loc = gaussian_kl(g, qh.loc, ph.loc);
                let k_scale = gaussian_kl(g, qs, ps);
                let k_app = standard_normal_kl(g, qa);
                let k = g.add(k_loc, k_scale);
                g.add(k, k_app)
            } else {
                g.sub(log_q_z, log_p_z)
            };
            let dz = g.mul_col(dz, pmask);
            let kl = g.add(dpres, dz);

            let glyphs = self.gen.decode(g, p, app);
            let canvas = write_glyphs(g, glyphs, boxes, cfg.glyph_size, cfg.canvas_size);

            for b in 0..batch {
                if present[b] {
                    counts[b] += 1;
                }
            }
            running = present.clone();
            let code = spatial_code(g, cfg, loc, side);
            prev_q = g.concat(&[code, app]);
            prev_p = code;
            q_state = qh.state;
            p_state = ph.state;

            steps.push(StepRecord {
                pres_logit: qh.pres_logit,
                continue_probs,
                decided,
                present,
                log_q_pres,
                log_p_pres,
                log_q_z,
                log_p_z,
                kl,
                loc,
                scale_raw,
                side,
                app,
                boxes,
                canvas,
            });
        }

        let mut mean: Option<Var> = None;
        let mut log_q: Option<Var> = None;
        let mut log_p: Option<Var> = None;
        let mut kl: Option<Var> = None;
        for s in &steps {
            let pmask = g.constant(mask(&s.present));
            let dmask = g.constant(mask(&s.decided));
            let c = g.mul_col(s.canvas, pmask);
            let lq_z = g.mul_col(s.log_q_z, pmask);
            let lq_d = g.mul_col(s.log_q_pres, dmask);
            let lq = g.add(lq_z, lq_d);
            let lp_z = g.mul_col(s.log_p_z, pmask);
            let lp_d = g.mul_col(s.log_p_pres, dmask);
            let lp = g.add(lp_z, lp_d);
            mean = Some(match mean {
                Some(m) => g.add(m, c),
                None => c,
            });
            log_q = Some(match log_q {
                Some(a) => g.add(a, lq),
                None => lq,
            });
            log_p = Some(match log_p {
                Some(a) => g.add(a, lp),
                None => lp,
            });
            kl = Some(match kl {
                Some(a) => g.add(a, s.kl),
                None => s.kl,
            });
        }
        Trajectory {
            steps,
            counts,
            mean: mean.expect("max_steps >= 1"),
            log_q: log_q.expect("max_steps >= 1"),
            log_p: log_p.expect("max_steps >= 1"),
            kl: kl.expect("max_steps >= 1"),
        }
    }

    /// Ancestral samples from the prior for `batch` scenes of at most `k`
    /// objects, with the composed canvas mean.
    pub fn sample_prior_batch(&self, batch: usize, k: usize, rng: &mut impl Rng) -> (Vec<SceneLatent>, Vec<Canvas>) {
        let cfg = &self.config;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let mut state = self.gen.initial_state(&mut g, cfg, batch);
        let mut prev = g.constant(Tensor::zeros(batch, cfg.spatial_code()));
        let mut running = vec![true; batch];
        let mut scenes: Vec<SceneLatent> =
            (0..batch).map(|_| SceneLatent { objects: vec![], continue_probs: vec![], n: 0, log_q: 0.0, log_p: 0.0 }).collect();
        let mut canvases = vec![Canvas::zeros(cfg.canvas_size); batch];
        for _ in 0..k {
            let u: Vec<f64> = (0..batch).map(|_| rng.gen::<f64>()).collect();
            let eps_loc = normal_tensor(rng, batch, 2);
            let eps_scale = normal_tensor(rng, batch, 1);
            let app_t = normal_tensor(rng, batch, cfg.app_dim);

            let ph: PriorHeads = self.gen.transition(&mut g, &p, cfg, state, prev);
            let loc = reparam(&mut g, ph.loc, eps_loc, LatentDraw::Sample);
            let ps = self.gen.scale_given_loc(&mut g, &p, cfg, &ph, loc);
            let scale_raw = reparam(&mut g, ps, eps_scale, LatentDraw::Sample);
            let side = g.softplus(scale_raw);
            let boxes = g.concat(&[loc, side]);
            let app = g.constant(app_t);
            let glyphs = self.gen.decode(&mut g, &p, app);
            let canvas = write_glyphs(&mut g, glyphs, boxes, cfg.glyph_size, cfg.canvas_size);

            let lp_loc = gaussian_log_density(&mut g, loc, ph.loc);
            let lp_scale = gaussian_log_density(&mut g, scale_raw, ps);
            let lp_app = standard_normal_log_density(&mut g, app);
            for b in 0..batch {
                if !running[b] {
                    continue;
                }
                let logit = g.value(ph.pres_logit).data[b];
                let cp = sigmoid(logit);
                let scene = &mut scenes[b];
                scene.continue_probs.push(cp);
                if cfg.fixed_steps || u[b] < cp {
                    if !cfg.fixed_steps {
                        scene.log_p += log_sigmoid(logit);
                    }
                    scene.log_p += g.value(lp_loc).data[b] + g.value(lp_scale).data[b] + g.value(lp_app).data[b];
                    let bx = g.value(boxes).row(b);
                    scene.objects.push(ObjectLatent { loc: (bx[0], bx[1]), scale: bx[2], app: g.value(app).row(b).to_vec() });
                    scene.n += 1;
                    for (c, v) in canvases[b].pixels.iter_mut().zip(g.value(canvas).row(b)) {
                        *c += v;
                    }
                } else {
                    scene.log_p += log_sigmoid(-logit);
                    running[b] = false;
                }
            }
            prev = spatial_code(&mut g, cfg, loc, side);
            state = ph.state;
            if running.iter().all(|r| !r) {
                break;
            }
        }
        (scenes, canvases)
    }

    /// One ancestral prior sample of at most `k` objects.
    pub fn sample_prior_scene(&self, k: usize, rng: &mut impl Rng) -> Result<SceneLatent> {
        if k == 0 {
            return Err(AsrError::Contract("prior sampling needs k >= 1".into()));
        }
        let (mut scenes, _) = self.sample_prior_batch(1, k, rng);
        Ok(scenes.remove(0))
    }

    pub fn prior_initial_state(&self) -> PriorState {
        match self.config.prior {
            PriorMode::Learned => PriorState { h: vec![0.0; self.config.rnn_hidden], c: vec![0.0; self.config.rnn_hidden] },
            PriorMode::Fixed { .. } => PriorState { h: vec![], c: vec![] },
        }
    }

    fn object_code(&self, o: &ObjectLatent) -> [f64; 3] {
        let half = self.config.canvas_size as f64 / 2.0;
        [o.loc.0 / half - 1.0, o.loc.1 / half - 1.0, o.scale / self.config.canvas_size as f64]
    }

    /// Prior continuation probability and location Gaussian after `prev`.
    ///
    /// Pass [`ObjectLatent::zero`] as `prev` at the first step. The zero
    /// object is encoded as an all-zero code, matching the batched path.
    pub fn prior_transition(&self, state: &PriorState, prev: &ObjectLatent) -> Result<PriorTransition> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let code = if is_zero_object(prev) { [0.0; 3] } else { self.object_code(prev) };
        let prev_v = g.constant(Tensor::from_vec(1, 3, code.to_vec()));
        let st = match cfg.prior {
            PriorMode::Learned => {
                let h = g.constant(Tensor::from_vec(1, cfg.rnn_hidden, state.h.clone()));
                let c = g.constant(Tensor::from_vec(1, cfg.rnn_hidden, state.c.clone()));
                Some(LstmState { h, c })
            }
            PriorMode::Fixed { .. } => None,
        };
        let ph = self.gen.transition(&mut g, &p, cfg, st, prev_v);
        let logit = g.value(ph.pres_logit).item();
        let lm = g.value(ph.loc.mean);
        let lv = g.value(ph.loc.logvar);
        let next_state = match ph.state {
            Some(s) => PriorState { h: g.value(s.h).data.clone(), c: g.value(s.c).data.clone() },
            None => PriorState { h: vec![], c: vec![] },
        };
        let out = PriorTransition {
            continue_prob: sigmoid(logit),
            loc_mean: [lm.data[0], lm.data[1]],
            loc_logvar: [lv.data[0], lv.data[1]],
            hidden: ph.hidden.map(|h| g.value(h).data.clone()).unwrap_or_default(),
            next_state,
        };
        let finite = out.loc_mean.iter().chain(&out.loc_logvar).all(|v| v.is_finite()) && out.next_state.h.iter().all(|v| v.is_finite());
        if !finite {
            return Err(AsrError::Numeric("prior transition produced non-finite outputs".into()));
        }
        Ok(out)
    }

    /// Pre-softplus scale Gaussian `(mean, logvar)` given the sampled location.
    pub fn prior_scale(&self, tr: &PriorTransition, loc: (f64, f64)) -> (f64, f64) {
        let cfg = &self.config;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let hidden = if tr.hidden.is_empty() { None } else { Some(g.constant(Tensor::from_vec(1, tr.hidden.len(), tr.hidden.clone()))) };
        let zero = g.constant(Tensor::zeros(1, 1));
        let heads = PriorHeads { pres_logit: zero, loc: GaussianVars { mean: zero, logvar: zero }, hidden, state: None };
        let l = g.constant(Tensor::from_vec(1, 2, vec![loc.0, loc.1]));
        let s = self.gen.scale_given_loc(&mut g, &p, cfg, &heads, l);
        (g.value(s.mean).item(), g.value(s.logvar).item())
    }

    /// Log prior density of a complete scene, re-evaluated step by step.
    pub fn prior_log_density(&self, scene: &SceneLatent, k: usize) -> Result<f64> {
        let mut state = self.prior_initial_state();
        let mut prev = ObjectLatent::zero(self.config.app_dim);
        let mut total = 0.0;
        for t in 0..k {
            let tr = self.prior_transition(&state, &prev)?;
            let logit = (tr.continue_prob / (1.0 - tr.continue_prob)).ln();
            if t >= scene.n {
                if !self.config.fixed_steps {
                    total += log_sigmoid(-logit);
                }
                break;
            }
            let o = &scene.objects[t];
            if !self.config.fixed_steps {
                total += log_sigmoid(logit);
            }
            total += normal_log_pdf(o.loc.0, tr.loc_mean[0], tr.loc_logvar[0]);
            total += normal_log_pdf(o.loc.1, tr.loc_mean[1], tr.loc_logvar[1]);
            let (sm, slv) = self.prior_scale(&tr, o.loc);
            total += normal_log_pdf(inverse_softplus(o.scale), sm, slv);
            total += o.app.iter().map(|a| normal_log_pdf(*a, 0.0, 0.0)).sum::<f64>();
            state = tr.next_state;
            prev = o.clone();
        }
        Ok(total)
    }

    /// Appearance code to glyph.
    pub fn decode_glyph(&self, app: &[f64]) -> Result<Glyph> {
        decode_one(&self.gen, &self.params, &self.config, app)
    }

    pub fn infer_initial_state(&self, x: &Canvas) -> Result<InferState> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let img = g.constant(self.images_tensor(&[x])?);
        let e = self.rec.encode(&mut g, &p, img);
        let h = self.config.rnn_hidden;
        Ok(InferState { embed: g.value(e).data.clone(), h: vec![0.0; h], c: vec![0.0; h] })
    }

    /// Posterior continuation probability and location Gaussian after `prev`.
    pub fn infer_step(&self, state: &InferState, prev: &ObjectLatent) -> Result<InferTransition> {
        let cfg = &self.config;
        if prev.app.len() != cfg.app_dim {
            return Err(AsrError::Contract("previous object has the wrong appearance width".into()));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let embed = g.constant(Tensor::from_vec(1, state.embed.len(), state.embed.clone()));
        let code = if is_zero_object(prev) { [0.0; 3] } else { self.object_code(prev) };
        let mut prev_row = code.to_vec();
        prev_row.extend_from_slice(&prev.app);
        let prev_v = g.constant(Tensor::from_vec(1, prev_row.len(), prev_row));
        let h = g.constant(Tensor::from_vec(1, cfg.rnn_hidden, state.h.clone()));
        let c = g.constant(Tensor::from_vec(1, cfg.rnn_hidden, state.c.clone()));
        let heads = self.rec.step(&mut g, &p, cfg, embed, prev_v, LstmState { h, c });
        let lm = g.value(heads.loc.mean);
        let lv = g.value(heads.loc.logvar);
        let out = InferTransition {
            continue_prob: sigmoid(g.value(heads.pres_logit).item()),
            loc_mean: [lm.data[0], lm.data[1]],
            loc_logvar: [lv.data[0], lv.data[1]],
            next_state: InferState {
                embed: state.embed.clone(),
                h: g.value(heads.state.h).data.clone(),
                c: g.value(heads.state.c).data.clone(),
            },
            hidden: g.value(heads.hidden).data.clone(),
        };
        let finite = out.loc_mean.iter().chain(&out.loc_logvar).all(|v| v.is_finite()) && out.next_state.h.iter().all(|v| v.is_finite());
        if !finite {
            return Err(AsrError::Numeric("inference step produced non-finite outputs".into()));
        }
        Ok(out)
    }

    /// Posterior pre-softplus scale Gaussian `(mean, logvar)` given location.
    pub fn infer_scale(&self, tr: &InferTransition, loc: (f64, f64)) -> (f64, f64) {
        let cfg = &self.config;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let hidden = g.constant(Tensor::from_vec(1, tr.hidden.len(), tr.hidden.clone()));
        let zero = g.constant(Tensor::zeros(1, 1));
        let heads = crate::recognition::InferHeads {
            pres_logit: zero,
            loc: GaussianVars { mean: zero, logvar: zero },
            hidden,
            state: LstmState { h: hidden, c: hidden },
        };
        let l = g.constant(Tensor::from_vec(1, 2, vec![loc.0, loc.1]));
        let s = self.rec.scale_given_loc(&mut g, &p, cfg, &heads, l);
        (g.value(s.mean).item(), g.value(s.logvar).item())
    }

    /// Appearance posterior `(mean, logvar)` from the crop of `x` at `bbox`.
    pub fn infer_app(&self, x: &Canvas, bbox: &BoundingBox) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let img = g.constant(self.images_tensor(&[x])?);
        let b = g.constant(Tensor::from_vec(1, 3, vec![bbox.cx, bbox.cy, bbox.side]));
        let a = self.rec.app_posterior(&mut g, &p, &self.config, img, b);
        Ok((g.value(a.mean).data.clone(), g.value(a.logvar).data.clone()))
    }

    /// Log posterior density of a scene, re-evaluated step by step for `x`.
    pub fn posterior_log_density(&self, x: &Canvas, scene: &SceneLatent, k: usize) -> Result<f64> {
        let mut state = self.infer_initial_state(x)?;
        let mut prev = ObjectLatent::zero(self.config.app_dim);
        let mut total = 0.0;
        for t in 0..k {
            let tr = self.infer_step(&state, &prev)?;
            let logit = (tr.continue_prob / (1.0 - tr.continue_prob)).ln();
            if t >= scene.n {
                if !self.config.fixed_steps {
                    total += log_sigmoid(-logit);
                }
                break;
            }
            let o = &scene.objects[t];
            if !self.config.fixed_steps {
                total += log_sigmoid(logit);
            }
            total += normal_log_pdf(o.loc.0, tr.loc_mean[0], tr.loc_logvar[0]);
            total += normal_log_pdf(o.loc.1, tr.loc_mean[1], tr.loc_logvar[1]);
            let (sm, slv) = self.infer_scale(&tr, o.loc);
            total += normal_log_pdf(inverse_softplus(o.scale), sm, slv);
            let (am, alv) = self.infer_app(x, &crate::latent::box_from_latent(o))?;
            total += o.app.iter().zip(am.iter().zip(&alv)).map(|(a, (m, lv))| normal_log_pdf(*a, *m, *lv)).sum::<f64>();
            state = tr.next_state;
            prev = o.clone();
        }
        Ok(total)
    }

    /// One posterior trajectory for a single image.
    pub fn sample_posterior_scene(&self, x: &Canvas, k: usize, rng: &mut impl Rng) -> Result<SceneLatent> {
        if k == 0 {
            return Err(AsrError::Contract("posterior sampling needs k >= 1".into()));
        }
        if k != self.config.max_steps {
            return Err(AsrError::Contract(format!("model unrolls {} steps, asked for {k}", self.config.max_steps)));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let img = g.constant(self.images_tensor(&[x])?);
        let tr = self.posterior_trajectory(&mut g, &p, img, rng, &TrajectoryOptions::default());
        Ok(tr.scenes(&g).remove(0))
    }

    /// Mean over `samples` trajectories of each trajectory's induced count
    /// distribution.
    pub fn count_posterior(&self, x: &Canvas, k: usize, rng: &mut impl Rng, samples: usize) -> Result<CountDistribution> {
        if samples == 0 {
            return Err(AsrError::Contract("count_posterior needs samples >= 1".into()));
        }
        if k != self.config.max_steps {
            return Err(AsrError::Contract(format!("model unrolls {} steps, asked for {k}", self.config.max_steps)));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let imgs = vec![x; samples];
        let img = g.constant(self.images_tensor(&imgs)?);
        let tr = self.posterior_trajectory(&mut g, &p, img, rng, &TrajectoryOptions::default());
        let dists = (0..samples)
            .map(|b| {
                let cp: Vec<f64> = tr.steps.iter().map(|s| s.continue_probs[b]).collect();
                induced_count_distribution(&cp, k)
            })
            .collect::<Result<Vec<_>>>()?;
        CountDistribution::mean(&dists)
    }
}

fn is_zero_object(o: &ObjectLatent) -> bool {
    o.loc == (0.0, 0.0) && o.scale == 0.0 && o.app.iter().all(|&a| a == 0.0)
}

/// Recompute `softplus` for callers outside the tape.
pub fn side_from_raw(raw: f64) -> f64 {
    softplus(raw)
}
