//! Training: the objective `J′ = Rec − KL − r`, the score-function surrogate
//! for the presence decisions, and the epoch loop with its metric log and
//! checkpoints.
//!
//! Continuous latents are reparameterised, so their gradient flows through
//! `J′` directly. Each sampled presence decision adds
//! `log q(decision)·(return − baseline)` with the advantage held constant,
//! where the return is the part of the row's objective downstream of the
//! decision: `Rec − r − Σ_{s≥t} KL_s`.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canvas::Canvas;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::constraints::{f1_pairwise_overlap, ConstraintSet};
use crate::data::DatasetExample;
use crate::error::{AsrError, Result};
use crate::generative::log_likelihood_graph;
use crate::metrics::{evaluate, EvalConfig};
use crate::model::{induced_counts_graph, AsrModel, Trajectory, TrajectoryOptions};
use crate::nn::{Adam, Bound};
use crate::tape::{Graph, Tensor, Var};

/// Batch means of the objective's parts. `j = rec − kl − r` by construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub rec: f64,
    pub kl: f64,
    pub r: f64,
    pub j: f64,
}

impl ElboBreakdown {
    pub fn new(rec: f64, kl: f64, r: f64) -> Self {
        ElboBreakdown { rec, kl, r, j: rec - kl - r }
    }

    pub fn is_finite(&self) -> bool {
        self.rec.is_finite() && self.kl.is_finite() && self.r.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NanPolicy {
    /// Stop training with a numeric error.
    #[default]
    Halt,
    /// Drop the offending update and continue.
    Skip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub baseline_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub nan_policy: NanPolicy,
    /// Save a checkpoint every this many epochs (the last epoch always saves).
    pub checkpoint_every: usize,
    /// Held-out evaluation every this many epochs (the last epoch always
    /// evaluates); 0 evaluates only at the end.
    pub eval_every: usize,
    /// Record elapsed seconds in the log; off keeps logs byte-reproducible.
    pub log_wall_time: bool,
    /// Impose ground-truth object counts instead of sampled decisions.
    pub force_gt_counts: bool,
    /// Closed-form Gaussian KL terms instead of the sampled log-ratio.
    pub analytic_kl: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 300,
            batch_size: 64,
            seed: 0,
            baseline_decay: 0.9,
            clip_norm: 10.0,
            nan_policy: NanPolicy::Halt,
            checkpoint_every: 0,
            eval_every: 1,
            log_wall_time: false,
            force_gt_counts: false,
            analytic_kl: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AsrError::Config(m));
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.baseline_decay) {
            return bad("baseline_decay must lie in [0, 1]".into());
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be >= 0".into());
        }
        Ok(())
    }
}

/// Per-step exponential moving average of the return.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub decay: f64,
    pub values: Vec<f64>,
    pub seen: Vec<bool>,
}

impl Baseline {
    pub fn new(decay: f64, steps: usize) -> Self {
        Baseline { decay, values: vec![0.0; steps], seen: vec![false; steps] }
    }

    pub fn get(&self, t: usize) -> Option<f64> {
        self.seen[t].then(|| self.values[t])
    }

    /// Fold in a new mean return; the first observation initialises the step.
    pub fn update(&mut self, t: usize, v: f64) {
        self.values[t] = if self.seen[t] { self.decay * self.values[t] + (1.0 - self.decay) * v } else { v };
        self.seen[t] = true;
    }
}

/// One forward pass over a batch with everything the update needs.
pub struct ForwardPass {
    pub graph: Graph,
    pub bound: Bound,
    pub trajectory: Trajectory,
    /// `log p(x | z)` per row.
    pub rec: Var,
    /// Penalty per row.
    pub penalty: Var,
    /// Induced count distribution per row.
    pub counts: Var,
    pub breakdown: ElboBreakdown,
}

impl ForwardPass {
    pub fn rows(&self, v: Var) -> Vec<f64> {
        self.graph.value(v).data.clone()
    }
}

/// Sample one posterior trajectory per image and assemble `Rec`, `KL`, `r`.
pub fn elbo_terms(
    model: &AsrModel,
    constraints: &ConstraintSet,
    images: &[&Canvas],
    rng: &mut impl Rng,
    opts: &TrajectoryOptions,
) -> Result<ForwardPass> {
    if images.is_empty() {
        return Err(AsrError::Contract("empty batch".into()));
    }
    if !model.params.all_finite() {
        return Err(AsrError::Numeric("parameters are not finite".into()));
    }
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, |n| model.trainable(n));
    let x = g.constant(model.images_tensor(images)?);
    let trajectory = model.posterior_trajectory(&mut g, &bound, x, rng, opts);
    let rec = log_likelihood_graph(&mut g, &model.config, x, trajectory.mean);
    let logits: Vec<Var> = trajectory.steps.iter().map(|s| s.pres_logit).collect();
    let counts = induced_counts_graph(&mut g, &logits);
    let penalty = if constraints.is_empty() {
        g.constant(Tensor::zeros(images.len(), 1))
    } else {
        let boxes: Vec<Var> = trajectory.steps.iter().map(|s| s.boxes).collect();
        let present: Vec<Vec<bool>> = trajectory.steps.iter().map(|s| s.present.clone()).collect();
        constraints.penalty_graph(&mut g, &boxes, &present, counts)
    };
    let mean = |g: &Graph, v: Var| g.value(v).data.iter().sum::<f64>() / images.len() as f64;
    let breakdown = ElboBreakdown::new(mean(&g, rec), mean(&g, trajectory.kl), mean(&g, penalty));
    Ok(ForwardPass { graph: g, bound, trajectory, rec, penalty, counts, breakdown })
}

/// Score-function term for the sampled presence decisions, averaged over
/// rows. `returns_after[t][b]` is the return credited to the decision at
/// step `t` of row `b`; rows that made no decision at `t` are ignored.
/// The baseline is read before it is updated with this batch.
pub fn score_function_term(
    g: &mut Graph,
    log_q_pres: &[Var],
    decided: &[Vec<bool>],
    returns_after: &[Vec<f64>],
    baseline: &mut Baseline,
) -> Var {
    let batch = decided.first().map(Vec::len).unwrap_or(0);
    let mut total: Option<Var> = None;
    for t in 0..log_q_pres.len() {
        let rows: Vec<usize> = (0..batch).filter(|&b| decided[t][b]).collect();
        if rows.is_empty() {
            continue;
        }
        let batch_mean = rows.iter().map(|&b| returns_after[t][b]).sum::<f64>() / rows.len() as f64;
        let base = baseline.get(t).unwrap_or(batch_mean);
        let mut adv = Tensor::zeros(batch, 1);
        for &b in &rows {
            adv.data[b] = (returns_after[t][b] - base) / batch as f64;
        }
        baseline.update(t, batch_mean);
        let a = g.constant(adv);
        let term = g.mul_col(log_q_pres[t], a);
        let term = g.sum(term);
        total = Some(match total {
            Some(s) => g.add(s, term),
            None => term,
        });
    }
    total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)))
}

/// Scalar to minimise: `−(mean J′ + score-function term)`.
pub fn surrogate_loss(pass: &mut ForwardPass, baseline: &mut Baseline) -> Var {
    let g = &mut pass.graph;
    let tr = &pass.trajectory;
    let rec = g.value(pass.rec).data.clone();
    let pen = g.value(pass.penalty).data.clone();
    let step_kl: Vec<Vec<f64>> = tr.steps.iter().map(|s| g.value(s.kl).data.clone()).collect();
    let k = tr.steps.len();
    let batch = rec.len();
    let mut returns = vec![vec![0.0; batch]; k];
    for b in 0..batch {
        let mut downstream = 0.0;
        for t in (0..k).rev() {
            downstream += step_kl[t][b];
            returns[t][b] = rec[b] - pen[b] - downstream;
        }
    }
    let log_q: Vec<Var> = tr.steps.iter().map(|s| s.log_q_pres).collect();
    let decided: Vec<Vec<bool>> = tr.steps.iter().map(|s| s.decided.clone()).collect();
    let score = score_function_term(g, &log_q, &decided, &returns, baseline);
    let j = g.sub(pass.rec, tr.kl);
    let j = g.sub(j, pass.penalty);
    let j = g.mean(j);
    let total = g.add(j, score);
    g.neg(total)
}

/// What one optimisation step did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub breakdown: ElboBreakdown,
    pub grad_norm: f64,
    pub skipped: bool,
    /// Mean overlap statistic of the sampled boxes.
    pub f1_mean: f64,
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub nelbo: f64,
    pub rec: f64,
    pub kl: f64,
    pub penalty: f64,
    pub acc: Option<f64>,
    pub miou: Option<f64>,
    pub wall_s: f64,
    /// Training-set mean of the pairwise-overlap functional (not logged).
    pub f1_mean: f64,
    pub skipped_steps: usize,
}

pub const LOG_HEADER: &str = "epoch,nelbo,rec,kl,penalty,acc,miou,wall_s";

impl EpochRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.nelbo,
            self.rec,
            self.kl,
            self.penalty,
            opt(self.acc),
            opt(self.miou),
            self.wall_s
        )
    }
}

/// Where a run writes its log and checkpoints.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn log(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("checkpoint_epoch{epoch:04}.asrc"))
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.dir.join("last.asrc")
    }
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 32) | epoch as u64);
    rng
}

/// Optimisation state of a run.
pub struct Trainer {
    pub model: AsrModel,
    pub constraints: ConstraintSet,
    pub config: TrainConfig,
    pub adam: Adam,
    pub baseline: Baseline,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: AsrModel, constraints: ConstraintSet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let clip = (config.clip_norm > 0.0).then_some(config.clip_norm);
        let adam = Adam::new(&model.params, config.lr, config.beta1, config.beta2, clip);
        let baseline = Baseline::new(config.baseline_decay, model.config.max_steps);
        Ok(Trainer { model, constraints, config, adam, baseline, epoch: 0 })
    }

    /// Continue from a checkpoint. Optimiser hyperparameters come from
    /// `config`; moments, baseline and epoch from the checkpoint.
    pub fn resume(ck: Checkpoint, constraints: ConstraintSet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut t = Trainer::new(ck.model, constraints, config)?;
        if let Some(a) = ck.adam {
            let (m, v) = a.moments();
            t.adam.set_moments(m.to_vec(), v.to_vec());
            t.adam.step = a.step;
        }
        t.baseline = ck.baseline;
        t.epoch = ck.epoch;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, Some(&self.adam), &self.baseline, self.epoch, self.config.seed)
    }

    /// One stochastic update on a batch.
    pub fn step(&mut self, images: &[&Canvas], forced: Option<Vec<usize>>, rng: &mut impl Rng) -> Result<StepReport> {
        let opts = TrajectoryOptions { forced_counts: forced, analytic_kl: self.config.analytic_kl, ..Default::default() };
        let mut pass = elbo_terms(&self.model, &self.constraints, images, rng, &opts)?;
        let mut f1 = 0.0;
        for b in 0..images.len() {
            f1 += f1_pairwise_overlap(&pass.trajectory.boxes(&pass.graph, b));
        }
        let f1_mean = f1 / images.len() as f64;
        let mut baseline = self.baseline.clone();
        let loss = surrogate_loss(&mut pass, &mut baseline);
        let loss_value = pass.graph.value(loss).item();
        let mut report = StepReport { breakdown: pass.breakdown, grad_norm: f64::NAN, skipped: false, f1_mean };
        if !loss_value.is_finite() || !pass.breakdown.is_finite() {
            return self.bad_step(report, format!("non-finite objective {:?}", pass.breakdown));
        }
        let mut grads = pass.graph.backward(loss);
        let grads = pass.bound.gradients(&mut grads);
        let norm = Adam::grad_norm(&grads);
        report.grad_norm = norm;
        if !norm.is_finite() {
            return self.bad_step(report, "non-finite gradient".into());
        }
        let before = self.model.params.clone();
        self.adam.update(&mut self.model.params, &grads);
        if !self.model.params.all_finite() {
            self.model.params = before;
            return self.bad_step(report, "update produced non-finite parameters".into());
        }
        self.baseline = baseline;
        Ok(report)
    }

    fn bad_step(&self, mut report: StepReport, why: String) -> Result<StepReport> {
        match self.config.nan_policy {
            NanPolicy::Halt => Err(AsrError::Numeric(format!("epoch {}: {why}", self.epoch + 1))),
            NanPolicy::Skip => {
                report.skipped = true;
                Ok(report)
            }
        }
    }

    /// One pass over shuffled training data.
    pub fn run_epoch(&mut self, data: &[DatasetExample]) -> Result<EpochRow> {
        if data.is_empty() {
            return Err(AsrError::Contract("training set is empty".into()));
        }
        let epoch = self.epoch + 1;
        let mut rng = epoch_rng(self.config.seed, epoch, 0);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut rec, mut kl, mut r, mut f1, mut seen, mut skipped) = (0.0, 0.0, 0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let images: Vec<&Canvas> = chunk.iter().map(|&i| &data[i].image).collect();
            let forced = self.config.force_gt_counts.then(|| chunk.iter().map(|&i| data[i].gt_count()).collect());
            let rep = self.step(&images, forced, &mut rng)?;
            if rep.skipped {
                skipped += 1;
                continue;
            }
            let n = chunk.len() as f64;
            rec += rep.breakdown.rec * n;
            kl += rep.breakdown.kl * n;
            r += rep.breakdown.r * n;
            f1 += rep.f1_mean * n;
            seen += chunk.len();
        }
        self.epoch = epoch;
        let n = seen.max(1) as f64;
        Ok(EpochRow {
            epoch,
            nelbo: (kl - rec) / n,
            rec: rec / n,
            kl: kl / n,
            penalty: r / n,
            acc: None,
            miou: None,
            wall_s: 0.0,
            f1_mean: f1 / n,
            skipped_steps: skipped,
        })
    }

    /// Train until `config.epochs` epochs are complete, appending to the log
    /// and writing checkpoints under `paths` when given. A log row past the
    /// current epoch (left by an interrupted run) is dropped first.
    pub fn train(&mut self, train: &[DatasetExample], heldout: &[DatasetExample], paths: Option<&RunPaths>) -> Result<Vec<EpochRow>> {
        if let Some(p) = paths {
            fs::create_dir_all(&p.dir).map_err(|e| AsrError::io(&p.dir, e))?;
            prepare_log(&p.log(), self.epoch)?;
        }
        let start = Instant::now();
        let mut rows = Vec::new();
        while self.epoch < self.config.epochs {
            let mut row = self.run_epoch(train)?;
            let last = row.epoch == self.config.epochs;
            let due = self.config.eval_every > 0 && row.epoch % self.config.eval_every == 0;
            if !heldout.is_empty() && (last || due) {
                let mut rng = epoch_rng(self.config.seed, row.epoch, 1);
                let rep = evaluate(&self.model, heldout, &EvalConfig { elbo_samples: 1, batch_size: self.config.batch_size }, &mut rng)?;
                row.acc = Some(rep.acc);
                row.miou = Some(rep.miou);
            }
            if self.config.log_wall_time {
                row.wall_s = start.elapsed().as_secs_f64();
            }
            if let Some(p) = paths {
                let log = p.log();
                let mut f = OpenOptions::new().append(true).open(&log).map_err(|e| AsrError::io(&log, e))?;
                writeln!(f, "{}", row.csv()).map_err(|e| AsrError::io(&log, e))?;
                let cadence = self.config.checkpoint_every > 0 && row.epoch % self.config.checkpoint_every == 0;
                if cadence {
                    self.save(&p.checkpoint(row.epoch))?;
                }
                if cadence || last {
                    self.save(&p.last_checkpoint())?;
                }
            }
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Ensure the log exists with its header and holds no rows past `epoch`.
fn prepare_log(path: &Path, epoch: usize) -> Result<()> {
    let keep = match fs::read_to_string(path) {
        Ok(text) => {
            let mut lines = text.lines();
            if lines.next() != Some(LOG_HEADER) {
                return Err(AsrError::corrupt("metric log", format!("{} has an unexpected header", path.display())));
            }
            let rows: Vec<&str> =
                lines.filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= epoch)).collect();
            rows.join("\n")
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(AsrError::io(path, e)),
    };
    let mut text = format!("{LOG_HEADER}\n");
    if !keep.is_empty() {
        text.push_str(&keep);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| AsrError::io(path, e))
}

/// Two-step presence process small enough to enumerate: logits `a`, fixed
/// prior continuation probability `p0` and a reward `f[n]` for ending with
/// `n` objects. Used to check the score-function estimator against the exact
/// gradient.
pub mod toy {
    use super::*;
    use crate::tape::{log_sigmoid, sigmoid};

    /// Exact objective `Σ_n q(n)[f(n) − log q(n)/p(n)]` and its gradient
    /// by enumerating the three outcomes.
    pub fn exact_gradient(a: [f64; 2], p0: f64, f: [f64; 3]) -> (f64, [f64; 2]) {
        let obj = |a: [f64; 2]| {
            let (q1, q2) = (sigmoid(a[0]), sigmoid(a[1]));
            let q = [1.0 - q1, q1 * (1.0 - q2), q1 * q2];
            let p = [1.0 - p0, p0 * (1.0 - p0), p0 * p0];
            (0..3).map(|n| q[n] * (f[n] - (q[n] / p[n]).ln())).sum::<f64>()
        };
        let h = 1e-6;
        let g0 = (obj([a[0] + h, a[1]]) - obj([a[0] - h, a[1]])) / (2.0 * h);
        let g1 = (obj([a[0], a[1] + h]) - obj([a[0], a[1] - h])) / (2.0 * h);
        (obj(a), [g0, g1])
    }

    /// Mean gradient of the training estimator over `samples` trajectories
    /// drawn in batches of `batch`, with the same per-step baseline.
    pub fn estimate_gradient(a: [f64; 2], p0: f64, f: [f64; 3], samples: usize, batch: usize, seed: u64) -> [f64; 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut baseline = Baseline::new(0.9, 2);
        let mut acc = [0.0; 2];
        let lp = [log_sigmoid((p0 / (1.0 - p0)).ln()), log_sigmoid(-(p0 / (1.0 - p0)).ln())];
        for _ in 0..samples / batch {
            let mut g = Graph::new();
            let av = g.param(Tensor::from_vec(1, 2, a.to_vec()));
            let ones = g.constant(Tensor::full(batch, 1, 1.0));
            let logits = g.matmul(ones, av);
            let mut decided = vec![vec![false; batch]; 2];
            let mut present = vec![vec![false; batch]; 2];
            let mut counts = vec![0usize; batch];
            for b in 0..batch {
                let mut running = true;
                for t in 0..2 {
                    if !running {
                        break;
                    }
                    decided[t][b] = true;
                    present[t][b] = rng.gen::<f64>() < sigmoid(a[t]);
                    running = present[t][b];
                    counts[b] += present[t][b] as usize;
                }
            }
            let mut log_q = Vec::new();
            let mut kl_rows: Vec<Var> = Vec::new();
            let mut step_kl = vec![vec![0.0; batch]; 2];
            for t in 0..2 {
                let lt = g.slice(logits, t, 1);
                let sign: Vec<f64> = present[t].iter().map(|&p| if p { 1.0 } else { -1.0 }).collect();
                let sg = g.constant(Tensor::from_vec(batch, 1, sign));
                let z = g.mul_col(lt, sg);
                let lq = g.log_sigmoid(z);
                let lpv: Vec<f64> = (0..batch)
                    .map(|b| {
                        if !decided[t][b] {
                            0.0
                        } else if present[t][b] {
                            lp[0]
                        } else {
                            lp[1]
                        }
                    })
                    .collect();
                let mask: Vec<f64> = decided[t].iter().map(|&d| d as u8 as f64).collect();
                let m = g.constant(Tensor::from_vec(batch, 1, mask));
                let lqm = g.mul_col(lq, m);
                let lpc = g.constant(Tensor::from_vec(batch, 1, lpv));
                let kl = g.sub(lqm, lpc);
                for b in 0..batch {
                    step_kl[t][b] = g.value(kl).data[b];
                }
                kl_rows.push(kl);
                log_q.push(lq);
            }
            let reward: Vec<f64> = counts.iter().map(|&n| f[n]).collect();
            let mut returns = vec![vec![0.0; batch]; 2];
            for b in 0..batch {
                let mut down = 0.0;
                for t in (0..2).rev() {
                    down += step_kl[t][b];
                    returns[t][b] = reward[b] - down;
                }
            }
            let score = score_function_term(&mut g, &log_q, &decided, &returns, &mut baseline);
            let kl = g.add(kl_rows[0], kl_rows[1]);
            let kl = g.mean(kl);
            let obj = g.sub(score, kl);
            let grads = g.backward(obj);
            let ga = grads.get(av).unwrap();
            acc[0] += ga.data[0];
            acc[1] += ga.data[1];
        }
        let nb = (samples / batch) as f64;
        [acc[0] / nb, acc[1] / nb]
    }
}
