//! Evaluation metrics: nELBO, summed squared error, count accuracy and
//! permutation-matched mean IoU.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canvas::Canvas;
use crate::data::DatasetExample;
use crate::error::{AsrError, Result};
use crate::generative::{log_likelihood_graph, NoiseModel, BERNOULLI_CLAMP};
use crate::latent::BoundingBox;
use crate::model::{AsrModel, LatentDraw, TrajectoryOptions};
use crate::tape::Graph;

pub fn squared_error(x: &Canvas, recon: &Canvas) -> Result<f64> {
    if x.size != recon.size {
        return Err(AsrError::Contract(format!("canvas sizes {} and {} differ", x.size, recon.size)));
    }
    Ok(x.pixels.iter().zip(&recon.pixels).map(|(a, b)| (a - b).powi(2)).sum())
}

pub fn count_accuracy(n_inf: usize, n_gt: usize) -> f64 {
    (n_inf == n_gt) as u8 as f64
}

/// Intersection over union of two axis-aligned boxes; 0 when the union is empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x_max().min(b.x_max()) - a.x_min().max(b.x_min())).max(0.0);
    let h = (a.y_max().min(b.y_max()) - a.y_min().max(b.y_min())).max(0.0);
    let inter = if a.side > 0.0 && b.side > 0.0 { w * h } else { 0.0 };
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Best total IoU over injective matchings of the shorter list into the
/// longer one, divided by the longer length. Both empty gives 1.
pub fn miou(pred: &[BoundingBox], gt: &[BoundingBox]) -> f64 {
    let longest = pred.len().max(gt.len());
    if longest == 0 {
        return 1.0;
    }
    if pred.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let (short, long) = if pred.len() <= gt.len() { (pred, gt) } else { (gt, pred) };
    let mut used = vec![false; long.len()];
    best_matching(short, long, 0, &mut used) / longest as f64
}

fn best_matching(short: &[BoundingBox], long: &[BoundingBox], i: usize, used: &mut [bool]) -> f64 {
    if i == short.len() {
        return 0.0;
    }
    let mut best = 0.0f64;
    for j in 0..long.len() {
        if used[j] {
            continue;
        }
        used[j] = true;
        best = best.max(iou(&short[i], &long[j]) + best_matching(short, long, i + 1, used));
        used[j] = false;
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub index: usize,
    pub nelbo: f64,
    pub se: f64,
    pub acc: f64,
    pub miou: f64,
    pub n_inf: usize,
    pub n_gt: usize,
}

/// Aggregates are means of the per-example rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nelbo: f64,
    pub se: f64,
    pub acc: f64,
    pub miou: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        EvalReport { nelbo: mean(|r| r.nelbo), se: mean(|r| r.se), acc: mean(|r| r.acc), miou: mean(|r| r.miou), rows }
    }

    /// Aggregate row first (index `all`), then one row per example.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,nelbo,se,acc,miou,n_inf,n_gt\n");
        let _ = writeln!(s, "all,{},{},{},{},,", self.nelbo, self.se, self.acc, self.miou);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.index, r.nelbo, r.se, r.acc, r.miou, r.n_inf, r.n_gt);
        }
        s
    }

    pub fn summary(&self, label: &str) -> String {
        format!(
            "{:<14} {:>10} {:>6} {:>10} {:>6}\n{:<14} {:>10.2} {:>6.3} {:>10.2} {:>6.3}\n",
            "model", "nELBO", "ACC", "SE", "mIoU", label, self.nelbo, self.acc, self.se, self.miou
        )
    }
}

/// Evaluation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Posterior trajectories averaged per image for nELBO.
    pub elbo_samples: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { elbo_samples: 1, batch_size: 64 }
    }
}

/// Per-image `−(Rec − KL)` averaged over `samples` trajectories.
pub fn nelbo_per_image(model: &AsrModel, images: &[&Canvas], samples: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(AsrError::Contract("nELBO needs samples >= 1".into()));
    }
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, |_| false);
    let repeated: Vec<&Canvas> = images.iter().flat_map(|x| std::iter::repeat_n(*x, samples)).collect();
    let x = g.constant(model.images_tensor(&repeated)?);
    let tr = model.posterior_trajectory(&mut g, &p, x, rng, &TrajectoryOptions::default());
    let rec = log_likelihood_graph(&mut g, &model.config, x, tr.mean);
    let (rec, kl) = (g.value(rec).data.clone(), g.value(tr.kl).data.clone());
    let out: Vec<f64> =
        (0..images.len()).map(|i| (i * samples..(i + 1) * samples).map(|j| kl[j] - rec[j]).sum::<f64>() / samples as f64).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(AsrError::Numeric("non-finite nELBO".into()));
    }
    Ok(out)
}

/// Dataset mean of [`nelbo_per_image`].
pub fn nelbo_eval(model: &AsrModel, data: &[DatasetExample], samples: usize, rng: &mut impl Rng) -> Result<f64> {
    if data.is_empty() {
        return Err(AsrError::Contract("nELBO of an empty dataset".into()));
    }
    let mut total = 0.0;
    for chunk in data.chunks(64) {
        let imgs: Vec<&Canvas> = chunk.iter().map(|e| &e.image).collect();
        total += nelbo_per_image(model, &imgs, samples, rng)?.iter().sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

/// Full evaluation. Counts come from sampled presence decisions; boxes and
/// the reconstruction use posterior means of the continuous latents.
pub fn evaluate(model: &AsrModel, data: &[DatasetExample], cfg: &EvalConfig, rng: &mut impl Rng) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(data.len());
    for (c, chunk) in data.chunks(cfg.batch_size.max(1)).enumerate() {
        let imgs: Vec<&Canvas> = chunk.iter().map(|e| &e.image).collect();
        let nelbo = nelbo_per_image(model, &imgs, cfg.elbo_samples, rng)?;

        let mut g = Graph::new();
        let p = model.params.bind(&mut g, |_| false);
        let x = g.constant(model.images_tensor(&imgs)?);
        let opts = TrajectoryOptions { draw: LatentDraw::Mean, ..Default::default() };
        let tr = model.posterior_trajectory(&mut g, &p, x, rng, &opts);
        let mean = g.value(tr.mean).clone();
        for (b, ex) in chunk.iter().enumerate() {
            let mut recon = Canvas { size: model.config.canvas_size, pixels: mean.row(b).to_vec() };
            if model.config.noise == NoiseModel::Bernoulli {
                recon.pixels.iter_mut().for_each(|v| *v = v.clamp(BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP));
            }
            let pred = tr.boxes(&g, b);
            rows.push(EvalRow {
                index: c * cfg.batch_size.max(1) + b,
                nelbo: nelbo[b],
                se: squared_error(&ex.image, &recon)?,
                acc: count_accuracy(tr.counts[b], ex.gt_count()),
                miou: miou(&pred, &ex.boxes),
                n_inf: tr.counts[b],
                n_gt: ex.gt_count(),
            });
        }
    }
    Ok(EvalReport::from_rows(rows))
}
