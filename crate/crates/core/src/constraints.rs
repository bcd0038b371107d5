//! Structural constraint functionals and the penalties built from them.
//!
//! Every built-in functional is a sum of hinges and therefore non-negative.
//! Each geometric functional comes with an analytic subgradient with respect
//! to `(cx, cy, side)` so the same code drives both plain evaluation and the
//! training graph.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{AsrError, Result};
use crate::latent::{point_mass_kl, BoundingBox, CountDistribution, SceneLatent, PROB_FLOOR};
use crate::tape::{Graph, Tensor, Var};

pub fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

/// Geometry and count settings the constraints are measured against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub canvas_size: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub epsilon: f64,
    /// Allowed object counts.
    pub allowed_counts: Vec<usize>,
    pub max_steps: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { canvas_size: 50.0, c_min: 15.0, c_max: 25.0, epsilon: 2.0, allowed_counts: vec![1, 3], max_steps: 3 }
    }
}

impl SceneConfig {
    /// `L` must be a nonempty proper subset of the representable counts `0..=K`.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AsrError::Config(m));
        if !(self.c_min > 0.0 && self.c_min <= self.c_max && self.c_max <= self.canvas_size) {
            return bad(format!("need 0 < c_min <= c_max <= S, got c_min={} c_max={} S={}", self.c_min, self.c_max, self.canvas_size));
        }
        if !(self.epsilon >= 0.0) {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        let set: BTreeSet<usize> = self.allowed_counts.iter().copied().collect();
        if set.is_empty() {
            return bad("allowed_counts must be nonempty".into());
        }
        if let Some(&c) = set.iter().find(|&&c| c > self.max_steps) {
            return bad(format!("allowed count {c} exceeds max_steps {}", self.max_steps));
        }
        if set.len() == self.max_steps + 1 {
            return bad("allowed_counts must be a proper subset of 0..=max_steps".into());
        }
        Ok(())
    }
}

/// Sum over unordered pairs of `ℓ((sᵢ+sⱼ)/2 − max(|Δcx|, |Δcy|))`.
pub fn f1_pairwise_overlap(boxes: &[BoundingBox]) -> f64 {
    let mut total = 0.0;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            total += hinge(pair_overlap(&boxes[i], &boxes[j]));
        }
    }
    total
}

fn pair_overlap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    (a.side + b.side) / 2.0 - (a.cx - b.cx).abs().max((a.cy - b.cy).abs())
}

/// `(left, right, top, bottom)` containment sums.
pub fn f_containment(boxes: &[BoundingBox], size: f64) -> (f64, f64, f64, f64) {
    boxes.iter().fold((0.0, 0.0, 0.0, 0.0), |acc, b| {
        let h = b.side / 2.0;
        (acc.0 + hinge(h - b.cx), acc.1 + hinge(b.cx + h - size), acc.2 + hinge(h - b.cy), acc.3 + hinge(b.cy + h - size))
    })
}

pub fn f6_scale_band(boxes: &[BoundingBox], c_min: f64, c_max: f64) -> f64 {
    boxes.iter().map(|b| hinge(c_min - b.side) + hinge(b.side - c_max)).sum()
}

pub fn f7_scale_similarity(boxes: &[BoundingBox], epsilon: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            total += hinge((boxes[i].side - boxes[j].side).abs() - epsilon);
        }
    }
    total
}

/// Weights `λ₁..λ₇` of the overlap regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct OverlapWeights(pub [f64; 7]);

impl OverlapWeights {
    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&w| w == 0.0)
    }
}

/// The seven geometric functionals of one scene, `[F₁, …, F₇]`.
pub fn geometric_functionals(boxes: &[BoundingBox], cfg: &SceneConfig) -> [f64; 7] {
    let (f2, f3, f4, f5) = f_containment(boxes, cfg.canvas_size);
    [f1_pairwise_overlap(boxes), f2, f3, f4, f5, f6_scale_band(boxes, cfg.c_min, cfg.c_max), f7_scale_similarity(boxes, cfg.epsilon)]
}

/// `Σ λᵢ Fᵢ` for one scene together with its subgradient per box,
/// `[∂/∂cx, ∂/∂cy, ∂/∂side]`.
pub fn weighted_geometry_with_grad(boxes: &[BoundingBox], cfg: &SceneConfig, w: &OverlapWeights) -> (f64, Vec<[f64; 3]>) {
    let w = w.0;
    let s = cfg.canvas_size;
    let mut value = 0.0;
    let mut grad = vec![[0.0; 3]; boxes.len()];
    for i in 0..boxes.len() {
        let b = &boxes[i];
        let h = b.side / 2.0;
        // containment: left, right, top, bottom
        let terms = [(h - b.cx, 0, -1.0, w[1]), (b.cx + h - s, 0, 1.0, w[2]), (h - b.cy, 1, -1.0, w[3]), (b.cy + h - s, 1, 1.0, w[4])];
        for (v, axis, d, lam) in terms {
            if v > 0.0 && lam != 0.0 {
                value += lam * v;
                grad[i][axis] += lam * d;
                grad[i][2] += lam * 0.5;
            }
        }
        if w[5] != 0.0 {
            if cfg.c_min - b.side > 0.0 {
                value += w[5] * (cfg.c_min - b.side);
                grad[i][2] -= w[5];
            }
            if b.side - cfg.c_max > 0.0 {
                value += w[5] * (b.side - cfg.c_max);
                grad[i][2] += w[5];
            }
        }
        for j in i + 1..boxes.len() {
            let o = &boxes[j];
            if w[0] != 0.0 {
                let v = pair_overlap(b, o);
                if v > 0.0 {
                    value += w[0] * v;
                    grad[i][2] += 0.5 * w[0];
                    grad[j][2] += 0.5 * w[0];
                    let (dx, dy) = (b.cx - o.cx, b.cy - o.cy);
                    let (axis, d) = if dx.abs() >= dy.abs() { (0, dx) } else { (1, dy) };
                    let sg = d.signum();
                    grad[i][axis] -= w[0] * sg;
                    grad[j][axis] += w[0] * sg;
                }
            }
            if w[6] != 0.0 {
                let d = b.side - o.side;
                let v = d.abs() - cfg.epsilon;
                if v > 0.0 {
                    value += w[6] * v;
                    grad[i][2] += w[6] * d.signum();
                    grad[j][2] -= w[6] * d.signum();
                }
            }
        }
    }
    (value, grad)
}

/// Batch mean over scenes of `Σ λᵢ Fᵢ`.
pub fn overlap_regularizer(scenes: &[SceneLatent], cfg: &SceneConfig, w: &OverlapWeights) -> Result<f64> {
    if w.0.iter().any(|&l| !(l >= 0.0)) {
        return Err(AsrError::Contract(format!("negative overlap weight in {:?}", w.0)));
    }
    if scenes.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = scenes
        .iter()
        .map(|s| {
            let f = geometric_functionals(&s.boxes(), cfg);
            f.iter().zip(&w.0).map(|(f, l)| f * l).sum::<f64>()
        })
        .sum();
    Ok(total / scenes.len() as f64)
}

fn check_allowed(q_len: usize, allowed: &[usize]) -> Result<()> {
    if allowed.is_empty() {
        return Err(AsrError::Contract("allowed count set is empty".into()));
    }
    if let Some(c) = allowed.iter().find(|&&c| c >= q_len) {
        return Err(AsrError::Contract(format!("allowed count {c} outside support 0..{}", q_len - 1)));
    }
    Ok(())
}

/// `min_{i∈L} KL(δᵢ ‖ q) = −ln max_{i∈L} q(i)`.
pub fn count_match_penalty(q: &CountDistribution, allowed: &[usize]) -> Result<f64> {
    check_allowed(q.probs.len(), allowed)?;
    allowed.iter().map(|&i| point_mass_kl(i, q)).try_fold(f64::INFINITY, |m, v| v.map(|v| m.min(v)))
}

/// `KL(uniform_L ‖ q̄)` with `q̄` the batch mean, floored at [`PROB_FLOOR`].
pub fn count_marginal_penalty(batch: &[CountDistribution], allowed: &[usize]) -> Result<f64> {
    let mean = CountDistribution::mean(batch)?;
    check_allowed(mean.probs.len(), allowed)?;
    let set: BTreeSet<usize> = allowed.iter().copied().collect();
    let u = 1.0 / set.len() as f64;
    Ok(set.iter().map(|&i| u * (u / mean.probs[i].max(PROB_FLOOR)).ln()).sum())
}

/// `λ₁·mean(match) + λ₂·marginal`.
pub fn count_regularizer(batch: &[CountDistribution], allowed: &[usize], lambda_match: f64, lambda_marginal: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(AsrError::Contract("count regularizer on an empty batch".into()));
    }
    let mut m = 0.0;
    for q in batch {
        m += count_match_penalty(q, allowed)?;
    }
    m /= batch.len() as f64;
    let k = count_marginal_penalty(batch, allowed)?;
    Ok(lambda_match * m + lambda_marginal * k)
}

/// Identifiers of the built-in functionals as they appear in run configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BuiltinConstraint {
    #[serde(rename = "overlap")]
    Overlap,
    #[serde(rename = "contain_left")]
    ContainLeft,
    #[serde(rename = "contain_right")]
    ContainRight,
    #[serde(rename = "contain_top")]
    ContainTop,
    #[serde(rename = "contain_bottom")]
    ContainBottom,
    #[serde(rename = "scale_band")]
    ScaleBand,
    #[serde(rename = "scale_similarity")]
    ScaleSimilarity,
    #[serde(rename = "count_match")]
    CountMatch,
    #[serde(rename = "count_marginal")]
    CountMarginal,
}

impl BuiltinConstraint {
    pub const ALL: [BuiltinConstraint; 9] = [
        BuiltinConstraint::Overlap,
        BuiltinConstraint::ContainLeft,
        BuiltinConstraint::ContainRight,
        BuiltinConstraint::ContainTop,
        BuiltinConstraint::ContainBottom,
        BuiltinConstraint::ScaleBand,
        BuiltinConstraint::ScaleSimilarity,
        BuiltinConstraint::CountMatch,
        BuiltinConstraint::CountMarginal,
    ];

    pub fn id(self) -> &'static str {
        match self {
            BuiltinConstraint::Overlap => "overlap",
            BuiltinConstraint::ContainLeft => "contain_left",
            BuiltinConstraint::ContainRight => "contain_right",
            BuiltinConstraint::ContainTop => "contain_top",
            BuiltinConstraint::ContainBottom => "contain_bottom",
            BuiltinConstraint::ScaleBand => "scale_band",
            BuiltinConstraint::ScaleSimilarity => "scale_similarity",
            BuiltinConstraint::CountMatch => "count_match",
            BuiltinConstraint::CountMarginal => "count_marginal",
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|c| c.id() == id).ok_or_else(|| AsrError::Config(format!("unknown constraint id `{id}`")))
    }

    /// Position among the seven geometric functionals, if geometric.
    pub fn geometric_index(self) -> Option<usize> {
        match self {
            BuiltinConstraint::Overlap => Some(0),
            BuiltinConstraint::ContainLeft => Some(1),
            BuiltinConstraint::ContainRight => Some(2),
            BuiltinConstraint::ContainTop => Some(3),
            BuiltinConstraint::ContainBottom => Some(4),
            BuiltinConstraint::ScaleBand => Some(5),
            BuiltinConstraint::ScaleSimilarity => Some(6),
            BuiltinConstraint::CountMatch | BuiltinConstraint::CountMarginal => None,
        }
    }
}

impl fmt::Display for BuiltinConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// What a constraint functional gets to look at.
pub struct PenaltyBatch<'a> {
    pub scenes: &'a [SceneLatent],
    pub counts: &'a [CountDistribution],
    pub scene: &'a SceneConfig,
}

type Evaluator = Box<dyn Fn(&PenaltyBatch<'_>) -> Result<f64> + Send + Sync>;

/// One weighted functional `λ·F`.
pub struct ConstraintTerm {
    pub id: String,
    pub weight: f64,
    evaluator: Evaluator,
}

impl fmt::Debug for ConstraintTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstraintTerm").field("id", &self.id).field("weight", &self.weight).finish()
    }
}

impl ConstraintTerm {
    pub fn custom(
        id: impl Into<String>,
        weight: f64,
        evaluator: impl Fn(&PenaltyBatch<'_>) -> Result<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(weight >= 0.0) {
            return Err(AsrError::Config(format!("constraint weight must be >= 0, got {weight}")));
        }
        Ok(ConstraintTerm { id: id.into(), weight, evaluator: Box::new(evaluator) })
    }

    pub fn builtin(which: BuiltinConstraint, weight: f64) -> Result<Self> {
        let eval: Evaluator = match which.geometric_index() {
            Some(idx) => Box::new(move |b: &PenaltyBatch<'_>| {
                if b.scenes.is_empty() {
                    return Ok(0.0);
                }
                let total: f64 = b.scenes.iter().map(|s| geometric_functionals(&s.boxes(), b.scene)[idx]).sum();
                Ok(total / b.scenes.len() as f64)
            }),
            None if which == BuiltinConstraint::CountMatch => Box::new(|b: &PenaltyBatch<'_>| {
                if b.counts.is_empty() {
                    return Err(AsrError::Contract("count penalty on an empty batch".into()));
                }
                let mut total = 0.0;
                for q in b.counts {
                    total += count_match_penalty(q, &b.scene.allowed_counts)?;
                }
                Ok(total / b.counts.len() as f64)
            }),
            None => Box::new(|b: &PenaltyBatch<'_>| count_marginal_penalty(b.counts, &b.scene.allowed_counts)),
        };
        let mut t = ConstraintTerm::custom(which.id(), weight, |_| Ok(0.0))?;
        t.evaluator = eval;
        Ok(t)
    }

    /// The functional's Monte-Carlo estimate on this batch.
    pub fn evaluate(&self, batch: &PenaltyBatch<'_>) -> Result<f64> {
        let v = (self.evaluator)(batch)?;
        if !v.is_finite() {
            return Err(AsrError::Numeric(format!("constraint `{}` evaluated to {v}", self.id)));
        }
        Ok(v)
    }
}

/// `Σ λᵢ·ℓ(Fᵢ)`.
pub fn total_penalty(terms: &[ConstraintTerm], batch: &PenaltyBatch<'_>) -> Result<f64> {
    let mut total = 0.0;
    for t in terms {
        let f = t.evaluate(batch)?;
        if BuiltinConstraint::parse(&t.id).is_ok() {
            debug_assert!(f >= 0.0, "built-in functional `{}` went negative: {f}", t.id);
        }
        total += t.weight * hinge(f);
    }
    Ok(total)
}

/// The weighted built-in constraints of a run.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ConstraintSet {
    pub geometry: OverlapWeights,
    pub count_match: f64,
    pub count_marginal: f64,
    pub scene: SceneConfig,
}

impl ConstraintSet {
    /// Build from `(id, λ)` pairs; ids must be known and unique.
    pub fn from_weights(pairs: &[(String, f64)], scene: SceneConfig) -> Result<Self> {
        scene.validate()?;
        let mut set = ConstraintSet { scene, ..Default::default() };
        let mut seen = BTreeSet::new();
        for (id, w) in pairs {
            let c = BuiltinConstraint::parse(id)?;
            if !seen.insert(c) {
                return Err(AsrError::Config(format!("constraint `{id}` listed twice")));
            }
            if !(*w >= 0.0 && w.is_finite()) {
                return Err(AsrError::Config(format!("constraint `{id}` needs a finite weight >= 0, got {w}")));
            }
            match c.geometric_index() {
                Some(i) => set.geometry.0[i] = *w,
                None if c == BuiltinConstraint::CountMatch => set.count_match = *w,
                None => set.count_marginal = *w,
            }
        }
        Ok(set)
    }

    pub fn is_empty(&self) -> bool {
        self.geometry.is_zero() && self.count_match == 0.0 && self.count_marginal == 0.0
    }

    pub fn terms(&self) -> Vec<ConstraintTerm> {
        let mut out = Vec::new();
        for c in BuiltinConstraint::ALL {
            let w = match c.geometric_index() {
                Some(i) => self.geometry.0[i],
                None if c == BuiltinConstraint::CountMatch => self.count_match,
                None => self.count_marginal,
            };
            if w != 0.0 {
                out.push(ConstraintTerm::builtin(c, w).expect("weights validated"));
            }
        }
        out
    }

    /// Per-row penalty `B×1` on the graph. The batch penalty is its mean;
    /// the count-marginal term is a batch quantity and is added to every row.
    ///
    /// `boxes[t]` is `B×3` at step `t` and `present[t][b]` masks row `b`.
    /// `counts` is the `B×(K+1)` induced count distribution.
    pub fn penalty_graph(&self, g: &mut Graph, boxes: &[Var], present: &[Vec<bool>], counts: Var) -> Var {
        let batch = g.value(counts).rows;
        let mut per_row = g.constant(Tensor::zeros(batch, 1));
        if !self.geometry.is_zero() {
            let geo = geometry_graph(g, boxes, present, &self.scene, self.geometry);
            per_row = g.add(per_row, geo);
        }
        if self.count_match != 0.0 {
            let m = count_match_graph(g, counts, &self.scene.allowed_counts);
            let m = g.scale(m, self.count_match);
            per_row = g.add(per_row, m);
        }
        if self.count_marginal != 0.0 {
            let k = count_marginal_graph(g, counts, &self.scene.allowed_counts);
            let k = g.scale(k, self.count_marginal);
            let ones = g.constant(Tensor::full(batch, 1, 1.0));
            let k = g.matmul(ones, k);
            per_row = g.add(per_row, k);
        }
        per_row
    }
}

/// Weighted geometric functionals per row, `B×1`.
pub fn geometry_graph(g: &mut Graph, boxes: &[Var], present: &[Vec<bool>], cfg: &SceneConfig, w: OverlapWeights) -> Var {
    assert_eq!(boxes.len(), present.len());
    let batch = boxes.first().map(|&b| g.value(b).rows).unwrap_or(0);
    let mut value = Tensor::zeros(batch, 1);
    let mut grads: Vec<Tensor> = boxes.iter().map(|_| Tensor::zeros(batch, 3)).collect();
    for b in 0..batch {
        let steps: Vec<usize> = (0..boxes.len()).filter(|&t| present[t][b]).collect();
        let bxs: Vec<BoundingBox> = steps
            .iter()
            .map(|&t| {
                let r = g.value(boxes[t]).row(b);
                BoundingBox::new(r[0], r[1], r[2])
            })
            .collect();
        let (v, gr) = weighted_geometry_with_grad(&bxs, cfg, &w);
        value.data[b] = v;
        for (k, &t) in steps.iter().enumerate() {
            grads[t].data[b * 3..b * 3 + 3].copy_from_slice(&gr[k]);
        }
    }
    g.custom(boxes, value, move |gout, _, _| {
        grads
            .iter()
            .map(|gt| {
                let mut out = gt.clone();
                for r in 0..out.rows {
                    let s = gout.data[r];
                    out.data[r * 3..r * 3 + 3].iter_mut().for_each(|v| *v *= s);
                }
                Some(out)
            })
            .collect()
    })
}

/// `−ln max(δ, q[b, i*])` per row, with `i*` the most probable allowed count.
pub fn count_match_graph(g: &mut Graph, counts: Var, allowed: &[usize]) -> Var {
    let q = g.value(counts).clone();
    let mut value = Tensor::zeros(q.rows, 1);
    let mut grad = Tensor::zeros(q.rows, q.cols);
    for b in 0..q.rows {
        let row = q.row(b);
        let best =
            allowed.iter().copied().max_by(|&i, &j| row[i].partial_cmp(&row[j]).expect("finite counts")).expect("nonempty allowed set");
        let p = row[best];
        value.data[b] = -p.max(PROB_FLOOR).ln();
        if p > PROB_FLOOR {
            grad.data[b * q.cols + best] = -1.0 / p;
        }
    }
    g.custom(&[counts], value, move |gout, _, _| {
        let mut out = grad.clone();
        for r in 0..out.rows {
            let s = gout.data[r];
            out.data[r * out.cols..(r + 1) * out.cols].iter_mut().for_each(|v| *v *= s);
        }
        vec![Some(out)]
    })
}

/// `KL(uniform_L ‖ floored batch mean)` as a `1×1` node.
pub fn count_marginal_graph(g: &mut Graph, counts: Var, allowed: &[usize]) -> Var {
    let q = g.value(counts).clone();
    let set: BTreeSet<usize> = allowed.iter().copied().collect();
    let u = 1.0 / set.len() as f64;
    let n = q.rows as f64;
    let mean: Vec<f64> = (0..q.cols).map(|c| (0..q.rows).map(|r| q.at(r, c)).sum::<f64>() / n).collect();
    let value: f64 = set.iter().map(|&i| u * (u / mean[i].max(PROB_FLOOR)).ln()).sum();
    let mut grad_row = vec![0.0; q.cols];
    for &i in &set {
        if mean[i] > PROB_FLOOR {
            grad_row[i] = -u / mean[i] / n;
        }
    }
    let (rows, cols) = (q.rows, q.cols);
    g.custom(&[counts], Tensor::scalar(value), move |gout, _, _| {
        let s = gout.item();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                out.data[r * cols + c] = grad_row[c] * s;
            }
        }
        vec![Some(out)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::ObjectLatent;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(cx: f64, cy: f64, s: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, s)
    }

    fn scene(boxes: &[BoundingBox]) -> SceneLatent {
        SceneLatent {
            objects: boxes.iter().map(|b| ObjectLatent { loc: (b.cx, b.cy), scale: b.side, app: vec![] }).collect(),
            continue_probs: vec![],
            n: boxes.len(),
            log_q: 0.0,
            log_p: 0.0,
        }
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge(-3.0), 0.0);
        assert_eq!(hinge(0.0), 0.0);
        assert_eq!(hinge(2.5), 2.5);
    }

    #[test]
    fn geometric_examples() {
        assert_eq!(f1_pairwise_overlap(&[bx(10., 10., 10.), bx(30., 30., 10.)]), 0.0);
        assert_eq!(f1_pairwise_overlap(&[bx(10., 10., 10.), bx(14., 10., 10.)]), 6.0);
        assert_eq!(f1_pairwise_overlap(&[bx(10., 10., 10.)]), 0.0);
        assert_eq!(f1_pairwise_overlap(&[]), 0.0);
        assert_eq!(f_containment(&[bx(25., 25., 20.)], 50.0), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(f_containment(&[bx(3., 25., 10.)], 50.0), (2.0, 0.0, 0.0, 0.0));
        assert_eq!(f_containment(&[bx(25., 48., 10.)], 50.0), (0.0, 0.0, 0.0, 3.0));
        assert_eq!(f6_scale_band(&[bx(0., 0., 20.), bx(0., 0., 15.), bx(0., 0., 25.)], 15.0, 25.0), 0.0);
        assert_eq!(f6_scale_band(&[bx(0., 0., 30.)], 15.0, 25.0), 5.0);
        assert_eq!(f6_scale_band(&[bx(0., 0., 10.)], 15.0, 25.0), 5.0);
        for eps in [0.0, 2.0, 7.5] {
            assert_eq!(f7_scale_similarity(&[bx(0., 0., 20.), bx(5., 5., 20.)], eps), 0.0);
        }
        assert_eq!(f7_scale_similarity(&[bx(0., 0., 20.), bx(0., 0., 24.)], 2.0), 2.0);
        assert_eq!(f7_scale_similarity(&[bx(0., 0., 20.), bx(0., 0., 21.)], 2.0), 0.0);
    }

    #[test]
    fn overlap_regularizer_examples() {
        let cfg = SceneConfig::default();
        let clean = vec![scene(&[bx(12., 12., 20.), bx(38., 38., 20.)]), scene(&[bx(25., 25., 20.)])];
        let all = OverlapWeights([1.0, 1.0, 1.0, 1.0, 1.0, 20.0, 10.0]);
        assert_eq!(overlap_regularizer(&clean, &cfg, &all).unwrap(), 0.0);

        let pair = vec![scene(&[bx(10., 10., 10.), bx(14., 10., 10.)])];
        let only_f1 = OverlapWeights([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(overlap_regularizer(&pair, &cfg, &only_f1).unwrap(), 6.0);

        let messy = vec![scene(&[bx(3., 10., 10.), bx(8., 12., 30.)]), scene(&[bx(45., 48., 8.)])];
        let base = overlap_regularizer(&messy, &cfg, &all).unwrap();
        assert!(base > 0.0);
        let scaled = OverlapWeights(all.0.map(|w| w * 2.5));
        assert!((overlap_regularizer(&messy, &cfg, &scaled).unwrap() - 2.5 * base).abs() < 1e-9);
        assert!(overlap_regularizer(&messy, &cfg, &OverlapWeights([-1.0, 0., 0., 0., 0., 0., 0.])).is_err());
    }

    #[test]
    fn count_penalty_examples() {
        let l = [1, 3];
        let q = CountDistribution::new(vec![0.1, 0.8, 0.05, 0.05, 0.0]).unwrap();
        assert!((count_match_penalty(&q, &l).unwrap() - 0.22314).abs() < 1e-5);
        let q = CountDistribution::new(vec![0.9, 0.05, 0.0, 0.05, 0.0]).unwrap();
        assert!((count_match_penalty(&q, &l).unwrap() - 2.9957).abs() < 1e-4);
        assert_eq!(count_match_penalty(&CountDistribution::point_mass(3, 4), &l).unwrap(), 0.0);

        let even = CountDistribution::new(vec![0.0, 0.5, 0.0, 0.5, 0.0]).unwrap();
        assert!(count_marginal_penalty(&[even], &l).unwrap().abs() < 1e-15);
        let one = CountDistribution::point_mass(1, 4);
        let expect = 0.5 * (0.5 / PROB_FLOOR).ln() + 0.5 * (0.5f64).ln();
        assert!((count_marginal_penalty(&[one], &l).unwrap() - expect).abs() < 1e-12);
        let spread = CountDistribution::new(vec![0.0, 0.25, 0.5, 0.25, 0.0]).unwrap();
        assert!((count_marginal_penalty(&[spread], &l).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(count_marginal_penalty(&[], &l), Err(AsrError::Contract(_))));
    }

    #[test]
    fn count_regularizer_examples() {
        let l = [1, 3];
        let balanced = [CountDistribution::point_mass(1, 3), CountDistribution::point_mass(3, 3)];
        assert!(count_regularizer(&balanced, &l, 10.0, 100.0).unwrap().abs() < 1e-12);
        let batch = [CountDistribution::new(vec![0.1, 0.6, 0.2, 0.1]).unwrap(), CountDistribution::new(vec![0.0, 0.3, 0.3, 0.4]).unwrap()];
        let m = (count_match_penalty(&batch[0], &l).unwrap() + count_match_penalty(&batch[1], &l).unwrap()) / 2.0;
        let k = count_marginal_penalty(&batch, &l).unwrap();
        assert!((count_regularizer(&batch, &l, 10.0, 100.0).unwrap() - (10.0 * m + 100.0 * k)).abs() < 1e-12);
        assert_eq!(count_regularizer(&batch, &l, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn total_penalty_examples() {
        let cfg = SceneConfig::default();
        let scenes = [scene(&[bx(25., 25., 20.)])];
        let counts = [CountDistribution::point_mass(1, 3)];
        let batch = PenaltyBatch { scenes: &scenes, counts: &counts, scene: &cfg };
        let set = ConstraintSet::from_weights(
            &[("overlap".into(), 1.0), ("count_match".into(), 10.0), ("count_marginal".into(), 0.0)],
            cfg.clone(),
        )
        .unwrap();
        assert_eq!(total_penalty(&set.terms(), &batch).unwrap(), 0.0);
        let two = ConstraintTerm::custom("two", 3.0, |_| Ok(2.0)).unwrap();
        assert_eq!(total_penalty(&[two], &batch).unwrap(), 6.0);
        let neg = ConstraintTerm::custom("neg", 3.0, |_| Ok(-4.0)).unwrap();
        assert_eq!(total_penalty(&[neg], &batch).unwrap(), 0.0);
    }

    #[test]
    fn unknown_or_duplicate_ids_are_config_errors() {
        let cfg = SceneConfig::default();
        assert!(matches!(ConstraintSet::from_weights(&[("f9".into(), 1.0)], cfg.clone()), Err(AsrError::Config(_))));
        assert!(matches!(
            ConstraintSet::from_weights(&[("overlap".into(), 1.0), ("overlap".into(), 2.0)], cfg.clone()),
            Err(AsrError::Config(_))
        ));
        assert!(matches!(ConstraintSet::from_weights(&[("overlap".into(), -1.0)], cfg), Err(AsrError::Config(_))));
    }

    #[test]
    fn scene_config_validation() {
        assert!(SceneConfig::default().validate().is_ok());
        let c = SceneConfig { c_min: 30.0, ..SceneConfig::default() };
        assert!(c.validate().is_err());
        let c = SceneConfig { allowed_counts: vec![0, 1, 2, 3], ..SceneConfig::default() };
        assert!(c.validate().is_err());
        let c = SceneConfig { allowed_counts: vec![4], ..SceneConfig::default() };
        assert!(c.validate().is_err());
        let mut c = SceneConfig::default();
        c.allowed_counts.clear();
        assert!(c.validate().is_err());
        let c = SceneConfig { epsilon: -1.0, ..SceneConfig::default() };
        assert!(c.validate().is_err());
    }

    /// Exact rasterization on the grid induced by every box edge: two open
    /// boxes share interior iff some cell midpoint lies inside both.
    pub(crate) fn raster_overlap(boxes: &[BoundingBox]) -> bool {
        let mut xs: Vec<f64> = boxes.iter().flat_map(|b| [b.x_min(), b.x_max()]).collect();
        let mut ys: Vec<f64> = boxes.iter().flat_map(|b| [b.y_min(), b.y_max()]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for xw in xs.windows(2) {
            for yw in ys.windows(2) {
                let (mx, my) = ((xw[0] + xw[1]) / 2.0, (yw[0] + yw[1]) / 2.0);
                if xw[1] <= xw[0] || yw[1] <= yw[0] {
                    continue;
                }
                let inside = boxes.iter().filter(|b| b.x_min() < mx && mx < b.x_max() && b.y_min() < my && my < b.y_max()).count();
                if inside >= 2 {
                    return true;
                }
            }
        }
        false
    }

    #[test]
    fn f1_agrees_with_rasterization() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        for _ in 0..2000 {
            let n = rng.gen_range(0..=5);
            let boxes: Vec<BoundingBox> =
                (0..n).map(|_| bx(rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0), rng.gen_range(1.0..20.0))).collect();
            let near_boundary = (0..n).any(|i| (i + 1..n).any(|j| pair_overlap(&boxes[i], &boxes[j]).abs() < 1e-9));
            if near_boundary {
                continue;
            }
            checked += 1;
            assert_eq!(f1_pairwise_overlap(&boxes) > 0.0, raster_overlap(&boxes), "{boxes:?}");
        }
        assert!(checked > 1900);
        // touching edges is not overlap
        assert!(!raster_overlap(&[bx(10., 10., 10.), bx(20., 10., 10.)]));
        assert_eq!(f1_pairwise_overlap(&[bx(10., 10., 10.), bx(20., 10., 10.)]), 0.0);
    }

    fn away_from_kinks(boxes: &[BoundingBox], cfg: &SceneConfig) -> bool {
        let s = cfg.canvas_size;
        let m = 1e-3;
        for (i, b) in boxes.iter().enumerate() {
            let h = b.side / 2.0;
            for v in [h - b.cx, b.cx + h - s, h - b.cy, b.cy + h - s, cfg.c_min - b.side, b.side - cfg.c_max] {
                if v.abs() < m {
                    return false;
                }
            }
            for o in &boxes[i + 1..] {
                let (dx, dy) = ((b.cx - o.cx).abs(), (b.cy - o.cy).abs());
                if pair_overlap(b, o).abs() < m || (dx - dy).abs() < m || dx < m || dy < m {
                    return false;
                }
                let ds = b.side - o.side;
                if ds.abs() < m || (ds.abs() - cfg.epsilon).abs() < m {
                    return false;
                }
            }
        }
        true
    }

    #[test]
    fn geometry_subgradients_match_finite_differences() {
        let cfg = SceneConfig::default();
        let w = OverlapWeights([1.0, 1.3, 0.7, 1.1, 0.9, 2.0, 1.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut done = 0;
        while done < 100 {
            let n = rng.gen_range(1..=4);
            let boxes: Vec<BoundingBox> =
                (0..n).map(|_| bx(rng.gen_range(-5.0..55.0), rng.gen_range(-5.0..55.0), rng.gen_range(5.0..35.0))).collect();
            if !away_from_kinks(&boxes, &cfg) {
                continue;
            }
            done += 1;
            let (_, grad) = weighted_geometry_with_grad(&boxes, &cfg, &w);
            let h = 1e-6;
            for i in 0..n {
                for c in 0..3 {
                    let bump = |d: f64| {
                        let mut b = boxes.clone();
                        match c {
                            0 => b[i].cx += d,
                            1 => b[i].cy += d,
                            _ => b[i].side += d,
                        }
                        weighted_geometry_with_grad(&b, &cfg, &w).0
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let err = (fd - grad[i][c]).abs() / fd.abs().max(grad[i][c].abs()).max(1.0);
                    assert!(err < 1e-4, "box {i} coord {c}: fd {fd} vs {}", grad[i][c]);
                }
            }
        }
    }

    #[test]
    fn plain_and_weighted_forms_agree() {
        let cfg = SceneConfig::default();
        let boxes = [bx(3., 10., 10.), bx(8., 12., 30.), bx(45., 48., 8.)];
        let f = geometric_functionals(&boxes, &cfg);
        for i in 0..7 {
            let mut w = [0.0; 7];
            w[i] = 1.0;
            let (v, _) = weighted_geometry_with_grad(&boxes, &cfg, &OverlapWeights(w));
            assert!((v - f[i]).abs() < 1e-12, "functional {i}");
        }
    }

    #[test]
    fn graph_penalty_matches_plain_and_differentiates() {
        let cfg = SceneConfig { allowed_counts: vec![1, 3], ..SceneConfig::default() };
        let set = ConstraintSet::from_weights(
            &[
                ("overlap".into(), 1.0),
                ("contain_left".into(), 1.0),
                ("scale_band".into(), 20.0),
                ("scale_similarity".into(), 10.0),
                ("count_match".into(), 10.0),
                ("count_marginal".into(), 100.0),
            ],
            cfg.clone(),
        )
        .unwrap();
        let steps = [
            Tensor::from_vec(2, 3, vec![10.0, 10.0, 12.0, 30.0, 30.0, 28.0]),
            Tensor::from_vec(2, 3, vec![14.5, 11.0, 18.0, 2.0, 40.0, 9.0]),
        ];
        let present = vec![vec![true, true], vec![true, false]];
        let q = Tensor::from_vec(2, 4, vec![0.1, 0.5, 0.3, 0.1, 0.05, 0.15, 0.2, 0.6]);

        let eval = |steps: &[Tensor], q: &Tensor| {
            let mut g = Graph::new();
            let vars: Vec<Var> = steps.iter().map(|t| g.param(t.clone())).collect();
            let qv = g.param(q.clone());
            let r = set.penalty_graph(&mut g, &vars, &present, qv);
            let total = g.mean(r);
            (g, vars, qv, total)
        };
        let (g, vars, qv, total) = eval(&steps, &q);

        let scenes = [scene(&[bx(10.0, 10.0, 12.0), bx(14.5, 11.0, 18.0)]), scene(&[bx(30.0, 30.0, 28.0)])];
        let counts = [CountDistribution::new(q.row(0).to_vec()).unwrap(), CountDistribution::new(q.row(1).to_vec()).unwrap()];
        let plain = total_penalty(&set.terms(), &PenaltyBatch { scenes: &scenes, counts: &counts, scene: &cfg }).unwrap();
        assert!((g.value(total).item() - plain).abs() < 1e-9, "{} vs {plain}", g.value(total).item());

        let grads = g.backward(total);
        let h = 1e-6;
        for (t, v) in vars.iter().enumerate() {
            let an = grads.get(*v).unwrap();
            for k in 0..6 {
                let mut up = steps.clone();
                up[t].data[k] += h;
                let mut dn = steps.clone();
                dn[t].data[k] -= h;
                let fd = (g_item(eval(&up, &q)) - g_item(eval(&dn, &q))) / (2.0 * h);
                assert!((fd - an.data[k]).abs() < 1e-5 * fd.abs().max(1.0), "step {t} entry {k}: {fd} vs {}", an.data[k]);
            }
        }
        let an = grads.get(qv).unwrap();
        for k in 0..8 {
            let mut up = q.clone();
            up.data[k] += h;
            let mut dn = q.clone();
            dn.data[k] -= h;
            let fd = (g_item(eval(&steps, &up)) - g_item(eval(&steps, &dn))) / (2.0 * h);
            assert!((fd - an.data[k]).abs() < 1e-4 * fd.abs().max(1.0), "q entry {k}: {fd} vs {}", an.data[k]);
        }
    }

    fn g_item(t: (Graph, Vec<Var>, Var, Var)) -> f64 {
        t.0.value(t.3).item()
    }

    proptest! {
        #[test]
        fn functionals_are_nonnegative(
            raw in prop::collection::vec((-100.0f64..150.0, -100.0f64..150.0, -40.0f64..80.0), 0..6),
            eps in 0.0f64..10.0,
        ) {
            let boxes: Vec<BoundingBox> = raw.iter().map(|&(x, y, s)| bx(x, y, s)).collect();
            let cfg = SceneConfig { epsilon: eps, ..SceneConfig::default() };
            for f in geometric_functionals(&boxes, &cfg) {
                prop_assert!(f >= 0.0 && f.is_finite());
            }
        }

        #[test]
        fn translation_covariance(
            raw in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0, 1.0f64..30.0), 0..5),
            d in -20.0f64..20.0,
        ) {
            let boxes: Vec<BoundingBox> = raw.iter().map(|&(x, y, s)| bx(x, y, s)).collect();
            let moved: Vec<BoundingBox> = boxes.iter().map(|b| b.translated(d, d)).collect();
            prop_assert!((f1_pairwise_overlap(&boxes) - f1_pairwise_overlap(&moved)).abs() < 1e-9);
            prop_assert_eq!(f6_scale_band(&boxes, 15.0, 25.0), f6_scale_band(&moved, 15.0, 25.0));
            prop_assert_eq!(f7_scale_similarity(&boxes, 2.0), f7_scale_similarity(&moved, 2.0));
            // containment shifts exactly as its formula says
            let (l, r, t, b) = f_containment(&moved, 50.0);
            let expect = moved.iter().fold((0.0, 0.0, 0.0, 0.0), |a, m| {
                let h = m.side / 2.0;
                (a.0 + hinge(h - m.cx), a.1 + hinge(m.cx + h - 50.0), a.2 + hinge(h - m.cy), a.3 + hinge(m.cy + h - 50.0))
            });
            prop_assert_eq!((l, r, t, b), expect);
        }

        #[test]
        fn count_penalties_vanish_exactly_on_valid_posteriors(i in 0usize..4, j in 0usize..4) {
            let l = [i];
            prop_assert_eq!(count_match_penalty(&CountDistribution::point_mass(i, 3), &l).unwrap(), 0.0);
            if i != j {
                prop_assert!(count_match_penalty(&CountDistribution::point_mass(j, 3), &l).unwrap() > 0.0);
            }
        }
    }
}
