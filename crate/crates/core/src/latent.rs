//! Latent scene descriptions and the count arithmetic shared by every model part.
//!
//! A scene of `n` objects is encoded by per-step presence decisions: `n`
//! ones followed by a zero, or `K` ones when the step budget runs out.
//! [`CountDistribution`] is the categorical view of the same process.

use serde::{Deserialize, Serialize};

use crate::error::{AsrError, Result};

/// Floor applied to probabilities before taking logarithms in count penalties.
pub const PROB_FLOOR: f64 = 1e-6;

/// Axis-aligned square box in pixel units.
///
/// The extent is `[cx - side/2, cx + side/2] × [cy - side/2, cy + side/2]`.
/// No sign constraint is placed on `side`; constraint penalties handle
/// invalid geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, side: f64) -> Self {
        BoundingBox { cx, cy, side }
    }

    pub fn x_min(&self) -> f64 {
        self.cx - self.side / 2.0
    }

    pub fn x_max(&self) -> f64 {
        self.cx + self.side / 2.0
    }

    pub fn y_min(&self) -> f64 {
        self.cy - self.side / 2.0
    }

    pub fn y_max(&self) -> f64 {
        self.cy + self.side / 2.0
    }

    pub fn area(&self) -> f64 {
        self.side.max(0.0).powi(2)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        BoundingBox { cx: self.cx + dx, cy: self.cy + dy, side: self.side }
    }
}

/// Latents of a single object: centre, box side, appearance code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectLatent {
    pub loc: (f64, f64),
    pub scale: f64,
    pub app: Vec<f64>,
}

impl ObjectLatent {
    /// The `z⁰ = 0` object that seeds both recurrences.
    pub fn zero(app_dim: usize) -> Self {
        ObjectLatent { loc: (0.0, 0.0), scale: 0.0, app: vec![0.0; app_dim] }
    }
}

/// One sampled scene: the objects plus the presence probabilities seen while
/// unrolling and the log-densities of the sampled trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLatent {
    pub objects: Vec<ObjectLatent>,
    /// Probability of continuing (`z_pres = 1`) at each unrolled step.
    pub continue_probs: Vec<f64>,
    pub n: usize,
    pub log_q: f64,
    pub log_p: f64,
}

impl SceneLatent {
    /// Presence vector: `n` ones, then a terminating zero unless `n == k`.
    pub fn z_pres(&self, k: usize) -> Vec<u8> {
        let mut z = vec![1u8; self.n];
        if self.n < k {
            z.push(0);
        }
        z
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.objects.iter().map(box_from_latent).collect()
    }
}

/// Categorical distribution over object counts `0..=K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountDistribution {
    pub probs: Vec<f64>,
}

impl CountDistribution {
    /// Validates entries in `[0, 1]` summing to one within `1e-6`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(AsrError::Contract("count distribution needs at least one entry".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(AsrError::Contract(format!("count probabilities out of [0,1]: {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(AsrError::Contract(format!("count probabilities sum to {total}")));
        }
        Ok(CountDistribution { probs })
    }

    pub fn point_mass(i: usize, k: usize) -> Self {
        let mut probs = vec![0.0; k + 1];
        probs[i] = 1.0;
        CountDistribution { probs }
    }

    /// Largest representable count.
    pub fn max_count(&self) -> usize {
        self.probs.len() - 1
    }

    /// Entrywise mean of a nonempty batch.
    pub fn mean(batch: &[CountDistribution]) -> Result<Self> {
        let first = batch.first().ok_or_else(|| AsrError::Contract("mean of an empty batch of count distributions".into()))?;
        let mut probs = vec![0.0; first.probs.len()];
        for q in batch {
            if q.probs.len() != probs.len() {
                return Err(AsrError::Contract("count distributions of different support".into()));
            }
            for (m, p) in probs.iter_mut().zip(&q.probs) {
                *m += p;
            }
        }
        let n = batch.len() as f64;
        probs.iter_mut().for_each(|m| *m /= n);
        Ok(CountDistribution { probs })
    }
}

/// Count distribution induced by per-step continuation probabilities.
///
/// `probs[n] = p₁⋯pₙ·(1 − pₙ₊₁)` for `n < K` and `probs[K] = p₁⋯p_K`: the
/// process is forced to stop after `K` steps.
pub fn induced_count_distribution(continue_probs: &[f64], k: usize) -> Result<CountDistribution> {
    if continue_probs.len() != k {
        return Err(AsrError::Contract(format!("expected {k} continuation probabilities, got {}", continue_probs.len())));
    }
    if let Some(p) = continue_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(AsrError::Contract(format!("continuation probability {p} outside [0,1]")));
    }
    let mut probs = Vec::with_capacity(k + 1);
    let mut running = 1.0;
    for &p in continue_probs {
        probs.push(running * (1.0 - p));
        running *= p;
    }
    probs.push(running);
    Ok(CountDistribution { probs })
}

/// `KL(δᵢ ‖ q) = −ln q(i)`, with `q(i)` floored at [`PROB_FLOOR`].
pub fn point_mass_kl(i: usize, q: &CountDistribution) -> Result<f64> {
    let p = q.probs.get(i).ok_or_else(|| AsrError::Contract(format!("count {i} outside support 0..={}", q.max_count())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

pub fn box_from_latent(o: &ObjectLatent) -> BoundingBox {
    BoundingBox { cx: o.loc.0, cy: o.loc.1, side: o.scale }
}
