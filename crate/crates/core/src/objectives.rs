//! Contrastive objectives: the plain InfoNCE-style loss, the debiased loss
//! with a per-anchor class-probability estimate, and similarity/label based
//! negative handling baselines.
//!
//! All per-anchor quantities are evaluated after shifting every exponent by
//! the largest of the positive and negative scores, so large radii do not
//! overflow.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, Input};
use crate::error::{Error, Result};
use crate::mixture::{ClassId, MixtureSpec, Mode};
use crate::par;
use crate::rng::SeedStream;

/// Scores that enter one anchor's loss.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorInputs<'a> {
    /// `s(x, x+)`.
    pub pos_score: f64,
    /// `s(x, u_n)`, n = 1..N.
    pub neg_scores: &'a [f64],
    /// `s(x, v_m)`, m = 1..M.
    pub pos_set_scores: &'a [f64],
    pub eta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Uncorrected contrastive loss.
    Cl,
    /// Debiased contrastive loss.
    Dcl,
}

/// Loss value and its partial derivatives for one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLoss {
    pub loss: f64,
    /// True when the estimator hit its lower bound `e^{-gamma^2}`.
    pub clamped: bool,
    pub d_pos: f64,
    pub d_neg: Vec<f64>,
    pub d_weights: Vec<f64>,
    pub d_pos_set: Vec<f64>,
    /// Direct dependence on gamma through the clamp value.
    pub d_gamma: f64,
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::EtaOutOfRange(eta));
    }
    Ok(())
}

fn check_nonempty(inp: &EstimatorInputs<'_>, need_pos_set: bool) -> Result<()> {
    if inp.neg_scores.is_empty() {
        return Err(Error::Empty("negative scores (N >= 1)"));
    }
    if need_pos_set && inp.pos_set_scores.is_empty() {
        return Err(Error::Empty("positive-set scores (M >= 1)"));
    }
    Ok(())
}

/// Core evaluation shared by every loss in this module.
///
/// `weights` scale the negative terms; they must sum to the number of
/// negatives so `N` keeps its meaning. With `objective = Cl` the estimator is
/// the plain sum of negative exponentials and no clamp is applied.
pub fn anchor_loss(inp: &EstimatorInputs<'_>, weights: Option<&[f64]>, objective: Objective) -> Result<AnchorLoss> {
    let debias = objective == Objective::Dcl;
    check_nonempty(inp, debias)?;
    if debias {
        check_eta(inp.eta)?;
    }
    if let Some(w) = weights {
        if w.len() != inp.neg_scores.len() {
            return Err(Error::DimensionMismatch {
                expected: inp.neg_scores.len(),
                got: w.len(),
            });
        }
    }
    let n = inp.neg_scores.len() as f64;
    let m_count = inp.pos_set_scores.len() as f64;
    let shift = inp
        .neg_scores
        .iter()
        .copied()
        .fold(inp.pos_score, f64::max);
    let a = (inp.pos_score - shift).exp();
    let neg_exp: Vec<f64> = inp.neg_scores.iter().map(|s| (s - shift).exp()).collect();
    let s_u = match weights {
        Some(w) => neg_exp.iter().zip(w).map(|(e, w)| w * e).fold(0.0, |acc, v| acc + v),
        None => neg_exp.iter().fold(0.0, |acc, v| acc + v),
    };

    let (denom_neg, clamped, scale, pos_set_exp, clamp_value) = if debias {
        let pos_set_exp: Vec<f64> = inp.pos_set_scores.iter().map(|s| (s - shift).exp()).collect();
        let s_v = pos_set_exp.iter().fold(0.0, |acc, v| acc + v);
        // N * g0 = (S_u - eta N S_v / M) / (1 - eta).
        let n_g0 = (s_u - inp.eta * n * s_v / m_count) / (1.0 - inp.eta);
        let clamp_value = n * (-inp.gamma * inp.gamma - shift).exp();
        if n_g0 >= clamp_value {
            (n_g0, false, 1.0 / (1.0 - inp.eta), pos_set_exp, clamp_value)
        } else {
            (clamp_value, true, 0.0, pos_set_exp, clamp_value)
        }
    } else {
        (s_u, false, 1.0, Vec::new(), 0.0)
    };

    let denom = a + denom_neg;
    let loss = denom.ln() + shift - inp.pos_score;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("anchor loss (denominator {denom:e})")));
    }

    let d_pos = a / denom - 1.0;
    let d_weights: Vec<f64> = neg_exp.iter().map(|e| scale * e / denom).collect();
    let d_neg: Vec<f64> = match weights {
        Some(w) => d_weights.iter().zip(w).map(|(d, w)| d * w).collect(),
        None => d_weights.clone(),
    };
    let d_pos_set: Vec<f64> = if debias && !clamped {
        pos_set_exp
            .iter()
            .map(|e| -scale * inp.eta * n / m_count * e / denom)
            .collect()
    } else {
        vec![0.0; inp.pos_set_scores.len()]
    };
    let d_gamma = if clamped {
        -2.0 * inp.gamma * clamp_value / denom
    } else {
        0.0
    };
    Ok(AnchorLoss {
        loss,
        clamped,
        d_pos,
        d_neg,
        d_weights,
        d_pos_set,
        d_gamma,
    })
}

/// `-log(e^{s+} / (e^{s+} + sum_n e^{s_n}))`; `eta` is ignored.
pub fn contrastive_loss(inp: &EstimatorInputs<'_>) -> Result<f64> {
    Ok(anchor_loss(inp, None, Objective::Cl)?.loss)
}

/// Unclamped estimator
/// `g0 = mean_n e^{s_n} / (1 - eta) - eta / (1 - eta) * mean_m e^{s_m}`.
pub fn g0_estimate(inp: &EstimatorInputs<'_>) -> Result<f64> {
    check_nonempty(inp, true)?;
    check_eta(inp.eta)?;
    let mean_u = inp.neg_scores.iter().map(|s| s.exp()).sum::<f64>() / inp.neg_scores.len() as f64;
    let mean_v = inp.pos_set_scores.iter().map(|s| s.exp()).sum::<f64>() / inp.pos_set_scores.len() as f64;
    Ok((mean_u - inp.eta * mean_v) / (1.0 - inp.eta))
}

/// `max(g0, e^{-gamma^2})`.
pub fn g_estimate(inp: &EstimatorInputs<'_>) -> Result<f64> {
    Ok(g0_estimate(inp)?.max((-inp.gamma * inp.gamma).exp()))
}

/// `-log(e^{s+} / (e^{s+} + N g))` with the clamped estimator.
pub fn debiased_loss(inp: &EstimatorInputs<'_>) -> Result<f64> {
    Ok(anchor_loss(inp, None, Objective::Dcl)?.loss)
}

/// Treatment of in-batch negatives before the loss is formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NegativeHandling {
    None,
    /// Drop negatives whose similarity to the positive exceeds `threshold`.
    RemoveBySim { threshold: f64 },
    /// Weight negatives by `exp(-sim / temperature)`, renormalized to sum to N.
    ReweightBySim { temperature: f64 },
    /// Keep the `keep_count` negatives least similar to the positive.
    ResampleBySim { keep_count: usize },
    /// Drop negatives sharing the anchor's latent class (oracle).
    RemoveByLabel,
}

impl Default for NegativeHandling {
    fn default() -> Self {
        NegativeHandling::None
    }
}

impl NegativeHandling {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NegativeHandling::RemoveBySim { threshold } if threshold.is_nan() => Err(Error::InvalidArgument {
                arg: "threshold",
                reason: "must not be NaN".into(),
            }),
            NegativeHandling::ReweightBySim { temperature } if !(temperature > 0.0) => {
                Err(Error::InvalidArgument {
                    arg: "temperature",
                    reason: format!("must be positive, got {temperature}"),
                })
            }
            NegativeHandling::ResampleBySim { keep_count: 0 } => Err(Error::InvalidArgument {
                arg: "keep_count",
                reason: "must be at least 1".into(),
            }),
            _ => Ok(()),
        }
    }
}

/// Result of [`apply_negative_handling`]: indices into the candidate list and
/// optional weights aligned with `kept`.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSelection {
    pub kept: Vec<usize>,
    pub weights: Option<Vec<f64>>,
    /// Every candidate was removed and the least similar one was restored.
    pub fallback: bool,
}

fn least_similar(sims: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in sims.iter().enumerate() {
        if *s < sims[best] {
            best = i;
        }
    }
    best
}

/// Filters or weights candidate negatives.
///
/// `pos_neg_sims[n]` is `similarity(positive, negative_n)`; labels are only
/// read by [`NegativeHandling::RemoveByLabel`].
pub fn apply_negative_handling(
    strategy: &NegativeHandling,
    pos_neg_sims: &[f64],
    anchor_label: ClassId,
    neg_labels: &[ClassId],
) -> Result<NegativeSelection> {
    strategy.validate()?;
    let n = pos_neg_sims.len();
    if n == 0 {
        return Err(Error::Empty("negative candidates"));
    }
    let all: Vec<usize> = (0..n).collect();
    let kept: Vec<usize> = match *strategy {
        NegativeHandling::None => all,
        NegativeHandling::RemoveBySim { threshold } => {
            all.into_iter().filter(|&i| !(pos_neg_sims[i] > threshold)).collect()
        }
        NegativeHandling::RemoveByLabel => {
            if neg_labels.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: neg_labels.len(),
                });
            }
            all.into_iter().filter(|&i| neg_labels[i] != anchor_label).collect()
        }
        NegativeHandling::ResampleBySim { keep_count } => {
            let mut order = all;
            // Stable sort keeps index order among ties.
            order.sort_by(|&i, &j| pos_neg_sims[i].total_cmp(&pos_neg_sims[j]));
            order.truncate(keep_count.min(n));
            order.sort_unstable();
            order
        }
        NegativeHandling::ReweightBySim { temperature } => {
            let logits: Vec<f64> = pos_neg_sims.iter().map(|s| -s / temperature).collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let weights = e.iter().map(|v| n as f64 * v / z).collect();
            return Ok(NegativeSelection {
                kept: all,
                weights: Some(weights),
                fallback: false,
            });
        }
    };
    if kept.is_empty() {
        return Ok(NegativeSelection {
            kept: vec![least_similar(pos_neg_sims)],
            weights: None,
            fallback: true,
        });
    }
    Ok(NegativeSelection {
        kept,
        weights: None,
        fallback: false,
    })
}

/// Chain rule through the reweighting softmax: maps `dL/dw` to `dL/dsim`.
pub fn reweight_sim_grad(weights: &[f64], d_weights: &[f64], temperature: f64) -> Vec<f64> {
    let n = weights.len() as f64;
    let mean: f64 = weights.iter().zip(d_weights).map(|(w, d)| w / n * d).sum();
    weights
        .iter()
        .zip(d_weights)
        .map(|(w, d)| -(w / temperature) * (d - mean))
        .collect()
}

/// Configuration of the batch objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub objective: Objective,
    #[serde(default)]
    pub negatives: NegativeHandling,
    /// Average the anchor->positive and positive->anchor directions.
    #[serde(default)]
    pub symmetrize: bool,
    /// Use only the next `k` batch rows (cyclically) as negatives instead of
    /// all `B - 1`.
    #[serde(default)]
    pub max_negatives: Option<usize>,
}

impl LossConfig {
    pub fn new(objective: Objective) -> Self {
        Self {
            objective,
            negatives: NegativeHandling::None,
            symmetrize: false,
            max_negatives: None,
        }
    }
}

/// Loss and embedding gradients of a batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub d_anchor: Array2<f64>,
    pub d_positive: Array2<f64>,
    /// One gradient matrix per extra same-class draw set.
    pub d_pos_set: Vec<Array2<f64>>,
    pub d_gamma: f64,
    pub clamp_fraction: f64,
    pub fallback_count: usize,
}

struct AnchorContribution {
    loss: f64,
    clamped: bool,
    fallback: bool,
    d_gamma: f64,
    /// `(row, coefficient)` pairs: dL/ds(anchor_i, positive_row).
    score_grads: Vec<(usize, f64)>,
    /// `(row, coefficient)` pairs: dL/dsim(positive_i, positive_row).
    sim_grads: Vec<(usize, f64)>,
    pos_set_grads: Vec<f64>,
}

fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b)
}

/// One direction of the in-batch loss: anchor `i` is paired with positive
/// `i`; every other positive is a candidate negative.
fn directional_loss(
    anchors: &Array2<f64>,
    positives: &Array2<f64>,
    pos_set: &[Array2<f64>],
    labels: &[ClassId],
    etas: &[f64],
    gamma: f64,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    let b = anchors.nrows();
    let contributions: Vec<Result<AnchorContribution>> = par::map_range(b, |i| {
        let a_i = anchors.row(i);
        let p_i = positives.row(i);
        let cand: Vec<usize> = match cfg.max_negatives {
            Some(k) => (1..=k.min(b - 1)).map(|o| (i + o) % b).collect(),
            None => (0..b).filter(|&j| j != i).collect(),
        };
        let sims: Vec<f64> = cand.iter().map(|&j| dot(p_i, positives.row(j))).collect();
        let cand_labels: Vec<ClassId> = cand.iter().map(|&j| labels[j]).collect();
        let sel = apply_negative_handling(&cfg.negatives, &sims, labels[i], &cand_labels)?;
        let neg_scores: Vec<f64> = sel.kept.iter().map(|&k| dot(a_i, positives.row(cand[k]))).collect();
        let pos_score = dot(a_i, p_i);
        let extra: Vec<f64> = pos_set.iter().map(|v| dot(a_i, v.row(i))).collect();
        let pos_set_scores: Vec<f64> = if pos_set.is_empty() { vec![pos_score] } else { extra };
        let inp = EstimatorInputs {
            pos_score,
            neg_scores: &neg_scores,
            pos_set_scores: &pos_set_scores,
            eta: etas[i],
            gamma,
        };
        let out = anchor_loss(&inp, sel.weights.as_deref(), cfg.objective)?;
        let mut score_grads: Vec<(usize, f64)> = sel
            .kept
            .iter()
            .zip(&out.d_neg)
            .map(|(&k, &d)| (cand[k], d))
            .collect();
        let mut d_pos = out.d_pos;
        let pos_set_grads = if pos_set.is_empty() {
            d_pos += out.d_pos_set[0];
            Vec::new()
        } else {
            out.d_pos_set.clone()
        };
        score_grads.push((i, d_pos));
        let sim_grads = match (cfg.negatives, &sel.weights) {
            (NegativeHandling::ReweightBySim { temperature }, Some(w)) => {
                let ds = reweight_sim_grad(w, &out.d_weights, temperature);
                cand.iter().copied().zip(ds).collect()
            }
            _ => Vec::new(),
        };
        Ok(AnchorContribution {
            loss: out.loss,
            clamped: out.clamped,
            fallback: sel.fallback,
            d_gamma: out.d_gamma,
            score_grads,
            sim_grads,
            pos_set_grads,
        })
    });

    let inv_b = 1.0 / b as f64;
    let mut d_anchor = Array2::zeros(anchors.raw_dim());
    let mut d_positive = Array2::zeros(positives.raw_dim());
    let mut d_pos_set: Vec<Array2<f64>> = pos_set.iter().map(|v| Array2::zeros(v.raw_dim())).collect();
    let (mut loss, mut d_gamma, mut clamped, mut fallbacks) = (0.0, 0.0, 0usize, 0usize);
    for (i, c) in contributions.into_iter().enumerate() {
        let c = c?;
        loss += c.loss;
        d_gamma += c.d_gamma;
        clamped += c.clamped as usize;
        fallbacks += c.fallback as usize;
        for (j, g) in c.score_grads {
            let g = g * inv_b;
            d_anchor.row_mut(i).scaled_add(g, &positives.row(j));
            d_positive.row_mut(j).scaled_add(g, &anchors.row(i));
        }
        for (j, g) in c.sim_grads {
            let g = g * inv_b;
            d_positive.row_mut(i).scaled_add(g, &positives.row(j));
            d_positive.row_mut(j).scaled_add(g, &positives.row(i));
        }
        for (m, g) in c.pos_set_grads.into_iter().enumerate() {
            let g = g * inv_b;
            d_anchor.row_mut(i).scaled_add(g, &pos_set[m].row(i));
            d_pos_set[m].row_mut(i).scaled_add(g, &anchors.row(i));
        }
    }
    Ok(BatchLoss {
        loss: loss * inv_b,
        d_anchor,
        d_positive,
        d_pos_set,
        d_gamma: d_gamma * inv_b,
        clamp_fraction: clamped as f64 * inv_b,
        fallback_count: fallbacks,
    })
}

/// In-batch objective over paired embeddings.
///
/// Row `i` of `anchors` and `positives` form the positive pair; the other
/// rows of `positives` are the negatives of anchor `i`. `pos_set` holds
/// optional extra same-class draws (one matrix per m); when empty the
/// positive itself is the single `v_1`. `etas[i]` is the class-probability
/// estimate of anchor `i` and is ignored by [`Objective::Cl`].
pub fn batch_loss(
    anchors: &Array2<f64>,
    positives: &Array2<f64>,
    pos_set: &[Array2<f64>],
    labels: &[ClassId],
    etas: &[f64],
    gamma: f64,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    let b = anchors.nrows();
    if cfg.max_negatives == Some(0) {
        return Err(Error::InvalidArgument {
            arg: "max_negatives",
            reason: "must be at least 1".into(),
        });
    }
    if b < 2 {
        return Err(Error::InvalidArgument {
            arg: "batch",
            reason: "need at least two pairs for in-batch negatives".into(),
        });
    }
    if positives.dim() != anchors.dim() || labels.len() != b || etas.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            got: positives.nrows().min(labels.len()).min(etas.len()),
        });
    }
    let forward = directional_loss(anchors, positives, pos_set, labels, etas, gamma, cfg)?;
    if !cfg.symmetrize {
        return Ok(forward);
    }
    let back = directional_loss(positives, anchors, &[], labels, etas, gamma, cfg)?;
    Ok(BatchLoss {
        loss: 0.5 * (forward.loss + back.loss),
        d_anchor: 0.5 * (&forward.d_anchor + &back.d_positive),
        d_positive: 0.5 * (&forward.d_positive + &back.d_anchor),
        d_pos_set: forward.d_pos_set.iter().map(|m| 0.5 * m).collect(),
        d_gamma: 0.5 * (forward.d_gamma + back.d_gamma),
        clamp_fraction: 0.5 * (forward.clamp_fraction + back.clamp_fraction),
        fallback_count: forward.fallback_count + back.fallback_count,
    })
}

/// Embeddings and pairwise scores of every alphabet point of a discrete spec.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub embeddings: Array2<f64>,
    pub scores: Array2<f64>,
    pub gamma: f64,
}

impl ScoreTable {
    pub fn from_embeddings(embeddings: Array2<f64>, gamma: f64) -> Self {
        let scores = embeddings.dot(&embeddings.t());
        Self {
            embeddings,
            scores,
            gamma,
        }
    }

    pub fn from_encoder(spec: &MixtureSpec, params: &EncoderParams) -> Result<Self> {
        let alphabet = spec.alphabet().ok_or(Error::RequiresDiscrete)?;
        let inputs: Vec<Input<'_>> = alphabet.iter().map(|p| Input::Features(p)).collect();
        let emb = params.encode_batch(&inputs)?;
        Ok(Self::from_embeddings(emb, params.gamma))
    }

    /// Scores divided by gamma^2, i.e. the table of a radius-1 encoder.
    pub fn unit_scores(&self) -> Array2<f64> {
        &self.scores / (self.gamma * self.gamma)
    }

    pub fn n_points(&self) -> usize {
        self.scores.nrows()
    }
}

/// `E_{x- ~ E_c}[e^{s(x_i, x-)}]` for every point `i`.
pub fn true_negative_expectations(spec: &MixtureSpec, scores: &Array2<f64>, c: ClassId) -> Result<Vec<f64>> {
    let tn = spec.true_negative_pmf(c)?;
    Ok((0..scores.nrows())
        .map(|i| tn.iter().enumerate().map(|(k, p)| p * scores[[i, k]].exp()).sum())
        .collect())
}

fn require_two_classes(spec: &MixtureSpec) -> Result<()> {
    if spec.n_classes() < 2 {
        return Err(Error::InvalidArgument {
            arg: "spec",
            reason: "the asymptotic loss needs at least two classes".into(),
        });
    }
    Ok(())
}

/// Asymptotic debiased loss with negatives drawn from the true-negative
/// distribution, enumerated exactly over a discrete spec:
/// `E_{c, x, x+ ~ D_c}[log(e^{s+} + Q E_{E_c} e^{s(x, x-)}) - s+]`.
/// `negative_weight` is `Q` (the number of negatives `N`).
pub fn asymptotic_loss_exact(spec: &MixtureSpec, scores: &Array2<f64>, negative_weight: f64) -> Result<f64> {
    require_two_classes(spec)?;
    if spec.mode() != Mode::Discrete {
        return Err(Error::RequiresDiscrete);
    }
    let mut total = 0.0;
    for c in 0..spec.n_classes() {
        let rho = spec.class_dist().prob(c);
        if rho == 0.0 {
            continue;
        }
        let inner = true_negative_expectations(spec, scores, c)?;
        let pmf = spec.class_pmf(c)?;
        let mut class_total = 0.0;
        for (i, pi) in pmf.iter().enumerate() {
            if *pi == 0.0 {
                continue;
            }
            for (j, pj) in pmf.iter().enumerate() {
                if *pj == 0.0 {
                    continue;
                }
                let s = scores[[i, j]];
                let q = negative_weight * inner[i];
                // log(e^s + q) - s, stably.
                class_total += pi * pj * (-s + s.max(q.ln()) + (1.0 + (-(s - q.ln()).abs()).exp()).ln());
            }
        }
        total += rho * class_total;
    }
    Ok(total)
}

/// Monte Carlo estimate of the asymptotic loss for a continuous spec:
/// `samples` draws of `(x, x+)`, each with `inner` true-negative draws.
pub fn asymptotic_loss_mc(
    spec: &MixtureSpec,
    params: &EncoderParams,
    negative_weight: f64,
    samples: usize,
    inner: usize,
    seed: SeedStream,
) -> Result<f64> {
    require_two_classes(spec)?;
    if samples == 0 || inner == 0 {
        return Err(Error::Empty("Monte Carlo sample count"));
    }
    let terms: Vec<Result<f64>> = par::map_range(samples, |t| {
        let mut rng = seed.fork(t as u64).rng();
        let x = spec.sample_marginal(&mut rng);
        let xp = spec.sample_conditional(x.latent_class, &mut rng)?;
        let ex = params.encode(&x)?;
        let ep = params.encode(&xp)?;
        let s = crate::encoder::similarity(&ex, &ep)?;
        let mut acc = 0.0;
        for _ in 0..inner {
            let neg = spec.sample_true_negative(x.latent_class, &mut rng)?;
            acc += crate::encoder::similarity(&ex, &params.encode(&neg)?)?.exp();
        }
        let q = negative_weight * acc / inner as f64;
        Ok((s.exp() + q).ln() - s)
    });
    let vals: Result<Vec<f64>> = terms.into_iter().collect();
    Ok(par::ordered_sum(&vals?) / samples as f64)
}
