//! Numerical checks of the finite-sample gap bound between the asymptotic and
//! the sampled debiased loss, of the supervised-loss ordering, and of the
//! Lipschitz factors used in the generalization argument.
//!
//! Gap machinery works at radius 1: scores are divided by `gamma^2` first.

use std::f64::consts::{E, PI};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::eta::{EtaProvider, EtaVariant};
use crate::mixture::{sample_index, ClassId, DataPoint, MixtureSpec, Mode};
use crate::objectives::{asymptotic_loss_exact, true_negative_expectations, ScoreTable};
use crate::optim;
use crate::par;
use crate::rng::SeedStream;

/// Which coefficients multiply the three terms of the bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundConstants {
    /// Constants carried through to the end of the proof: sound.
    #[default]
    Proof,
    /// Constants printed in the statement.
    Statement,
}

impl BoundConstants {
    /// `(C_N, C_M, C_eta)`.
    pub fn coefficients(self) -> (f64, f64, f64) {
        let c_n = 3.0 * E * E * (PI / 2.0).sqrt();
        match self {
            BoundConstants::Proof => (c_n, c_n, 3.0 * E * E),
            BoundConstants::Statement => (c_n, 2.0 * E * E, 2.0 * E * E),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prop1Terms {
    pub term_n: f64,
    pub term_m: f64,
    pub term_eta: f64,
}

impl Prop1Terms {
    pub fn total(&self) -> f64 {
        self.term_n + self.term_m + self.term_eta
    }
}

/// An anchor configuration `(class, point, report)` with its probability
/// under `D` and the provider's estimate at it.
#[derive(Debug, Clone)]
struct AnchorState {
    class: ClassId,
    point: usize,
    weight: f64,
    eta: f64,
}

fn require_discrete(spec: &MixtureSpec) -> Result<()> {
    if spec.mode() != Mode::Discrete {
        return Err(Error::RequiresDiscrete);
    }
    Ok(())
}

fn anchor_states(spec: &MixtureSpec, eta: &EtaProvider) -> Result<Vec<AnchorState>> {
    require_discrete(spec)?;
    let alphabet = spec.alphabet().ok_or(Error::RequiresDiscrete)?;
    let token_dependent = matches!(eta.variant(), EtaVariant::LmLogLinear { .. });
    let mut states = Vec::new();
    for c in 0..spec.n_classes() {
        let rho = spec.class_dist().prob(c);
        if rho == 0.0 {
            continue;
        }
        let reports = if token_dependent {
            spec.report_pmf(c)?
        } else {
            vec![(spec.templates(c)[0].tokens.clone(), 1.0)]
        };
        for (i, p) in spec.class_pmf(c)?.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            for (tokens, q) in &reports {
                let x = DataPoint {
                    features: alphabet[i].clone(),
                    tokens: Some(tokens.clone()),
                    latent_class: c,
                    point: Some(i),
                };
                states.push(AnchorState {
                    class: c,
                    point: i,
                    weight: rho * p * q,
                    eta: eta.eta_of(&x)?,
                });
            }
        }
    }
    Ok(states)
}

fn check_counts(n: usize, m: usize) -> Result<()> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument {
            arg: "N, M",
            reason: "both must be at least 1".into(),
        });
    }
    Ok(())
}

fn require_nondegenerate_prior(spec: &MixtureSpec) -> Result<()> {
    if spec.class_dist().rho_max() >= 1.0 {
        return Err(Error::NoOtherClass(0));
    }
    Ok(())
}

/// Right-hand side of the gap bound, with expectations over `x ~ D`
/// computed exactly.
pub fn prop1_rhs(
    spec: &MixtureSpec,
    eta: &EtaProvider,
    n: usize,
    m: usize,
    constants: BoundConstants,
) -> Result<Prop1Terms> {
    check_counts(n, m)?;
    require_discrete(spec)?;
    require_nondegenerate_prior(spec)?;
    let (c_n, c_m, c_eta) = constants.coefficients();
    let rho = spec.class_dist().probs();
    let inv: f64 = rho.iter().map(|r| r / (1.0 - r)).sum();
    let odds: f64 = rho.iter().map(|r| r * r / (1.0 - r)).sum();
    let mis: f64 = anchor_states(spec, eta)?
        .iter()
        .map(|s| {
            let r = rho[s.class];
            s.weight * (1.0 / (1.0 - s.eta) - 1.0 / (1.0 - r)).abs()
        })
        .sum();
    Ok(Prop1Terms {
        term_n: c_n / (n as f64).sqrt() * inv,
        term_m: c_m / (m as f64).sqrt() * odds,
        term_eta: c_eta * mis,
    })
}

/// Monte Carlo estimate of the sampled loss against the exact asymptotic
/// loss, both at radius 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    /// `|L_tilde - L|` with the clamped estimator.
    pub lhs: f64,
    /// Same with the unclamped estimator; `None` when some draw makes the
    /// denominator nonpositive.
    pub lhs_unclamped: Option<f64>,
    pub stderr: f64,
    pub stderr_unclamped: Option<f64>,
    pub l_tilde: f64,
    pub l_sampled: f64,
    pub trials: usize,
}

fn log_term(s: f64, q: f64) -> f64 {
    // log(e^s + q) - s for q > 0.
    (1.0 + q * (-s).exp()).ln()
}

fn counts(pmf: &[f64], draws: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut h = vec![0.0; pmf.len()];
    for _ in 0..draws {
        h[sample_index(pmf, rng)] += 1.0;
    }
    h
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = par::ordered_sum(v) / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// `|L_tilde - L|` from a table of radius-1 scores over the alphabet.
pub fn empirical_gap_with_scores(
    spec: &MixtureSpec,
    unit_scores: &Array2<f64>,
    eta: &EtaProvider,
    n: usize,
    m: usize,
    trials: usize,
    seed: SeedStream,
) -> Result<GapEstimate> {
    check_counts(n, m)?;
    if trials < 100 {
        return Err(Error::InvalidArgument {
            arg: "trials",
            reason: format!("need at least 100, got {trials}"),
        });
    }
    require_nondegenerate_prior(spec)?;
    let states = anchor_states(spec, eta)?;
    let n_classes = spec.n_classes();
    let marginal = spec.marginal_pmf()?;
    let pmfs: Vec<&[f64]> = (0..n_classes).map(|c| spec.class_pmf(c)).collect::<Result<_>>()?;
    let p = marginal.len();
    let exp_s = unit_scores.mapv(f64::exp);
    let l_tilde = asymptotic_loss_exact(spec, unit_scores, n as f64)?;
    let floor = (-1.0f64).exp();
    let nf = n as f64;

    let per_trial: Vec<(f64, Option<f64>)> = par::map_range(trials, |t| {
        let mut rng = seed.fork(t as u64).rng();
        let hu = counts(&marginal, n, &mut rng);
        let hv: Vec<Vec<f64>> = (0..n_classes)
            .map(|c| {
                if spec.class_dist().prob(c) > 0.0 {
                    counts(pmfs[c], m, &mut rng)
                } else {
                    Vec::new()
                }
            })
            .collect();
        let mean_u: Vec<f64> = (0..p)
            .map(|i| (0..p).map(|k| hu[k] * exp_s[[i, k]]).sum::<f64>() / nf)
            .collect();
        let (mut clamped, mut unclamped, mut valid) = (0.0, 0.0, true);
        for s in &states {
            let i = s.point;
            let mean_v = (0..p).map(|k| hv[s.class][k] * exp_s[[i, k]]).sum::<f64>() / m as f64;
            let g0 = (mean_u[i] - s.eta * mean_v) / (1.0 - s.eta);
            let g = g0.max(floor);
            let pmf = pmfs[s.class];
            for j in 0..p {
                if pmf[j] == 0.0 {
                    continue;
                }
                let sc = unit_scores[[i, j]];
                let w = s.weight * pmf[j];
                clamped += w * log_term(sc, nf * g);
                let d = exp_s[[i, j]] + nf * g0;
                if d > 0.0 {
                    unclamped += w * (d.ln() - sc);
                } else {
                    valid = false;
                }
            }
        }
        (clamped, valid.then_some(unclamped))
    });

    let clamped: Vec<f64> = per_trial.iter().map(|t| t.0).collect();
    let (l_mean, sd) = mean_sd(&clamped);
    let unclamped: Option<Vec<f64>> = per_trial.iter().map(|t| t.1).collect();
    let (lhs_unclamped, stderr_unclamped) = match unclamped {
        Some(v) => {
            let (mu, sdu) = mean_sd(&v);
            (Some((l_tilde - mu).abs()), Some(sdu / (trials as f64).sqrt()))
        }
        None => (None, None),
    };
    Ok(GapEstimate {
        lhs: (l_tilde - l_mean).abs(),
        lhs_unclamped,
        stderr: sd / (trials as f64).sqrt(),
        stderr_unclamped,
        l_tilde,
        l_sampled: l_mean,
        trials,
    })
}

/// [`empirical_gap_with_scores`] for an encoder over a discrete spec.
pub fn empirical_gap(
    spec: &MixtureSpec,
    params: &EncoderParams,
    eta: &EtaProvider,
    n: usize,
    m: usize,
    trials: usize,
    seed: SeedStream,
) -> Result<GapEstimate> {
    let table = ScoreTable::from_encoder(spec, params)?;
    empirical_gap_with_scores(spec, &table.unit_scores(), eta, n, m, trials, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub n: usize,
    pub m: usize,
    pub eta: String,
    pub lhs: f64,
    pub lhs_unclamped: Option<f64>,
    pub stderr: f64,
    pub term_n: f64,
    pub term_m: f64,
    pub term_eta: f64,
    pub rhs_total: f64,
    /// Same terms with the statement's coefficients.
    pub statement: Prop1Terms,
    pub statement_total: f64,
    pub holds: bool,
    pub holds_statement: bool,
}

/// Runs both sides of the bound on one configuration.
#[allow(clippy::too_many_arguments)]
pub fn verify_prop1(
    spec: &MixtureSpec,
    unit_scores: &Array2<f64>,
    eta: &EtaProvider,
    eta_label: &str,
    n: usize,
    m: usize,
    trials: usize,
    seed: SeedStream,
) -> Result<BoundReport> {
    let gap = empirical_gap_with_scores(spec, unit_scores, eta, n, m, trials, seed)?;
    let proof = prop1_rhs(spec, eta, n, m, BoundConstants::Proof)?;
    let statement = prop1_rhs(spec, eta, n, m, BoundConstants::Statement)?;
    Ok(BoundReport {
        n,
        m,
        eta: eta_label.to_string(),
        lhs: gap.lhs,
        lhs_unclamped: gap.lhs_unclamped,
        stderr: gap.stderr,
        term_n: proof.term_n,
        term_m: proof.term_m,
        term_eta: proof.term_eta,
        rhs_total: proof.total(),
        statement,
        statement_total: statement.total(),
        holds: gap.lhs <= proof.total(),
        holds_statement: gap.lhs <= statement.total(),
    })
}

const TASK_ENUMERATION_LIMIT: u128 = 10_000;
const SAMPLED_TASKS: usize = 10_000;

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// `K`-way tasks with their probabilities, `p(T) ∝ prod_{c in T} rho(c)`.
/// Enumerated exactly when there are at most 10^4 subsets, else sampled.
pub fn task_distribution(spec: &MixtureSpec, k: usize, seed: SeedStream) -> Result<Vec<(Vec<ClassId>, f64)>> {
    let n = spec.n_classes();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument {
            arg: "K",
            reason: format!("need 1 <= K <= {n}, got {k}"),
        });
    }
    let rho = spec.class_dist().probs();
    let positive = rho.iter().filter(|r| **r > 0.0).count();
    if k > positive {
        return Err(Error::InvalidArgument {
            arg: "K",
            reason: format!("only {positive} classes have positive probability"),
        });
    }
    if binomial(n, k) <= TASK_ENUMERATION_LIMIT {
        let mut tasks: Vec<(Vec<ClassId>, f64)> = subsets(n, k)
            .into_iter()
            .map(|t| {
                let w = t.iter().map(|&c| rho[c]).product();
                (t, w)
            })
            .filter(|(_, w)| *w > 0.0)
            .collect();
        let z: f64 = tasks.iter().map(|(_, w)| w).sum();
        tasks.iter_mut().for_each(|(_, w)| *w /= z);
        return Ok(tasks);
    }
    // Rejection sampling: i.i.d. draws from rho, kept when all distinct.
    let mut rng = seed.rng();
    let mut tasks = Vec::with_capacity(SAMPLED_TASKS);
    while tasks.len() < SAMPLED_TASKS {
        let mut t: Vec<ClassId> = (0..k).map(|_| sample_index(rho, &mut rng)).collect();
        t.sort_unstable();
        if t.windows(2).all(|w| w[0] != w[1]) {
            tasks.push((t, 1.0 / SAMPLED_TASKS as f64));
        }
    }
    Ok(tasks)
}

/// Class means `mu_c = E_{x ~ D_c}[f(x)]`.
pub fn class_means(spec: &MixtureSpec, emb: &Array2<f64>) -> Result<Array2<f64>> {
    let mut mu = Array2::zeros((spec.n_classes(), emb.ncols()));
    for c in 0..spec.n_classes() {
        for (i, p) in spec.class_pmf(c)?.iter().enumerate() {
            mu.row_mut(c).scaled_add(*p, &emb.row(i));
        }
    }
    Ok(mu)
}

/// Softmax cross-entropy of `W f(x)` on task `T` (rows of `w` aligned with
/// `task`), with `(x, c) ~ D_T`. Returns the loss and `dL/dW`.
fn task_softmax_loss(
    spec: &MixtureSpec,
    emb: &Array2<f64>,
    task: &[ClassId],
    w: &Array2<f64>,
) -> Result<(f64, Array2<f64>)> {
    let rho = spec.class_dist().probs();
    let z: f64 = task.iter().map(|&c| rho[c]).sum();
    let logits = emb.dot(&w.t());
    let mut loss = 0.0;
    let mut grad = Array2::zeros(w.raw_dim());
    for (slot, &c) in task.iter().enumerate() {
        let wc = rho[c] / z;
        for (i, p) in spec.class_pmf(c)?.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            let row = logits.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ez: Vec<f64> = row.iter().map(|l| (l - mx).exp()).collect();
            let sum: f64 = ez.iter().sum();
            loss += wc * p * (sum.ln() + mx - row[slot]);
            for (k, e) in ez.iter().enumerate() {
                let coef = wc * p * (e / sum - if k == slot { 1.0 } else { 0.0 });
                grad.row_mut(k).scaled_add(coef, &emb.row(i));
            }
        }
    }
    Ok((loss, grad))
}

fn mean_classifier(mu: &Array2<f64>, task: &[ClassId]) -> Array2<f64> {
    let mut w = Array2::zeros((task.len(), mu.ncols()));
    for (slot, &c) in task.iter().enumerate() {
        w.row_mut(slot).assign(&mu.row(c));
    }
    w
}

/// Supervised loss of the mean classifier averaged over `K`-way tasks.
pub fn sup_loss_mean_classifier(spec: &MixtureSpec, params: &EncoderParams, k: usize) -> Result<f64> {
    let emb = ScoreTable::from_encoder(spec, params)?.embeddings;
    sup_loss_mean_classifier_emb(spec, &emb, k)
}

pub fn sup_loss_mean_classifier_emb(spec: &MixtureSpec, emb: &Array2<f64>, k: usize) -> Result<f64> {
    require_discrete(spec)?;
    let mu = class_means(spec, emb)?;
    let tasks = task_distribution(spec, k, SeedStream::new(0).fork_str("tasks"))?;
    let mut total = 0.0;
    for (t, pt) in &tasks {
        total += pt * task_softmax_loss(spec, emb, t, &mean_classifier(&mu, t))?.0;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupLoss {
    pub value: f64,
    /// Every task's optimizer reached the gradient tolerance.
    pub converged: bool,
}

pub const SUP_GRAD_TOL: f64 = 1e-8;

/// Best linear classifier per task, found by L-BFGS from the mean
/// classifier to gradient norm 1e-8 or `max_iters`.
pub fn sup_loss_best_linear(spec: &MixtureSpec, params: &EncoderParams, k: usize, max_iters: u64) -> Result<SupLoss> {
    let emb = ScoreTable::from_encoder(spec, params)?.embeddings;
    sup_loss_best_linear_emb(spec, &emb, k, max_iters)
}

pub fn sup_loss_best_linear_emb(spec: &MixtureSpec, emb: &Array2<f64>, k: usize, max_iters: u64) -> Result<SupLoss> {
    require_discrete(spec)?;
    let mu = class_means(spec, emb)?;
    let tasks = task_distribution(spec, k, SeedStream::new(0).fork_str("tasks"))?;
    let d = emb.ncols();
    let per_task: Vec<Result<(f64, bool)>> = par::map_slice(&tasks, |(t, pt)| {
        let shape = (t.len(), d);
        let f = |x: &[f64]| {
            let w = Array2::from_shape_vec(shape, x.to_vec()).expect("shape");
            match task_softmax_loss(spec, emb, t, &w) {
                Ok((l, g)) => (l, g.into_raw_vec_and_offset().0),
                Err(_) => (f64::NAN, vec![f64::NAN; x.len()]),
            }
        };
        let x0 = mean_classifier(&mu, t).into_raw_vec_and_offset().0;
        let r = optim::minimize(&f, x0, SUP_GRAD_TOL, max_iters)?;
        Ok((pt * r.value, r.converged))
    });
    let mut value = 0.0;
    let mut converged = true;
    for r in per_task {
        let (v, c) = r?;
        value += v;
        converged &= c;
    }
    Ok(SupLoss { value, converged })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupLossReport {
    pub l_sup: f64,
    pub l_sup_mu: f64,
    pub l_tilde: f64,
    pub n_used: usize,
    pub converged: bool,
    /// `l_sup <= l_sup_mu <= l_tilde` within 1e-8.
    pub ordered: bool,
}

pub const LEMMA_SLACK: f64 = 1e-8;

/// Smallest admissible negative count, `(1 - rho_min) / rho_min`.
pub fn lemma_threshold(spec: &MixtureSpec) -> f64 {
    let rmin = spec.class_dist().rho_min();
    (1.0 - rmin) / rmin
}

/// Ordering of the best-linear, mean-classifier and asymptotic losses on
/// the `|C|`-way task.
pub fn lemma_a1_check(spec: &MixtureSpec, params: &EncoderParams, n: usize) -> Result<SupLossReport> {
    let table = ScoreTable::from_encoder(spec, params)?;
    lemma_a1_check_emb(spec, &table.embeddings, n)
}

pub fn lemma_a1_check_emb(spec: &MixtureSpec, emb: &Array2<f64>, n: usize) -> Result<SupLossReport> {
    require_discrete(spec)?;
    let threshold = lemma_threshold(spec);
    if !((n as f64) >= threshold) {
        return Err(Error::BelowThreshold { n, threshold });
    }
    let k = spec.n_classes();
    let l_sup_mu = sup_loss_mean_classifier_emb(spec, emb, k)?;
    let best = sup_loss_best_linear_emb(spec, emb, k, 2000)?;
    let scores = emb.dot(&emb.t());
    let l_tilde = asymptotic_loss_exact(spec, &scores, n as f64)?;
    Ok(SupLossReport {
        l_sup: best.value,
        l_sup_mu,
        l_tilde,
        n_used: n,
        converged: best.converged,
        ordered: best.value <= l_sup_mu + LEMMA_SLACK && l_sup_mu <= l_tilde + LEMMA_SLACK,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzFactors {
    pub l_psi: f64,
    pub l_omega: f64,
    pub l_ell: f64,
    pub l_phi: f64,
    pub b: f64,
}

/// Lipschitz constants of the per-sample loss and of the score map, and
/// the bound `B` on the loss value, at radius 1.
pub fn lipschitz_factors(n: usize, m: usize, eta_max: f64, grad_kappa_norm: f64) -> Result<LipschitzFactors> {
    check_counts(n, m)?;
    if !(eta_max > 0.0 && eta_max < 1.0) {
        return Err(Error::EtaOutOfRange(eta_max));
    }
    let (nf, mf) = (n as f64, m as f64);
    let e2 = E * E;
    let e4 = e2 * e2;
    let q = 1.0 - eta_max;
    let l_psi = (e4 / (q * q * nf) + eta_max * eta_max * e4 / (q * q * mf) + e2 / q.powi(4) + 1.0).sqrt();
    let l_omega = nf / (1.0 + nf / e2);
    let l_phi = (6.0 * nf + 6.0 * mf + 2.0 + grad_kappa_norm * grad_kappa_norm).sqrt();
    let b = (1.0 + nf * ((e2 - eta_max / e2) / q).max(1.0)).ln();
    Ok(LipschitzFactors {
        l_psi,
        l_omega,
        l_ell: l_omega * l_psi,
        l_phi,
        b,
    })
}

/// Exact `E[g0]` over `u ~ D^N`, `v ~ D_c^M` for anchor point `i` of class
/// `c`, by linearity; equals the true-negative expectation when `eta =
/// rho(c)`.
pub fn expected_g0(spec: &MixtureSpec, unit_scores: &Array2<f64>, i: usize, c: ClassId, eta: f64) -> Result<f64> {
    let marginal = spec.marginal_pmf()?;
    let pmf = spec.class_pmf(c)?;
    let eu: f64 = marginal.iter().enumerate().map(|(k, p)| p * unit_scores[[i, k]].exp()).sum();
    let ev: f64 = pmf.iter().enumerate().map(|(k, p)| p * unit_scores[[i, k]].exp()).sum();
    Ok((eu - eta * ev) / (1.0 - eta))
}

/// True-negative expectations at every point for class `c`, at radius 1.
pub fn true_negative_table(spec: &MixtureSpec, unit_scores: &Array2<f64>, c: ClassId) -> Result<Vec<f64>> {
    true_negative_expectations(spec, unit_scores, c)
}
