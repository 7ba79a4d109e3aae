//! Paper-analog experiment pipelines shared by the CLI and the tests.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::bounds::{verify_prop1, BoundReport};
use crate::encoder::{EncoderConfig, EncoderParams, Input};
use crate::error::{Error, Result};
use crate::eta::{EtaConfig, EtaProvider};
use crate::eval::{linear_probe, prompt_classify, retrieval_metrics, ClassPrompt, ProbeResult};
use crate::mixture::{ClassDistribution, ClassId, Conditional, DataPoint, MixtureSpec, Template, Token};
use crate::io::{num, write_csv, write_json, Stamp, Table};
use crate::objectives::{Objective, ScoreTable};
use crate::par;
use crate::rng::SeedStream;
use crate::text::NGramLM;
use crate::train::{fit_report_lm, sample_paired, train, TraceRow, TrainConfig};

pub fn embed(params: &EncoderParams, points: &[DataPoint]) -> Result<Array2<f64>> {
    let inputs = points.iter().map(Input::of).collect::<Result<Vec<_>>>()?;
    params.encode_batch(&inputs)
}

pub fn embed_text(params: &EncoderParams, points: &[DataPoint]) -> Result<Array2<f64>> {
    let inputs = points.iter().map(Input::text_of).collect::<Result<Vec<_>>>()?;
    params.encode_batch(&inputs)
}

fn random_direction<R: Rng + ?Sized>(dim: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| radius * x / n).collect()
}

fn singleton_templates(k: usize) -> Vec<Vec<Template>> {
    (0..k)
        .map(|c| {
            vec![Template {
                tokens: vec![c as Token],
                weight: 1.0,
            }]
        })
        .collect()
}

/// Gaussian-mixture stand-in for the image classification experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarAnalogConfig {
    pub n_classes: usize,
    pub dim: usize,
    /// Norm of each class mean.
    pub mean_radius: f64,
    pub std: f64,
    /// Classes kept at fraction `r`.
    pub selected: Vec<ClassId>,
    pub r_grid: Vec<f64>,
    pub label_fractions: Vec<f64>,
    /// The r at which the accuracy-versus-label-fraction table is taken.
    pub fraction_table_r: f64,
    pub seeds: Vec<u64>,
    /// Seed of the class means, shared by every cell.
    pub spec_seed: u64,
    pub pool_size: usize,
    pub test_size: usize,
    pub train: TrainConfig,
}

impl Default for CifarAnalogConfig {
    fn default() -> Self {
        let mut train = TrainConfig::unimodal(Objective::Cl, EtaConfig::Constant { eta: 0.0 }, 0);
        train.epochs = 50;
        train.steps_per_epoch = 20;
        Self {
            n_classes: 10,
            dim: 16,
            mean_radius: 3.0,
            std: 1.0,
            selected: (0..5).collect(),
            r_grid: vec![0.05, 0.1, 0.25, 0.5, 0.75, 0.9],
            label_fractions: vec![0.01, 0.1, 1.0],
            fraction_table_r: 0.5,
            seeds: (0..5).collect(),
            spec_seed: 2024,
            pool_size: 5000,
            test_size: 5000,
            train,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cl,
    DclTrue,
    DclLow,
    DclHigh,
}

impl CifarVariant {
    pub const ALL: [CifarVariant; 4] = [Self::Cl, Self::DclTrue, Self::DclLow, Self::DclHigh];

    pub fn label(self) -> &'static str {
        match self {
            Self::Cl => "CL",
            Self::DclTrue => "DCL-eta_True",
            Self::DclLow => "DCL-eta_Low",
            Self::DclHigh => "DCL-eta_High",
        }
    }
}

/// `eta_High = 0.2 r / (1 + r)` is the prior of each subsampled class and
/// `eta_Low = 0.2 / (1 + r)` that of each remaining class (10 classes, 5
/// subsampled).
pub fn eta_high(r: f64) -> f64 {
    0.2 * r / (1.0 + r)
}

pub fn eta_low(r: f64) -> f64 {
    0.2 / (1.0 + r)
}

impl CifarAnalogConfig {
    /// Balanced base spec; training specs subsample it.
    pub fn base_spec(&self) -> Result<MixtureSpec> {
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument {
                arg: "n_classes",
                reason: "need at least 2".into(),
            });
        }
        let mut rng = SeedStream::new(self.spec_seed).rng();
        let conds = (0..self.n_classes)
            .map(|_| Conditional::Gaussian {
                mean: random_direction(self.dim, self.mean_radius, &mut rng),
                std: self.std,
            })
            .collect();
        MixtureSpec::continuous(
            ClassDistribution::uniform(self.n_classes)?,
            conds,
            singleton_templates(self.n_classes),
            self.n_classes,
        )
    }

    pub fn train_config(&self, variant: CifarVariant, r: f64, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = seed;
        let (objective, eta) = match variant {
            CifarVariant::Cl => (Objective::Cl, EtaConfig::Constant { eta: 0.0 }),
            CifarVariant::DclTrue => (Objective::Dcl, EtaConfig::TrueOracle),
            CifarVariant::DclLow => (Objective::Dcl, EtaConfig::Constant { eta: eta_low(r) }),
            CifarVariant::DclHigh => (Objective::Dcl, EtaConfig::Constant { eta: eta_high(r) }),
        };
        t.objective = objective;
        t.eta = eta;
        t
    }
}

/// Result of one (r, variant, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CifarCell {
    pub r: f64,
    pub variant: CifarVariant,
    pub seed: u64,
    pub probes: Vec<ProbeResult>,
    pub final_loss: f64,
}

/// Labeled pool and test set, both drawn from the balanced spec.
pub struct EvalSets {
    pub pool: Vec<DataPoint>,
    pub test: Vec<DataPoint>,
}

fn draw<R: Rng + ?Sized>(spec: &MixtureSpec, n: usize, rng: &mut R) -> Vec<DataPoint> {
    (0..n).map(|_| spec.sample_marginal(rng)).collect()
}

pub fn cifar_eval_sets(cfg: &CifarAnalogConfig, base: &MixtureSpec, seed: u64) -> EvalSets {
    let s = SeedStream::new(seed).fork_str("eval-sets");
    EvalSets {
        pool: draw(base, cfg.pool_size, &mut s.fork(0).rng()),
        test: draw(base, cfg.test_size, &mut s.fork(1).rng()),
    }
}

fn labels(points: &[DataPoint]) -> Vec<ClassId> {
    points.iter().map(|p| p.latent_class).collect()
}

pub fn probe_encoder(
    params: &EncoderParams,
    sets: &EvalSets,
    fractions: &[f64],
    seed: SeedStream,
) -> Result<Vec<ProbeResult>> {
    let pool = embed(params, &sets.pool)?;
    let test = embed(params, &sets.test)?;
    let (yp, yt) = (labels(&sets.pool), labels(&sets.test));
    fractions
        .iter()
        .enumerate()
        .map(|(i, &f)| linear_probe(&pool, &yp, &test, &yt, f, seed.fork(i as u64)))
        .collect()
}

pub fn run_cifar_cell(
    cfg: &CifarAnalogConfig,
    base: &MixtureSpec,
    r: f64,
    variant: CifarVariant,
    seed: u64,
) -> Result<CifarCell> {
    let spec = base.subsample_classes(&cfg.selected, r)?;
    let tc = cfg.train_config(variant, r, seed);
    let out = train(&spec, &tc)?;
    let sets = cifar_eval_sets(cfg, base, seed);
    let probes = probe_encoder(&out.params, &sets, &cfg.label_fractions, SeedStream::new(seed).fork_str("probe"))?;
    Ok(CifarCell {
        r,
        variant,
        seed,
        probes,
        final_loss: out.trace.last().map_or(f64::NAN, |t| t.loss),
    })
}

/// Runs every (r, variant, seed) cell; cells are independent and run on the
/// pool, returned in grid order.
pub fn run_cifar_grid(cfg: &CifarAnalogConfig, rs: &[f64]) -> Result<Vec<CifarCell>> {
    let base = cfg.base_spec()?;
    let mut jobs = Vec::new();
    for &r in rs {
        for v in CifarVariant::ALL {
            for &s in &cfg.seeds {
                jobs.push((r, v, s));
            }
        }
    }
    par::map_slice(&jobs, |&(r, v, s)| run_cifar_cell(cfg, &base, r, v, s))
        .into_iter()
        .collect()
}

/// Mean linear-probe accuracy of `variant` at `r` and label fraction index
/// `fi`, over seeds.
pub fn mean_accuracy(cells: &[CifarCell], r: f64, variant: CifarVariant, fi: usize) -> f64 {
    let v: Vec<f64> = cells
        .iter()
        .filter(|c| c.r == r && c.variant == variant)
        .map(|c| c.probes[fi].linear_probe_acc)
        .collect();
    par::ordered_sum(&v) / v.len() as f64
}

/// Toy image-report data with a long-tailed prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossModalConfig {
    pub class_probs: Vec<f64>,
    pub head_classes: Vec<ClassId>,
    pub vocab_size: usize,
    pub templates_per_class: usize,
    pub template_len: usize,
    pub perturb_prob: f64,
    pub dim: usize,
    pub mean_radius: f64,
    pub std: f64,
    /// Norm of each token's image offset.
    pub offset_scale: f64,
    pub test_size: usize,
    pub ks: Vec<usize>,
    /// Constant etas of the sweep.
    pub etas: Vec<f64>,
    /// The LM-based provider compared against the sweep.
    pub lm_eta: EtaConfig,
    pub seeds: Vec<u64>,
    pub spec_seed: u64,
    pub train: TrainConfig,
}

impl Default for CrossModalConfig {
    fn default() -> Self {
        // Radius, width and schedule picked for this toy on seeds disjoint
        // from the acceptance seeds.
        let mut train = TrainConfig::cross_modal(EtaConfig::Constant { eta: 0.05 }, 0);
        train.epochs = 100;
        train.lr = 3e-3;
        train.encoder.output_dim = 16;
        train.encoder.gamma = 3.0;
        let mut class_probs = vec![0.25, 0.25];
        class_probs.extend([0.0625; 8]);
        Self {
            class_probs,
            head_classes: vec![0, 1],
            vocab_size: 40,
            templates_per_class: 4,
            template_len: 5,
            perturb_prob: 0.5,
            dim: 16,
            mean_radius: 2.0,
            std: 0.5,
            offset_scale: 2.0,
            test_size: 1000,
            ks: vec![10, 50, 100],
            etas: vec![0.01, 0.05, 0.1, 0.2],
            lm_eta: EtaConfig::lm_default(),
            seeds: (0..5).collect(),
            spec_seed: 7,
            train,
        }
    }
}

impl CrossModalConfig {
    /// Templates open with the class keyword (token `c`) followed by words
    /// shared across classes; every token carries a random image offset.
    pub fn spec(&self) -> Result<MixtureSpec> {
        let k = self.class_probs.len();
        if self.vocab_size <= k {
            return Err(Error::InvalidArgument {
                arg: "vocab_size",
                reason: format!("must exceed the {k} class keywords"),
            });
        }
        let mut rng = SeedStream::new(self.spec_seed).rng();
        let conds = (0..k)
            .map(|_| Conditional::Gaussian {
                mean: random_direction(self.dim, self.mean_radius, &mut rng),
                std: self.std,
            })
            .collect();
        let templates = (0..k)
            .map(|c| {
                (0..self.templates_per_class)
                    .map(|_| {
                        let mut tokens = vec![c as Token];
                        tokens.extend(
                            (1..self.template_len).map(|_| rng.random_range(k as Token..self.vocab_size as Token)),
                        );
                        Template { tokens, weight: 1.0 }
                    })
                    .collect()
            })
            .collect();
        let offsets = (0..self.vocab_size)
            .map(|_| random_direction(self.dim, self.offset_scale, &mut rng))
            .collect();
        MixtureSpec::continuous(ClassDistribution::new(self.class_probs.clone())?, conds, templates, self.vocab_size)?
            .with_perturb_prob(self.perturb_prob)?
            .with_token_offsets(offsets)
    }

    pub fn variants(&self) -> Vec<EtaConfig> {
        let mut v: Vec<EtaConfig> = self.etas.iter().map(|&eta| EtaConfig::Constant { eta }).collect();
        v.push(self.lm_eta.clone());
        v
    }

    pub fn train_config(&self, eta: &EtaConfig, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.objective = Objective::Dcl;
        t.eta = eta.clone();
        t.seed = seed;
        t
    }

    /// Positive prompt: the class's first template. Negative prompt: the
    /// first templates of all other classes, concatenated.
    pub fn prompts(&self, spec: &MixtureSpec) -> Vec<Option<ClassPrompt>> {
        let k = spec.n_classes();
        (0..k)
            .map(|c| {
                let negative = (0..k)
                    .filter(|&o| o != c)
                    .flat_map(|o| spec.templates(o)[0].tokens.clone())
                    .collect();
                Some(ClassPrompt {
                    positive: spec.templates(c)[0].tokens.clone(),
                    negative,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossModalCell {
    pub eta: String,
    /// Constant eta, `None` for the LM provider.
    pub eta_value: Option<f64>,
    pub seed: u64,
    pub head_acc: f64,
    pub prompt_mean: f64,
    pub tail_avg_recall: f64,
    pub avg_recall: f64,
    pub mean_train_eta: f64,
    pub final_gamma: f64,
    /// Clamp fraction over the last epoch.
    pub final_clamp_fraction: f64,
}

pub fn run_cross_modal_cell(
    cfg: &CrossModalConfig,
    spec: &MixtureSpec,
    eta: &EtaConfig,
    seed: u64,
) -> Result<CrossModalCell> {
    let tc = cfg.train_config(eta, seed);
    let out = train(spec, &tc)?;
    let test = sample_paired(spec, cfg.test_size, SeedStream::new(seed).fork_str("test"))?;
    let txt = embed_text(&out.params, &test.texts)?;
    let img = embed(&out.params, &test.images)?;
    let y = test.labels();
    let prompt = prompt_classify(&img, &y, &cfg.prompts(spec), &out.params)?;
    let head_acc = cfg.head_classes.iter().map(|&c| prompt.per_class[c]).sum::<f64>() / cfg.head_classes.len() as f64;
    let tail: Vec<bool> = y.iter().map(|c| !cfg.head_classes.contains(c)).collect();
    let tail_r = retrieval_metrics(&txt, &img, &cfg.ks, Some(&tail))?;
    let all_r = retrieval_metrics(&txt, &img, &cfg.ks, None)?;
    let mean_train_eta = out.trace.iter().map(|t| t.mean_eta).sum::<f64>() / out.trace.len().max(1) as f64;
    Ok(CrossModalCell {
        eta: eta.label(),
        eta_value: match eta {
            EtaConfig::Constant { eta } => Some(*eta),
            _ => None,
        },
        seed,
        head_acc,
        prompt_mean: prompt.mean,
        tail_avg_recall: tail_r.avg_recall,
        avg_recall: all_r.avg_recall,
        mean_train_eta,
        final_gamma: out.params.gamma,
        final_clamp_fraction: last_epoch_mean(&out.trace, |t| t.clamp_fraction),
    })
}

/// Every (variant, seed) cell, variants in [`CrossModalConfig::variants`]
/// order.
pub fn run_cross_modal(cfg: &CrossModalConfig) -> Result<Vec<CrossModalCell>> {
    let spec = cfg.spec()?;
    let variants = cfg.variants();
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    par::map_slice(&jobs, |&(v, s)| run_cross_modal_cell(cfg, &spec, &variants[v], s))
        .into_iter()
        .collect()
}

fn last_epoch_mean(trace: &[TraceRow], f: impl Fn(&TraceRow) -> f64) -> f64 {
    let Some(last) = trace.last() else { return f64::NAN };
    let rows: Vec<f64> = trace.iter().filter(|t| t.epoch == last.epoch).map(f).collect();
    par::ordered_sum(&rows) / rows.len() as f64
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// One-sided 5% critical value of Spearman's rho for `n` points, from the
/// t approximation `t = rho sqrt((n - 2) / (1 - rho^2))`. NaN below three
/// points.
pub fn spearman_critical(n: usize) -> f64 {
    if n < 3 {
        return f64::NAN;
    }
    let df = (n - 2) as f64;
    let t = StudentsT::new(0.0, 1.0, df).expect("df > 0").inverse_cdf(0.95);
    t / (df + t * t).sqrt()
}

/// One randomized discrete configuration for the gap bound.
#[derive(Debug, Clone)]
pub struct BoundCase {
    pub spec: MixtureSpec,
    pub params: EncoderParams,
    pub eta: EtaConfig,
    pub lm: Option<Arc<NGramLM>>,
    pub n: usize,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSweepConfig {
    pub cases: usize,
    pub seed: u64,
    pub min_classes: usize,
    pub max_classes: usize,
    pub max_points: usize,
    pub max_prior: f64,
    pub ns: Vec<usize>,
    pub ms: Vec<usize>,
    pub etas: Vec<EtaConfig>,
    /// Monte Carlo trials start here and double until the standard error is
    /// below `stderr_ratio` times the bound, up to `max_trials`.
    pub min_trials: usize,
    pub max_trials: usize,
    pub stderr_ratio: f64,
}

impl Default for BoundSweepConfig {
    fn default() -> Self {
        Self {
            cases: 64,
            seed: 1,
            min_classes: 2,
            max_classes: 8,
            max_points: 32,
            max_prior: 0.85,
            ns: vec![4, 16, 64, 256],
            ms: vec![1, 4, 16],
            etas: vec![
                EtaConfig::Constant { eta: 0.05 },
                EtaConfig::Constant { eta: 0.5 },
                EtaConfig::TrueOracle,
                EtaConfig::lm_default(),
            ],
            min_trials: 200,
            max_trials: 6400,
            stderr_ratio: 0.05,
        }
    }
}

fn random_pmf<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    // Exponential weights give a flat Dirichlet.
    let w: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Case `index` of the sweep: class count, support, prior, conditionals,
/// encoder, N and M are drawn from the case's own stream; eta variants
/// cycle through `cfg.etas`.
pub fn bound_case(cfg: &BoundSweepConfig, index: usize) -> Result<BoundCase> {
    let stream = SeedStream::new(cfg.seed).fork_str("bound-case").fork(index as u64);
    let mut rng = stream.rng();
    let k = rng.random_range(cfg.min_classes..=cfg.max_classes);
    let points = rng.random_range(k.max(2)..=cfg.max_points);
    let prior = loop {
        let p = random_pmf(k, &mut rng);
        if p.iter().copied().fold(0.0, f64::max) <= cfg.max_prior {
            break p;
        }
    };
    let feature_dim = 4;
    let alphabet: Vec<Vec<f64>> = (0..points)
        .map(|_| (0..feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    // Each class puts most of its mass on its own slice of the alphabet.
    let pmfs: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let mut p = random_pmf(points, &mut rng);
            for (i, v) in p.iter_mut().enumerate() {
                if i % k == c {
                    *v += 1.0;
                }
            }
            let s: f64 = p.iter().sum();
            p.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let vocab = k + 4;
    let templates = (0..k)
        .map(|c| {
            vec![Template {
                tokens: vec![c as Token, rng.random_range(k as Token..vocab as Token), (k + c % 4) as Token],
                weight: 1.0,
            }]
        })
        .collect();
    let spec = MixtureSpec::discrete(ClassDistribution::new(prior)?, alphabet, pmfs, templates, vocab)?
        .with_perturb_prob(0.1)?;
    let enc = EncoderConfig::new(feature_dim, 8, 4, 1.0);
    let params = EncoderParams::init(&enc, stream.fork_str("encoder"))?;
    let eta = cfg.etas[index % cfg.etas.len()].clone();
    let lm = match eta {
        EtaConfig::LmLogLinear { .. } => Some(Arc::new(fit_report_lm(&spec, None, 0.5, stream.fork_str("lm"))?)),
        _ => None,
    };
    Ok(BoundCase {
        spec,
        params,
        eta,
        lm,
        n: cfg.ns[rng.random_range(0..cfg.ns.len())],
        m: cfg.ms[rng.random_range(0..cfg.ms.len())],
    })
}

/// Bound check of one case with trials doubled until the standard error is
/// small against the bound.
pub fn run_bound_case(cfg: &BoundSweepConfig, case: &BoundCase, index: usize) -> Result<BoundReport> {
    let provider = EtaProvider::from_config(&case.eta, case.spec.class_dist(), case.lm.clone())?;
    let scores = ScoreTable::from_encoder(&case.spec, &case.params)?.unit_scores();
    let seed = SeedStream::new(cfg.seed).fork_str("bound-mc").fork(index as u64);
    let mut trials = cfg.min_trials;
    loop {
        let rep = verify_prop1(&case.spec, &scores, &provider, &case.eta.label(), case.n, case.m, trials, seed)?;
        if rep.stderr < cfg.stderr_ratio * rep.rhs_total || trials >= cfg.max_trials {
            return Ok(rep);
        }
        trials *= 2;
    }
}

pub fn run_bound_sweep(cfg: &BoundSweepConfig) -> Result<Vec<BoundReport>> {
    (0..cfg.cases)
        .map(|i| bound_case(cfg, i).and_then(|c| run_bound_case(cfg, &c, i)))
        .collect()
}

fn mean_of(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    par::ordered_sum(&v) / v.len() as f64
}

/// The three CIFAR-analog tables.
pub struct CifarTables {
    /// One row per (r, variant, seed, label fraction).
    pub cells: Table,
    /// Mean accuracy per r and variant at the largest label fraction.
    pub by_r: Table,
    /// Mean accuracy per label fraction and variant at `fraction_table_r`.
    pub by_fraction: Table,
}

fn variant_header(first: &str) -> Vec<String> {
    std::iter::once(first.to_string())
        .chain(CifarVariant::ALL.iter().map(|v| v.label().to_string()))
        .collect()
}

pub fn cifar_tables(cfg: &CifarAnalogConfig, cells: &[CifarCell]) -> CifarTables {
    let mut long = Table::new([
        "r",
        "variant",
        "seed",
        "label_fraction",
        "linear_probe_acc",
        "mean_classifier_acc",
        "n_labeled",
        "probe_converged",
        "final_loss",
    ]);
    for c in cells {
        for p in &c.probes {
            long.push(vec![
                num(c.r),
                c.variant.label().into(),
                c.seed.to_string(),
                num(p.label_fraction),
                num(p.linear_probe_acc),
                num(p.mean_classifier_acc),
                p.n_labeled.to_string(),
                p.converged.to_string(),
                num(c.final_loss),
            ]);
        }
    }
    let full = cfg.label_fractions.len() - 1;
    let mut by_r = Table::new(variant_header("r"));
    let mut rs: Vec<f64> = cells.iter().map(|c| c.r).collect();
    rs.dedup();
    for &r in &rs {
        let mut row = vec![num(r)];
        row.extend(CifarVariant::ALL.iter().map(|&v| num(mean_accuracy(cells, r, v, full))));
        by_r.push(row);
    }
    let mut by_fraction = Table::new(variant_header("label_fraction"));
    if rs.contains(&cfg.fraction_table_r) {
        for (fi, &f) in cfg.label_fractions.iter().enumerate() {
            let mut row = vec![num(f)];
            row.extend(
                CifarVariant::ALL
                    .iter()
                    .map(|&v| num(mean_accuracy(cells, cfg.fraction_table_r, v, fi))),
            );
            by_fraction.push(row);
        }
    }
    CifarTables {
        cells: long,
        by_r,
        by_fraction,
    }
}

/// Full image-classification analog: trains every variant over the r grid
/// and writes `cells.csv`, `accuracy_by_r.csv` and
/// `accuracy_by_label_fraction.csv` under `out_dir`.
pub fn repro_cifar(cfg: &CifarAnalogConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut rs = cfg.r_grid.clone();
    if !rs.contains(&cfg.fraction_table_r) {
        rs.push(cfg.fraction_table_r);
    }
    let cells = run_cifar_grid(cfg, &rs)?;
    let tables = cifar_tables(cfg, &cells);
    let stamp = Stamp::new(cfg, cfg.spec_seed)?;
    let mut paths = Vec::new();
    for (name, t) in [
        ("cells.csv", &tables.cells),
        ("accuracy_by_r.csv", &tables.by_r),
        ("accuracy_by_label_fraction.csv", &tables.by_fraction),
    ] {
        let p = out_dir.join(name);
        write_csv(&p, &stamp, t)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Ordering statistics used by the image-classification check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CifarOrdering {
    pub true_acc: f64,
    pub best_other: f64,
    /// `true_acc - best_other`, in accuracy points.
    pub gap_points: f64,
    /// Largest minus smallest variant mean, in accuracy points.
    pub spread_points: f64,
}

pub fn cifar_ordering(cells: &[CifarCell], r: f64, fi: usize) -> CifarOrdering {
    let accs: Vec<f64> = CifarVariant::ALL.iter().map(|&v| mean_accuracy(cells, r, v, fi)).collect();
    let true_acc = accs[1];
    let best_other = [accs[0], accs[2], accs[3]].into_iter().fold(f64::NEG_INFINITY, f64::max);
    let hi = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = accs.iter().copied().fold(f64::INFINITY, f64::min);
    CifarOrdering {
        true_acc,
        best_other,
        gap_points: 100.0 * (true_acc - best_other),
        spread_points: 100.0 * (hi - lo),
    }
}

/// Trend statistics of the eta sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossModalSummary {
    /// Spearman rho of head accuracy against eta, pooled over seeds.
    pub rho_head: f64,
    pub rho_tail: f64,
    /// One-sided 5% critical value for the pooled count.
    pub critical: f64,
    pub best_constant_head: f64,
    pub best_constant_tail: f64,
    pub lm_head: f64,
    pub lm_tail: f64,
}

pub fn cross_modal_summary(cells: &[CrossModalCell]) -> CrossModalSummary {
    let consts: Vec<&CrossModalCell> = cells.iter().filter(|c| c.eta_value.is_some()).collect();
    let x: Vec<f64> = consts.iter().filter_map(|c| c.eta_value).collect();
    let head: Vec<f64> = consts.iter().map(|c| c.head_acc).collect();
    let tail: Vec<f64> = consts.iter().map(|c| c.tail_avg_recall).collect();
    let mut labels: Vec<&str> = consts.iter().map(|c| c.eta.as_str()).collect();
    labels.dedup();
    let per = |label: &str, f: fn(&CrossModalCell) -> f64| {
        mean_of(cells.iter().filter(|c| c.eta == label).map(f))
    };
    let best = |f: fn(&CrossModalCell) -> f64| {
        labels
            .iter()
            .map(|l| per(l, f))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let lm: Vec<&CrossModalCell> = cells.iter().filter(|c| c.eta_value.is_none()).collect();
    CrossModalSummary {
        rho_head: spearman(&x, &head),
        rho_tail: spearman(&x, &tail),
        critical: spearman_critical(x.len()),
        best_constant_head: best(|c| c.head_acc),
        best_constant_tail: best(|c| c.tail_avg_recall),
        lm_head: mean_of(lm.iter().map(|c| c.head_acc)),
        lm_tail: mean_of(lm.iter().map(|c| c.tail_avg_recall)),
    }
}

pub fn cross_modal_table(cells: &[CrossModalCell]) -> Table {
    let mut t = Table::new([
        "eta",
        "seed",
        "head_prompt_acc",
        "prompt_mean_acc",
        "tail_avg_recall",
        "avg_recall",
        "mean_train_eta",
        "final_gamma",
        "final_clamp_fraction",
    ]);
    for c in cells {
        t.push(vec![
            c.eta.clone(),
            c.seed.to_string(),
            num(c.head_acc),
            num(c.prompt_mean),
            num(c.tail_avg_recall),
            num(c.avg_recall),
            num(c.mean_train_eta),
            num(c.final_gamma),
            num(c.final_clamp_fraction),
        ]);
    }
    t
}

/// Cross-modal eta sweep; writes `cells.csv` and `summary.json`.
pub fn repro_cross_modal(cfg: &CrossModalConfig, out_dir: &Path) -> Result<(Vec<PathBuf>, CrossModalSummary)> {
    let cells = run_cross_modal(cfg)?;
    let summary = cross_modal_summary(&cells);
    let stamp = Stamp::new(cfg, cfg.spec_seed)?;
    let csv = out_dir.join("cells.csv");
    write_csv(&csv, &stamp, &cross_modal_table(&cells))?;
    let json = out_dir.join("summary.json");
    write_json(&json, &stamp, &summary)?;
    Ok((vec![csv, json], summary))
}

pub fn bound_table(reports: &[BoundReport]) -> Table {
    let mut t = Table::new([
        "case",
        "n",
        "m",
        "eta",
        "lhs",
        "lhs_unclamped",
        "stderr",
        "term_n",
        "term_m",
        "term_eta",
        "rhs_total",
        "statement_total",
        "holds",
        "holds_statement",
    ]);
    for (i, r) in reports.iter().enumerate() {
        t.push(vec![
            i.to_string(),
            r.n.to_string(),
            r.m.to_string(),
            r.eta.clone(),
            num(r.lhs),
            r.lhs_unclamped.map_or_else(String::new, num),
            num(r.stderr),
            num(r.term_n),
            num(r.term_m),
            num(r.term_eta),
            num(r.rhs_total),
            num(r.statement_total),
            r.holds.to_string(),
            r.holds_statement.to_string(),
        ]);
    }
    t
}
