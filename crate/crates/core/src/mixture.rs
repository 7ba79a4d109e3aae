//! Latent-class mixture simulator.
//!
//! A [`MixtureSpec`] holds a class prior, one conditional generator per
//! class and a set of weighted token templates per class. Continuous specs
//! use isotropic Gaussians; discrete specs put a pmf over a shared finite
//! alphabet of points so every expectation downstream can be enumerated.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = usize;
pub type Token = u32;

/// Largest alphabet allowed in discrete mode.
pub const MAX_ALPHABET: usize = 64;

const SUM_TOL: f64 = 1e-12;

/// Prior over latent classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    /// Entries must be finite and nonnegative with at least one positive
    /// entry, summing to 1 within 1e-12.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("no classes".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "entries must be finite and nonnegative: {probs:?}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {total}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Normalizes arbitrary positive weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidDistribution(format!(
                "weights must have a positive finite sum: {weights:?}"
            )));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::from_weights(&vec![1.0; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, c: ClassId) -> f64 {
        self.probs[c]
    }

    /// Smallest class probability.
    pub fn rho_min(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn rho_max(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }
}

impl TryFrom<Vec<f64>> for ClassDistribution {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ClassDistribution> for Vec<f64> {
    fn from(d: ClassDistribution) -> Self {
        d.probs
    }
}

/// Draws an index from a pmf by inverse CDF. Falls back to the last index
/// with positive mass when rounding leaves `u` above the cumulative sum.
pub fn sample_index<R: Rng + ?Sized>(pmf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    pmf.iter().rposition(|p| *p > 0.0).unwrap_or(pmf.len() - 1)
}

/// Draws a class id with probability `probs[k]`.
pub fn sample_class<R: Rng + ?Sized>(dist: &ClassDistribution, rng: &mut R) -> ClassId {
    sample_index(&dist.probs, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Continuous,
    Discrete,
}

/// Per-class generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Conditional {
    /// Isotropic Gaussian.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// pmf over the spec's shared alphabet.
    Categorical { pmf: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub tokens: Vec<Token>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawSpec {
    class_dist: ClassDistribution,
    conditionals: Vec<Conditional>,
    templates: Vec<Vec<Template>>,
    mode: Mode,
    #[serde(default)]
    alphabet: Option<Vec<Vec<f64>>>,
    vocab_size: usize,
    #[serde(default)]
    perturb_prob: f64,
    #[serde(default)]
    token_offsets: Option<Vec<Vec<f64>>>,
}

/// Full generative model. Immutable once validated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct MixtureSpec {
    class_dist: ClassDistribution,
    conditionals: Vec<Conditional>,
    templates: Vec<Vec<Template>>,
    mode: Mode,
    alphabet: Option<Vec<Vec<f64>>>,
    vocab_size: usize,
    /// Probability of replacing one token of a drawn template.
    perturb_prob: f64,
    /// Optional V x d table: in continuous mode a point's features are
    /// shifted by the mean offset of its tokens, tying text to image.
    token_offsets: Option<Vec<Vec<f64>>>,
}

/// A simulated observation. `latent_class` is simulator metadata: only the
/// oracle baselines and evaluation read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub features: Vec<f64>,
    pub tokens: Option<Vec<Token>>,
    pub latent_class: ClassId,
    /// Alphabet index in discrete mode.
    pub point: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub anchor: DataPoint,
    pub positive: DataPoint,
    pub negatives: Vec<DataPoint>,
}

/// Total-variation distance between two pmfs of equal length.
pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

impl TryFrom<RawSpec> for MixtureSpec {
    type Error = Error;
    fn try_from(r: RawSpec) -> Result<Self> {
        let spec = MixtureSpec {
            class_dist: r.class_dist,
            conditionals: r.conditionals,
            templates: r.templates,
            mode: r.mode,
            alphabet: r.alphabet,
            vocab_size: r.vocab_size,
            perturb_prob: r.perturb_prob,
            token_offsets: r.token_offsets,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<MixtureSpec> for RawSpec {
    fn from(s: MixtureSpec) -> Self {
        RawSpec {
            class_dist: s.class_dist,
            conditionals: s.conditionals,
            templates: s.templates,
            mode: s.mode,
            alphabet: s.alphabet,
            vocab_size: s.vocab_size,
            perturb_prob: s.perturb_prob,
            token_offsets: s.token_offsets,
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidSpec(msg.into())
}

impl MixtureSpec {
    /// Continuous (Gaussian) spec.
    pub fn continuous(
        class_dist: ClassDistribution,
        conditionals: Vec<Conditional>,
        templates: Vec<Vec<Template>>,
        vocab_size: usize,
    ) -> Result<Self> {
        let spec = MixtureSpec {
            class_dist,
            conditionals,
            templates,
            mode: Mode::Continuous,
            alphabet: None,
            vocab_size,
            perturb_prob: 0.0,
            token_offsets: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Discrete spec over a finite alphabet.
    pub fn discrete(
        class_dist: ClassDistribution,
        alphabet: Vec<Vec<f64>>,
        pmfs: Vec<Vec<f64>>,
        templates: Vec<Vec<Template>>,
        vocab_size: usize,
    ) -> Result<Self> {
        let spec = MixtureSpec {
            class_dist,
            conditionals: pmfs
                .into_iter()
                .map(|pmf| Conditional::Categorical { pmf })
                .collect(),
            templates,
            mode: Mode::Discrete,
            alphabet: Some(alphabet),
            vocab_size,
            perturb_prob: 0.0,
            token_offsets: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_perturb_prob(mut self, p: f64) -> Result<Self> {
        self.perturb_prob = p;
        self.validate()?;
        Ok(self)
    }

    pub fn with_token_offsets(mut self, offsets: Vec<Vec<f64>>) -> Result<Self> {
        self.token_offsets = Some(offsets);
        self.validate()?;
        Ok(self)
    }

    /// Same spec with a different class prior.
    pub fn with_class_dist(&self, class_dist: ClassDistribution) -> Result<Self> {
        let mut s = self.clone();
        s.class_dist = class_dist;
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let k = self.class_dist.n_classes();
        if self.conditionals.len() != k {
            return Err(bad(format!(
                "{} conditionals for {k} classes",
                self.conditionals.len()
            )));
        }
        if self.templates.len() != k {
            return Err(bad(format!(
                "{} template sets for {k} classes",
                self.templates.len()
            )));
        }
        if self.vocab_size < 2 {
            return Err(bad("vocab_size must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.perturb_prob) {
            return Err(bad("perturb_prob must lie in [0, 1]"));
        }
        for (c, ts) in self.templates.iter().enumerate() {
            if ts.is_empty() {
                return Err(bad(format!("class {c} has no templates")));
            }
            for t in ts {
                if t.tokens.is_empty() {
                    return Err(bad(format!("class {c} has an empty template")));
                }
                if t.tokens.iter().any(|&id| id as usize >= self.vocab_size) {
                    return Err(bad(format!("class {c} template uses a token >= vocab_size")));
                }
                if !(t.weight > 0.0) || !t.weight.is_finite() {
                    return Err(bad(format!("class {c} template weight must be positive")));
                }
            }
        }
        match self.mode {
            Mode::Continuous => {
                if self.alphabet.is_some() {
                    return Err(bad("continuous spec must not carry an alphabet"));
                }
                let mut dim = None;
                for (c, cond) in self.conditionals.iter().enumerate() {
                    match cond {
                        Conditional::Gaussian { mean, std } => {
                            if mean.is_empty() || mean.iter().any(|m| !m.is_finite()) {
                                return Err(bad(format!("class {c} mean must be finite and nonempty")));
                            }
                            if !(*std >= 0.0) || !std.is_finite() {
                                return Err(bad(format!("class {c} std must be finite and >= 0")));
                            }
                            match dim {
                                None => dim = Some(mean.len()),
                                Some(d) if d != mean.len() => {
                                    return Err(bad("Gaussian means differ in dimension"))
                                }
                                _ => {}
                            }
                        }
                        Conditional::Categorical { .. } => {
                            return Err(bad("continuous spec with a categorical conditional"))
                        }
                    }
                }
                if let Some(off) = &self.token_offsets {
                    if off.len() != self.vocab_size
                        || off.iter().any(|row| Some(row.len()) != dim)
                    {
                        return Err(bad("token_offsets must be vocab_size x feature_dim"));
                    }
                }
            }
            Mode::Discrete => {
                let alphabet = self
                    .alphabet
                    .as_ref()
                    .ok_or_else(|| bad("discrete spec needs an alphabet"))?;
                if alphabet.is_empty() || alphabet.len() > MAX_ALPHABET {
                    return Err(bad(format!(
                        "alphabet size {} outside 1..={MAX_ALPHABET}",
                        alphabet.len()
                    )));
                }
                let d = alphabet[0].len();
                if d == 0 || alphabet.iter().any(|p| p.len() != d) {
                    return Err(bad("alphabet points must share a nonzero dimension"));
                }
                if self.token_offsets.is_some() {
                    return Err(bad("token_offsets are continuous-mode only"));
                }
                for (c, cond) in self.conditionals.iter().enumerate() {
                    match cond {
                        Conditional::Categorical { pmf } => {
                            if pmf.len() != alphabet.len() {
                                return Err(bad(format!("class {c} pmf length mismatch")));
                            }
                            if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
                                return Err(bad(format!("class {c} pmf has invalid entries")));
                            }
                            let s: f64 = pmf.iter().sum();
                            if (s - 1.0).abs() > SUM_TOL {
                                return Err(bad(format!("class {c} pmf sums to {s}")));
                            }
                        }
                        Conditional::Gaussian { .. } => {
                            return Err(bad("discrete spec with a Gaussian conditional"))
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn class_dist(&self) -> &ClassDistribution {
        &self.class_dist
    }

    pub fn n_classes(&self) -> usize {
        self.class_dist.n_classes()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn perturb_prob(&self) -> f64 {
        self.perturb_prob
    }

    pub fn conditionals(&self) -> &[Conditional] {
        &self.conditionals
    }

    pub fn templates(&self, c: ClassId) -> &[Template] {
        &self.templates[c]
    }

    pub fn alphabet(&self) -> Option<&[Vec<f64>]> {
        self.alphabet.as_deref()
    }

    pub fn feature_dim(&self) -> usize {
        match (&self.alphabet, &self.conditionals[0]) {
            (Some(a), _) => a[0].len(),
            (None, Conditional::Gaussian { mean, .. }) => mean.len(),
            (None, Conditional::Categorical { .. }) => unreachable!("validated"),
        }
    }

    fn check_class(&self, c: ClassId) -> Result<()> {
        if c >= self.n_classes() {
            return Err(Error::InvalidClass {
                class: c,
                n_classes: self.n_classes(),
            });
        }
        Ok(())
    }

    /// Draws a template of class `c` by weight, then with probability
    /// `perturb_prob` replaces one uniformly chosen position by a different
    /// uniformly chosen token.
    pub fn generate_report<R: Rng + ?Sized>(&self, c: ClassId, rng: &mut R) -> Result<Vec<Token>> {
        self.check_class(c)?;
        let ts = &self.templates[c];
        let weights: Vec<f64> = ts.iter().map(|t| t.weight).collect();
        let total: f64 = weights.iter().sum();
        let pmf: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut tokens = ts[sample_index(&pmf, rng)].tokens.clone();
        if self.perturb_prob > 0.0 && rng.random::<f64>() < self.perturb_prob {
            let pos = rng.random_range(0..tokens.len());
            // Uniform over the V-1 tokens different from the current one.
            let mut t = rng.random_range(0..self.vocab_size as Token - 1);
            if t >= tokens[pos] {
                t += 1;
            }
            tokens[pos] = t;
        }
        Ok(tokens)
    }

    /// One draw from `D_c`, with tokens from class `c`'s templates.
    pub fn sample_conditional<R: Rng + ?Sized>(&self, c: ClassId, rng: &mut R) -> Result<DataPoint> {
        self.check_class(c)?;
        let tokens = self.generate_report(c, rng)?;
        let (features, point) = match &self.conditionals[c] {
            Conditional::Gaussian { mean, std } => {
                let mut f = mean.clone();
                if let Some(off) = &self.token_offsets {
                    let inv = 1.0 / tokens.len() as f64;
                    for &t in &tokens {
                        for (fi, oi) in f.iter_mut().zip(&off[t as usize]) {
                            *fi += inv * oi;
                        }
                    }
                }
                if *std > 0.0 {
                    for fi in f.iter_mut() {
                        let z: f64 = StandardNormal.sample(rng);
                        *fi += std * z;
                    }
                }
                (f, None)
            }
            Conditional::Categorical { pmf } => {
                let i = sample_index(pmf, rng);
                (self.alphabet.as_ref().expect("validated")[i].clone(), Some(i))
            }
        };
        Ok(DataPoint {
            features,
            tokens: Some(tokens),
            latent_class: c,
            point,
        })
    }

    /// One draw from the marginal `D = sum_c rho(c) D_c`.
    pub fn sample_marginal<R: Rng + ?Sized>(&self, rng: &mut R) -> DataPoint {
        let c = sample_class(&self.class_dist, rng);
        self.sample_conditional(c, rng).expect("class drawn from prior is valid")
    }

    /// Prior restricted to classes other than `c_x`, renormalized.
    pub fn true_negative_prior(&self, c_x: ClassId) -> Result<Vec<f64>> {
        self.check_class(c_x)?;
        let rho = self.class_dist.prob(c_x);
        let rest = 1.0 - rho;
        if rest <= 0.0 {
            return Err(Error::NoOtherClass(c_x));
        }
        Ok(self
            .class_dist
            .probs()
            .iter()
            .enumerate()
            .map(|(c, p)| if c == c_x { 0.0 } else { p / rest })
            .collect())
    }

    /// One draw from `E_{c_x}`: a class `c != c_x` with probability
    /// `rho(c) / (1 - rho(c_x))`, then its conditional.
    pub fn sample_true_negative<R: Rng + ?Sized>(&self, c_x: ClassId, rng: &mut R) -> Result<DataPoint> {
        let prior = self.true_negative_prior(c_x)?;
        let c = sample_index(&prior, rng);
        self.sample_conditional(c, rng)
    }

    /// Anchor, same-class positive and `n_neg` marginal negatives.
    ///
    /// Unimodal: the positive is an independent redraw from the anchor's
    /// conditional. Cross-modal: one instance is drawn and split into a text
    /// view (anchor, tokens only) and an image view (positive, features only).
    pub fn sample_pair_batch<R: Rng + ?Sized>(
        &self,
        n_neg: usize,
        cross_modal: bool,
        rng: &mut R,
    ) -> Result<PairSample> {
        if n_neg == 0 {
            return Err(Error::InvalidArgument {
                arg: "n_neg",
                reason: "need at least one negative".into(),
            });
        }
        let c = sample_class(&self.class_dist, rng);
        let (anchor, positive) = if cross_modal {
            let inst = self.sample_conditional(c, rng)?;
            let text = DataPoint {
                features: Vec::new(),
                tokens: inst.tokens.clone(),
                latent_class: c,
                point: None,
            };
            let image = DataPoint {
                tokens: None,
                ..inst
            };
            (text, image)
        } else {
            (self.sample_conditional(c, rng)?, self.sample_conditional(c, rng)?)
        };
        let negatives = (0..n_neg).map(|_| self.sample_marginal(rng)).collect();
        Ok(PairSample {
            anchor,
            positive,
            negatives,
        })
    }

    fn require_discrete(&self) -> Result<()> {
        if self.mode != Mode::Discrete {
            return Err(Error::RequiresDiscrete);
        }
        Ok(())
    }

    /// Exact pmf of `D_c` over the alphabet.
    pub fn class_pmf(&self, c: ClassId) -> Result<&[f64]> {
        self.require_discrete()?;
        self.check_class(c)?;
        match &self.conditionals[c] {
            Conditional::Categorical { pmf } => Ok(pmf),
            Conditional::Gaussian { .. } => unreachable!("validated"),
        }
    }

    /// Exact distribution of [`Self::generate_report`] for class `c`, as
    /// `(tokens, probability)` pairs. Duplicates are not merged.
    pub fn report_pmf(&self, c: ClassId) -> Result<Vec<(Vec<Token>, f64)>> {
        self.check_class(c)?;
        let ts = &self.templates[c];
        let total: f64 = ts.iter().map(|t| t.weight).sum();
        let p = self.perturb_prob;
        let v = self.vocab_size as Token;
        let mut out = Vec::new();
        for t in ts {
            let w = t.weight / total;
            if w == 0.0 {
                continue;
            }
            out.push((t.tokens.clone(), w * (1.0 - p)));
            if p > 0.0 {
                let each = w * p / (t.tokens.len() as f64 * (v - 1) as f64);
                for pos in 0..t.tokens.len() {
                    for tok in (0..v).filter(|&k| k != t.tokens[pos]) {
                        let mut tokens = t.tokens.clone();
                        tokens[pos] = tok;
                        out.push((tokens, each));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Exact pmf of the marginal `D`.
    pub fn marginal_pmf(&self) -> Result<Vec<f64>> {
        self.require_discrete()?;
        let n = self.alphabet.as_ref().expect("validated").len();
        let mut out = vec![0.0; n];
        for c in 0..self.n_classes() {
            let rho = self.class_dist.prob(c);
            for (o, p) in out.iter_mut().zip(self.class_pmf(c)?) {
                *o += rho * p;
            }
        }
        Ok(out)
    }

    /// Exact pmf of `E_c`, enumerated class by class.
    pub fn true_negative_pmf(&self, c: ClassId) -> Result<Vec<f64>> {
        self.require_discrete()?;
        let prior = self.true_negative_prior(c)?;
        let n = self.alphabet.as_ref().expect("validated").len();
        let mut out = vec![0.0; n];
        for (c2, w) in prior.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(self.class_pmf(c2)?) {
                *o += w * p;
            }
        }
        Ok(out)
    }

    /// TV distance between `D` and `rho(c) D_c + (1 - rho(c)) E_c` for a
    /// caller-supplied `E_c` pmf.
    pub fn decomposition_residual_with(&self, c: ClassId, e_c: &[f64]) -> Result<f64> {
        let d = self.marginal_pmf()?;
        let d_c = self.class_pmf(c)?;
        let rho = self.class_dist.prob(c);
        let mix: Vec<f64> = d_c
            .iter()
            .zip(e_c)
            .map(|(a, b)| rho * a + (1.0 - rho) * b)
            .collect();
        Ok(tv_distance(&d, &mix))
    }

    /// TV distance between `D` and `rho(c) D_c + (1 - rho(c)) E_c`, both sides
    /// enumerated exactly. Zero up to rounding for every valid spec.
    pub fn decomposition_residual(&self, c: ClassId) -> Result<f64> {
        self.require_discrete()?;
        self.check_class(c)?;
        if self.class_dist.prob(c) >= 1.0 {
            let n = self.alphabet.as_ref().expect("validated").len();
            return self.decomposition_residual_with(c, &vec![0.0; n]);
        }
        let e_c = self.true_negative_pmf(c)?;
        self.decomposition_residual_with(c, &e_c)
    }

    /// New spec whose prior weights each class by `rho(c) * r` if selected
    /// and `rho(c)` otherwise, renormalized. Conditionals are untouched.
    pub fn subsample_classes(&self, selected: &[ClassId], r: f64) -> Result<MixtureSpec> {
        if selected.is_empty() {
            return Err(Error::Empty("selected classes"));
        }
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::InvalidArgument {
                arg: "r",
                reason: format!("must lie in (0, 1], got {r}"),
            });
        }
        for &c in selected {
            self.check_class(c)?;
        }
        let weights: Vec<f64> = self
            .class_dist
            .probs()
            .iter()
            .enumerate()
            .map(|(c, p)| if selected.contains(&c) { p * r } else { *p })
            .collect();
        self.with_class_dist(ClassDistribution::from_weights(&weights)?)
    }
}
