//! Per-sample class-probability estimates.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{ClassDistribution, DataPoint};
use crate::text::NGramLM;

pub const DEFAULT_ETA_MIN: f64 = 1e-4;
pub const DEFAULT_ETA_MAX: f64 = 0.9;
pub const DEFAULT_LM_A: f64 = 0.2;
pub const DEFAULT_LM_K: f64 = 0.35;

/// Serializable description of a provider; heavy handles (the class prior,
/// the language model) are attached by [`EtaProvider::from_config`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EtaConfig {
    Constant {
        eta: f64,
    },
    TrueOracle,
    LmLogLinear {
        #[serde(default = "default_a")]
        a: f64,
        #[serde(default = "default_k")]
        k: f64,
        #[serde(default)]
        length_normalize: bool,
    },
}

fn default_a() -> f64 {
    DEFAULT_LM_A
}

fn default_k() -> f64 {
    DEFAULT_LM_K
}

impl EtaConfig {
    pub fn lm_default() -> Self {
        EtaConfig::LmLogLinear {
            a: DEFAULT_LM_A,
            k: DEFAULT_LM_K,
            length_normalize: false,
        }
    }

    pub fn label(&self) -> String {
        match self {
            EtaConfig::Constant { eta } => format!("constant({eta})"),
            EtaConfig::TrueOracle => "true_oracle".into(),
            EtaConfig::LmLogLinear { a, k, .. } => format!("lm(a={a},k={k})"),
        }
    }
}

#[derive(Debug, Clone)]
pub enum EtaVariant {
    Constant(f64),
    TrueOracle(ClassDistribution),
    LmLogLinear {
        a: f64,
        k: f64,
        lm: Arc<NGramLM>,
        length_normalize: bool,
    },
}

#[derive(Debug, Clone)]
pub struct EtaProvider {
    variant: EtaVariant,
    eta_min: f64,
    eta_max: f64,
}

fn positive(arg: &'static str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::InvalidArgument {
            arg,
            reason: format!("must be positive and finite, got {v}"),
        });
    }
    Ok(())
}

impl EtaProvider {
    fn build(variant: EtaVariant) -> Self {
        Self {
            variant,
            eta_min: DEFAULT_ETA_MIN,
            eta_max: DEFAULT_ETA_MAX,
        }
    }

    pub fn constant(eta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eta) {
            return Err(Error::EtaOutOfRange(eta));
        }
        Ok(Self::build(EtaVariant::Constant(eta)))
    }

    pub fn true_oracle(prior: ClassDistribution) -> Self {
        Self::build(EtaVariant::TrueOracle(prior))
    }

    pub fn lm_log_linear(a: f64, k: f64, lm: Arc<NGramLM>, length_normalize: bool) -> Result<Self> {
        positive("a", a)?;
        positive("k", k)?;
        Ok(Self::build(EtaVariant::LmLogLinear {
            a,
            k,
            lm,
            length_normalize,
        }))
    }

    /// Builds a provider from its config; `lm` is required for the LM variant.
    pub fn from_config(cfg: &EtaConfig, prior: &ClassDistribution, lm: Option<Arc<NGramLM>>) -> Result<Self> {
        match *cfg {
            EtaConfig::Constant { eta } => Self::constant(eta),
            EtaConfig::TrueOracle => Ok(Self::true_oracle(prior.clone())),
            EtaConfig::LmLogLinear {
                a,
                k,
                length_normalize,
            } => {
                let lm = lm.ok_or(Error::InvalidArgument {
                    arg: "lm",
                    reason: "the LM provider needs a fitted language model".into(),
                })?;
                Self::lm_log_linear(a, k, lm, length_normalize)
            }
        }
    }

    pub fn with_clamp(mut self, eta_min: f64, eta_max: f64) -> Result<Self> {
        if !(0.0 < eta_min && eta_min <= eta_max && eta_max < 1.0) {
            return Err(Error::InvalidArgument {
                arg: "clamp",
                reason: format!("need 0 < min <= max < 1, got [{eta_min}, {eta_max}]"),
            });
        }
        self.eta_min = eta_min;
        self.eta_max = eta_max;
        Ok(self)
    }

    pub fn variant(&self) -> &EtaVariant {
        &self.variant
    }

    pub fn clamp_range(&self) -> (f64, f64) {
        (self.eta_min, self.eta_max)
    }

    pub fn is_oracle(&self) -> bool {
        matches!(self.variant, EtaVariant::TrueOracle(_))
    }

    fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.eta_min, self.eta_max)
    }

    /// `clamp(a exp(k pll))`, with `pll` divided by `len` when length
    /// normalization is on. Non-LM providers ignore the arguments.
    pub fn eta_from_pll(&self, pll: f64, len: usize) -> Result<f64> {
        match &self.variant {
            EtaVariant::LmLogLinear {
                a,
                k,
                length_normalize,
                ..
            } => {
                let score = if *length_normalize { pll / len.max(1) as f64 } else { pll };
                Ok(self.clamp(a * (k * score).exp()))
            }
            _ => Err(Error::InvalidArgument {
                arg: "provider",
                reason: "PLL lookup applies only to the LM provider".into(),
            }),
        }
    }

    pub fn eta_of(&self, x: &DataPoint) -> Result<f64> {
        match &self.variant {
            EtaVariant::Constant(eta) => Ok(self.clamp(*eta)),
            EtaVariant::TrueOracle(prior) => {
                if x.latent_class >= prior.n_classes() {
                    return Err(Error::InvalidClass {
                        class: x.latent_class,
                        n_classes: prior.n_classes(),
                    });
                }
                Ok(self.clamp(prior.prob(x.latent_class)))
            }
            EtaVariant::LmLogLinear { lm, .. } => {
                let tokens = x.tokens.as_deref().ok_or(Error::MissingTokens)?;
                self.eta_from_pll(lm.pseudo_log_likelihood(tokens), tokens.len())
            }
        }
    }

    /// Estimates for a whole dataset. `pll` is an optional precomputed table
    /// aligned with `points`, used by the LM provider instead of rescoring.
    pub fn eta_table(&self, points: &[DataPoint], pll: Option<&[f64]>) -> Result<Vec<f64>> {
        match (&self.variant, pll) {
            (EtaVariant::LmLogLinear { .. }, Some(table)) => {
                if table.len() != points.len() {
                    return Err(Error::DimensionMismatch {
                        expected: points.len(),
                        got: table.len(),
                    });
                }
                points
                    .iter()
                    .zip(table)
                    .map(|(x, p)| {
                        let len = x.tokens.as_ref().ok_or(Error::MissingTokens)?.len();
                        self.eta_from_pll(*p, len)
                    })
                    .collect()
            }
            _ => points.iter().map(|x| self.eta_of(x)).collect(),
        }
    }
}
