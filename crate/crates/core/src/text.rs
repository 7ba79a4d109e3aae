//! Bigram language model with add-alpha smoothing and masked-token
//! pseudo-log-likelihood scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::Token;
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramLM {
    vocab_size: usize,
    /// Row-major `V x V`; `bigram[a * V + b]` counts `a` followed by `b`.
    bigram: Vec<f64>,
    unigram: Vec<f64>,
    alpha: f64,
    #[serde(skip)]
    row_totals: Vec<f64>,
    #[serde(skip)]
    unigram_total: f64,
}

/// Counts adjacent token pairs and single tokens over `corpus`.
pub fn fit_ngram(corpus: &[Vec<Token>], vocab_size: usize, alpha: f64) -> Result<NGramLM> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut bigram = vec![0.0; vocab_size * vocab_size];
    let mut unigram = vec![0.0; vocab_size];
    for seq in corpus {
        for &t in seq {
            if t as usize >= vocab_size {
                return Err(Error::InvalidArgument {
                    arg: "corpus",
                    reason: format!("token {t} >= vocab size {vocab_size}"),
                });
            }
            unigram[t as usize] += 1.0;
        }
        for w in seq.windows(2) {
            bigram[w[0] as usize * vocab_size + w[1] as usize] += 1.0;
        }
    }
    NGramLM::from_counts(vocab_size, bigram, unigram, alpha)
}

impl NGramLM {
    pub fn from_counts(vocab_size: usize, bigram: Vec<f64>, unigram: Vec<f64>, alpha: f64) -> Result<Self> {
        if vocab_size == 0 || bigram.len() != vocab_size * vocab_size || unigram.len() != vocab_size {
            return Err(Error::InvalidArgument {
                arg: "counts",
                reason: "shape does not match vocab size".into(),
            });
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidArgument {
                arg: "alpha",
                reason: format!("must be positive, got {alpha}"),
            });
        }
        if bigram.iter().chain(&unigram).any(|c| !(*c >= 0.0)) {
            return Err(Error::InvalidArgument {
                arg: "counts",
                reason: "counts must be nonnegative".into(),
            });
        }
        let mut lm = Self {
            vocab_size,
            bigram,
            unigram,
            alpha,
            row_totals: Vec::new(),
            unigram_total: 0.0,
        };
        lm.refresh_totals();
        Ok(lm)
    }

    fn refresh_totals(&mut self) {
        let v = self.vocab_size;
        self.row_totals = (0..v).map(|a| self.bigram[a * v..(a + 1) * v].iter().sum()).collect();
        self.unigram_total = self.unigram.iter().sum();
    }

    /// Parses JSON and rebuilds the cached totals.
    pub fn from_json(s: &str) -> Result<Self> {
        let lm: NGramLM = serde_json::from_str(s)?;
        Self::from_counts(lm.vocab_size, lm.bigram, lm.unigram, lm.alpha)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `p(next | prev) = (C(prev, next) + alpha) / (sum_b C(prev, b) + alpha V)`.
    pub fn cond_prob(&self, prev: Token, next: Token) -> f64 {
        let v = self.vocab_size;
        let (a, b) = (prev as usize, next as usize);
        (self.bigram[a * v + b] + self.alpha) / (self.row_totals[a] + self.alpha * v as f64)
    }

    /// Smoothed unigram probability.
    pub fn unigram_prob(&self, t: Token) -> f64 {
        (self.unigram[t as usize] + self.alpha) / (self.unigram_total + self.alpha * self.vocab_size as f64)
    }

    /// Distribution of the token at `pos` given its neighbors, over the whole
    /// vocabulary. Interior positions use `p(t | left) p(right | t)`; the first
    /// position uses `p(t) p(right | t)`; the last uses `p(t | left)`; a lone
    /// token uses the unigram.
    pub fn masked_conditional(&self, x: &[Token], pos: usize) -> Vec<f64> {
        let left = pos.checked_sub(1).map(|i| x[i]);
        let right = x.get(pos + 1).copied();
        let mut w: Vec<f64> = (0..self.vocab_size as Token)
            .map(|t| {
                let l = match left {
                    Some(a) => self.cond_prob(a, t),
                    None => self.unigram_prob(t),
                };
                let r = right.map_or(1.0, |b| self.cond_prob(t, b));
                l * r
            })
            .collect();
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|p| *p /= z);
        w
    }

    /// Sum over positions of the log masked conditional of the observed token.
    pub fn pseudo_log_likelihood(&self, x: &[Token]) -> f64 {
        (0..x.len())
            .map(|i| {
                let left = i.checked_sub(1).map(|j| x[j]);
                let right = x.get(i + 1).copied();
                let score = |t: Token| {
                    let l = match left {
                        Some(a) => self.cond_prob(a, t),
                        None => self.unigram_prob(t),
                    };
                    l * right.map_or(1.0, |b| self.cond_prob(t, b))
                };
                let z: f64 = (0..self.vocab_size as Token).map(score).sum();
                (score(x[i]) / z).ln()
            })
            .sum()
    }
}

/// PLL for every sentence, in corpus order.
pub fn pll_table(lm: &NGramLM, corpus: &[Vec<Token>]) -> Vec<f64> {
    par::map_slice(corpus, |x| lm.pseudo_log_likelihood(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn deterministic_pair_dominates_as_alpha_vanishes() {
        let lm = fit_ngram(&[vec![0, 1], vec![0, 1]], 2, 1e-12).unwrap();
        assert!((lm.cond_prob(0, 1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unseen_context_is_uniform() {
        let lm = fit_ngram(&[vec![0, 0]], 2, 1.0).unwrap();
        assert_eq!(lm.cond_prob(1, 0), 0.5);
        assert_eq!(lm.cond_prob(1, 1), 0.5);
    }

    #[test]
    fn hand_counted_smoothing() {
        // Token 0 is the left context of (0,1) and (0,0): 2 occurrences.
        // p(1|0) = (1 + 1) / (2 + 1 * 2) = 0.5.
        let lm = fit_ngram(&[vec![0, 1], vec![0, 0]], 2, 1.0).unwrap();
        assert_eq!(lm.cond_prob(0, 1), 0.5);
        assert_eq!(lm.cond_prob(0, 0), 0.5);
        // Unigram: counts [3, 1], (3 + 1) / (4 + 2).
        assert!((lm.unigram_prob(0) - 4.0 / 6.0).abs() < 1e-15);
        assert!(fit_ngram(&[], 2, 1.0).is_err());
    }

    #[test]
    fn uniform_lm_pll() {
        let v = 7;
        let lm = NGramLM::from_counts(v, vec![0.0; v * v], vec![0.0; v], 1.0).unwrap();
        for len in 1..6 {
            let x: Vec<Token> = (0..len).map(|i| (i * 3 % v) as Token).collect();
            let pll = lm.pseudo_log_likelihood(&x);
            assert!((pll - len as f64 * (1.0 / v as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_is_unigram() {
        let lm = fit_ngram(&[vec![0, 1, 1], vec![2]], 3, 0.5).unwrap();
        assert!((lm.pseudo_log_likelihood(&[1]) - lm.unigram_prob(1).ln()).abs() < 1e-15);
    }

    #[test]
    fn deterministic_chain_pll_vanishes() {
        // The cyclic chain 0 -> 1 -> 2 -> 0 makes every masked token
        // determined by its neighbors once smoothing vanishes.
        let chain: Vec<Token> = (0..30).map(|i| (i % 3) as Token).collect();
        let lm = fit_ngram(&vec![chain; 4], 3, 1e-12).unwrap();
        let pll = lm.pseudo_log_likelihood(&[0, 1, 2]);
        assert!(pll.abs() < 1e-9, "pll = {pll}");
    }

    #[test]
    fn frequent_template_scores_higher() {
        let mut corpus = vec![vec![0, 1, 2, 3]; 50];
        corpus.extend(vec![vec![4, 5, 6, 7]; 5]);
        let lm = fit_ngram(&corpus, 8, 1.0).unwrap();
        assert!(lm.pseudo_log_likelihood(&[0, 1, 2, 3]) > lm.pseudo_log_likelihood(&[4, 5, 6, 7]));
    }

    #[test]
    fn json_round_trip_restores_totals() {
        let lm = fit_ngram(&[vec![0, 1, 2], vec![2, 1]], 3, 1.0).unwrap();
        let back = NGramLM::from_json(&serde_json::to_string(&lm).unwrap()).unwrap();
        assert_eq!(lm.pseudo_log_likelihood(&[0, 1, 2]), back.pseudo_log_likelihood(&[0, 1, 2]));
    }

    proptest! {
        #[test]
        fn masked_conditionals_normalize(
            corpus in prop::collection::vec(prop::collection::vec(0u32..6, 1..8), 1..10),
            x in prop::collection::vec(0u32..6, 1..8),
            alpha in 0.01f64..3.0,
        ) {
            let lm = fit_ngram(&corpus, 6, alpha).unwrap();
            for pos in 0..x.len() {
                let s: f64 = lm.masked_conditional(&x, pos).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            for a in 0..6 {
                let s: f64 = (0..6).map(|b| lm.cond_prob(a, b)).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            let p1 = lm.pseudo_log_likelihood(&x);
            prop_assert_eq!(p1, lm.pseudo_log_likelihood(&x));
            prop_assert!(p1 <= 0.0);
        }

        #[test]
        fn dominant_template_has_higher_pll(
            a in prop::collection::vec(0u32..5, 2..6),
            rare in 1usize..4,
        ) {
            // b is a relabeling of a onto disjoint tokens, so only frequency differs.
            let b: Vec<Token> = a.iter().map(|t| t + 5).collect();
            let mut corpus = vec![a.clone(); rare * 10];
            corpus.extend(vec![b.clone(); rare]);
            let lm = fit_ngram(&corpus, 10, 1.0).unwrap();
            prop_assert!(lm.pseudo_log_likelihood(&a) >= lm.pseudo_log_likelihood(&b));
        }
    }
}
