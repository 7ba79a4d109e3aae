//! Two-layer perceptron encoder onto the radius-gamma hypersphere.
//!
//! Feature inputs feed the MLP directly. Token inputs are first mapped to
//! the mean of their rows in a `V x d` embedding table, so text and image
//! views share one head and land in the same embedding space.

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{DataPoint, Token};
use crate::rng::SeedStream;

const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// Test configuration for closed-form gradient checks.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// Size of the token table; `None` disables the text path.
    pub vocab_size: Option<usize>,
    pub gamma: f64,
    pub gamma_trainable: bool,
    pub activation: Activation,
    /// Normalize outputs onto the sphere. Off only in test configurations.
    pub project: bool,
}

impl EncoderConfig {
    pub fn new(input_dim: usize, hidden_dim: usize, output_dim: usize, gamma: f64) -> Self {
        Self {
            input_dim,
            hidden_dim,
            output_dim,
            vocab_size: None,
            gamma,
            gamma_trainable: false,
            activation: Activation::Tanh,
            project: true,
        }
    }

    pub fn with_vocab(mut self, vocab_size: usize) -> Self {
        self.vocab_size = Some(vocab_size);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub token_emb: Option<Array2<f64>>,
    pub gamma: f64,
    pub gamma_trainable: bool,
    pub activation: Activation,
    pub project: bool,
}

/// Gradients with the same layout as [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub token_emb: Option<Array2<f64>>,
    pub gamma: f64,
}

/// A point on the sphere of radius gamma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vec: Vec<f64>,
}

impl Embedding {
    pub fn norm(&self) -> f64 {
        self.vec.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Dot-product similarity.
pub fn similarity(e1: &Embedding, e2: &Embedding) -> Result<f64> {
    if e1.vec.len() != e2.vec.len() {
        return Err(Error::DimensionMismatch {
            expected: e1.vec.len(),
            got: e2.vec.len(),
        });
    }
    Ok(e1.vec.iter().zip(&e2.vec).map(|(a, b)| a * b).sum())
}

/// One encoder input: a feature vector or a token sequence.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Features(&'a [f64]),
    Tokens(&'a [Token]),
}

impl<'a> Input<'a> {
    /// Features when present, else tokens.
    pub fn of(x: &'a DataPoint) -> Result<Self> {
        if !x.features.is_empty() {
            Ok(Input::Features(&x.features))
        } else if let Some(t) = &x.tokens {
            Ok(Input::Tokens(t))
        } else {
            Err(Error::Empty("data point has neither features nor tokens"))
        }
    }

    pub fn text_of(x: &'a DataPoint) -> Result<Self> {
        x.tokens.as_deref().map(Input::Tokens).ok_or(Error::MissingTokens)
    }
}

/// Activations saved by [`EncoderParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Array2<f64>,
    h: Array2<f64>,
    u: Array2<f64>,
    norms: Vec<f64>,
    token_rows: Vec<Option<Vec<Token>>>,
    /// Batch embeddings, one row per input.
    pub emb: Array2<f64>,
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, seed: SeedStream) -> Array2<f64> {
    let mut rng = seed.rng();
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    })
}

impl EncoderParams {
    /// Gaussian init scaled by `1/sqrt(fan_in)`, small random biases.
    pub fn init(cfg: &EncoderConfig, seed: SeedStream) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.hidden_dim == 0 || cfg.output_dim == 0 {
            return Err(Error::InvalidArgument {
                arg: "encoder dims",
                reason: "all dimensions must be positive".into(),
            });
        }
        if !(cfg.gamma > 0.0) || !cfg.gamma.is_finite() {
            return Err(Error::InvalidArgument {
                arg: "gamma",
                reason: format!("must be positive, got {}", cfg.gamma),
            });
        }
        let (d, h, o) = (cfg.input_dim, cfg.hidden_dim, cfg.output_dim);
        Ok(Self {
            w1: gaussian_matrix(h, d, 1.0 / (d as f64).sqrt(), seed.fork(1)),
            b1: gaussian_matrix(1, h, 0.1, seed.fork(2)).row(0).to_owned(),
            w2: gaussian_matrix(o, h, 1.0 / (h as f64).sqrt(), seed.fork(3)),
            b2: gaussian_matrix(1, o, 0.1, seed.fork(4)).row(0).to_owned(),
            token_emb: cfg.vocab_size.map(|v| gaussian_matrix(v, d, 1.0, seed.fork(5))),
            gamma: cfg.gamma,
            gamma_trainable: cfg.gamma_trainable,
            activation: cfg.activation,
            project: cfg.project,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    /// Architecture of these parameters, with the current radius.
    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.input_dim(),
            hidden_dim: self.w1.nrows(),
            output_dim: self.output_dim(),
            vocab_size: self.token_emb.as_ref().map(|t| t.nrows()),
            gamma: self.gamma,
            gamma_trainable: self.gamma_trainable,
            activation: self.activation,
            project: self.project,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    /// Number of trainable scalars.
    pub fn n_params(&self) -> usize {
        self.w1.len()
            + self.b1.len()
            + self.w2.len()
            + self.b2.len()
            + self.token_emb.as_ref().map_or(0, |t| t.len())
            + self.gamma_trainable as usize
    }

    /// Trainable parameters in a fixed order: w1, b1, w2, b2, token table,
    /// gamma (when trainable).
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        if let Some(t) = &self.token_emb {
            out.extend(t.iter());
        }
        if self.gamma_trainable {
            out.push(self.gamma);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        self.w1.iter_mut().for_each(|w| *w = it.next().unwrap());
        self.b1.iter_mut().for_each(|w| *w = it.next().unwrap());
        self.w2.iter_mut().for_each(|w| *w = it.next().unwrap());
        self.b2.iter_mut().for_each(|w| *w = it.next().unwrap());
        if let Some(t) = &mut self.token_emb {
            t.iter_mut().for_each(|w| *w = it.next().unwrap());
        }
        if self.gamma_trainable {
            self.gamma = it.next().unwrap();
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
            token_emb: self.token_emb.as_ref().map(|t| Array2::zeros(t.raw_dim())),
            gamma: 0.0,
        }
    }

    fn input_row(&self, input: Input<'_>, out: &mut [f64]) -> Result<()> {
        let d = self.input_dim();
        match input {
            Input::Features(f) => {
                if f.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: f.len(),
                    });
                }
                out.copy_from_slice(f);
            }
            Input::Tokens(toks) => {
                let table = self.token_emb.as_ref().ok_or(Error::InvalidArgument {
                    arg: "input",
                    reason: "encoder has no token table".into(),
                })?;
                if toks.is_empty() {
                    return Err(Error::Empty("token sequence"));
                }
                out.iter_mut().for_each(|v| *v = 0.0);
                let inv = 1.0 / toks.len() as f64;
                for &t in toks {
                    let t = t as usize;
                    if t >= table.nrows() {
                        return Err(Error::InvalidArgument {
                            arg: "tokens",
                            reason: format!("token {t} outside table of {} rows", table.nrows()),
                        });
                    }
                    for (o, e) in out.iter_mut().zip(table.row(t)) {
                        *o += inv * e;
                    }
                }
            }
        }
        Ok(())
    }

    /// Batched forward pass.
    pub fn forward(&self, inputs: &[Input<'_>]) -> Result<ForwardCache> {
        let (b, d) = (inputs.len(), self.input_dim());
        let mut x = Array2::zeros((b, d));
        let mut token_rows = Vec::with_capacity(b);
        for (i, inp) in inputs.iter().enumerate() {
            self.input_row(*inp, x.row_mut(i).as_slice_mut().expect("row-major"))?;
            token_rows.push(match inp {
                Input::Tokens(t) => Some(t.to_vec()),
                Input::Features(_) => None,
            });
        }
        let mut h = x.dot(&self.w1.t()) + &self.b1;
        if self.activation == Activation::Tanh {
            h.mapv_inplace(f64::tanh);
        }
        let u = h.dot(&self.w2.t()) + &self.b2;
        let mut norms = Vec::with_capacity(b);
        let mut emb = u.clone();
        for (i, mut row) in emb.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !n.is_finite() {
                return Err(Error::NonFinite(format!("pre-projection norm of row {i}")));
            }
            norms.push(n);
            if self.project {
                if n < MIN_NORM {
                    return Err(Error::DegenerateProjection(n));
                }
                row.mapv_inplace(|v| self.gamma * v / n);
            }
        }
        Ok(ForwardCache {
            x,
            h,
            u,
            norms,
            token_rows,
            emb,
        })
    }

    /// Exact gradients of a scalar loss given `d_emb = dLoss/dEmbedding`.
    pub fn backward(&self, cache: &ForwardCache, d_emb: &Array2<f64>) -> Result<ParamGrads> {
        if d_emb.dim() != cache.emb.dim() {
            return Err(Error::DimensionMismatch {
                expected: cache.emb.len(),
                got: d_emb.len(),
            });
        }
        let mut grads = self.zero_grads();
        let mut d_u = d_emb.clone();
        if self.project {
            for (i, mut row) in d_u.rows_mut().into_iter().enumerate() {
                let n = cache.norms[i];
                let u = cache.u.row(i);
                let radial = u.dot(&row) / n;
                // Jacobian of gamma * u / |u|: gamma (I / |u| - u u^T / |u|^3).
                grads.gamma += radial;
                for (r, uj) in row.iter_mut().zip(u.iter()) {
                    *r = self.gamma * (*r - uj * radial / n) / n;
                }
            }
        }
        grads.w2 = d_u.t().dot(&cache.h);
        grads.b2 = d_u.sum_axis(Axis(0));
        let mut d_z = d_u.dot(&self.w2);
        if self.activation == Activation::Tanh {
            d_z.zip_mut_with(&cache.h, |g, h| *g *= 1.0 - h * h);
        }
        grads.w1 = d_z.t().dot(&cache.x);
        grads.b1 = d_z.sum_axis(Axis(0));
        if let Some(table_grad) = &mut grads.token_emb {
            if cache.token_rows.iter().any(Option::is_some) {
                let d_x = d_z.dot(&self.w1);
                for (i, toks) in cache.token_rows.iter().enumerate() {
                    if let Some(toks) = toks {
                        let inv = 1.0 / toks.len() as f64;
                        for &t in toks {
                            let mut row = table_grad.row_mut(t as usize);
                            row.scaled_add(inv, &d_x.row(i));
                        }
                    }
                }
            }
        }
        if !self.gamma_trainable || !self.project {
            grads.gamma = 0.0;
        }
        if grads.flat(self.gamma_trainable).iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        Ok(grads)
    }

    pub fn encode_input(&self, input: Input<'_>) -> Result<Embedding> {
        let cache = self.forward(&[input])?;
        Ok(Embedding {
            vec: cache.emb.row(0).to_vec(),
        })
    }

    /// Encodes a data point (features, else tokens).
    pub fn encode(&self, x: &DataPoint) -> Result<Embedding> {
        self.encode_input(Input::of(x)?)
    }

    /// Encodes many inputs at once; rows follow input order.
    pub fn encode_batch(&self, inputs: &[Input<'_>]) -> Result<Array2<f64>> {
        Ok(self.forward(inputs)?.emb)
    }
}

impl ParamGrads {
    /// Same ordering as [`EncoderParams::flat`].
    pub fn flat(&self, with_gamma: bool) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        if let Some(t) = &self.token_emb {
            out.extend(t.iter());
        }
        if with_gamma {
            out.push(self.gamma);
        }
        out
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
        if let (Some(a), Some(b)) = (&mut self.token_emb, &other.token_emb) {
            *a += b;
        }
        self.gamma += other.gamma;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small(project: bool, act: Activation) -> EncoderParams {
        let mut cfg = EncoderConfig::new(3, 4, 5, 1.7).with_vocab(6);
        cfg.project = project;
        cfg.activation = act;
        cfg.gamma_trainable = true;
        EncoderParams::init(&cfg, SeedStream::new(21)).unwrap()
    }

    #[test]
    fn outputs_lie_on_sphere() {
        for gamma in [1.0, std::f64::consts::SQRT_2, 10.0] {
            let cfg = EncoderConfig::new(4, 8, 6, gamma);
            let p = EncoderParams::init(&cfg, SeedStream::new(1)).unwrap();
            for k in 0..20 {
                let x: Vec<f64> = (0..4).map(|j| ((k * 7 + j) as f64).sin() * 3.0).collect();
                let e = p.encode_input(Input::Features(&x)).unwrap();
                assert!((e.norm() - gamma).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_weights_give_bias_direction() {
        let cfg = EncoderConfig::new(2, 3, 2, 2.0);
        let mut p = EncoderParams::init(&cfg, SeedStream::new(2)).unwrap();
        p.w2.fill(0.0);
        p.b2 = Array1::from(vec![3.0, 4.0]);
        for x in [[0.0, 0.0], [5.0, -1.0]] {
            let e = p.encode_input(Input::Features(&x)).unwrap();
            assert_relative_eq!(e.vec[0], 2.0 * 0.6, epsilon = 1e-12);
            assert_relative_eq!(e.vec[1], 2.0 * 0.8, epsilon = 1e-12);
        }
        p.b2.fill(0.0);
        assert!(matches!(
            p.encode_input(Input::Features(&[1.0, 1.0])),
            Err(Error::DegenerateProjection(_))
        ));
    }

    #[test]
    fn similarity_extremes() {
        let g = 1.5f64;
        let e = Embedding {
            vec: vec![g * 0.6, g * 0.8],
        };
        let neg = Embedding {
            vec: e.vec.iter().map(|v| -v).collect(),
        };
        assert_relative_eq!(similarity(&e, &e).unwrap(), g * g, epsilon = 1e-12);
        assert_relative_eq!(similarity(&e, &neg).unwrap(), -g * g, epsilon = 1e-12);
        let a = Embedding { vec: vec![1.0, 0.0] };
        let b = Embedding { vec: vec![0.0, 1.0] };
        assert_eq!(similarity(&a, &b).unwrap(), 0.0);
        assert!(similarity(&a, &Embedding { vec: vec![1.0] }).is_err());
    }

    fn loss_of(p: &EncoderParams, inputs: &[Input<'_>], weights: &Array2<f64>) -> f64 {
        let e = p.forward(inputs).unwrap().emb;
        (&e * weights).sum() + 0.3 * e.mapv(|v| v * v * v).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = small(true, Activation::Tanh);
        let feats = [vec![0.3, -1.2, 0.8], vec![1.1, 0.4, -0.5]];
        let toks = [vec![0u32, 3, 3], vec![5u32, 1]];
        let inputs = [
            Input::Features(&feats[0]),
            Input::Tokens(&toks[0]),
            Input::Features(&feats[1]),
            Input::Tokens(&toks[1]),
        ];
        let weights = Array2::from_shape_fn((4, 5), |(i, j)| ((i * 5 + j) as f64 * 0.37).cos());
        let cache = p.forward(&inputs).unwrap();
        let d_emb = &weights + &cache.emb.mapv(|v| 0.9 * v * v);
        let analytic = p.backward(&cache, &d_emb).unwrap().flat(true);
        let base = p.flat();
        let h = 1e-5;
        for k in 0..base.len() {
            let mut q = p.clone();
            let mut v = base.clone();
            v[k] += h;
            q.set_flat(&v).unwrap();
            let up = loss_of(&q, &inputs, &weights);
            v[k] -= 2.0 * h;
            q.set_flat(&v).unwrap();
            let down = loss_of(&q, &inputs, &weights);
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {k}: fd {fd} analytic {}", analytic[k]);
        }
    }

    #[test]
    fn radial_loss_has_no_weight_gradient() {
        // |f(x)|^2 = gamma^2 regardless of the MLP weights.
        let p = small(true, Activation::Tanh);
        let x = [0.2, 0.1, -0.4];
        let cache = p.forward(&[Input::Features(&x)]).unwrap();
        let d_emb = cache.emb.mapv(|v| 2.0 * v);
        let g = p.backward(&cache, &d_emb).unwrap();
        let weights_only = g.flat(false);
        assert!(weights_only.iter().all(|v| v.abs() < 1e-12));
        assert_relative_eq!(g.gamma, 2.0 * p.gamma, epsilon = 1e-12);
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let p = small(false, Activation::Identity);
        let x = [0.5, -0.3, 1.2];
        let cache = p.forward(&[Input::Features(&x)]).unwrap();
        let d = Array2::from_shape_vec((1, 5), vec![1.0, -2.0, 0.5, 0.0, 3.0]).unwrap();
        let g = p.backward(&cache, &d).unwrap();
        let hidden = p.w1.dot(&Array1::from(x.to_vec())) + &p.b1;
        for i in 0..5 {
            for j in 0..4 {
                assert_relative_eq!(g.w2[[i, j]], d[[0, i]] * hidden[j], epsilon = 1e-12);
            }
        }
        assert_eq!(g.gamma, 0.0);
    }

    #[test]
    fn flat_round_trip() {
        let mut p = small(true, Activation::Tanh);
        let v: Vec<f64> = (0..p.n_params()).map(|i| i as f64 * 0.01).collect();
        p.set_flat(&v).unwrap();
        assert_eq!(p.flat(), v);
        assert!(p.set_flat(&v[1..]).is_err());
    }
}
