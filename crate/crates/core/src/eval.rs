//! Downstream evaluation on frozen embeddings.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, Input};
use crate::error::{Error, Result};
use crate::mixture::{ClassId, Token};
use crate::optim;
use crate::par;
use crate::rng::SeedStream;

pub const PROBE_GRAD_TOL: f64 = 1e-6;
pub const PROBE_L2: f64 = 1e-4;
const PROBE_MAX_ITERS: u64 = 500;
const SUBSET_TRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub linear_probe_acc: f64,
    pub mean_classifier_acc: f64,
    pub n_labeled: usize,
    pub label_fraction: f64,
    pub converged: bool,
}

fn check_rows(emb: &Array2<f64>, labels: &[ClassId]) -> Result<()> {
    if emb.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: emb.nrows(),
            got: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    Ok(())
}

/// Softmax regression with bias and a small L2 penalty on the weights;
/// returns `(K x (D + 1))` with the bias in the last column.
fn fit_softmax(x: ArrayView2<'_, f64>, y: &[ClassId], k: usize, l2: f64) -> Result<(Array2<f64>, bool)> {
    let (n, d) = x.dim();
    let cols = d + 1;
    let f = |theta: &[f64]| {
        let w = ArrayView2::from_shape((k, cols), theta).expect("shape");
        let mut grad = Array2::<f64>::zeros((k, cols));
        let mut loss = 0.0;
        for i in 0..n {
            let row = x.row(i);
            let logits: Vec<f64> = (0..k)
                .map(|c| w.row(c).slice(ndarray::s![..d]).dot(&row) + w[[c, d]])
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            loss += z.ln() + mx - logits[y[i]];
            for c in 0..k {
                let g = e[c] / z - if c == y[i] { 1.0 } else { 0.0 };
                let mut gr = grad.row_mut(c);
                for j in 0..d {
                    gr[j] += g * row[j];
                }
                gr[d] += g;
            }
        }
        let inv = 1.0 / n as f64;
        loss *= inv;
        grad.mapv_inplace(|g| g * inv);
        for c in 0..k {
            for j in 0..d {
                loss += 0.5 * l2 * w[[c, j]] * w[[c, j]];
                grad[[c, j]] += l2 * w[[c, j]];
            }
        }
        (loss, grad.into_raw_vec_and_offset().0)
    };
    let r = optim::minimize(&f, vec![0.0; k * cols], PROBE_GRAD_TOL, PROBE_MAX_ITERS)?;
    Ok((Array2::from_shape_vec((k, cols), r.x).expect("shape"), r.converged))
}

fn accuracy(pred: impl Iterator<Item = ClassId>, truth: &[ClassId]) -> f64 {
    let hits = pred.zip(truth).filter(|(p, t)| p == *t).count();
    hits as f64 / truth.len() as f64
}

fn argmax(v: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Labeled subset of `round(fraction * n)` rows containing every class
/// present in `labels`; redrawn up to ten times.
pub fn labeled_subset(labels: &[ClassId], fraction: f64, seed: SeedStream) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument {
            arg: "label_fraction",
            reason: format!("must be in (0, 1], got {fraction}"),
        });
    }
    let n = labels.len();
    let size = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut classes: Vec<ClassId> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument {
            arg: "labels",
            reason: "need at least two classes".into(),
        });
    }
    for t in 0..SUBSET_TRIES {
        let mut idx = sample(&mut seed.fork(t as u64).rng(), n, size).into_vec();
        idx.sort_unstable();
        let mut seen: Vec<ClassId> = idx.iter().map(|&i| labels[i]).collect();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() == classes.len() {
            return Ok(idx);
        }
    }
    Err(Error::MissingClassInLabels { tries: SUBSET_TRIES })
}

/// Trains a softmax probe on a labeled fraction of `train` and reports
/// accuracy on `test`, together with the mean-classifier accuracy using
/// class means of the same labeled subset.
pub fn linear_probe(
    train: &Array2<f64>,
    train_labels: &[ClassId],
    test: &Array2<f64>,
    test_labels: &[ClassId],
    label_fraction: f64,
    seed: SeedStream,
) -> Result<ProbeResult> {
    check_rows(train, train_labels)?;
    check_rows(test, test_labels)?;
    if train.ncols() != test.ncols() {
        return Err(Error::DimensionMismatch {
            expected: train.ncols(),
            got: test.ncols(),
        });
    }
    let idx = labeled_subset(train_labels, label_fraction, seed)?;
    let k = train_labels.iter().chain(test_labels).max().copied().unwrap_or(0) + 1;
    let x = train.select(ndarray::Axis(0), &idx);
    let y: Vec<ClassId> = idx.iter().map(|&i| train_labels[i]).collect();
    let (w, converged) = fit_softmax(x.view(), &y, k, PROBE_L2)?;
    let d = train.ncols();
    let lin = accuracy(
        test.rows().into_iter().map(|r| {
            argmax((0..k).map(|c| w.row(c).slice(ndarray::s![..d]).dot(&r) + w[[c, d]]))
        }),
        test_labels,
    );

    let mut mu = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (row, &c) in x.rows().into_iter().zip(&y) {
        mu.row_mut(c).scaled_add(1.0, &row);
        counts[c] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            mu.row_mut(c).mapv_inplace(|v| v / counts[c] as f64);
        }
    }
    let mean_acc = accuracy(
        test.rows().into_iter().map(|r| {
            argmax((0..k).map(|c| if counts[c] > 0 { mu.row(c).dot(&r) } else { f64::NEG_INFINITY }))
        }),
        test_labels,
    );
    Ok(ProbeResult {
        linear_probe_acc: lin,
        mean_classifier_acc: mean_acc,
        n_labeled: idx.len(),
        label_fraction,
        converged,
    })
}

/// Retrieval results in both directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// `"q2g@K"` and `"g2q@K"` keys.
    pub recall_at: BTreeMap<String, f64>,
    pub medr_q2g: f64,
    pub medr_g2q: f64,
    /// Mean of the recalls over all Ks and both directions; queries are
    /// macro-averaged.
    pub avg_recall: f64,
    pub averaging: String,
    pub ranks_q2g: Vec<usize>,
    pub ranks_g2q: Vec<usize>,
}

/// 1-based rank of column `i` in row `i` under descending score; ties go to
/// the lower index.
fn ranks(scores: &Array2<f64>, rows: &[usize]) -> Vec<usize> {
    par::map_slice(rows, |&i| {
        let s = scores.row(i);
        let own = s[i];
        1 + s
            .iter()
            .enumerate()
            .filter(|(j, v)| **v > own || (**v == own && *j < i))
            .count()
    })
}

fn lower_median(v: &[usize]) -> f64 {
    let mut s = v.to_vec();
    s.sort_unstable();
    s[(s.len() - 1) / 2] as f64
}

/// Recall@K and median rank for paired queries and gallery items (row `i`
/// of each is a pair). `query_mask` restricts which pairs act as queries in
/// both directions; `None` uses all.
pub fn retrieval_metrics(
    queries: &Array2<f64>,
    gallery: &Array2<f64>,
    ks: &[usize],
    query_mask: Option<&[bool]>,
) -> Result<RetrievalReport> {
    if queries.dim() != gallery.dim() {
        return Err(Error::DimensionMismatch {
            expected: queries.nrows(),
            got: gallery.nrows(),
        });
    }
    let n = queries.nrows();
    let rows: Vec<usize> = match query_mask {
        Some(m) => {
            if m.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: m.len(),
                });
            }
            (0..n).filter(|&i| m[i]).collect()
        }
        None => (0..n).collect(),
    };
    if rows.is_empty() || ks.is_empty() {
        return Err(Error::Empty("retrieval queries or Ks"));
    }
    let s = queries.dot(&gallery.t());
    let r_q2g = ranks(&s, &rows);
    let r_g2q = ranks(&s.t().to_owned(), &rows);
    let mut recall_at = BTreeMap::new();
    let mut total = 0.0;
    for &k in ks {
        for (dir, r) in [("q2g", &r_q2g), ("g2q", &r_g2q)] {
            let v = r.iter().filter(|&&x| x <= k).count() as f64 / r.len() as f64;
            recall_at.insert(format!("{dir}@{k}"), v);
            total += v;
        }
    }
    Ok(RetrievalReport {
        recall_at,
        medr_q2g: lower_median(&r_q2g),
        medr_g2q: lower_median(&r_g2q),
        avg_recall: total / (2 * ks.len()) as f64,
        averaging: "macro over queries".into(),
        ranks_q2g: r_q2g,
        ranks_g2q: r_g2q,
    })
}

/// A positive and a negative prompt for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrompt {
    pub positive: Vec<Token>,
    pub negative: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptReport {
    /// Binary accuracy per class, in class order.
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// Binary prompt classification: for each image and class, predicts
/// "positive" when `s(image, positive prompt) > s(image, negative prompt)`
/// (ties go to negative) and scores it against `labels == class`.
pub fn prompt_classify(
    image_embs: &Array2<f64>,
    labels: &[ClassId],
    prompts: &[Option<ClassPrompt>],
    text_encoder: &EncoderParams,
) -> Result<PromptReport> {
    check_rows(image_embs, labels)?;
    let mut per_class = Vec::with_capacity(prompts.len());
    for (c, p) in prompts.iter().enumerate() {
        let p = p.as_ref().ok_or(Error::MissingPrompt(c))?;
        let t = text_encoder.encode_batch(&[Input::Tokens(&p.positive), Input::Tokens(&p.negative)])?;
        let sp = image_embs.dot(&t.row(0));
        let sn = image_embs.dot(&t.row(1));
        let hits = (0..labels.len())
            .filter(|&i| (sp[i] > sn[i]) == (labels[i] == c))
            .count();
        per_class.push(hits as f64 / labels.len() as f64);
    }
    let mean = per_class.iter().sum::<f64>() / per_class.len().max(1) as f64;
    Ok(PromptReport { per_class, mean })
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub coords: Array2<f64>,
    /// Fraction of total variance along each of the two components.
    pub explained: [f64; 2],
}

/// Top-2 principal components; each loading vector is signed so that its
/// largest-magnitude entry is positive.
pub fn project_2d(emb: &Array2<f64>) -> Result<Projection> {
    let (n, d) = emb.dim();
    if n < 2 {
        return Err(Error::InvalidArgument {
            arg: "embeddings",
            reason: "need at least 2 samples".into(),
        });
    }
    if d < 2 {
        return Err(Error::InvalidArgument {
            arg: "embeddings",
            reason: "need at least 2 dimensions".into(),
        });
    }
    let mean = emb.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let centered = emb - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let m = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut coords = Array2::zeros((n, 2));
    let mut explained = [0.0; 2];
    for (slot, &k) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = argmax(v.iter().map(|x| x.abs()));
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..n {
            coords[[i, slot]] = centered.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        explained[slot] = if total > 0.0 { eig.eigenvalues[k].max(0.0) / total } else { 0.0 };
    }
    Ok(Projection { coords, explained })
}

/// Structured evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub linear_probe_acc: f64,
    pub mean_classifier_acc: f64,
    pub label_fraction: f64,
    pub retrieval: Option<RetrievalReport>,
    pub prompt: Option<PromptReport>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn one_hot(labels: &[ClassId], k: usize) -> Array2<f64> {
        Array2::from_shape_fn((labels.len(), k), |(i, j)| if labels[i] == j { 1.0 } else { 0.0 })
    }

    #[test]
    fn separable_probe_is_perfect() {
        let labels: Vec<ClassId> = (0..200).map(|i| i % 4).collect();
        let e = one_hot(&labels, 4);
        let r = linear_probe(&e, &labels, &e, &labels, 0.1, SeedStream::new(1)).unwrap();
        assert_eq!(r.linear_probe_acc, 1.0);
        assert_eq!(r.mean_classifier_acc, 1.0);
        assert_eq!(r.n_labeled, 20);
    }

    #[test]
    fn shuffled_labels_give_chance() {
        let mut rng = SeedStream::new(3).rng();
        let k = 5;
        let n = 4000;
        let x = Array2::from_shape_fn((n, 6), |_| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<ClassId> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let yt: Vec<ClassId> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let r = linear_probe(&x, &y, &x, &yt, 1.0, SeedStream::new(4)).unwrap();
        assert!((r.linear_probe_acc - 1.0 / k as f64).abs() < 0.05, "{r:?}");
    }

    #[test]
    fn missing_class_errors() {
        let mut labels = vec![0; 999];
        labels.push(1);
        let e = one_hot(&labels, 2);
        assert!(matches!(
            linear_probe(&e, &labels, &e, &labels, 0.01, SeedStream::new(0)),
            Err(Error::MissingClassInLabels { tries: 10 })
        ));
    }

    #[test]
    fn perfect_and_tied_retrieval() {
        let g = 7;
        let eye = Array2::from_shape_fn((g, g), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let r = retrieval_metrics(&eye, &eye, &[1, 3], None).unwrap();
        assert_eq!(r.recall_at["q2g@1"], 1.0);
        assert_eq!(r.medr_q2g, 1.0);
        let same = Array2::from_elem((g, 3), 0.5);
        let r = retrieval_metrics(&same, &same, &[1], None).unwrap();
        assert_eq!(r.ranks_q2g, (1..=g).collect::<Vec<_>>());
        assert_eq!(r.medr_q2g, ((g + 1) as f64 / 2.0).ceil());
        let even = Array2::from_elem((6, 3), 0.5);
        assert_eq!(retrieval_metrics(&even, &even, &[1], None).unwrap().medr_q2g, 3.0);
    }

    #[test]
    fn avg_recall_is_mean_of_six() {
        let mut rng = SeedStream::new(9).rng();
        let q = Array2::from_shape_fn((150, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let g = Array2::from_shape_fn((150, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let r = retrieval_metrics(&q, &g, &[10, 50, 100], None).unwrap();
        assert_eq!(r.recall_at.len(), 6);
        let mean = r.recall_at.values().sum::<f64>() / 6.0;
        assert!((r.avg_recall - mean).abs() < 1e-15);
        assert!(r.recall_at["q2g@10"] <= r.recall_at["q2g@50"]);
        let full = retrieval_metrics(&q, &g, &[150], None).unwrap();
        assert_eq!(full.avg_recall, 1.0);
        let scaled = retrieval_metrics(&(&q * 3.0), &(&g * 3.0), &[10, 50, 100], None).unwrap();
        assert_eq!(scaled.ranks_q2g, r.ranks_q2g);
        assert_eq!(scaled.ranks_g2q, r.ranks_g2q);
    }

    #[test]
    fn identical_prompts_predict_negative() {
        let cfg = EncoderConfig::new(3, 4, 3, 1.0).with_vocab(5);
        let params = EncoderParams::init(&cfg, SeedStream::new(2)).unwrap();
        let labels = vec![0, 1, 1, 2, 1];
        let imgs = Array2::from_shape_fn((5, 3), |(i, j)| (i + j) as f64 * 0.1 + 0.1);
        let same = ClassPrompt {
            positive: vec![1, 2],
            negative: vec![1, 2],
        };
        let r = prompt_classify(&imgs, &labels, &[Some(same.clone()), Some(same.clone()), Some(same)], &params).unwrap();
        assert_eq!(r.per_class, vec![4.0 / 5.0, 2.0 / 5.0, 4.0 / 5.0]);
        assert!(matches!(
            prompt_classify(&imgs, &labels, &[None], &params),
            Err(Error::MissingPrompt(0))
        ));
    }

    #[test]
    fn projection_properties() {
        let line = Array2::from_shape_fn((20, 4), |(i, j)| i as f64 * [1.0, -2.0, 0.5, 3.0][j]);
        let p = project_2d(&line).unwrap();
        let var = |c: usize| p.coords.column(c).iter().map(|v| v * v).sum::<f64>();
        assert!(var(1) < 1e-10 * var(0));
        let flipped = project_2d(&(-&line)).unwrap();
        for i in 0..20 {
            assert!((flipped.coords[[i, 0]] + p.coords[[i, 0]]).abs() < 1e-9);
        }
        let mut rng = SeedStream::new(5).rng();
        let d = 10;
        let cloud = Array2::from_shape_fn((20_000, d), |_| rng.sample::<f64, _>(StandardNormal));
        let p = project_2d(&cloud).unwrap();
        let ratio = p.explained[0] + p.explained[1];
        assert!((ratio - 2.0 / d as f64).abs() < 0.02, "{ratio}");
        assert!(project_2d(&Array2::zeros((1, 3))).is_err());
    }
}
