use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dcl_core::encoder::EncoderParams;
use dcl_core::eta::EtaConfig;
use dcl_core::eval::{linear_probe, project_2d, prompt_classify, retrieval_metrics, EvalReport};
use dcl_core::experiments::{
    bound_table, cifar_eval_sets, embed, embed_text, probe_encoder, repro_cifar, repro_cross_modal, run_bound_sweep,
    BoundSweepConfig, CifarAnalogConfig, CrossModalConfig, EvalSets,
};
use dcl_core::io::{load_checkpoint, num, save_checkpoint, write_csv, write_json, Table};
use dcl_core::mixture::{sample_class, ClassId, DataPoint, MixtureSpec};
use dcl_core::objectives::{NegativeHandling, Objective};
use dcl_core::rng::SeedStream;
use dcl_core::text::pll_table;
use dcl_core::train::{fit_report_lm, sample_paired, train, TrainConfig};

use crate::config::SpecSource;
use crate::error::{CliError, Result};
use crate::manifest::{RunContext, RunManifest};

fn default_alpha() -> f64 {
    0.5
}

fn default_fraction() -> f64 {
    1.0
}

fn default_fractions() -> Vec<f64> {
    vec![1.0]
}

fn default_eval_size() -> usize {
    2000
}

fn default_ks() -> Vec<usize> {
    vec![10, 50, 100]
}

fn default_rs() -> Vec<f64> {
    vec![1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub spec: SpecSource,
    pub n: usize,
    pub seed: u64,
    /// Add-alpha smoothing of the LM fitted on the simulated reports.
    #[serde(default = "default_alpha")]
    pub lm_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub spec: SpecSource,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub spec: SpecSource,
    pub checkpoint: PathBuf,
    pub seed: u64,
    #[serde(default = "default_fraction")]
    pub label_fraction: f64,
    #[serde(default = "default_eval_size")]
    pub pool_size: usize,
    #[serde(default = "default_eval_size")]
    pub test_size: usize,
    /// Recall cutoffs for the text/image retrieval metrics.
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
}

/// Grid over objective, eta provider (with LM `a` and `k`), subsampling
/// ratio, similarity threshold and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub spec: SpecSource,
    pub base: TrainConfig,
    pub objectives: Vec<Objective>,
    /// Providers for DCL cells; CL cells ignore eta.
    pub etas: Vec<EtaConfig>,
    /// Classes kept at ratio r; r = 1 leaves the spec unchanged.
    #[serde(default)]
    pub selected: Vec<ClassId>,
    #[serde(default = "default_rs")]
    pub rs: Vec<f64>,
    /// Values of the LM scale `a`; empty keeps each provider's own.
    #[serde(default)]
    pub a: Vec<f64>,
    #[serde(default)]
    pub k: Vec<f64>,
    /// Remove-by-similarity thresholds; empty keeps `base.negatives`.
    #[serde(default)]
    pub thresholds: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_fractions")]
    pub label_fractions: Vec<f64>,
    #[serde(default = "default_eval_size")]
    pub pool_size: usize,
    #[serde(default = "default_eval_size")]
    pub test_size: usize,
}

pub struct Outcome {
    pub manifest: RunManifest,
    pub dir: PathBuf,
    pub summary: Vec<String>,
}

pub fn simulate(cfg: &SimulateConfig, out: Option<&Path>) -> Result<Outcome> {
    if cfg.n == 0 {
        return Err(CliError::Config("n must be at least 1".into()));
    }
    let spec = cfg.spec.build()?;
    let ctx = RunContext::new("simulate", out, cfg, cfg.seed)?;
    let stream = SeedStream::new(cfg.seed);
    let mut rng = stream.fork_str("points").rng();
    let points: Vec<DataPoint> = (0..cfg.n)
        .map(|_| {
            let c = sample_class(spec.class_dist(), &mut rng);
            spec.sample_conditional(c, &mut rng)
        })
        .collect::<dcl_core::Result<_>>()?;
    let reports: Vec<Vec<u32>> = points.iter().map(|p| p.tokens.clone().unwrap_or_default()).collect();
    let lm = fit_report_lm(&spec, Some(&reports), cfg.lm_alpha, stream.fork_str("lm"))?;
    let pll = pll_table(&lm, &reports);

    let mut table = Table::new(["index", "class", "tokens", "pll"]);
    for (i, ((p, r), l)) in points.iter().zip(&reports).zip(&pll).enumerate() {
        let toks: Vec<String> = r.iter().map(|t| t.to_string()).collect();
        table.push(vec![i.to_string(), p.latent_class.to_string(), toks.join(" "), num(*l)]);
    }
    let stamp = ctx.stamp();
    let data = ctx.path("dataset.json");
    write_json(&data, &stamp, &serde_json::json!({ "points": points }))?;
    let pll_csv = ctx.path("pll.csv");
    write_csv(&pll_csv, &stamp, &table)?;
    let mean_pll = pll.iter().sum::<f64>() / pll.len() as f64;
    let dir = ctx.dir.clone();
    let manifest = ctx.finish(&[data, pll_csv])?;
    Ok(Outcome {
        manifest,
        dir,
        summary: vec![format!("{} points, mean PLL {mean_pll:.4}", cfg.n)],
    })
}

fn trace_table(trace: &[dcl_core::train::TraceRow]) -> Table {
    let mut t = Table::new(["step", "epoch", "loss", "clamp_fraction", "mean_eta", "fallbacks"]);
    for r in trace {
        t.push(vec![
            r.step.to_string(),
            r.epoch.to_string(),
            num(r.loss),
            num(r.clamp_fraction),
            num(r.mean_eta),
            r.fallbacks.to_string(),
        ]);
    }
    t
}

fn numeric_check(trace: &[dcl_core::train::TraceRow]) -> Result<()> {
    match trace.iter().find(|r| !r.loss.is_finite()) {
        Some(r) => Err(CliError::Numeric(format!("non-finite loss at step {}", r.step))),
        None => Ok(()),
    }
}

pub fn train_run(cfg: &TrainRunConfig, out: Option<&Path>) -> Result<Outcome> {
    cfg.train.validate()?;
    let spec = cfg.spec.build()?;
    let ctx = RunContext::new("train", out, cfg, cfg.train.seed)?;
    let result = train(&spec, &cfg.train)?;
    numeric_check(&result.trace)?;
    let stamp = ctx.stamp();
    let ckpt = ctx.path("checkpoint.bin");
    save_checkpoint(&ckpt, &result.params, &stamp, result.trace.len())?;
    let trace = ctx.path("trace.csv");
    write_csv(&trace, &stamp, &trace_table(&result.trace))?;
    let last = result.trace.last().map_or(f64::NAN, |r| r.loss);
    let dir = ctx.dir.clone();
    let manifest = ctx.finish(&[ckpt.clone(), ckpt.with_extension("json"), trace])?;
    Ok(Outcome {
        manifest,
        dir,
        summary: vec![format!("{} steps, final loss {last:.6}", result.trace.len())],
    })
}

fn has_text_path(params: &EncoderParams) -> bool {
    params.token_emb.is_some()
}

pub fn eval(cfg: &EvalConfig, out: Option<&Path>) -> Result<Outcome> {
    let spec = cfg.spec.build()?;
    if !cfg.checkpoint.exists() {
        return Err(CliError::Io(format!("checkpoint not found: {}", cfg.checkpoint.display())));
    }
    let (params, _) = load_checkpoint(&cfg.checkpoint)?;
    let ctx = RunContext::new("eval", out, cfg, cfg.seed)?;
    let stream = SeedStream::new(cfg.seed);
    let pool = sample_paired(&spec, cfg.pool_size, stream.fork_str("pool"))?;
    let test = sample_paired(&spec, cfg.test_size, stream.fork_str("test"))?;
    let pool_emb = embed(&params, &pool.images)?;
    let test_emb = embed(&params, &test.images)?;
    let y_test = test.labels();
    let probe = linear_probe(
        &pool_emb,
        &pool.labels(),
        &test_emb,
        &y_test,
        cfg.label_fraction,
        stream.fork_str("probe"),
    )?;
    let (retrieval, prompt) = if has_text_path(&params) {
        let ks: Vec<usize> = cfg.ks.iter().copied().filter(|&k| k <= cfg.test_size).collect();
        let txt = embed_text(&params, &test.texts)?;
        let r = retrieval_metrics(&txt, &test_emb, &ks, None)?;
        let prompts = CrossModalConfig::default().prompts(&spec);
        let p = prompt_classify(&test_emb, &y_test, &prompts, &params)?;
        (Some(r), Some(p))
    } else {
        (None, None)
    };
    let report = EvalReport {
        linear_probe_acc: probe.linear_probe_acc,
        mean_classifier_acc: probe.mean_classifier_acc,
        label_fraction: cfg.label_fraction,
        retrieval,
        prompt,
    };
    let stamp = ctx.stamp();
    let report_path = ctx.path("eval_report.json");
    write_json(&report_path, &stamp, &report)?;
    let proj = project_2d(&test_emb)?;
    let mut t = Table::new(["x", "y", "class"]);
    for (row, c) in proj.coords.rows().into_iter().zip(&y_test) {
        t.push(vec![num(row[0]), num(row[1]), c.to_string()]);
    }
    let proj_path = ctx.path("projection.csv");
    write_csv(&proj_path, &stamp, &t)?;
    let mut summary = vec![format!(
        "linear probe {:.4}, mean classifier {:.4} at label fraction {}",
        report.linear_probe_acc, report.mean_classifier_acc, cfg.label_fraction
    )];
    if let Some(r) = &report.retrieval {
        summary.push(format!("retrieval avg recall {:.4}, MedR {} / {}", r.avg_recall, r.medr_q2g, r.medr_g2q));
    }
    let dir = ctx.dir.clone();
    let manifest = ctx.finish(&[report_path, proj_path])?;
    Ok(Outcome { manifest, dir, summary })
}

pub fn verify_bounds(cfg: &BoundSweepConfig, out: Option<&Path>) -> Result<(Outcome, usize)> {
    let ctx = RunContext::new("verify-bounds", out, cfg, cfg.seed)?;
    let reports = run_bound_sweep(cfg)?;
    let path = ctx.path("bounds.csv");
    write_csv(&path, &ctx.stamp(), &bound_table(&reports))?;
    let failed = reports.iter().filter(|r| !r.holds).count();
    let worst = reports.iter().map(|r| r.lhs / r.rhs_total).fold(0.0, f64::max);
    let dir = ctx.dir.clone();
    let manifest = ctx.finish(&[path])?;
    let summary = vec![format!(
        "{} of {} cases hold, worst lhs/rhs {worst:.4}",
        reports.len() - failed,
        reports.len()
    )];
    Ok((Outcome { manifest, dir, summary }, failed))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct SweepCell {
    index: usize,
    objective: Objective,
    eta: EtaConfig,
    r: f64,
    threshold: Option<f64>,
    seed: u64,
}

fn expand_etas(cfg: &SweepConfig) -> Vec<EtaConfig> {
    let mut out = Vec::new();
    for eta in &cfg.etas {
        match *eta {
            EtaConfig::LmLogLinear {
                a,
                k,
                length_normalize,
            } => {
                let as_ = if cfg.a.is_empty() { vec![a] } else { cfg.a.clone() };
                let ks = if cfg.k.is_empty() { vec![k] } else { cfg.k.clone() };
                for &a in &as_ {
                    for &k in &ks {
                        out.push(EtaConfig::LmLogLinear {
                            a,
                            k,
                            length_normalize,
                        });
                    }
                }
            }
            other => out.push(other),
        }
    }
    out
}

fn sweep_cells(cfg: &SweepConfig) -> Vec<SweepCell> {
    let etas = expand_etas(cfg);
    let thresholds: Vec<Option<f64>> = if cfg.thresholds.is_empty() {
        vec![None]
    } else {
        cfg.thresholds.iter().map(|&t| Some(t)).collect()
    };
    let mut cells = Vec::new();
    for &objective in &cfg.objectives {
        let cell_etas = match objective {
            Objective::Cl => vec![EtaConfig::Constant { eta: 0.0 }],
            Objective::Dcl => etas.clone(),
        };
        for eta in &cell_etas {
            for &r in &cfg.rs {
                for &threshold in &thresholds {
                    for &seed in &cfg.seeds {
                        cells.push(SweepCell {
                            index: cells.len(),
                            objective,
                            eta: *eta,
                            r,
                            threshold,
                            seed,
                        });
                    }
                }
            }
        }
    }
    cells
}

impl SweepConfig {
    fn cell_train_config(&self, cell: &SweepCell) -> TrainConfig {
        let mut t = self.base.clone();
        t.objective = cell.objective;
        t.eta = cell.eta;
        t.seed = cell.seed;
        if let Some(threshold) = cell.threshold {
            t.negatives = NegativeHandling::RemoveBySim { threshold };
        }
        t
    }
}

struct CellResult {
    final_loss: f64,
    linear: Vec<f64>,
    mean: Vec<f64>,
}

fn run_sweep_cell(cfg: &SweepConfig, base: &MixtureSpec, cell: &SweepCell, root: &Path) -> Result<CellResult> {
    let spec = if cell.r == 1.0 || cfg.selected.is_empty() {
        base.clone()
    } else {
        base.subsample_classes(&cfg.selected, cell.r)?
    };
    let tc = cfg.cell_train_config(cell);
    let dir = root.join("cells").join(format!("{:04}", cell.index));
    let ctx = RunContext::new("sweep cell", Some(&dir), &tc, cell.seed)?;
    let out = train(&spec, &tc)?;
    numeric_check(&out.trace)?;
    let stamp = ctx.stamp();
    let trace = ctx.path("trace.csv");
    write_csv(&trace, &stamp, &trace_table(&out.trace))?;

    let sets_cfg = CifarAnalogConfig {
        pool_size: cfg.pool_size,
        test_size: cfg.test_size,
        ..CifarAnalogConfig::default()
    };
    let sets: EvalSets = cifar_eval_sets(&sets_cfg, base, cell.seed);
    let probes = probe_encoder(&out.params, &sets, &cfg.label_fractions, SeedStream::new(cell.seed).fork_str("probe"))?;
    let result = CellResult {
        final_loss: out.trace.last().map_or(f64::NAN, |r| r.loss),
        linear: probes.iter().map(|p| p.linear_probe_acc).collect(),
        mean: probes.iter().map(|p| p.mean_classifier_acc).collect(),
    };
    let metrics = ctx.path("metrics.json");
    write_json(&metrics, &stamp, &serde_json::json!({ "cell": cell, "probes": probes, "final_loss": result.final_loss }))?;
    ctx.finish(&[trace, metrics])?;
    Ok(result)
}

pub fn sweep(cfg: &SweepConfig, out: Option<&Path>) -> Result<Outcome> {
    if cfg.objectives.is_empty() || cfg.seeds.is_empty() || cfg.rs.is_empty() {
        return Err(CliError::Config("objectives, seeds and rs must be non-empty".into()));
    }
    if cfg.objectives.contains(&Objective::Dcl) && cfg.etas.is_empty() {
        return Err(CliError::Config("DCL cells need at least one eta provider".into()));
    }
    cfg.base.validate()?;
    let base = cfg.spec.build()?;
    let cells = sweep_cells(cfg);
    let ctx = RunContext::new("sweep", out, cfg, cfg.seeds[0])?;
    let results = dcl_core::par::map_slice(&cells, |c| run_sweep_cell(cfg, &base, c, &ctx.dir));

    let mut header: Vec<String> = ["index", "objective", "eta", "r", "threshold", "seed", "final_loss"]
        .map(String::from)
        .to_vec();
    for f in &cfg.label_fractions {
        header.push(format!("linear_probe@{f}"));
        header.push(format!("mean_classifier@{f}"));
    }
    let mut table = Table::new(header);
    for (cell, res) in cells.iter().zip(results) {
        let res = res?;
        let mut row = vec![
            cell.index.to_string(),
            format!("{:?}", cell.objective).to_lowercase(),
            cell.eta.label(),
            num(cell.r),
            cell.threshold.map_or(String::new(), num),
            cell.seed.to_string(),
            num(res.final_loss),
        ];
        for (l, m) in res.linear.iter().zip(&res.mean) {
            row.push(num(*l));
            row.push(num(*m));
        }
        table.push(row);
    }
    let path = ctx.path("sweep.csv");
    write_csv(&path, &ctx.stamp(), &table)?;
    let dir = ctx.dir.clone();
    let manifest = ctx.finish(&[path])?;
    Ok(Outcome {
        manifest,
        dir,
        summary: vec![format!("{} cells", cells.len())],
    })
}

pub fn repro_cifar_analog(cfg: &CifarAnalogConfig, out: Option<&Path>) -> Result<Outcome> {
    cfg.train.validate()?;
    let ctx = RunContext::new("repro cifar-analog", out, cfg, cfg.spec_seed)?;
    let paths = repro_cifar(cfg, &ctx.dir)?;
    let dir = ctx.dir.clone();
    let manifest = ctx.finish(&paths)?;
    Ok(Outcome {
        manifest,
        dir,
        summary: vec![format!(
            "{} r values x 4 variants x {} seeds",
            cfg.r_grid.len(),
            cfg.seeds.len()
        )],
    })
}

pub fn repro_cross_modal_run(cfg: &CrossModalConfig, out: Option<&Path>) -> Result<Outcome> {
    cfg.train.validate()?;
    let ctx = RunContext::new("repro cross-modal", out, cfg, cfg.spec_seed)?;
    let (paths, s) = repro_cross_modal(cfg, &ctx.dir)?;
    let dir = ctx.dir.clone();
    let manifest = ctx.finish(&paths)?;
    Ok(Outcome {
        manifest,
        dir,
        summary: vec![
            format!("spearman head {:+.3}, tail {:+.3} (critical {:.3})", s.rho_head, s.rho_tail, s.critical),
            format!(
                "LM head {:.4} (best constant {:.4}), LM tail {:.4} (best constant {:.4})",
                s.lm_head, s.best_constant_head, s.lm_tail, s.best_constant_tail
            ),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    fn sweep_cfg() -> SweepConfig {
        SweepConfig {
            spec: SpecSource::Preset(Preset::CifarAnalog),
            base: TrainConfig::unimodal(Objective::Cl, EtaConfig::Constant { eta: 0.0 }, 0),
            objectives: vec![Objective::Cl, Objective::Dcl],
            etas: vec![EtaConfig::TrueOracle, EtaConfig::lm_default()],
            selected: vec![0, 1],
            rs: vec![0.1, 1.0],
            a: vec![0.1, 0.2, 0.4],
            k: vec![0.5],
            thresholds: vec![],
            seeds: vec![1, 2],
            label_fractions: vec![1.0],
            pool_size: 100,
            test_size: 100,
        }
    }

    #[test]
    fn grid_expands_lm_and_skips_eta_for_cl() {
        let cells = sweep_cells(&sweep_cfg());
        // CL: 1 eta; DCL: oracle + 3 LM settings; each x 2 r x 2 seeds.
        assert_eq!(cells.len(), (1 + 4) * 2 * 2);
        assert!(cells.iter().enumerate().all(|(i, c)| c.index == i));
        let lm_as: Vec<f64> = cells
            .iter()
            .filter_map(|c| match c.eta {
                EtaConfig::LmLogLinear { a, .. } if c.seed == 1 && c.r == 1.0 => Some(a),
                _ => None,
            })
            .collect();
        assert_eq!(lm_as, vec![0.1, 0.2, 0.4]);
    }

    #[test]
    fn thresholds_set_negative_handling() {
        let mut cfg = sweep_cfg();
        cfg.thresholds = vec![0.2, 0.8];
        let cells = sweep_cells(&cfg);
        assert_eq!(cells.len(), (1 + 4) * 2 * 2 * 2);
        let tc = cfg.cell_train_config(&cells[1]);
        assert_eq!(tc.negatives, NegativeHandling::RemoveBySim { threshold: 0.2 });
    }
}
