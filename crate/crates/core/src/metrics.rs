//! Evaluation: token entropy, quantisation error, per-domain dependence and
//! loss spread, codebook usage, gate specialisation and parameter counts;
//! plus the UniTok-vs-single-codebook comparison harness.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::recon_loss_item;
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hsic::{hsic, population_variance};
use crate::model::{count_colliding, ModelState, Quantizer};
use crate::numeric::{axpy, squared_distance};
use crate::rq::usage_entropy;
use crate::train::{thread_pool, train, train_baseline_single_codebook};

/// Embedding width assumed for parameter accounting when no dataset fixes it
/// (the output width of common sentence encoders).
pub const REFERENCE_INPUT_DIM: usize = 768;

/// `λ_MI` values always included in the comparison sweep.
pub const MI_SWEEP: [f64; 3] = [0.0, 0.03, 0.3];

/// Shannon entropy (bits) of the empirical distribution over distinct tokens.
pub fn token_entropy<T: Hash + Eq>(tokens: &[T]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&T, u64> = HashMap::new();
    for t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let mut c: Vec<u64> = counts.into_values().collect();
    // Fixed summation order keeps the value reproducible.
    c.sort_unstable();
    usage_entropy(&c)
}

/// Mean over items of `‖z − ẑ‖²`.
pub fn quantization_error(model: &ModelState, dataset: &Dataset) -> Result<f64> {
    let outputs = model.forward_dataset(dataset)?;
    if outputs.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = outputs.iter().map(|o| squared_distance(&o.z, o.quantized.z_hat())).sum();
    Ok(sum / outputs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub autoencoder: usize,
    pub codebooks: usize,
    pub router: usize,
    pub total: usize,
}

pub fn count_parameters(model: &ModelState) -> ParamCounts {
    let autoencoder = model.autoencoder.num_params();
    let (codebooks, router) = match &model.quantizer {
        Quantizer::Moe(m) => m.num_params(),
        Quantizer::Single { stack } => (stack.num_params(), 0),
    };
    ParamCounts {
        autoencoder,
        codebooks,
        router,
        total: autoencoder + codebooks + router,
    }
}

fn mlp_params(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Parameter counts of a UniTok model with `experts` domain experts, computed
/// from layer sizes alone.
pub fn param_counts_for(input_dim: usize, experts: usize, config: &TrainConfig) -> ParamCounts {
    let mut dims = vec![input_dim];
    dims.extend_from_slice(&config.hidden);
    dims.push(config.latent_dim);
    let encoder = mlp_params(&dims);
    dims.reverse();
    let autoencoder = encoder + mlp_params(&dims);
    let codebooks = (experts + 1) * stack_params(config);
    let router = config.latent_dim * experts + experts;
    ParamCounts {
        autoencoder,
        codebooks,
        router,
        total: autoencoder + codebooks + router,
    }
}

/// Code parameters in one stack: `L·T·d_latent`.
pub fn stack_params(config: &TrainConfig) -> usize {
    config.levels * config.codes * config.latent_dim
}

/// `K·(AE + stack) / (AE + (K+1)·stacks + router)`: parameters of `K`
/// separately trained single-codebook tokenizers over one UniTok model.
pub fn deployment_ratio(unitok: &ParamCounts, experts: usize, one_stack: usize) -> f64 {
    (experts * (unitok.autoencoder + one_stack)) as f64 / unitok.total as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEval {
    /// Domain label as found in the data.
    pub domain: i64,
    pub recon_mse: f64,
    pub hsic: Option<f64>,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: usize,
    pub token_length: usize,
    pub token_entropy_bits: f64,
    pub quantization_mse: f64,
    pub per_domain: Vec<DomainEval>,
    pub mi_variance: f64,
    /// Max minus min of the per-domain reconstruction error.
    pub loss_spread: f64,
    pub collision_rate: f64,
    /// Bits, per stack (experts then shared, or the single stack), per level.
    pub usage_entropy: Vec<Vec<f64>>,
    /// Average masked gate weight, domain × expert. Empty for the baseline.
    pub gate_matrix: Vec<Vec<f64>>,
    pub param_counts: ParamCounts,
}

/// Tokenizes and scores a dataset without touching the parameters.
pub fn evaluate(model: &ModelState, dataset: &Dataset) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let outputs = thread_pool()?.install(|| -> Result<Vec<_>> {
        let labels = dataset.domain_labels();
        dataset
            .records()
            .par_iter()
            .map(|r| model.forward_item(&r.embedding, model.training_domain(labels[r.domain])))
            .collect()
    })?;
    let records = dataset.records();
    let tokens: Vec<Vec<usize>> = outputs.iter().map(|o| o.quantized.token().to_vec()).collect();
    let n = records.len() as f64;

    let mut per_domain = Vec::with_capacity(dataset.num_domains());
    let cap = model.config.hsic.max_points_per_domain;
    for (k, &label) in dataset.domain_labels().iter().enumerate() {
        let idx = dataset.domain_indices(k);
        let mut rec = 0.0;
        for &i in idx {
            rec += recon_loss_item(&records[i].embedding, &outputs[i].x_hat)?.0;
        }
        let used = &idx[..idx.len().min(cap)];
        let xs: Vec<Vec<f64>> = used.iter().map(|&i| records[i].embedding.clone()).collect();
        let zs: Vec<Vec<f64>> = used.iter().map(|&i| outputs[i].z.clone()).collect();
        per_domain.push(DomainEval {
            domain: label,
            recon_mse: rec / idx.len() as f64,
            hsic: hsic(&xs, &zs, &model.config.hsic)?.map(|e| e.value),
            token_count: idx.len(),
        });
    }
    let present: Vec<f64> = per_domain.iter().filter_map(|d| d.hsic).collect();
    let recs = per_domain.iter().map(|d| d.recon_mse);
    let loss_spread = recs.clone().fold(f64::NEG_INFINITY, f64::max) - recs.fold(f64::INFINITY, f64::min);

    let ids = model.stack_ids();
    let levels = model.config.levels;
    let mut usage: Vec<Vec<Vec<u64>>> = ids
        .iter()
        .map(|id| vec![vec![0; model.stack(*id).codes_per_level()]; levels])
        .collect();
    let experts = model.num_experts();
    let mut gate_matrix = vec![vec![0.0; experts]; if experts > 0 { dataset.num_domains() } else { 0 }];
    for (r, o) in records.iter().zip(&outputs) {
        for (id, result) in o.quantized.active() {
            let s = ids.iter().position(|x| *x == id).expect("known stack");
            for (level, &c) in result.indices.iter().enumerate() {
                usage[s][level][c] += 1;
            }
        }
        if let Some(g) = o.quantized.gate() {
            axpy(1.0, &g.masked_weights, &mut gate_matrix[r.domain]);
        }
    }
    for (k, row) in gate_matrix.iter_mut().enumerate() {
        let m = dataset.domain_indices(k).len() as f64;
        row.iter_mut().for_each(|v| *v /= m);
    }

    Ok(EvalReport {
        items: records.len(),
        token_length: tokens.first().map_or(0, Vec::len),
        token_entropy_bits: token_entropy(&tokens),
        quantization_mse: outputs.iter().map(|o| squared_distance(&o.z, o.quantized.z_hat())).sum::<f64>() / n,
        per_domain,
        mi_variance: population_variance(&present),
        loss_spread,
        collision_rate: count_colliding(&tokens) as f64 / n,
        usage_entropy: usage
            .iter()
            .map(|stack| stack.iter().map(|c| usage_entropy(c)).collect())
            .collect(),
        gate_matrix,
        param_counts: count_parameters(model),
    })
}

/// [`evaluate`] on domains the model never saw.
pub fn zero_shot_eval(model: &ModelState, unseen: &Dataset) -> Result<EvalReport> {
    evaluate(model, unseen)
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let row = |s: &mut String, k: &str, v: String| {
            let _ = writeln!(s, "{k:<22} {v:>14}");
        };
        row(&mut s, "items", self.items.to_string());
        row(&mut s, "token_length", self.token_length.to_string());
        row(&mut s, "token_entropy_bits", format!("{:.4}", self.token_entropy_bits));
        row(&mut s, "quantization_mse", format!("{:.6}", self.quantization_mse));
        row(&mut s, "collision_rate", format!("{:.4}", self.collision_rate));
        row(&mut s, "mi_variance", format!("{:.3e}", self.mi_variance));
        row(&mut s, "loss_spread", format!("{:.6}", self.loss_spread));
        row(&mut s, "params_autoencoder", self.param_counts.autoencoder.to_string());
        row(&mut s, "params_codebooks", self.param_counts.codebooks.to_string());
        row(&mut s, "params_router", self.param_counts.router.to_string());
        row(&mut s, "params_total", self.param_counts.total.to_string());
        let _ = writeln!(s, "\n{:>8} {:>12} {:>12} {:>8}", "domain", "recon_mse", "hsic", "items");
        for d in &self.per_domain {
            let h = d.hsic.map_or("-".to_string(), |h| format!("{h:.6}"));
            let _ = writeln!(s, "{:>8} {:>12.6} {:>12} {:>8}", d.domain, d.recon_mse, h, d.token_count);
        }
        if !self.gate_matrix.is_empty() {
            let _ = write!(s, "\n{:>8}", "gate");
            for k in 0..self.gate_matrix[0].len() {
                let _ = write!(s, " {:>8}", format!("e{k}"));
            }
            let _ = writeln!(s);
            for (d, row) in self.per_domain.iter().zip(&self.gate_matrix) {
                let _ = write!(s, "{:>8}", d.domain);
                for v in row {
                    let _ = write!(s, " {v:>8.4}");
                }
                let _ = writeln!(s);
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda_mi: f64,
    pub mi_variance: f64,
    pub loss_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub h_unitok: f64,
    pub h_baseline: f64,
    pub q_unitok: f64,
    pub q_baseline: f64,
    /// `q_baseline − q_unitok`; non-negative when UniTok quantises better.
    pub q_margin: f64,
    /// Sorted by `lambda_mi`.
    pub sweep: Vec<SweepPoint>,
    pub default_lambda_mi: f64,
    pub theorem1_pass: bool,
    pub theorem2_pass: bool,
    pub theorem3_pass: bool,
    pub unitok: EvalReport,
    pub baseline: EvalReport,
}

impl TheoremReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let flag = |b: bool| if b { "PASS" } else { "FAIL" };
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>14} {:>14} {:>6}", "check", "unitok", "baseline", "");
        let _ = writeln!(
            s,
            "{:<12} {:>14.4} {:>14.4} {:>6}",
            "entropy",
            self.h_unitok,
            self.h_baseline,
            flag(self.theorem1_pass)
        );
        let _ = writeln!(
            s,
            "{:<12} {:>14.6} {:>14.6} {:>6}",
            "quant_mse",
            self.q_unitok,
            self.q_baseline,
            flag(self.theorem2_pass)
        );
        let _ = writeln!(s, "\n{:>10} {:>14} {:>14}", "lambda_mi", "var_hsic", "loss_spread");
        for p in &self.sweep {
            let _ = writeln!(s, "{:>10} {:>14.4e} {:>14.6}", p.lambda_mi, p.mi_variance, p.loss_spread);
        }
        let _ = writeln!(s, "theorem3 {}", flag(self.theorem3_pass));
        s
    }
}

/// Sweep values: [`MI_SWEEP`] plus the configured `λ_MI`, ascending.
pub fn sweep_values(default_lambda_mi: f64) -> Vec<f64> {
    let mut v: Vec<f64> = MI_SWEEP.to_vec();
    if !v.contains(&default_lambda_mi) {
        v.push(default_lambda_mi);
    }
    v.sort_by(f64::total_cmp);
    v
}

/// Trains UniTok and the single-codebook baseline on the same data and seed
/// and checks the three theorem-consistency conditions:
///
/// 1. token entropy of UniTok strictly exceeds the baseline's;
/// 2. UniTok's mean latent quantisation error is at most the baseline's;
/// 3. the configured `λ_MI` gives strictly lower HSIC variance and
///    per-domain loss spread than `λ_MI = 0`, and HSIC variance does not
///    increase along the sweep.
pub fn theorem_report(dataset: &Dataset, config: &TrainConfig) -> Result<TheoremReport> {
    theorem_report_with_progress(dataset, config, |_| {})
}

pub fn theorem_report_with_progress(
    dataset: &Dataset,
    config: &TrainConfig,
    progress: impl FnMut(&str),
) -> Result<TheoremReport> {
    Ok(compare_models(dataset, config, progress)?.report)
}

/// A finished comparison together with the two models it compared.
#[derive(Debug, Clone)]
pub struct ComparisonRun {
    pub report: TheoremReport,
    /// UniTok trained with the configured `λ_MI`.
    pub unitok: ModelState,
    pub baseline: ModelState,
}

/// [`theorem_report`], keeping the trained models.
pub fn compare_models(
    dataset: &Dataset,
    config: &TrainConfig,
    mut progress: impl FnMut(&str),
) -> Result<ComparisonRun> {
    let mut sweep = Vec::new();
    let mut unitok = None;
    for lambda_mi in sweep_values(config.lambda_mi) {
        progress(&format!("training unitok (lambda_mi = {lambda_mi})"));
        let cfg = TrainConfig {
            lambda_mi,
            ..config.clone()
        };
        let (model, _) = train(dataset, &cfg)?;
        let report = evaluate(&model, dataset)?;
        sweep.push(SweepPoint {
            lambda_mi,
            mi_variance: report.mi_variance,
            loss_spread: report.loss_spread,
        });
        if lambda_mi == config.lambda_mi {
            unitok = Some((report, model));
        }
    }
    let (unitok, unitok_model) = unitok.expect("configured lambda_mi is part of the sweep");
    progress("training single-codebook baseline");
    let (base_model, _) = train_baseline_single_codebook(dataset, config)?;
    let baseline = evaluate(&base_model, dataset)?;

    let at = |l: f64| sweep.iter().find(|p| p.lambda_mi == l).expect("swept");
    let (off, on) = (at(0.0), at(config.lambda_mi));
    let theorem3_pass = config.lambda_mi > 0.0
        && on.mi_variance < off.mi_variance
        && on.loss_spread < off.loss_spread
        && sweep.windows(2).all(|w| w[1].mi_variance <= w[0].mi_variance);

    let report = TheoremReport {
        h_unitok: unitok.token_entropy_bits,
        h_baseline: baseline.token_entropy_bits,
        q_unitok: unitok.quantization_mse,
        q_baseline: baseline.quantization_mse,
        q_margin: baseline.quantization_mse - unitok.quantization_mse,
        default_lambda_mi: config.lambda_mi,
        theorem1_pass: unitok.token_entropy_bits > baseline.token_entropy_bits,
        theorem2_pass: unitok.quantization_mse <= baseline.quantization_mse,
        theorem3_pass,
        sweep,
        unitok,
        baseline,
    };
    Ok(ComparisonRun {
        report,
        unitok: unitok_model,
        baseline: base_model,
    })
}
