//! The composite objective `L_Rec + λ_RQ·L_RQ + λ_MI·L_MI` and the training
//! loop around it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{recon_loss_item, Autoencoder};
use crate::config::{BaselineKind, TrainConfig};
use crate::data::{sample_batch, Batch, Dataset};
use crate::error::{Error, Result};
use crate::hsic::{hsic, mi_calibration_loss, population_variance};
use crate::model::{autoencoder_tensors, ModelGrads, ModelState, Quantized, Quantizer, FORMAT_VERSION};
use crate::moe::{Router, TokenMoe};
use crate::numeric::{axpy, AdamConfig, AdamState, MlpBatchCache, Rng};
use crate::rq::{init_stack_from_latents, reset_dead_codes, rq_loss, usage_entropy, CodebookStack};

/// Items per gradient-accumulation chunk. Chunks are merged in index order,
/// so results do not depend on the number of worker threads.
const CHUNK: usize = 32;

const STREAM_AE: u64 = 1;
const STREAM_ROUTER: u64 = 2;
const STREAM_WARMUP: u64 = 3;
const STREAM_KMEANS: u64 = 4;
const STREAM_BATCHES: u64 = 5;
const STREAM_DEAD_CODES: u64 = 6;

/// Loss components for one batch (or averaged over an epoch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rec: f64,
    pub rq: f64,
    pub mi: f64,
    /// Mean reconstruction loss of each domain's items in the batch.
    pub per_domain_rec: Vec<f64>,
    /// `None` for domains with too few items for an HSIC estimate.
    pub per_domain_hsic: Vec<Option<f64>>,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={:.6} rec={:.6} rq={:.6} mi={:.6}",
            self.total, self.rec, self.rq, self.mi
        )
    }
}

/// Everything [`total_loss`] produces for one batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub breakdown: LossBreakdown,
    pub grads: ModelGrads,
    /// Quantiser output per batch item, in batch order.
    pub quantized: Vec<Quantized>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub rec: f64,
    pub rq: f64,
    pub mi: f64,
    pub per_domain_rec: Vec<f64>,
    pub per_domain_hsic: Vec<Option<f64>>,
    /// Population variance of the per-domain HSIC values above.
    pub mi_variance: f64,
    /// Usage entropy (bits) per stack, per level; stacks ordered as
    /// experts then shared, or the single baseline stack.
    pub usage_entropy: Vec<Vec<f64>>,
    /// Average masked gate weight, domain × expert. Empty for the baseline.
    pub gate_distribution: Vec<Vec<f64>>,
    pub dead_code_resets: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-item reconstruction loss of each warm-up epoch.
    pub warmup_rec: Vec<f64>,
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Forward pass and every gradient except the encoder's for one chunk of
/// the batch. The encoder backward waits until the HSIC terms have added
/// their share to `grad_z`.
struct ChunkPass {
    enc: MlpBatchCache,
    quantized: Vec<Quantized>,
    rec: Vec<f64>,
    rq: Vec<f64>,
    /// `rows × d_latent`, row-major.
    grad_z: Vec<f64>,
    grads: ModelGrads,
}

fn chunk_pass(model: &ModelState, batch: &Batch, range: std::ops::Range<usize>, inv_b: f64) -> Result<ChunkPass> {
    let cfg = &model.config;
    let ae = &model.autoencoder;
    let rows = range.len();
    let latent = ae.latent_dim();
    let mut grads = model.zero_grads();

    let mut x = Vec::with_capacity(rows * ae.input_dim());
    for r in &batch.records[range.clone()] {
        if r.embedding.len() != ae.input_dim() {
            return Err(Error::shape("batch embedding", ae.input_dim(), r.embedding.len()));
        }
        x.extend_from_slice(&r.embedding);
    }
    let enc = ae.encoder.forward_batch(&x, rows)?;
    let mut quantized = Vec::with_capacity(rows);
    let mut z_hat = Vec::with_capacity(rows * latent);
    for (j, r) in batch.records[range.clone()].iter().enumerate() {
        let q = model.quantize(enc.output_row(j), model.forced_expert(Some(r.domain)))?;
        z_hat.extend_from_slice(q.z_hat());
        quantized.push(q);
    }
    let dec = ae.decoder.forward_batch(&z_hat, rows)?;
    let mut rec = Vec::with_capacity(rows);
    let mut g_xhat = Vec::with_capacity(x.len());
    for (j, r) in batch.records[range].iter().enumerate() {
        let (l, g) = recon_loss_item(&r.embedding, dec.output_row(j))?;
        rec.push(l);
        g_xhat.extend(g.into_iter().map(|v| v * inv_b));
    }
    let g_zhat = ae.decoder.backward_batch(&dec, &g_xhat, &mut grads.autoencoder.decoder)?;

    let mut grad_z = Vec::with_capacity(rows * latent);
    let mut rq = Vec::with_capacity(rows);
    let scale = cfg.lambda_rq * inv_b;
    for (j, q) in quantized.iter().enumerate() {
        let z = enc.output_row(j);
        let gz_hat = &g_zhat[j * latent..(j + 1) * latent];
        let mut gz = match (&model.quantizer, q) {
            (Quantizer::Moe(moe), Quantized::Moe(out)) => {
                let router = grads.router_mut().expect("MoE model has router gradients");
                moe.backward(z, out, gz_hat, router)?
            }
            // ẑ = z + sg[q − z]
            _ => gz_hat.to_vec(),
        };
        let mut item_rq = 0.0;
        for (id, result) in q.active() {
            let stack = model.stack(id);
            let loss = rq_loss(result, stack, cfg.alpha);
            item_rq += loss.value;
            if scale != 0.0 {
                stack.accumulate_code_grads(result, &loss, scale, grads.stack_mut(id));
                axpy(scale, &loss.latent_grad, &mut gz);
            }
        }
        rq.push(item_rq);
        grad_z.extend_from_slice(&gz);
    }
    Ok(ChunkPass {
        enc,
        quantized,
        rec,
        rq,
        grad_z,
        grads,
    })
}

/// Value and full gradient of the composite loss on one batch, using the
/// model's own config for the weights.
///
/// `L_Rec` and `L_RQ` are means over batch items; `L_RQ` sums over levels and
/// over every active stack (selected experts plus shared). HSIC uses the first
/// `max_points_per_domain` items of each domain in the batch, with the encoder
/// output `z` as the latent side.
///
/// Items are processed in fixed chunks of [`CHUNK`] whose gradients are
/// merged in index order, so results do not depend on the worker count.
pub fn total_loss(model: &ModelState, batch: &Batch) -> Result<BatchLoss> {
    let cfg = &model.config;
    let b = batch.len();
    if b == 0 {
        return Err(Error::InvalidArgument("batch is empty".into()));
    }
    let inv_b = 1.0 / b as f64;
    let latent = model.autoencoder.latent_dim();

    let mut chunks: Vec<ChunkPass> = (0..b.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| chunk_pass(model, batch, c * CHUNK..((c + 1) * CHUNK).min(b), inv_b))
        .collect::<Result<_>>()?;

    let num_domains = batch.per_domain.len();
    let mut per_domain_hsic = vec![None; num_domains];
    let mut estimates = Vec::new();
    for (k, positions) in batch.per_domain.iter().enumerate() {
        let used = &positions[..positions.len().min(cfg.hsic.max_points_per_domain)];
        let xs: Vec<Vec<f64>> = used.iter().map(|&p| batch.records[p].embedding.clone()).collect();
        let zs: Vec<Vec<f64>> = used
            .iter()
            .map(|&p| chunks[p / CHUNK].enc.output_row(p % CHUNK).to_vec())
            .collect();
        if let Some(est) = hsic(&xs, &zs, &cfg.hsic)? {
            per_domain_hsic[k] = Some(est.value);
            estimates.push((used, est));
        }
    }
    let values: Vec<f64> = estimates.iter().map(|(_, e)| e.value).collect();
    let (mi, d_values) = mi_calibration_loss(&values, cfg.beta);
    if cfg.lambda_mi != 0.0 {
        for ((used, est), dv) in estimates.iter().zip(&d_values) {
            for (&p, g) in used.iter().zip(&est.grad_z) {
                let row = p % CHUNK;
                let gz = &mut chunks[p / CHUNK].grad_z[row * latent..(row + 1) * latent];
                axpy(cfg.lambda_mi * dv, g, gz);
            }
        }
    }

    let encoder = &model.autoencoder.encoder;
    chunks.par_iter_mut().try_for_each(|c| -> Result<()> {
        encoder.backward_batch(&c.enc, &c.grad_z, &mut c.grads.autoencoder.encoder)?;
        Ok(())
    })?;

    let mut grads = model.zero_grads();
    let mut rec_items = Vec::with_capacity(b);
    let mut rq_items = Vec::with_capacity(b);
    let mut quantized = Vec::with_capacity(b);
    for c in chunks {
        grads.add_assign(&c.grads);
        rec_items.extend(c.rec);
        rq_items.extend(c.rq);
        quantized.extend(c.quantized);
    }

    let mut per_domain_rec = vec![0.0; num_domains];
    for (k, positions) in batch.per_domain.iter().enumerate() {
        if !positions.is_empty() {
            per_domain_rec[k] = positions.iter().map(|&p| rec_items[p]).sum::<f64>() / positions.len() as f64;
        }
    }
    let rec = rec_items.iter().sum::<f64>() * inv_b;
    let rq = rq_items.iter().sum::<f64>() * inv_b;
    let total = rec + cfg.lambda_rq * rq + cfg.lambda_mi * mi;
    let breakdown = LossBreakdown {
        total,
        rec,
        rq,
        mi,
        per_domain_rec,
        per_domain_hsic,
    };
    if !total.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            breakdown: breakdown.to_string(),
        });
    }
    Ok(BatchLoss {
        breakdown,
        grads,
        quantized,
    })
}

/// Thread pool honouring `UNITOK_THREADS` (all cores when unset).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("UNITOK_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("UNITOK_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(Error::InvalidArgument("UNITOK_THREADS must be >= 1".into()));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker threads: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Variant {
    UniTok,
    Baseline,
}

/// Trains the tokenizer end to end.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(ModelState, TrainReport)> {
    train_with_progress(dataset, config, |_| {})
}

/// [`train`], calling `progress` after every epoch.
pub fn train_with_progress(
    dataset: &Dataset,
    config: &TrainConfig,
    progress: impl FnMut(&EpochStats) + Send,
) -> Result<(ModelState, TrainReport)> {
    thread_pool()?.install(|| run(dataset, config.clone(), Variant::UniTok, progress))
}

/// The comparison model: one codebook stack, no router, `L_MI` off.
pub fn train_baseline_single_codebook(dataset: &Dataset, config: &TrainConfig) -> Result<(ModelState, TrainReport)> {
    train_baseline_with_progress(dataset, config, |_| {})
}

pub fn train_baseline_with_progress(
    dataset: &Dataset,
    config: &TrainConfig,
    progress: impl FnMut(&EpochStats) + Send,
) -> Result<(ModelState, TrainReport)> {
    let mut cfg = config.clone();
    cfg.lambda_mi = 0.0;
    if cfg.baseline == BaselineKind::ParameterMatched {
        let experts = cfg.num_experts.unwrap_or(dataset.num_domains());
        cfg.codes *= experts + 1;
    }
    thread_pool()?.install(|| run(dataset, cfg, Variant::Baseline, progress))
}

fn encode_all(ae: &Autoencoder, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    dataset.records().par_iter().map(|r| ae.encode(&r.embedding)).collect()
}

fn warmup(ae: &mut Autoencoder, dataset: &Dataset, config: &TrainConfig, report: &mut TrainReport) -> Result<()> {
    let mut rng = Rng::with_stream(config.seed, STREAM_WARMUP);
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let batches = dataset.len().div_ceil(config.batch_size);
    for epoch in 0..config.warmup_epochs {
        let mut epoch_rec = 0.0;
        for _ in 0..batches {
            let batch = sample_batch(dataset, config.batch_size, config.min_per_domain, &mut rng)?;
            let inv_b = 1.0 / batch.len() as f64;
            let model: &Autoencoder = ae;
            let b = batch.len();
            let chunks: Vec<(f64, _)> = (0..b.div_ceil(CHUNK))
                .into_par_iter()
                .map(|c| {
                    let range = c * CHUNK..((c + 1) * CHUNK).min(b);
                    let rows = range.len();
                    let mut g = model.zero_grads();
                    let x: Vec<f64> = batch.records[range.clone()]
                        .iter()
                        .flat_map(|r| r.embedding.iter().copied())
                        .collect();
                    let enc = model.encoder.forward_batch(&x, rows)?;
                    let dec = model.decoder.forward_batch(enc.output(), rows)?;
                    let mut rec = 0.0;
                    let mut gx = Vec::with_capacity(x.len());
                    for (j, r) in batch.records[range].iter().enumerate() {
                        let (l, gr) = recon_loss_item(&r.embedding, dec.output_row(j))?;
                        rec += l;
                        gx.extend(gr.into_iter().map(|v| v * inv_b));
                    }
                    let gz = model.decoder.backward_batch(&dec, &gx, &mut g.decoder)?;
                    model.encoder.backward_batch(&enc, &gz, &mut g.encoder)?;
                    Ok((rec, g))
                })
                .collect::<Result<_>>()?;
            let mut grads = ae.zero_grads();
            let mut rec = 0.0;
            for (r, g) in chunks {
                rec += r;
                grads.add_assign(&g);
            }
            rec *= inv_b;
            if !rec.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    breakdown: format!("warm-up rec={rec}"),
                });
            }
            epoch_rec += rec;
            let mut tensors = Vec::new();
            autoencoder_tensors(ae, &mut grads, &mut tensors);
            adam.step(&mut tensors)?;
        }
        report.warmup_rec.push(epoch_rec / batches as f64);
    }
    Ok(())
}

/// Builds the untrained-but-initialised model: AE warm-up, then codebooks
/// fitted to the warmed-up latents.
fn initialise(
    dataset: &Dataset,
    config: &TrainConfig,
    variant: Variant,
    report: &mut TrainReport,
) -> Result<ModelState> {
    let mut ae_rng = Rng::with_stream(config.seed, STREAM_AE);
    let mut ae = Autoencoder::new(dataset.dim(), &config.hidden, config.latent_dim, &mut ae_rng)?;
    warmup(&mut ae, dataset, config, report)?;

    let latents = encode_all(&ae, dataset)?;
    let mut km = Rng::with_stream(config.seed, STREAM_KMEANS);
    let fit = |items: &[Vec<f64>], rng: &mut Rng| -> Result<CodebookStack> {
        init_stack_from_latents(items, config.levels, config.codes, config.kmeans_iters, rng)
    };
    let quantizer = match variant {
        Variant::Baseline => Quantizer::Single {
            stack: fit(&latents, &mut km)?,
        },
        Variant::UniTok => {
            let experts = config.num_experts.unwrap_or(dataset.num_domains());
            if config.top_n > experts {
                return Err(Error::InvalidArgument(format!(
                    "top_n = {} exceeds the number of experts ({experts})",
                    config.top_n
                )));
            }
            let mut router_rng = Rng::with_stream(config.seed, STREAM_ROUTER);
            let router = Router::new(config.latent_dim, experts, &mut router_rng);
            let mut stacks = Vec::with_capacity(experts);
            for k in 0..experts {
                // Expert k specialises on domain k; surplus experts see everything.
                let stack = if k < dataset.num_domains() {
                    let own: Vec<Vec<f64>> = dataset.domain_indices(k).iter().map(|&i| latents[i].clone()).collect();
                    fit(&own, &mut km)?
                } else {
                    fit(&latents, &mut km)?
                };
                stacks.push(stack);
            }
            let shared = fit(&latents, &mut km)?;
            Quantizer::Moe(TokenMoe {
                router,
                experts: stacks,
                shared,
            })
        }
    };
    Ok(ModelState {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        autoencoder: ae,
        quantizer,
        domain_labels: dataset.domain_labels().to_vec(),
        seed: config.seed,
    })
}

#[derive(Default)]
struct EpochAccumulator {
    total: f64,
    rec: f64,
    rq: f64,
    mi: f64,
    batches: usize,
    rec_sum: Vec<f64>,
    rec_count: Vec<usize>,
    hsic_sum: Vec<f64>,
    hsic_count: Vec<usize>,
    gate_sum: Vec<Vec<f64>>,
    gate_count: Vec<usize>,
}

impl EpochAccumulator {
    fn new(domains: usize, experts: usize) -> Self {
        Self {
            rec_sum: vec![0.0; domains],
            rec_count: vec![0; domains],
            hsic_sum: vec![0.0; domains],
            hsic_count: vec![0; domains],
            gate_sum: vec![vec![0.0; experts]; domains],
            gate_count: vec![0; domains],
            ..Self::default()
        }
    }

    fn add(&mut self, batch: &Batch, loss: &BatchLoss) {
        let b = &loss.breakdown;
        self.total += b.total;
        self.rec += b.rec;
        self.rq += b.rq;
        self.mi += b.mi;
        self.batches += 1;
        for (k, positions) in batch.per_domain.iter().enumerate() {
            self.rec_sum[k] += b.per_domain_rec[k] * positions.len() as f64;
            self.rec_count[k] += positions.len();
            if let Some(h) = b.per_domain_hsic[k] {
                self.hsic_sum[k] += h;
                self.hsic_count[k] += 1;
            }
            for &p in positions {
                if let Some(gate) = loss.quantized[p].gate() {
                    axpy(1.0, &gate.masked_weights, &mut self.gate_sum[k]);
                    self.gate_count[k] += 1;
                }
            }
        }
    }

    fn finish(self, epoch: usize, usage_entropy: Vec<Vec<f64>>, dead_code_resets: usize) -> EpochStats {
        let nb = self.batches.max(1) as f64;
        let mean = |s: &[f64], c: &[usize]| -> Vec<f64> {
            s.iter().zip(c).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
        };
        let per_domain_hsic: Vec<Option<f64>> = self
            .hsic_sum
            .iter()
            .zip(&self.hsic_count)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        let present: Vec<f64> = per_domain_hsic.iter().flatten().copied().collect();
        let gate_distribution = if self.gate_sum.first().is_some_and(|g| !g.is_empty()) {
            self.gate_sum
                .iter()
                .zip(&self.gate_count)
                .map(|(g, &c)| g.iter().map(|v| if c == 0 { 0.0 } else { v / c as f64 }).collect())
                .collect()
        } else {
            Vec::new()
        };
        EpochStats {
            epoch,
            total: self.total / nb,
            rec: self.rec / nb,
            rq: self.rq / nb,
            mi: self.mi / nb,
            per_domain_rec: mean(&self.rec_sum, &self.rec_count),
            per_domain_hsic,
            mi_variance: population_variance(&present),
            usage_entropy,
            gate_distribution,
            dead_code_resets,
        }
    }
}

fn run(
    dataset: &Dataset,
    config: TrainConfig,
    variant: Variant,
    mut progress: impl FnMut(&EpochStats) + Send,
) -> Result<(ModelState, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let mut report = TrainReport::default();
    let mut model = initialise(dataset, &config, variant, &mut report)?;
    let stack_ids = model.stack_ids();

    let mut batch_rng = Rng::with_stream(config.seed, STREAM_BATCHES);
    let mut dead_rng = Rng::with_stream(config.seed, STREAM_DEAD_CODES);
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let batches = dataset.len().div_ceil(config.batch_size);

    for epoch in 0..config.epochs {
        let mut acc = EpochAccumulator::new(dataset.num_domains(), model.num_experts());
        // residuals[stack][level]: inputs seen by that level this epoch.
        let mut residuals: Vec<Vec<Vec<Vec<f64>>>> = vec![vec![Vec::new(); config.levels]; stack_ids.len()];
        for id in &stack_ids {
            model.stack_mut(*id).reset_usage();
        }

        for _ in 0..batches {
            let batch = sample_batch(dataset, config.batch_size, config.min_per_domain, &mut batch_rng)?;
            let mut loss = total_loss(&model, &batch).map_err(|e| match e {
                Error::Diverged { breakdown, .. } => Error::Diverged { epoch, breakdown },
                other => other,
            })?;
            for q in &loss.quantized {
                for (id, result) in q.active() {
                    let s = stack_ids.iter().position(|x| *x == id).expect("known stack");
                    model.stack_mut(id).record_usage(&result.indices);
                    if config.reset_dead_codes {
                        for (level, r) in result.residuals.iter().take(config.levels).enumerate() {
                            residuals[s][level].push(r.clone());
                        }
                    }
                }
            }
            acc.add(&batch, &loss);
            let mut tensors = model.param_tensors(&mut loss.grads);
            adam.step(&mut tensors).map_err(|e| match e {
                Error::NonFiniteGradient { tensor, step } => Error::Diverged {
                    epoch,
                    breakdown: format!("non-finite gradient in `{tensor}` at step {step}; {}", loss.breakdown),
                },
                other => other,
            })?;
        }

        let usage: Vec<Vec<f64>> = stack_ids
            .iter()
            .map(|id| model.stack(*id).usage.iter().map(|c| usage_entropy(c)).collect())
            .collect();
        let mut resets = 0;
        if config.reset_dead_codes {
            for (s, id) in stack_ids.iter().enumerate() {
                resets += reset_dead_codes(
                    model.stack_mut(*id),
                    &residuals[s],
                    config.dead_code_threshold,
                    &mut dead_rng,
                );
            }
        }
        let stats = acc.finish(epoch, usage, resets);
        progress(&stats);
        report.epochs.push(stats);
    }
    for id in &stack_ids {
        model.stack_mut(*id).reset_usage();
    }
    Ok((model, report))
}
