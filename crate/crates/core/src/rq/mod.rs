//! Residual quantisation over a stack of codebooks.
//!
//! Level `ℓ` quantises the residual `r⁽ℓ⁻¹⁾` left by the previous levels, with
//! `r⁽⁰⁾ = z`. The RQ loss pairs each selected code with the residual it
//! quantised.

mod kmeans;

use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, PAD_JITTER};

use crate::error::{Error, Result};
use crate::numeric::{axpy, squared_distance, Matrix, Rng};

/// `L` codebooks of `T` codes each, plus per-epoch usage counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookStack {
    pub levels: Vec<Matrix>,
    pub usage: Vec<Vec<u64>>,
}

/// Gradient buffers for a [`CodebookStack`].
#[derive(Debug, Clone, PartialEq)]
pub struct StackGrads {
    pub levels: Vec<Matrix>,
}

impl StackGrads {
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            axpy(1.0, b.as_slice(), a.as_mut_slice());
        }
    }
}

/// Outcome of quantising one latent through a stack.
#[derive(Debug, Clone, PartialEq)]
pub struct RqResult {
    /// Selected code per level.
    pub indices: Vec<usize>,
    /// Sum of selected codes, accumulated from level 1 to `L`.
    pub quantized: Vec<f64>,
    /// `r⁽⁰⁾ … r⁽ᴸ⁾`, with `r⁽ℓ⁾ = r⁽ℓ⁻¹⁾ − c_ℓ`.
    pub residuals: Vec<Vec<f64>>,
}

/// Value and gradients of the RQ loss for one item.
#[derive(Debug, Clone, PartialEq)]
pub struct RqLoss {
    pub value: f64,
    /// Gradient for the selected code at each level (codebook term only).
    pub code_grads: Vec<Vec<f64>>,
    /// Gradient w.r.t. the latent `z` (commitment term only).
    pub latent_grad: Vec<f64>,
}

/// Index and value of the code closest to `r`; ties go to the lower index.
pub fn nearest_code<'a>(r: &[f64], codebook: &'a Matrix) -> Result<(usize, &'a [f64])> {
    if codebook.rows() == 0 {
        return Err(Error::InvalidArgument("empty codebook".into()));
    }
    if r.len() != codebook.cols() {
        return Err(Error::shape("nearest_code", codebook.cols(), r.len()));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, code) in codebook.iter_rows().enumerate() {
        let d = squared_distance(r, code);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok((best, codebook.row(best)))
}

impl CodebookStack {
    pub fn new(levels: Vec<Matrix>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::InvalidArgument("codebook stack needs at least one level".into()))?;
        let (t, dim) = (first.rows(), first.cols());
        if t == 0 || dim == 0 {
            return Err(Error::InvalidArgument("codebooks need T >= 1 codes of dim >= 1".into()));
        }
        for m in &levels {
            if m.rows() != t || m.cols() != dim {
                return Err(Error::InvalidArgument(format!(
                    "codebook levels disagree: {}x{} vs {t}x{dim}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.all_finite() {
                return Err(Error::InvalidArgument("non-finite code vector".into()));
            }
        }
        let usage = vec![vec![0; t]; levels.len()];
        Ok(Self { levels, usage })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn codes_per_level(&self) -> usize {
        self.levels[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.levels[0].cols()
    }

    pub fn num_params(&self) -> usize {
        self.levels.iter().map(|m| m.rows() * m.cols()).sum()
    }

    pub fn zero_grads(&self) -> StackGrads {
        StackGrads {
            levels: self
                .levels
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    /// Greedy residual quantisation of `z`. Read-only; usage is recorded
    /// separately with [`CodebookStack::record_usage`].
    pub fn encode(&self, z: &[f64]) -> Result<RqResult> {
        if z.len() != self.dim() {
            return Err(Error::shape("rq_encode", self.dim(), z.len()));
        }
        let mut indices = Vec::with_capacity(self.num_levels());
        let mut residuals = Vec::with_capacity(self.num_levels() + 1);
        let mut quantized = vec![0.0; z.len()];
        let mut r = z.to_vec();
        for codebook in &self.levels {
            let (idx, code) = nearest_code(&r, codebook)?;
            let next: Vec<f64> = r.iter().zip(code).map(|(a, c)| a - c).collect();
            quantized.iter_mut().zip(code).for_each(|(q, c)| *q += c);
            indices.push(idx);
            residuals.push(std::mem::replace(&mut r, next));
        }
        residuals.push(r);
        Ok(RqResult {
            indices,
            quantized,
            residuals,
        })
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for (counts, &i) in self.usage.iter_mut().zip(indices) {
            counts[i] += 1;
        }
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|c| c.iter_mut().for_each(|v| *v = 0));
    }

    /// Accumulates an [`RqLoss`]'s code gradients into `grads`, scaled by `scale`.
    pub fn accumulate_code_grads(&self, result: &RqResult, loss: &RqLoss, scale: f64, grads: &mut StackGrads) {
        for (level, (&idx, g)) in result.indices.iter().zip(&loss.code_grads).enumerate() {
            axpy(scale, g, grads.levels[level].row_mut(idx));
        }
    }
}

/// `Σ_ℓ ‖sg[r⁽ℓ⁻¹⁾] − c_ℓ‖² + α‖r⁽ℓ⁻¹⁾ − sg[c_ℓ]‖²`.
///
/// The first term trains codes (gradient `2(c_ℓ − r⁽ℓ⁻¹⁾)`); the second trains
/// the latent (gradient `2α(r⁽ℓ⁻¹⁾ − c_ℓ)`). Residuals carry gradient to `z`
/// only, i.e. `∂r⁽ℓ⁾/∂z = I` and earlier codes inside a residual are treated as
/// constants.
pub fn rq_loss(result: &RqResult, stack: &CodebookStack, alpha: f64) -> RqLoss {
    let dim = result.quantized.len();
    let mut value = 0.0;
    let mut code_grads = Vec::with_capacity(result.indices.len());
    let mut latent_grad = vec![0.0; dim];
    for (level, &idx) in result.indices.iter().enumerate() {
        let r = &result.residuals[level];
        let c = stack.levels[level].row(idx);
        let mut g = Vec::with_capacity(dim);
        for i in 0..dim {
            let diff = c[i] - r[i];
            value += (1.0 + alpha) * diff * diff;
            g.push(2.0 * diff);
            latent_grad[i] -= 2.0 * alpha * diff;
        }
        code_grads.push(g);
    }
    RqLoss {
        value,
        code_grads,
        latent_grad,
    }
}

/// Codebooks for one expert: level 1 clusters the latents, each deeper level
/// clusters the residuals left by the levels above it.
pub fn init_stack_from_latents(
    latents: &[Vec<f64>],
    levels: usize,
    codes: usize,
    iters: usize,
    rng: &mut Rng,
) -> Result<CodebookStack> {
    if latents.is_empty() {
        return Err(Error::InvalidArgument(
            "codebook initialisation needs at least one latent".into(),
        ));
    }
    if levels == 0 {
        return Err(Error::InvalidArgument("codebook stack needs L >= 1".into()));
    }
    let mut residuals = latents.to_vec();
    let mut books = Vec::with_capacity(levels);
    for _ in 0..levels {
        let book = kmeans(&residuals, codes, iters, rng)?;
        for r in residuals.iter_mut() {
            let (_, c) = nearest_code(r, &book)?;
            r.iter_mut().zip(c).for_each(|(a, b)| *a -= b);
        }
        books.push(book);
    }
    CodebookStack::new(books)
}

/// Moves every code used fewer than `threshold` times this epoch onto a
/// random residual observed at its level (plus jitter), then clears the
/// counters. Levels with no observed residuals are left alone.
pub fn reset_dead_codes(
    stack: &mut CodebookStack,
    residuals_per_level: &[Vec<Vec<f64>>],
    threshold: u64,
    rng: &mut Rng,
) -> usize {
    let mut reset = 0;
    for level in 0..stack.num_levels() {
        let Some(pool) = residuals_per_level.get(level).filter(|p| !p.is_empty()) else {
            continue;
        };
        for code in 0..stack.codes_per_level() {
            if stack.usage[level][code] >= threshold {
                continue;
            }
            let src = &pool[rng.index(pool.len())];
            let row = stack.levels[level].row_mut(code);
            for (dst, v) in row.iter_mut().zip(src) {
                *dst = v + PAD_JITTER * rng.normal();
            }
            reset += 1;
        }
    }
    stack.reset_usage();
    reset
}

/// Shannon entropy (bits) of a usage histogram; 0 for an empty histogram.
pub fn usage_entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0)
}
