//! TokenMoE: a softmax router over `K` domain experts with top-N selection
//! plus an always-active shared expert. Every expert is a residual-quantiser
//! codebook stack.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{axpy, LinearGrad, LinearLayer, Rng};
use crate::rq::{CodebookStack, RqResult, StackGrads};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Router {
    pub linear: LinearLayer,
}

impl Router {
    pub fn new(latent_dim: usize, experts: usize, rng: &mut Rng) -> Self {
        Self {
            linear: LinearLayer::he_uniform(latent_dim, experts, rng),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.linear.out_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Selected experts in descending probability order.
    pub selected: Vec<usize>,
    /// `probs` on the selected experts, zero elsewhere; not renormalised.
    pub masked_weights: Vec<f64>,
}

/// Discrete identifier `(z_1, …, z_L, e_1, …, e_N)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticToken {
    pub codes: Vec<usize>,
    pub experts: Vec<usize>,
}

impl SemanticToken {
    pub fn to_vec(&self) -> Vec<usize> {
        self.codes.iter().chain(&self.experts).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.codes.len() + self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Experts chosen from the router's softmax alone.
    #[default]
    Learned,
    /// The item's own domain expert is always selected first; remaining
    /// slots follow the router. Falls back to learned routing for items
    /// whose domain has no expert.
    DomainForced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMoe {
    pub router: Router,
    pub experts: Vec<CodebookStack>,
    pub shared: CodebookStack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeGrads {
    pub router: LinearGrad,
    pub experts: Vec<StackGrads>,
    pub shared: StackGrads,
}

impl MoeGrads {
    pub fn add_assign(&mut self, other: &Self) {
        self.router.add_assign(&other.router);
        for (a, b) in self.experts.iter_mut().zip(&other.experts) {
            a.add_assign(b);
        }
        self.shared.add_assign(&other.shared);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeOutput {
    pub z_hat: Vec<f64>,
    pub gate: GateDecision,
    /// RQ results for `gate.selected`, in the same order.
    pub selected_rq: Vec<RqResult>,
    pub shared_rq: RqResult,
    pub token: SemanticToken,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Experts ordered by descending probability, ties to the lower index.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

fn gate_from_logits(logits: Vec<f64>, n_active: usize, forced: Option<usize>) -> GateDecision {
    let probs = softmax(&logits);
    let n = n_active.min(probs.len());
    let mut selected = Vec::with_capacity(n);
    if let Some(f) = forced.filter(|&f| f < probs.len()) {
        selected.push(f);
    }
    for k in ranked(&probs) {
        if selected.len() == n {
            break;
        }
        if !selected.contains(&k) {
            selected.push(k);
        }
    }
    let mut masked_weights = vec![0.0; probs.len()];
    for &k in &selected {
        masked_weights[k] = probs[k];
    }
    GateDecision {
        logits,
        probs,
        selected,
        masked_weights,
    }
}

/// Softmax gate over the router logits `h(z)` with top-`n_active` selection.
pub fn route(router: &Router, z: &[f64], n_active: usize) -> Result<GateDecision> {
    Ok(gate_from_logits(router.linear.forward(z)?, n_active, None))
}

/// Token for a completed forward pass: codes from the highest-gate selected
/// expert, expert IDs in gate order.
pub fn assemble_token(gate: &GateDecision, selected_rq: &[RqResult]) -> SemanticToken {
    SemanticToken {
        codes: selected_rq.first().map(|r| r.indices.clone()).unwrap_or_default(),
        experts: gate.selected.clone(),
    }
}

impl TokenMoe {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.shared.dim()
    }

    pub fn num_params(&self) -> (usize, usize) {
        let codebooks = self.experts.iter().map(CodebookStack::num_params).sum::<usize>() + self.shared.num_params();
        (codebooks, self.router.linear.num_params())
    }

    pub fn zero_grads(&self) -> MoeGrads {
        MoeGrads {
            router: LinearGrad::zeros_like(&self.router.linear),
            experts: self.experts.iter().map(CodebookStack::zero_grads).collect(),
            shared: self.shared.zero_grads(),
        }
    }

    fn check(&self, n_active: usize) -> Result<()> {
        let k = self.num_experts();
        if n_active == 0 || n_active > k {
            return Err(Error::InvalidArgument(format!(
                "top-N must lie in [1, {k}], got {n_active}"
            )));
        }
        Ok(())
    }

    /// `ẑ = Σ_{k∈selected} G_k q_k(z) + q_share(z)`.
    pub fn forward(&self, z: &[f64], n_active: usize, forced: Option<usize>) -> Result<MoeOutput> {
        self.check(n_active)?;
        let gate = gate_from_logits(self.router.linear.forward(z)?, n_active, forced);
        let selected_rq = gate
            .selected
            .iter()
            .map(|&k| self.experts[k].encode(z))
            .collect::<Result<Vec<_>>>()?;
        let shared_rq = self.shared.encode(z)?;

        let mut z_hat = shared_rq.quantized.clone();
        for (&k, rq) in gate.selected.iter().zip(&selected_rq) {
            axpy(gate.probs[k], &rq.quantized, &mut z_hat);
        }
        let token = assemble_token(&gate, &selected_rq);
        Ok(MoeOutput {
            z_hat,
            gate,
            selected_rq,
            shared_rq,
            token,
        })
    }

    /// Straight-through backward of [`TokenMoe::forward`] given `∂L/∂ẑ`.
    ///
    /// The surrogate is `ẑ = Σ G_k (z + sg[q_k − z]) + (z + sg[q_share − z])`:
    /// the latent receives `(Σ G_k + 1)·∂L/∂ẑ` plus the router path, and
    /// `∂ẑ/∂G_k = q_k`. Codes receive nothing here. Router parameter gradients
    /// are accumulated into `router_grad`; returns `∂L/∂z`.
    pub fn backward(
        &self,
        z: &[f64],
        out: &MoeOutput,
        grad_z_hat: &[f64],
        router_grad: &mut LinearGrad,
    ) -> Result<Vec<f64>> {
        let gate = &out.gate;
        let mass: f64 = 1.0 + gate.selected.iter().map(|&k| gate.probs[k]).sum::<f64>();
        let mut grad_z: Vec<f64> = grad_z_hat.iter().map(|g| mass * g).collect();

        let mut grad_probs = vec![0.0; gate.probs.len()];
        for (&k, rq) in gate.selected.iter().zip(&out.selected_rq) {
            grad_probs[k] = crate::numeric::dot(grad_z_hat, &rq.quantized);
        }
        let inner: f64 = gate.probs.iter().zip(&grad_probs).map(|(p, g)| p * g).sum();
        let grad_logits: Vec<f64> = gate
            .probs
            .iter()
            .zip(&grad_probs)
            .map(|(p, g)| p * (g - inner))
            .collect();
        let via_router = self.router.linear.backward(z, &grad_logits, router_grad)?;
        axpy(1.0, &via_router, &mut grad_z);
        Ok(grad_z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Matrix;

    fn zero_router(d: usize, k: usize) -> Router {
        Router {
            linear: LinearLayer::zeros(d, k),
        }
    }

    #[test]
    fn zero_router_is_uniform_and_picks_low_indices() {
        let g = route(&zero_router(3, 4), &[1.0, -2.0, 0.5], 2).unwrap();
        for p in &g.probs {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert_eq!(g.selected, vec![0, 1]);
        assert_eq!(g.masked_weights, vec![0.25, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn closed_form_two_way_softmax() {
        let p = softmax(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[1000.0, 999.0, -1000.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forced_routing_puts_domain_first() {
        let g = gate_from_logits(vec![3.0, 1.0, 2.0], 2, Some(1));
        assert_eq!(g.selected, vec![1, 0]);
        let g = gate_from_logits(vec![3.0, 1.0, 2.0], 1, Some(7));
        assert_eq!(g.selected, vec![0]);
    }

    #[test]
    fn token_concatenates_codes_and_experts() {
        let gate = GateDecision {
            logits: vec![0.0; 3],
            probs: vec![0.1, 0.2, 0.7],
            selected: vec![2],
            masked_weights: vec![0.0, 0.0, 0.7],
        };
        let rq = RqResult {
            indices: vec![3, 17, 250, 0],
            quantized: vec![],
            residuals: vec![],
        };
        let t = assemble_token(&gate, std::slice::from_ref(&rq));
        assert_eq!(t.to_vec(), vec![3, 17, 250, 0, 2]);

        let gate2 = GateDecision {
            selected: vec![2, 0],
            ..gate
        };
        let mut rq2 = rq.clone();
        rq2.indices = vec![9, 9, 9, 9];
        let t = assemble_token(&gate2, &[rq, rq2]);
        assert_eq!(t.to_vec(), vec![3, 17, 250, 0, 2, 0]);
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn n_active_out_of_range_rejected() {
        let stack = CodebookStack::new(vec![Matrix::zeros(2, 3)]).unwrap();
        let moe = TokenMoe {
            router: zero_router(3, 2),
            experts: vec![stack.clone(), stack.clone()],
            shared: stack,
        };
        assert!(moe.forward(&[0.0; 3], 0, None).is_err());
        assert!(moe.forward(&[0.0; 3], 3, None).is_err());
        assert!(moe.forward(&[0.0; 3], 2, None).is_ok());
    }
}
