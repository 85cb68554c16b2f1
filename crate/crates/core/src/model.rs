//! The trained tokenizer: autoencoder plus quantiser, its gradients, its
//! serialised form and item-level inference.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{Autoencoder, AutoencoderGrads};
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::moe::{GateDecision, MoeGrads, MoeOutput, RoutingMode, SemanticToken, TokenMoe};
use crate::numeric::{LinearGrad, ParamTensor};
use crate::rq::{CodebookStack, RqResult, StackGrads};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Quantizer {
    /// Domain experts, router and shared expert.
    Moe(TokenMoe),
    /// One codebook stack, no router (the comparison baseline).
    Single { stack: CodebookStack },
}

/// Identifies one codebook stack inside a [`Quantizer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StackId {
    Expert(usize),
    Shared,
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub format_version: u32,
    pub config: TrainConfig,
    pub autoencoder: Autoencoder,
    pub quantizer: Quantizer,
    /// Source label of each training domain, indexed by dense domain id.
    pub domain_labels: Vec<i64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuantizerGrads {
    Moe(MoeGrads),
    Single(StackGrads),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub autoencoder: AutoencoderGrads,
    pub quantizer: QuantizerGrads,
}

impl ModelGrads {
    pub fn add_assign(&mut self, other: &Self) {
        self.autoencoder.add_assign(&other.autoencoder);
        match (&mut self.quantizer, &other.quantizer) {
            (QuantizerGrads::Moe(a), QuantizerGrads::Moe(b)) => a.add_assign(b),
            (QuantizerGrads::Single(a), QuantizerGrads::Single(b)) => a.add_assign(b),
            _ => unreachable!("gradient layouts always come from the same model"),
        }
    }

    pub fn stack_mut(&mut self, id: StackId) -> &mut StackGrads {
        match (&mut self.quantizer, id) {
            (QuantizerGrads::Moe(g), StackId::Expert(k)) => &mut g.experts[k],
            (QuantizerGrads::Moe(g), StackId::Shared) => &mut g.shared,
            (QuantizerGrads::Single(g), StackId::Single) => g,
            _ => panic!("stack {id:?} does not exist in this model"),
        }
    }

    pub fn router_mut(&mut self) -> Option<&mut LinearGrad> {
        match &mut self.quantizer {
            QuantizerGrads::Moe(g) => Some(&mut g.router),
            QuantizerGrads::Single(_) => None,
        }
    }
}

/// Quantiser output for one latent.
#[derive(Debug, Clone, PartialEq)]
pub enum Quantized {
    Moe(MoeOutput),
    Single(RqResult),
}

impl Quantized {
    pub fn z_hat(&self) -> &[f64] {
        match self {
            Quantized::Moe(o) => &o.z_hat,
            Quantized::Single(r) => &r.quantized,
        }
    }

    pub fn token(&self) -> SemanticToken {
        match self {
            Quantized::Moe(o) => o.token.clone(),
            Quantized::Single(r) => SemanticToken {
                codes: r.indices.clone(),
                experts: Vec::new(),
            },
        }
    }

    pub fn gate(&self) -> Option<&GateDecision> {
        match self {
            Quantized::Moe(o) => Some(&o.gate),
            Quantized::Single(_) => None,
        }
    }

    /// Every stack that quantised this latent, with its result.
    pub fn active(&self) -> Vec<(StackId, &RqResult)> {
        match self {
            Quantized::Moe(o) => o
                .gate
                .selected
                .iter()
                .zip(&o.selected_rq)
                .map(|(&k, r)| (StackId::Expert(k), r))
                .chain(std::iter::once((StackId::Shared, &o.shared_rq)))
                .collect(),
            Quantized::Single(r) => vec![(StackId::Single, r)],
        }
    }
}

/// Full forward pass for one item.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemOutput {
    pub z: Vec<f64>,
    pub quantized: Quantized,
    pub x_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRow {
    pub domain: i64,
    pub item_id: String,
    pub token: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenTable {
    pub rows: Vec<TokenRow>,
    /// Items whose full token is shared with at least one other item.
    pub colliding_items: usize,
}

impl TokenTable {
    pub fn collision_rate(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.colliding_items as f64 / self.rows.len() as f64
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for row in &self.rows {
            serde_json::to_writer(&mut out, row)?;
            out.write_all(b"\n").map_err(|e| Error::io("<token writer>", e))?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Appends the encoder and decoder tensors, named `encoder.{i}.weight` etc.
pub fn autoencoder_tensors<'a>(
    ae: &'a mut Autoencoder,
    grads: &'a mut AutoencoderGrads,
    out: &mut Vec<ParamTensor<'a>>,
) {
    for (prefix, layers, lgrads) in [
        ("encoder", &mut ae.encoder.layers, &mut grads.encoder),
        ("decoder", &mut ae.decoder.layers, &mut grads.decoder),
    ] {
        for (i, (l, g)) in layers.iter_mut().zip(lgrads.iter_mut()).enumerate() {
            out.push(ParamTensor {
                name: format!("{prefix}.{i}.weight"),
                value: l.weight.as_mut_slice(),
                grad: g.weight.as_mut_slice(),
            });
            out.push(ParamTensor {
                name: format!("{prefix}.{i}.bias"),
                value: &mut l.bias,
                grad: &mut g.bias,
            });
        }
    }
}

/// Number of items sharing their token with another item.
pub fn count_colliding<T: std::hash::Hash + Eq>(tokens: &[T]) -> usize {
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    counts.values().filter(|&&c| c > 1).sum()
}

impl ModelState {
    pub fn input_dim(&self) -> usize {
        self.autoencoder.input_dim()
    }

    pub fn num_experts(&self) -> usize {
        match &self.quantizer {
            Quantizer::Moe(m) => m.num_experts(),
            Quantizer::Single { .. } => 0,
        }
    }

    pub fn stack(&self, id: StackId) -> &CodebookStack {
        match (&self.quantizer, id) {
            (Quantizer::Moe(m), StackId::Expert(k)) => &m.experts[k],
            (Quantizer::Moe(m), StackId::Shared) => &m.shared,
            (Quantizer::Single { stack }, StackId::Single) => stack,
            _ => panic!("stack {id:?} does not exist in this model"),
        }
    }

    pub fn stack_mut(&mut self, id: StackId) -> &mut CodebookStack {
        match (&mut self.quantizer, id) {
            (Quantizer::Moe(m), StackId::Expert(k)) => &mut m.experts[k],
            (Quantizer::Moe(m), StackId::Shared) => &mut m.shared,
            (Quantizer::Single { stack }, StackId::Single) => stack,
            _ => panic!("stack {id:?} does not exist in this model"),
        }
    }

    /// All stacks in a fixed order: experts, then shared (or the single stack).
    pub fn stack_ids(&self) -> Vec<StackId> {
        match &self.quantizer {
            Quantizer::Moe(m) => (0..m.num_experts())
                .map(StackId::Expert)
                .chain(std::iter::once(StackId::Shared))
                .collect(),
            Quantizer::Single { .. } => vec![StackId::Single],
        }
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            autoencoder: self.autoencoder.zero_grads(),
            quantizer: match &self.quantizer {
                Quantizer::Moe(m) => QuantizerGrads::Moe(m.zero_grads()),
                Quantizer::Single { stack } => QuantizerGrads::Single(stack.zero_grads()),
            },
        }
    }

    /// Expert to force for an item of dense domain `domain`, if forced
    /// routing is configured and that expert exists.
    pub fn forced_expert(&self, domain: Option<usize>) -> Option<usize> {
        match self.config.routing {
            RoutingMode::DomainForced => domain.filter(|&d| d < self.num_experts()),
            RoutingMode::Learned => None,
        }
    }

    pub fn quantize(&self, z: &[f64], forced: Option<usize>) -> Result<Quantized> {
        match &self.quantizer {
            Quantizer::Moe(m) => Ok(Quantized::Moe(m.forward(z, self.config.top_n.min(m.num_experts()), forced)?)),
            Quantizer::Single { stack } => Ok(Quantized::Single(stack.encode(z)?)),
        }
    }

    /// Encodes, quantises and decodes one embedding. `domain` is only used by
    /// domain-forced routing.
    pub fn forward_item(&self, x: &[f64], domain: Option<usize>) -> Result<ItemOutput> {
        let z = self.autoencoder.encode(x)?;
        let quantized = self.quantize(&z, self.forced_expert(domain))?;
        let x_hat = self.autoencoder.decode(quantized.z_hat())?;
        Ok(ItemOutput { z, quantized, x_hat })
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.dim() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "dataset embeddings have dimension {} but the model expects {}",
                dataset.dim(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Dense domain index of a dataset domain in this model's training
    /// domains, if it was seen during training.
    pub fn training_domain(&self, label: i64) -> Option<usize> {
        self.domain_labels.iter().position(|&l| l == label)
    }

    /// Forward pass over every item, in dataset order.
    pub fn forward_dataset(&self, dataset: &Dataset) -> Result<Vec<ItemOutput>> {
        self.check_dataset(dataset)?;
        let labels = dataset.domain_labels();
        dataset
            .records()
            .iter()
            .map(|r| self.forward_item(&r.embedding, self.training_domain(labels[r.domain])))
            .collect()
    }

    /// Token per item plus collision statistics.
    pub fn tokenize_dataset(&self, dataset: &Dataset) -> Result<TokenTable> {
        let outputs = self.forward_dataset(dataset)?;
        let labels = dataset.domain_labels();
        let rows: Vec<TokenRow> = dataset
            .records()
            .iter()
            .zip(&outputs)
            .map(|(r, o)| TokenRow {
                domain: labels[r.domain],
                item_id: r.item_id.clone(),
                token: o.quantized.token().to_vec(),
            })
            .collect();
        let tokens: Vec<&Vec<usize>> = rows.iter().map(|r| &r.token).collect();
        let colliding_items = count_colliding(&tokens);
        Ok(TokenTable { rows, colliding_items })
    }

    /// Parameter tensors paired with their gradient buffers, in a fixed order.
    pub fn param_tensors<'a>(&'a mut self, grads: &'a mut ModelGrads) -> Vec<ParamTensor<'a>> {
        let mut out = Vec::new();
        autoencoder_tensors(&mut self.autoencoder, &mut grads.autoencoder, &mut out);
        let stack_tensors = |name: String, s: &'a mut CodebookStack, g: &'a mut StackGrads, out: &mut Vec<ParamTensor<'a>>| {
            for (lvl, (m, gm)) in s.levels.iter_mut().zip(g.levels.iter_mut()).enumerate() {
                out.push(ParamTensor {
                    name: format!("{name}.level{lvl}"),
                    value: m.as_mut_slice(),
                    grad: gm.as_mut_slice(),
                });
            }
        };
        match (&mut self.quantizer, &mut grads.quantizer) {
            (Quantizer::Moe(m), QuantizerGrads::Moe(g)) => {
                out.push(ParamTensor {
                    name: "router.weight".into(),
                    value: m.router.linear.weight.as_mut_slice(),
                    grad: g.router.weight.as_mut_slice(),
                });
                out.push(ParamTensor {
                    name: "router.bias".into(),
                    value: &mut m.router.linear.bias,
                    grad: &mut g.router.bias,
                });
                for (k, (s, sg)) in m.experts.iter_mut().zip(g.experts.iter_mut()).enumerate() {
                    stack_tensors(format!("expert{k}"), s, sg, &mut out);
                }
                stack_tensors("shared".into(), &mut m.shared, &mut g.shared, &mut out);
            }
            (Quantizer::Single { stack }, QuantizerGrads::Single(g)) => {
                stack_tensors("codebook".into(), stack, g, &mut out);
            }
            _ => unreachable!("gradient layouts always come from the same model"),
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            format_version: u32,
        }
        let probe: Probe = serde_json::from_str(text)?;
        if probe.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: probe.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn validate(&self) -> Result<()> {
        let latent = self.autoencoder.latent_dim();
        Autoencoder::from_parts(self.autoencoder.encoder.clone(), self.autoencoder.decoder.clone())?;
        let stacks: Vec<&CodebookStack> = self.stack_ids().into_iter().map(|id| self.stack(id)).collect();
        for s in stacks {
            CodebookStack::new(s.levels.clone())?;
            if s.dim() != latent {
                return Err(Error::shape("codebook dim", latent, s.dim()));
            }
            if s.usage.len() != s.num_levels() || s.usage.iter().any(|u| u.len() != s.codes_per_level()) {
                return Err(Error::InvalidArgument("usage counters do not match codebook shape".into()));
            }
        }
        if let Quantizer::Moe(m) = &self.quantizer {
            if m.router.linear.in_dim() != latent || m.router.num_experts() != m.num_experts() {
                return Err(Error::InvalidArgument("router shape does not match experts".into()));
            }
        }
        Ok(())
    }
}
