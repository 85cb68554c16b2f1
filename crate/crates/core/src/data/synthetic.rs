use serde::{Deserialize, Serialize};

use super::{Dataset, ItemRecord};
use crate::error::{Error, Result};
use crate::numeric::{squared_norm, Rng};

/// Sub-cluster centres sit this many `intra_std` (in norm) away from the
/// domain mean; items add `intra_std`-norm isotropic noise on top.
const CLUSTER_SPREAD: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub domains: usize,
    pub items_per_domain: usize,
    pub dim: usize,
    /// Norm of every domain mean before normalisation.
    pub separation: f64,
    pub intra_std: f64,
    pub clusters: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            domains: 4,
            items_per_domain: 500,
            dim: 128,
            separation: 4.0,
            intra_std: 0.3,
            clusters: 8,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.domains == 0 {
            return Err(Error::InvalidArgument("need at least one domain".into()));
        }
        if self.dim < 2 {
            return Err(Error::InvalidArgument(format!("dim must be >= 2, got {}", self.dim)));
        }
        if self.items_per_domain == 0 {
            return Err(Error::InvalidArgument("items_per_domain must be >= 1".into()));
        }
        if self.clusters == 0 {
            return Err(Error::InvalidArgument("clusters must be >= 1".into()));
        }
        if !(self.separation >= 0.0 && self.intra_std >= 0.0)
            || !self.separation.is_finite()
            || !self.intra_std.is_finite()
        {
            return Err(Error::InvalidArgument(
                "separation and intra_std must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Embeddings for one domain.
///
/// The domain mean and sub-cluster centres depend only on `(config.seed,
/// domain)`; item draws depend on `(item_seed, domain)`. Passing a fresh
/// `item_seed` therefore yields new items from an existing domain's
/// distribution.
pub fn gen_domain(config: &SyntheticConfig, domain: usize, item_seed: u64) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let d = config.dim;
    let coord_scale = 1.0 / (d as f64).sqrt();

    let mut structure = Rng::with_stream(config.seed, 2 * domain as u64);
    let mut mean = structure.normal_vec(d, 1.0);
    let norm = squared_norm(&mean).sqrt();
    for v in &mut mean {
        *v *= config.separation / norm;
    }
    let centres: Vec<Vec<f64>> = (0..config.clusters)
        .map(|_| {
            let offset = structure.normal_vec(d, CLUSTER_SPREAD * config.intra_std * coord_scale);
            mean.iter().zip(offset).map(|(m, o)| m + o).collect()
        })
        .collect();

    let mut items = Rng::with_stream(item_seed, 2 * domain as u64 + 1);
    Ok((0..config.items_per_domain)
        .map(|_| {
            let centre = &centres[items.index(config.clusters)];
            let mut x: Vec<f64> = centre
                .iter()
                .map(|c| c + config.intra_std * coord_scale * items.normal())
                .collect();
            let n = squared_norm(&x).sqrt();
            if n > 0.0 {
                x.iter_mut().for_each(|v| *v /= n);
            }
            x
        })
        .collect())
}

/// Multi-domain Gaussian-mixture embeddings, L2-normalised.
pub fn gen_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let mut records = Vec::with_capacity(config.domains * config.items_per_domain);
    for k in 0..config.domains {
        for (i, embedding) in gen_domain(config, k, config.seed)?.into_iter().enumerate() {
            records.push(ItemRecord {
                domain: k,
                item_id: format!("d{k}-{i:05}"),
                embedding,
            });
        }
    }
    Dataset::new(records, (0..config.domains as i64).collect())
}
