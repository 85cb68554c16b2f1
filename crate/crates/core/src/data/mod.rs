//! Domain-tagged embedding datasets: synthetic generation, file formats and
//! stratified mini-batches.

mod batch;
mod io;
mod synthetic;

use std::collections::HashSet;

pub use batch::{sample_batch, Batch};
pub use io::{load_binary, load_jsonl, parse_jsonl, save_binary, save_jsonl, write_jsonl};
pub use synthetic::{gen_domain, gen_synthetic, SyntheticConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ItemRecord {
    /// Dense domain index in `[0, K)`.
    pub domain: usize,
    pub item_id: String,
    pub embedding: Vec<f64>,
}

/// Items from `K` domains sharing one embedding dimension.
///
/// Records keep their input order; `by_domain` lists record positions per
/// dense domain index and `domain_labels` maps dense indices back to the
/// labels found in the source.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    records: Vec<ItemRecord>,
    by_domain: Vec<Vec<usize>>,
    domain_labels: Vec<i64>,
}

impl Dataset {
    /// Builds a dataset from records carrying *source* labels in `domain`
    /// (passed separately as `labels`), re-indexing domains densely in
    /// ascending label order.
    pub fn from_labeled(items: Vec<(i64, String, Vec<f64>)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("dataset has no records".into()));
        }
        let mut labels: Vec<i64> = items.iter().map(|(l, _, _)| *l).collect();
        labels.sort_unstable();
        labels.dedup();
        let records = items
            .into_iter()
            .map(|(label, item_id, embedding)| ItemRecord {
                domain: labels.binary_search(&label).expect("label collected above"),
                item_id,
                embedding,
            })
            .collect();
        Self::new(records, labels)
    }

    /// `records[i].domain` must already be a dense index into `domain_labels`.
    pub fn new(records: Vec<ItemRecord>, domain_labels: Vec<i64>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset has no records".into()))?;
        let dim = first.embedding.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension is zero".into()));
        }
        let k = domain_labels.len();
        let mut by_domain = vec![Vec::new(); k];
        let mut seen: Vec<HashSet<&str>> = vec![HashSet::new(); k];
        for (i, r) in records.iter().enumerate() {
            if r.embedding.len() != dim {
                return Err(Error::Format {
                    line: i + 1,
                    message: format!("embedding has length {}, expected {dim}", r.embedding.len()),
                });
            }
            if r.domain >= k {
                return Err(Error::InvalidArgument(format!(
                    "record {} has domain {} but only {k} domains are labelled",
                    i + 1,
                    r.domain
                )));
            }
            if !seen[r.domain].insert(r.item_id.as_str()) {
                return Err(Error::Format {
                    line: i + 1,
                    message: format!("duplicate item id `{}` in domain {}", r.item_id, domain_labels[r.domain]),
                });
            }
            by_domain[r.domain].push(i);
        }
        if let Some(empty) = by_domain.iter().position(Vec::is_empty) {
            return Err(Error::InvalidArgument(format!(
                "domain {} has no records",
                domain_labels[empty]
            )));
        }
        Ok(Self {
            dim,
            records,
            by_domain,
            domain_labels,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_domains(&self) -> usize {
        self.by_domain.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ItemRecord] {
        &self.records
    }

    pub fn domain_indices(&self, domain: usize) -> &[usize] {
        &self.by_domain[domain]
    }

    pub fn domain_sizes(&self) -> Vec<usize> {
        self.by_domain.iter().map(Vec::len).collect()
    }

    pub fn domain_labels(&self) -> &[i64] {
        &self.domain_labels
    }

    pub fn domain_records(&self, domain: usize) -> impl Iterator<Item = &ItemRecord> {
        self.by_domain[domain].iter().map(move |&i| &self.records[i])
    }
}
