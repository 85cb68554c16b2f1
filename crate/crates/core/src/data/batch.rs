use super::{Dataset, ItemRecord};
use crate::error::{Error, Result};
use crate::numeric::Rng;

/// A domain-stratified mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub records: Vec<&'a ItemRecord>,
    /// Positions within `records` for each domain; partitions the batch.
    pub per_domain: Vec<Vec<usize>>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Splits `extra` slots across domains proportionally to `weights`, never
/// exceeding `capacity`. Largest-remainder rounding, ties to lower index.
fn proportional_split(mut extra: usize, weights: &[usize], capacity: &[usize]) -> Vec<usize> {
    let mut alloc = vec![0usize; weights.len()];
    while extra > 0 {
        let open: Vec<usize> = (0..weights.len()).filter(|&k| alloc[k] < capacity[k]).collect();
        if open.is_empty() {
            break;
        }
        let total: usize = open.iter().map(|&k| weights[k]).sum();
        let mut given = 0;
        let mut remainders = Vec::with_capacity(open.len());
        for &k in &open {
            let exact = extra as f64 * weights[k] as f64 / total as f64;
            let share = (exact.floor() as usize).min(capacity[k] - alloc[k]);
            alloc[k] += share;
            given += share;
            remainders.push((exact - exact.floor(), k));
        }
        extra -= given;
        if given == 0 || extra > 0 {
            remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (_, k) in remainders {
                if extra == 0 {
                    break;
                }
                if alloc[k] < capacity[k] {
                    alloc[k] += 1;
                    extra -= 1;
                }
            }
        }
    }
    alloc
}

/// Draws a batch holding at least `min_per_domain` items from every domain
/// (or the whole domain, if smaller); remaining slots are filled in
/// proportion to domain sizes. Sampling is without replacement within a batch.
pub fn sample_batch<'a>(
    dataset: &'a Dataset,
    batch_size: usize,
    min_per_domain: usize,
    rng: &mut Rng,
) -> Result<Batch<'a>> {
    let k = dataset.num_domains();
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if batch_size < k * min_per_domain {
        return Err(Error::InvalidArgument(format!(
            "batch_size {batch_size} cannot hold {min_per_domain} items from each of {k} domains"
        )));
    }
    let sizes = dataset.domain_sizes();
    let target = batch_size.min(dataset.len());
    let base: Vec<usize> = sizes.iter().map(|&n| n.min(min_per_domain)).collect();
    let capacity: Vec<usize> = sizes.iter().zip(&base).map(|(n, b)| n - b).collect();
    let extra = proportional_split(target - base.iter().sum::<usize>(), &sizes, &capacity);

    let mut records = Vec::with_capacity(target);
    let mut per_domain = Vec::with_capacity(k);
    for d in 0..k {
        let count = base[d] + extra[d];
        let pool = dataset.domain_indices(d);
        let start = records.len();
        for j in rng.sample_indices(pool.len(), count) {
            records.push(&dataset.records()[pool[j]]);
        }
        per_domain.push((start..records.len()).collect());
    }
    Ok(Batch { records, per_domain })
}
