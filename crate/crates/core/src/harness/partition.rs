//! Splitting a dataset across clients.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Dataset, Sample};

fn gather(samples: &[Sample], idx: impl IntoIterator<Item = usize>, classes: usize) -> Result<Dataset> {
    Dataset::new(idx.into_iter().map(|i| samples[i].clone()).collect(), classes)
}

/// Random permutation cut into `n` parts whose sizes differ by at most one;
/// the first `len % n` parts get the extra sample.
pub fn partition_iid<R: Rng + ?Sized>(data: &Dataset, n: usize, rng: &mut R) -> Result<Vec<Dataset>> {
    if n == 0 || n > data.len() {
        return Err(Error::input(format!(
            "cannot split {} samples into {n} non-empty parts",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let (base, extra) = (data.len() / n, data.len() % n);
    let mut parts = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let size = base + usize::from(i < extra);
        parts.push(gather(data.samples(), order[start..start + size].iter().copied(), data.num_classes())?);
        start += size;
    }
    Ok(parts)
}

/// Label-skewed split: sort by label, cut into `2n` contiguous shards, and
/// give every client two distinct shards drawn without replacement.
pub fn partition_noniid_shards<R: Rng + ?Sized>(data: &Dataset, n: usize, rng: &mut R) -> Result<Vec<Dataset>> {
    let shards = 2 * n;
    if n == 0 || data.len() < shards {
        return Err(Error::input(format!(
            "{} samples cannot form {shards} shards",
            data.len()
        )));
    }
    let mut by_label: Vec<usize> = (0..data.len()).collect();
    by_label.sort_by_key(|&i| data.samples()[i].label);
    let bounds: Vec<usize> = (0..=shards).map(|s| s * data.len() / shards).collect();
    let mut shard_order: Vec<usize> = (0..shards).collect();
    shard_order.shuffle(rng);
    shard_order
        .chunks(2)
        .map(|pair| {
            let idx = pair
                .iter()
                .flat_map(|&s| by_label[bounds[s]..bounds[s + 1]].iter().copied())
                .collect::<Vec<_>>();
            gather(data.samples(), idx, data.num_classes())
        })
        .collect()
}
