//! Batch construction: aligned optical/SAR pairs for contrastive
//! pretraining and identity-balanced PK batches for fine-tuning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataio::manifest::{Role, SplitManifest};
use crate::error::{Error, Result};
use crate::model::ModalityTag;
use crate::stream::named_rng;

/// Indices (into `manifest.items`) of co-registered optical/SAR
/// renderings: same object, sequence, and camera-agnostic sighting.
/// Sorted for stable iteration.
pub fn paired_pretrain_indices(manifest: &SplitManifest) -> Vec<(usize, usize)> {
    let mut by_sighting: BTreeMap<(i64, u32), (Option<usize>, Option<usize>)> = BTreeMap::new();
    for (idx, it) in manifest.with_role(Role::Train) {
        let slot = by_sighting
            .entry((it.object_id, it.sequence_id))
            .or_default();
        match it.modality {
            ModalityTag::Optical => slot.0 = Some(idx),
            ModalityTag::Sar => slot.1 = Some(idx),
        }
    }
    by_sighting
        .into_values()
        .filter_map(|pair| match pair {
            (Some(o), Some(s)) => Some((o, s)),
            _ => None,
        })
        .collect()
}

/// One epoch of shuffled pair batches; the ragged tail is dropped.
pub fn pair_batches(
    pairs: &[(usize, usize)],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<(usize, usize)>>> {
    if batch_size < 2 {
        return Err(Error::Invalid("pair batch size must be at least 2".into()));
    }
    if batch_size > pairs.len() {
        return Err(Error::Invalid(format!(
            "batch size {batch_size} exceeds {} available pairs",
            pairs.len()
        )));
    }
    let mut order: Vec<(usize, usize)> = pairs.to_vec();
    let mut rng = named_rng(seed, &format!("sampler/pairs/epoch{epoch}"));
    order.shuffle(&mut rng);
    Ok(order
        .chunks_exact(batch_size)
        .map(|chunk| chunk.to_vec())
        .collect())
}

/// One epoch of PK batches: each batch holds `p` identities with `k`
/// instances each (sampled with replacement when an identity has fewer
/// than `k` images). Returns item indices paired with dense class
/// labels from `SplitManifest::train_identities`.
pub fn pk_batches(
    manifest: &SplitManifest,
    p: usize,
    k: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<(usize, usize)>>> {
    if p < 2 || k < 1 {
        return Err(Error::Invalid(format!(
            "PK batches need p >= 2 and k >= 1, got p={p} k={k}"
        )));
    }
    let identities = manifest.train_identities();
    if identities.len() < p {
        return Err(Error::Invalid(format!(
            "PK batches need {p} identities, manifest has {}",
            identities.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); identities.len()];
    for (idx, it) in manifest.with_role(Role::Train) {
        let class = identities
            .binary_search(&it.object_id)
            .expect("train identity present in index");
        by_class[class].push(idx);
    }
    let mut rng = named_rng(seed, &format!("sampler/pk/epoch{epoch}"));
    let mut class_order: Vec<usize> = (0..identities.len()).collect();
    class_order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for chunk in class_order.chunks_exact(p) {
        let mut batch = Vec::with_capacity(p * k);
        for &class in chunk {
            let pool = &by_class[class];
            if pool.len() >= k {
                let mut picks = pool.clone();
                picks.shuffle(&mut rng);
                for &item in picks.iter().take(k) {
                    batch.push((item, class));
                }
            } else {
                for &item in pool {
                    batch.push((item, class));
                }
                for _ in pool.len()..k {
                    let item = pool[rng.gen_range(0..pool.len())];
                    batch.push((item, class));
                }
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}
