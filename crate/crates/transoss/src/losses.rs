//! Training objectives: symmetric contrastive, identity cross-entropy,
//! and triplet with batch-hard mining.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::forward::{linear, LinearNodes};

/// Stabilizer inside distance square roots; keeps the gradient finite for
/// coincident points and cancels out of every distance comparison.
pub const DIST_EPS: f64 = 1e-12;

/// Symmetric contrastive loss over aligned modality pairs.
///
/// Rows are L2-normalized, logits are `(O·Sᵀ)·√τ` with `τ = exp(log_tau)`,
/// and the loss averages the cross-entropy of matching each optical row to
/// its SAR partner with the transposed direction. Gradients flow into both
/// feature sets and the temperature.
pub fn symmetric_contrastive_loss(
    g: &mut Graph<f64>,
    o_raw: NodeId,
    s_raw: NodeId,
    log_tau: NodeId,
) -> Result<NodeId> {
    let b = g.value(o_raw).shape()[0];
    if g.value(s_raw).shape() != g.value(o_raw).shape() {
        return Err(Error::Dimension {
            op: "symmetric_contrastive_loss",
            lhs: g.value(o_raw).shape().to_vec(),
            rhs: g.value(s_raw).shape().to_vec(),
        });
    }
    if b < 2 {
        return Err(Error::Invalid(
            "contrastive batch needs at least 2 pairs (no negatives otherwise)".into(),
        ));
    }
    let o = g.l2_normalize_rows(o_raw)?;
    let s = g.l2_normalize_rows(s_raw)?;
    let st = g.transpose(s)?;
    let sims = g.matmul(o, st)?;
    let half_log_tau = g.scale_const(log_tau, 0.5);
    let sqrt_tau = g.exp(half_log_tau);
    let logits = g.mul_scalar(sims, sqrt_tau)?;
    let diag: Vec<usize> = (0..b).collect();
    let ce_o2s = g.cross_entropy_rows(logits, &diag)?;
    let logits_t = g.transpose(logits)?;
    let ce_s2o = g.cross_entropy_rows(logits_t, &diag)?;
    let total = g.add(ce_o2s, ce_s2o)?;
    Ok(g.scale_const(total, 0.5))
}

/// Identity classification loss: cross-entropy of the classifier head on
/// raw (unnormalized) encoder features.
pub fn id_loss(
    g: &mut Graph<f64>,
    features: NodeId,
    labels: &[usize],
    classifier: &LinearNodes,
) -> Result<NodeId> {
    let logits = linear(g, features, classifier)?;
    g.cross_entropy_rows(logits, labels)
}

fn euclidean_node(g: &mut Graph<f64>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let s = g.sum_all(sq);
    Ok(g.sqrt_eps(s, DIST_EPS))
}

/// Hinge for one explicit (anchor, positive, negative) triple of `[1, D]`
/// rows: `max(d(a,p) - d(a,n) + margin, 0)`.
pub fn triplet_loss_single(
    g: &mut Graph<f64>,
    anchor: NodeId,
    positive: NodeId,
    negative: NodeId,
    margin: f64,
) -> Result<NodeId> {
    let d_ap = euclidean_node(g, anchor, positive)?;
    let d_an = euclidean_node(g, anchor, negative)?;
    let diff = g.sub(d_ap, d_an)?;
    let shifted = g.add_const(diff, margin);
    Ok(g.relu(shifted))
}

/// Batch-hard triplet loss over a `[B, D]` feature matrix.
///
/// Mining happens on forward values: per anchor, the same-label row at
/// maximum distance and the different-label row at minimum distance
/// (first index wins ties). The graph is built only for selected pairs,
/// then averaged over anchors that have both a positive and a negative.
pub fn batch_hard_triplet_loss(
    g: &mut Graph<f64>,
    features: NodeId,
    labels: &[usize],
    margin: f64,
) -> Result<NodeId> {
    let shape = g.value(features).shape().to_vec();
    let b = shape[0];
    let d = shape[1];
    if labels.len() != b {
        return Err(Error::Invalid(format!(
            "{} labels for {b} feature rows",
            labels.len()
        )));
    }
    // squared distances for mining; sqrt is monotone so ordering matches
    let fv = g.value(features).data().to_vec();
    let sqdist = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for k in 0..d {
            let diff = fv[i * d + k] - fv[j * d + k];
            s += diff * diff;
        }
        s
    };
    let mut hinges = Vec::new();
    for i in 0..b {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == i {
                continue;
            }
            let dist = sqdist(i, j);
            if labels[j] == labels[i] {
                if hardest_pos.map_or(true, |(_, best)| dist > best) {
                    hardest_pos = Some((j, dist));
                }
            } else if hardest_neg.map_or(true, |(_, best)| dist < best) {
                hardest_neg = Some((j, dist));
            }
        }
        let (Some((p, _)), Some((n, _))) = (hardest_pos, hardest_neg) else {
            continue;
        };
        let fa = g.slice_rows(features, i, 1)?;
        let fp = g.slice_rows(features, p, 1)?;
        let fn_ = g.slice_rows(features, n, 1)?;
        hinges.push(triplet_loss_single(g, fa, fp, fn_, margin)?);
    }
    if hinges.is_empty() {
        return Err(Error::Invalid(
            "no valid triplets: batch needs two identities with a repeated one".into(),
        ));
    }
    let count = hinges.len();
    let mut acc = hinges[0];
    for &h in &hinges[1..] {
        acc = g.add(acc, h)?;
    }
    Ok(g.scale_const(acc, 1.0 / count as f64))
}

/// Fine-tune objective: identity loss plus batch-hard triplet loss with
/// unit weights.
pub fn finetune_loss(
    g: &mut Graph<f64>,
    features: NodeId,
    labels: &[usize],
    classifier: &LinearNodes,
    margin: f64,
) -> Result<NodeId> {
    let id = id_loss(g, features, labels, classifier)?;
    let tri = batch_hard_triplet_loss(g, features, labels, margin)?;
    g.add(id, tri)
}


#[cfg(test)]
mod properties {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn loss_of(o: &[f64], s: &[f64], b: usize, d: usize, lt: f64) -> f64 {
        let mut g = Graph::new();
        let on = g.leaf(Tensor::from_vec(vec![b, d], o.to_vec()));
        let sn = g.leaf(Tensor::from_vec(vec![b, d], s.to_vec()));
        let ltn = g.leaf(Tensor::from_vec(vec![1], vec![lt]));
        let l = symmetric_contrastive_loss(&mut g, on, sn, ltn).unwrap();
        g.scalar(l)
    }

    proptest! {
        #[test]
        fn contrastive_nonnegative_and_symmetric(
            b in 2usize..5,
            d in 2usize..5,
            seed in 0u64..1000,
            lt in -1.0f64..3.0,
        ) {
            use rand::Rng;
            let mut rng = crate::stream::named_rng(seed, "proptest/contrastive");
            let gen = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.gen_range(-2.0..2.0) + 0.1).collect()
            };
            let o = gen(&mut rng, b * d);
            let s = gen(&mut rng, b * d);
            let fwd = loss_of(&o, &s, b, d, lt);
            let rev = loss_of(&s, &o, b, d, lt);
            prop_assert!(fwd >= 0.0);
            prop_assert_eq!(fwd, rev);
        }

        #[test]
        fn triplet_nonnegative(
            seed in 0u64..1000,
            margin in 0.0f64..1.0,
        ) {
            use rand::Rng;
            let mut rng = crate::stream::named_rng(seed, "proptest/triplet");
            let mut g = Graph::new();
            let data: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = g.leaf(Tensor::from_vec(vec![4, 2], data));
            let l = batch_hard_triplet_loss(&mut g, f, &[0, 0, 1, 1], margin).unwrap();
            prop_assert!(g.scalar(l) >= 0.0);
        }
    }
}
