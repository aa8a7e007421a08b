//! Finite-difference verification of reverse-mode gradients.
//!
//! `grad_check` rebuilds the caller's graph under coordinate perturbations
//! and compares central differences against the analytic backward pass.
//! Checks run in `f64`; the comparison is
//! `|analytic - numeric| / (|numeric| + 1e-8)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Builds a scalar loss from leaves created out of the supplied parameters.
/// Must be deterministic: called many times with perturbed inputs.
pub trait LossBuilder {
    fn build(&mut self, graph: &mut Graph<f64>, params: &[NodeId]) -> Result<NodeId>;
}

impl<T> LossBuilder for T
where
    T: FnMut(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    fn build(&mut self, graph: &mut Graph<f64>, params: &[NodeId]) -> Result<NodeId> {
        self(graph, params)
    }
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// (tensor index, flat coordinate, analytic, numeric) at the maximum.
    pub worst: (usize, usize, f64, f64),
}

/// Analytic gradients of the loss with respect to every parameter tensor.
pub fn analytic_grads<B: LossBuilder>(
    build: &mut B,
    params: &[Tensor<f64>],
) -> Result<Vec<Vec<f64>>> {
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| graph.leaf(t.clone())).collect();
    let loss = build.build(&mut graph, &ids)?;
    graph.backward(loss)?;
    Ok(ids.iter().map(|&id| graph.grad(id).to_vec()).collect())
}

/// Loss value with parameter `t`, coordinate `c` shifted by `delta`.
pub fn loss_at<B: LossBuilder>(
    build: &mut B,
    params: &[Tensor<f64>],
    t: usize,
    c: usize,
    delta: f64,
) -> Result<f64> {
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut p = p.clone();
            if i == t {
                p.data_mut()[c] += delta;
            }
            graph.leaf(p)
        })
        .collect();
    let loss = build.build(&mut graph, &ids)?;
    let v = graph.scalar(loss);
    if !v.is_finite() {
        return Err(Error::Invalid(format!(
            "non-finite loss {v} during gradient check (tensor {t}, coord {c})"
        )));
    }
    Ok(v)
}

/// Central-difference partial derivative for one coordinate.
pub fn numeric_partial<B: LossBuilder>(
    build: &mut B,
    params: &[Tensor<f64>],
    t: usize,
    c: usize,
    step: f64,
) -> Result<f64> {
    let plus = loss_at(build, params, t, c, step)?;
    let minus = loss_at(build, params, t, c, -step)?;
    Ok((plus - minus) / (2.0 * step))
}

/// Compare analytic and numeric gradients over sampled coordinates.
///
/// Tensors with at most `max_coords_per_tensor` elements are checked
/// exhaustively; larger ones are subsampled with a seeded RNG so the check
/// stays fast and reproducible.
pub fn grad_check<B: LossBuilder>(
    mut build: B,
    params: &[Tensor<f64>],
    step: f64,
    max_coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheck> {
    let analytic = analytic_grads(&mut build, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: (0, 0, 0.0, 0.0),
    };
    for (t, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = if n <= max_coords_per_tensor {
            (0..n).collect()
        } else {
            let mut picked =
                rand::seq::index::sample(&mut rng, n, max_coords_per_tensor).into_vec();
            picked.sort_unstable();
            picked
        };
        for c in coords {
            let numeric = numeric_partial(&mut build, params, t, c, step)?;
            let a = analytic[t][c];
            let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (t, c, a, numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_essentially_exact() {
        let w = Tensor::from_vec(vec![2, 2], vec![0.3, -0.8, 1.2, 0.4]).with_grad();
        let x = Tensor::from_vec(vec![1, 2], vec![0.9, -0.5]);
        let check = grad_check(
            |g: &mut Graph<f64>, ids: &[NodeId]| {
                let xv = g.leaf(x.clone());
                let y = g.matmul(xv, ids[0])?;
                Ok(g.sum_all(y))
            },
            &[w],
            1e-5,
            64,
            1,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-9, "rel err {}", check.max_rel_err);
        assert_eq!(check.coords_checked, 4);
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let w = Tensor::from_vec(
            vec![3, 4],
            vec![
                0.31, -0.22, 0.17, 0.52, -0.41, 0.28, 0.66, -0.13, 0.09, -0.57, 0.35, 0.21,
            ],
        )
        .with_grad();
        let x = Tensor::from_vec(vec![2, 3], vec![0.5, -1.1, 0.7, 1.3, 0.2, -0.6]);
        let check = grad_check(
            |g: &mut Graph<f64>, ids: &[NodeId]| {
                let xv = g.leaf(x.clone());
                let logits = g.matmul(xv, ids[0])?;
                g.cross_entropy_rows(logits, &[3, 1])
            },
            &[w],
            1e-5,
            64,
            2,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
    }

    #[test]
    fn subsampling_is_deterministic() {
        let w = Tensor::from_vec(vec![10, 10], vec![0.01; 100]).with_grad();
        let run = || {
            grad_check(
                |g: &mut Graph<f64>, ids: &[NodeId]| {
                    let sq = g.mul(ids[0], ids[0])?;
                    Ok(g.sum_all(sq))
                },
                std::slice::from_ref(&w),
                1e-5,
                7,
                42,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.coords_checked, 7);
        assert_eq!(a.worst.1, b.worst.1);
    }
}
