//! Self-verification suite behind `transoss verify`.
//!
//! Every check reports its measured value next to the tolerance it must
//! meet, so a passing run doubles as a record of how much headroom each
//! invariant has. The `corrupt` fixture implants a known gradient bug
//! into one named op; a healthy harness must then fail.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::{evaluate_set, Descriptor, EvalMode, EvalSet};
use crate::gradcheck::grad_check;
use crate::graph::{GeluForm, Graph, NodeId};
use crate::losses::{finetune_loss, symmetric_contrastive_loss, triplet_loss_single};
use crate::model::{
    batch_feature_node, extract_feature, from_bytes, to_bytes, ForwardInput, LinearNodes,
    ModalityTag, ModelConfig, ParamNodes, Params,
};
use crate::stream::named_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub measured: f64,
    pub tol: f64,
    pub passed: bool,
    pub note: String,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub corruption: Option<String>,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(op) = &self.corruption {
            writeln!(out, "# corruption fixture: gradients of op '{op}' scaled by 3")
                .expect("string write");
        }
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            write!(out, "{status} {} measured={:e} tol={:e}", c.name, c.measured, c.tol)
                .expect("string write");
            if !c.note.is_empty() {
                write!(out, " ({})", c.note).expect("string write");
            }
            out.push('\n');
        }
        let passed = self.checks.iter().filter(|c| c.passed).count();
        writeln!(out, "{passed}/{} checks passed", self.checks.len()).expect("string write");
        out
    }
}

fn check(name: &'static str, measured: f64, tol: f64, note: String) -> Check {
    Check {
        name,
        measured,
        tol,
        passed: measured <= tol,
        note,
    }
}

/// Exact checks: any nonzero deviation fails.
fn check_exact(name: &'static str, measured: f64, note: String) -> Check {
    Check {
        name,
        measured,
        tol: 0.0,
        passed: measured == 0.0,
        note,
    }
}

const GRAD_TOL_OPS: f64 = 1e-6;
const GRAD_TOL_MODEL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

pub fn run_verification(corrupt: Option<&str>) -> Result<VerifyReport> {
    if let Some(op) = corrupt {
        if !Graph::<f64>::op_labels().contains(&op) {
            return Err(Error::Config(format!(
                "unknown op '{op}' for corruption; known: {}",
                Graph::<f64>::op_labels().join(", ")
            )));
        }
    }
    let mut checks = Vec::new();
    checks.push(grad_ops_dense(corrupt)?);
    checks.push(grad_ops_structural(corrupt)?);
    checks.push(grad_loss_contrastive(corrupt)?);
    checks.push(grad_loss_finetune(corrupt)?);
    checks.push(grad_full_model(corrupt)?);
    checks.push(loss_uniform_bound()?);
    checks.push(loss_swap_symmetry()?);
    checks.push(loss_triplet_closed_form()?);
    checks.push(metric_against_brute_force()?);
    checks.push(metric_ap_hand_case()?);
    checks.push(arch_dual_head_isolation()?);
    checks.push(arch_lambda_zero_equivalence()?);
    checks.push(arch_modality_row_isolation()?);
    checks.push(arch_checkpoint_round_trip()?);
    checks.push(determinism_feature()?);
    Ok(VerifyReport {
        corruption: corrupt.map(str::to_string),
        checks,
    })
}

fn apply_corruption(g: &mut Graph<f64>, corrupt: Option<&str>) {
    if let Some(op) = corrupt {
        g.corrupt_op_gradient(op, 3.0);
    }
}

/// Dense arithmetic ops: matmul, transpose, add, sub, mul, broadcasts,
/// scalar forms, exp, relu, gelu, sqrt_eps, sum_all.
fn grad_ops_dense(corrupt: Option<&str>) -> Result<Check> {
    let w = Tensor::from_vec(
        vec![3, 3],
        vec![0.31, -0.22, 0.47, 0.18, 0.52, -0.35, -0.11, 0.26, 0.4],
    )
    .with_grad();
    let row = Tensor::from_vec(vec![1, 3], vec![0.2, -0.1, 0.3]).with_grad();
    let s = Tensor::from_vec(vec![1], vec![0.7]).with_grad();
    let x = Tensor::from_vec(vec![2, 3], vec![0.9, 0.4, -0.6, 1.2, -0.8, 0.5]);
    let corrupt = corrupt.map(str::to_string);
    let report = grad_check(
        move |g: &mut Graph<f64>, ids: &[NodeId]| {
            apply_corruption(g, corrupt.as_deref());
            let xv = g.leaf(x.clone());
            let xt = g.transpose(xv)?;
            let xtt = g.transpose(xt)?;
            let y = g.matmul(xtt, ids[0])?;
            let y = g.add_row_broadcast(y, ids[1])?;
            let a = g.gelu(y, GeluForm::ExactErf);
            let b = g.relu(y);
            let c = g.add(a, b)?;
            let d = g.mul(c, c)?;
            let e = g.sub(d, c)?;
            let f = g.scale_const(e, 0.5);
            let f = g.add_const(f, 1.3);
            let f = g.mul_scalar(f, ids[2])?;
            let f = g.exp(f);
            let f = g.sqrt_eps(f, 1e-12);
            Ok(g.sum_all(f))
        },
        &[w, row, s],
        FD_STEP,
        64,
        11,
    )?;
    Ok(check(
        "grad/ops-dense",
        report.max_rel_err,
        GRAD_TOL_OPS,
        format!("{} coords", report.coords_checked),
    ))
}

/// Structural and normalization ops: concat/slice both axes, softmax,
/// layer norm, cross entropy, row normalization.
fn grad_ops_structural(corrupt: Option<&str>) -> Result<Check> {
    let w = Tensor::from_vec(
        vec![4, 4],
        vec![
            0.21, -0.33, 0.45, 0.12, 0.08, 0.56, -0.24, 0.31, -0.172, 0.29, 0.44, -0.08, 0.35,
            -0.41, 0.19, 0.27,
        ],
    )
    .with_grad();
    let gamma = Tensor::from_vec(vec![1, 4], vec![1.1, 0.9, 1.05, 0.95]).with_grad();
    let beta = Tensor::from_vec(vec![1, 4], vec![0.02, -0.03, 0.01, 0.04]).with_grad();
    let x = Tensor::from_vec(vec![2, 4], vec![0.6, -0.2, 0.9, 0.3, -0.5, 0.8, 0.1, -0.7]);
    let corrupt = corrupt.map(str::to_string);
    let report = grad_check(
        move |g: &mut Graph<f64>, ids: &[NodeId]| {
            apply_corruption(g, corrupt.as_deref());
            let xv = g.leaf(x.clone());
            let h = g.matmul(xv, ids[0])?;
            let h = g.layer_norm(h, ids[1], ids[2], 1e-6)?;
            let top = g.slice_rows(h, 0, 1)?;
            let bottom = g.slice_rows(h, 1, 1)?;
            let h = g.concat_rows(&[bottom, top])?;
            let left = g.slice_cols(h, 0, 2)?;
            let right = g.slice_cols(h, 2, 2)?;
            let h = g.concat_cols(&[right, left])?;
            let sm = g.softmax_rows(h)?;
            let nrm = g.l2_normalize_rows(sm)?;
            let logits = g.matmul(nrm, ids[0])?;
            g.cross_entropy_rows(logits, &[2, 1])
        },
        &[w, gamma, beta],
        FD_STEP,
        64,
        12,
    )?;
    Ok(check(
        "grad/ops-structural",
        report.max_rel_err,
        GRAD_TOL_OPS,
        format!("{} coords", report.coords_checked),
    ))
}

fn grad_loss_contrastive(corrupt: Option<&str>) -> Result<Check> {
    let o = Tensor::from_vec(
        vec![3, 4],
        vec![0.9, 0.2, -0.4, 0.6, -0.3, 0.8, 0.5, -0.1, 0.4, -0.7, 0.2, 0.9],
    )
    .with_grad();
    let s = Tensor::from_vec(
        vec![3, 4],
        vec![0.7, 0.1, -0.5, 0.8, -0.2, 0.9, 0.4, -0.3, 0.3, -0.6, 0.4, 0.7],
    )
    .with_grad();
    let tau = Tensor::from_vec(vec![1], vec![1.2]).with_grad();
    let corrupt = corrupt.map(str::to_string);
    let report = grad_check(
        move |g: &mut Graph<f64>, ids: &[NodeId]| {
            apply_corruption(g, corrupt.as_deref());
            symmetric_contrastive_loss(g, ids[0], ids[1], ids[2])
        },
        &[o, s, tau],
        FD_STEP,
        64,
        13,
    )?;
    Ok(check(
        "grad/loss-contrastive",
        report.max_rel_err,
        GRAD_TOL_OPS,
        format!("{} coords", report.coords_checked),
    ))
}

/// Identity + batch-hard triplet loss on raw feature leaves. Feature
/// values keep every pairwise distance away from mining ties and every
/// hinge away from its kink, so the finite difference is clean.
fn grad_loss_finetune(corrupt: Option<&str>) -> Result<Check> {
    let feats = Tensor::from_vec(
        vec![4, 3],
        vec![
            0.10, 0.20, 0.30, 0.45, 0.05, 0.25, 1.10, 0.90, 1.30, 1.45, 1.20, 0.95,
        ],
    )
    .with_grad();
    let w = Tensor::from_vec(vec![3, 2], vec![0.4, -0.3, 0.2, 0.5, -0.1, 0.3]).with_grad();
    let b = Tensor::from_vec(vec![1, 2], vec![0.05, -0.02]).with_grad();
    let labels = vec![0usize, 0, 1, 1];
    let corrupt = corrupt.map(str::to_string);
    let report = grad_check(
        move |g: &mut Graph<f64>, ids: &[NodeId]| {
            apply_corruption(g, corrupt.as_deref());
            let head = LinearNodes { w: ids[1], b: ids[2] };
            finetune_loss(g, ids[0], &labels, &head, 2.0)
        },
        &[feats, w, b],
        FD_STEP,
        64,
        14,
    )?;
    Ok(check(
        "grad/loss-finetune",
        report.max_rel_err,
        GRAD_TOL_OPS,
        format!("{} coords", report.coords_checked),
    ))
}

fn probe_cfg() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        patch_size: 4,
        input_h: 8,
        input_w: 8,
        lambda_mie: 1.0,
        use_dual_tokenizer: true,
        use_modality_embed: true,
        use_size_embed: true,
        num_classes: 2,
        gelu_form: GeluForm::ExactErf,
        dropout_rate: 0.0,
    }
}

fn probe_image(channels: usize, h: usize, w: usize, name: &str) -> Tensor<f64> {
    let mut rng = named_rng(0, name);
    let data: Vec<f64> = (0..channels * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::from_vec(vec![channels, h, w], data)
}

struct ModelProbe {
    cfg: ModelConfig,
    images: Vec<Tensor<f64>>,
    modalities: Vec<ModalityTag>,
    sizes: Vec<[f64; 3]>,
    labels: Vec<usize>,
    corrupt: Option<String>,
}

impl ModelProbe {
    fn new(corrupt: Option<&str>) -> Self {
        let cfg = probe_cfg();
        let (h, w) = (cfg.input_h, cfg.input_w);
        ModelProbe {
            cfg,
            images: vec![
                probe_image(3, h, w, "verify/img/opt0"),
                probe_image(1, h, w, "verify/img/sar0"),
                probe_image(3, h, w, "verify/img/opt1"),
                probe_image(1, h, w, "verify/img/sar1"),
            ],
            modalities: vec![
                ModalityTag::Optical,
                ModalityTag::Sar,
                ModalityTag::Optical,
                ModalityTag::Sar,
            ],
            sizes: vec![
                [0.3, -0.2, 1.8],
                [0.3, -0.2, 1.8],
                [-0.9, 0.6, 2.4],
                [-0.9, 0.6, 2.4],
            ],
            labels: vec![0, 0, 1, 1],
            corrupt: corrupt.map(str::to_string),
        }
    }

    /// Composite loss covering every parameter tensor: contrastive over
    /// the two aligned pairs plus identity + triplet over all four items.
    fn loss(&self, params: &Params, want_grads: bool) -> Result<(f64, Option<Params>)> {
        let mut g = Graph::new();
        apply_corruption(&mut g, self.corrupt.as_deref());
        let pn = ParamNodes::bind(&mut g, params);
        let inputs: Vec<ForwardInput> = self
            .images
            .iter()
            .enumerate()
            .map(|(i, image)| ForwardInput {
                image,
                modality: self.modalities[i],
                size: Some(self.sizes[i]),
            })
            .collect();
        let feats = batch_feature_node(&mut g, &pn, &inputs, &self.cfg, None)?;
        let o0 = g.slice_rows(feats, 0, 1)?;
        let o1 = g.slice_rows(feats, 2, 1)?;
        let o = g.concat_rows(&[o0, o1])?;
        let s0 = g.slice_rows(feats, 1, 1)?;
        let s1 = g.slice_rows(feats, 3, 1)?;
        let s = g.concat_rows(&[s0, s1])?;
        let contrastive = symmetric_contrastive_loss(&mut g, o, s, pn.log_tau)?;
        let head = pn.classifier.as_ref().expect("probe config has a head");
        let supervised = finetune_loss(&mut g, feats, &self.labels, head, 0.5)?;
        let total = g.add(contrastive, supervised)?;
        let value = g.scalar(total);
        if !want_grads {
            return Ok((value, None));
        }
        g.backward(total)?;
        let mut holder = params.clone();
        pn.write_grads(&g, &mut holder);
        Ok((value, Some(holder)))
    }
}

fn perturbed(params: &Params, tensor_idx: usize, coord: usize, delta: f64) -> Params {
    let mut p = params.clone();
    let mut i = 0usize;
    p.for_each_tensor_mut(&mut |t| {
        if i == tensor_idx {
            t.data_mut()[coord] += delta;
        }
        i += 1;
    });
    p
}

/// End-to-end finite differences through the full forward pass and all
/// three losses, sampling a few coordinates of every parameter tensor.
fn grad_full_model(corrupt: Option<&str>) -> Result<Check> {
    let probe = ModelProbe::new(corrupt);
    let params = Params::init(&probe.cfg, 21);
    let (_, holder) = probe.loss(&params, true)?;
    let holder = holder.expect("gradients requested");
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    holder.for_each_tensor(&mut |t| {
        analytic.push(t.grad().map(<[f64]>::to_vec).unwrap_or_default());
    });
    let mut numels = Vec::new();
    params.for_each_tensor(&mut |t| numels.push(t.numel()));

    let mut max_rel = 0.0f64;
    let mut coords_checked = 0usize;
    for (t_idx, &n) in numels.iter().enumerate() {
        let mut coords = vec![0, n / 2, n - 1];
        coords.dedup();
        for c in coords {
            let plus = probe.loss(&perturbed(&params, t_idx, c, FD_STEP), false)?.0;
            let minus = probe.loss(&perturbed(&params, t_idx, c, -FD_STEP), false)?.0;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[t_idx].get(c).copied().unwrap_or(0.0);
            let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
            max_rel = max_rel.max(rel);
            coords_checked += 1;
        }
    }
    Ok(check(
        "grad/full-model",
        max_rel,
        GRAD_TOL_MODEL,
        format!("{coords_checked} coords across {} tensors", numels.len()),
    ))
}

fn loss_uniform_bound() -> Result<Check> {
    let b = 4usize;
    let mut g = Graph::new();
    let row_o = vec![0.3, -0.5, 0.8, 0.1];
    let row_s = vec![0.6, 0.2, -0.4, 0.7];
    let o = g.leaf_from(vec![b, 4], row_o.repeat(b));
    let s = g.leaf_from(vec![b, 4], row_s.repeat(b));
    let tau = g.leaf_from(vec![1], vec![0.9]);
    let loss = symmetric_contrastive_loss(&mut g, o, s, tau)?;
    let measured = (g.scalar(loss) - (b as f64).ln()).abs();
    Ok(check(
        "loss/uniform-bound",
        measured,
        1e-12,
        format!("identical rows, B={b}"),
    ))
}

fn loss_swap_symmetry() -> Result<Check> {
    let o = Tensor::from_vec(
        vec![3, 4],
        vec![0.9, 0.2, -0.4, 0.6, -0.3, 0.8, 0.5, -0.1, 0.4, -0.7, 0.2, 0.9],
    );
    let s = Tensor::from_vec(
        vec![3, 4],
        vec![0.7, 0.1, -0.5, 0.8, -0.2, 0.9, 0.4, -0.3, 0.3, -0.6, 0.4, 0.7],
    );
    let eval = |a: &Tensor<f64>, b: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let an = g.leaf(a.clone());
        let bn = g.leaf(b.clone());
        let tau = g.leaf_from(vec![1], vec![1.4]);
        let loss = symmetric_contrastive_loss(&mut g, an, bn, tau)?;
        Ok(g.scalar(loss))
    };
    let forward = eval(&o, &s)?;
    let swapped = eval(&s, &o)?;
    Ok(check_exact(
        "loss/swap-symmetry",
        (forward - swapped).abs(),
        "bitwise".into(),
    ))
}

fn loss_triplet_closed_form() -> Result<Check> {
    let mut g = Graph::new();
    let a = g.leaf_from(vec![1, 2], vec![0.0, 0.0]);
    let p = g.leaf_from(vec![1, 2], vec![0.0, 2.0]);
    let n = g.leaf_from(vec![1, 2], vec![0.0, 1.0]);
    let loss = triplet_loss_single(&mut g, a, p, n, 0.5)?;
    // d(a,p)=2, d(a,n)=1, margin 0.5 -> hinge 1.5
    let measured = (g.scalar(loss) - 1.5).abs();
    Ok(check("loss/triplet-closed-form", measured, 1e-12, String::new()))
}

/// Independent brute-force protocol scorer mirroring the documented
/// rules: self-match exclusion on (object, sequence, camera), modality
/// restriction per mode, distance ties broken by gallery index.
fn brute_force(set: &EvalSet, mode: EvalMode) -> Option<(f64, Vec<f64>, usize)> {
    let gallery_ok = |q: &Descriptor, g: &Descriptor| -> bool {
        let active = match mode {
            EvalMode::All => true,
            EvalMode::OptToSar => q.modality == ModalityTag::Optical,
            EvalMode::SarToOpt => q.modality == ModalityTag::Sar,
        };
        if !active {
            return false;
        }
        if g.object_id == q.object_id
            && g.sequence_id == q.sequence_id
            && g.camera_id == q.camera_id
        {
            return false;
        }
        match mode {
            EvalMode::All => true,
            EvalMode::OptToSar => g.modality == ModalityTag::Sar,
            EvalMode::SarToOpt => g.modality == ModalityTag::Optical,
        }
    };
    let mut per_query: Vec<Vec<bool>> = Vec::new();
    let mut dropped = 0usize;
    for (qi, q) in set.query.iter().enumerate() {
        let valid: Vec<usize> = (0..set.gallery.len())
            .filter(|&gi| gallery_ok(q, &set.gallery[gi]))
            .collect();
        if valid.is_empty() {
            continue;
        }
        let positives = valid.iter().any(|&gi| {
            set.gallery[gi].object_id != -1 && set.gallery[gi].object_id == q.object_id
        });
        if !positives {
            dropped += 1;
            continue;
        }
        let mut scored: Vec<(f64, usize)> = valid
            .iter()
            .map(|&gi| {
                let d2: f64 = set.query_features[qi]
                    .iter()
                    .zip(&set.gallery_features[gi])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d2.sqrt(), gi)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        per_query.push(
            scored
                .iter()
                .map(|&(_, gi)| {
                    set.gallery[gi].object_id != -1 && set.gallery[gi].object_id == q.object_id
                })
                .collect(),
        );
    }
    if per_query.is_empty() {
        return None;
    }
    let max_len = per_query.iter().map(Vec::len).max().unwrap_or(0);
    let mut cmc = vec![0.0f64; max_len];
    let mut ap_sum = 0.0f64;
    for flags in &per_query {
        let first = flags.iter().position(|&m| m).expect("positive exists");
        for slot in cmc.iter_mut().skip(first) {
            *slot += 1.0;
        }
        let mut relevant = 0usize;
        let mut sum = 0.0f64;
        for (rank0, &m) in flags.iter().enumerate() {
            if m {
                relevant += 1;
                sum += relevant as f64 / (rank0 + 1) as f64;
            }
        }
        ap_sum += sum / relevant as f64;
    }
    let n = per_query.len() as f64;
    for v in &mut cmc {
        *v /= n;
    }
    Some((ap_sum / n, cmc, dropped))
}

fn random_eval_set(instance: usize) -> EvalSet {
    let mut rng = named_rng(0, &format!("verify/metric/{instance}"));
    let dim = 4usize;
    let n_query = rng.gen_range(1..=5);
    let n_gallery = rng.gen_range(2..=9);
    let descriptor = |rng: &mut rand_chacha::ChaCha8Rng, allow_distractor: bool| {
        let object_id = if allow_distractor && rng.gen_range(0..5) == 0 {
            -1
        } else {
            rng.gen_range(1..=3)
        };
        Descriptor {
            object_id,
            sequence_id: rng.gen_range(0..3),
            camera_id: rng.gen_range(1..=2),
            modality: if rng.gen_range(0..2) == 0 {
                ModalityTag::Optical
            } else {
                ModalityTag::Sar
            },
        }
    };
    let features = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    };
    let query: Vec<Descriptor> = (0..n_query).map(|_| descriptor(&mut rng, false)).collect();
    let gallery: Vec<Descriptor> = (0..n_gallery).map(|_| descriptor(&mut rng, true)).collect();
    let query_features = features(&mut rng, n_query);
    let gallery_features = features(&mut rng, n_gallery);
    EvalSet {
        query,
        gallery,
        query_features,
        gallery_features,
    }
}

fn metric_against_brute_force() -> Result<Check> {
    let mut max_diff = 0.0f64;
    let mut compared = 0usize;
    for instance in 0..200 {
        let set = random_eval_set(instance);
        for mode in [EvalMode::All, EvalMode::OptToSar, EvalMode::SarToOpt] {
            let expected = brute_force(&set, mode);
            match (evaluate_set(&set, mode), expected) {
                (Ok(result), Some((map, cmc, dropped))) => {
                    let mut diff: f64 = (result.map - map).abs();
                    if result.cmc.len() != cmc.len() || result.dropped_queries != dropped {
                        diff = f64::INFINITY;
                    } else {
                        for (a, b) in result.cmc.iter().zip(&cmc) {
                            diff = diff.max((a - b).abs());
                        }
                    }
                    max_diff = max_diff.max(diff);
                    compared += 1;
                }
                (Err(Error::EmptyProtocol), None) => compared += 1,
                (got, want) => {
                    return Err(Error::Invalid(format!(
                        "metric oracle disagreement on emptiness: instance {instance} \
                         mode {} got {:?} want nonempty={}",
                        mode.as_str(),
                        got.map(|r| r.map),
                        want.is_some()
                    )))
                }
            }
        }
    }
    Ok(check_exact(
        "metric/brute-force",
        max_diff,
        format!("{compared} instance-mode runs"),
    ))
}

fn metric_ap_hand_case() -> Result<Check> {
    // one query, relevant items at ranks 1 and 3: AP = (1 + 2/3)/2 = 5/6
    let d = |object_id: i64, sequence_id: u32| Descriptor {
        object_id,
        sequence_id,
        camera_id: 1,
        modality: ModalityTag::Optical,
    };
    let set = EvalSet {
        query: vec![d(1, 9)],
        gallery: vec![d(1, 0), d(2, 1), d(1, 2), d(2, 3)],
        query_features: vec![vec![0.0]],
        gallery_features: vec![vec![0.1], vec![0.2], vec![0.3], vec![0.4]],
    };
    let result = evaluate_set(&set, EvalMode::All)?;
    let measured = (result.map - 5.0 / 6.0).abs();
    Ok(check("metric/ap-hand-case", measured, 1e-12, String::new()))
}

/// With dual tokenizers, a SAR-only batch must leave the optical head's
/// gradient identically zero.
fn arch_dual_head_isolation() -> Result<Check> {
    let cfg = probe_cfg();
    let params = Params::init(&cfg, 31);
    let image = probe_image(1, cfg.input_h, cfg.input_w, "verify/iso/sar");
    let mut g = Graph::new();
    let pn = ParamNodes::bind(&mut g, &params);
    let inputs = [ForwardInput {
        image: &image,
        modality: ModalityTag::Sar,
        size: Some([0.1, 0.2, 1.5]),
    }];
    let feats = batch_feature_node(&mut g, &pn, &inputs, &cfg, None)?;
    // plain sum_all would cancel through the final layer norm; weight the
    // coordinates so real gradient reaches the tokenizer heads
    let weights: Vec<f64> = (0..cfg.embed_dim).map(|i| 0.3 + 0.1 * i as f64).collect();
    let wrow = g.leaf_from(vec![1, cfg.embed_dim], weights);
    let weighted = g.mul(feats, wrow)?;
    let loss = g.sum_all(weighted);
    g.backward(loss)?;
    let mut holder = params.clone();
    pn.write_grads(&g, &mut holder);
    let grad_mag = |t: &Tensor<f64>| -> f64 {
        t.grad()
            .map(|g| g.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .unwrap_or(0.0)
    };
    let measured = grad_mag(&holder.tokenizer_opt.w).max(grad_mag(&holder.tokenizer_opt.b));
    let sar_active = grad_mag(&holder.tokenizer_sar.w);
    Ok(Check {
        name: "arch/dual-head-isolation",
        measured,
        tol: 0.0,
        passed: measured == 0.0 && sar_active > 0.0,
        note: format!("sar head grad magnitude {sar_active:.3e}"),
    })
}

/// Modality embedding scaled by zero must be bitwise identical to the
/// embedding being absent.
fn arch_lambda_zero_equivalence() -> Result<Check> {
    let mut cfg_zero = probe_cfg();
    cfg_zero.lambda_mie = 0.0;
    let mut cfg_off = probe_cfg();
    cfg_off.use_modality_embed = false;
    let params = Params::init(&probe_cfg(), 32);
    let image = probe_image(3, cfg_zero.input_h, cfg_zero.input_w, "verify/lambda/opt");
    let input = |img| ForwardInput {
        image: img,
        modality: ModalityTag::Optical,
        size: Some([0.4, -0.1, 2.2]),
    };
    let a = extract_feature(&params, input(&image), &cfg_zero)?;
    let b = extract_feature(&params, input(&image), &cfg_off)?;
    let measured = a
        .iter()
        .zip(&b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    Ok(check_exact("arch/lambda-zero", measured, "bitwise".into()))
}

/// An optical forward pass must not read the SAR row of the modality
/// table (and vice versa).
fn arch_modality_row_isolation() -> Result<Check> {
    let cfg = probe_cfg();
    let params = Params::init(&cfg, 33);
    let mut poked = params.clone();
    let d = cfg.embed_dim;
    for v in &mut poked.modality_embed.data_mut()[d..2 * d] {
        *v += 17.0;
    }
    let image = probe_image(3, cfg.input_h, cfg.input_w, "verify/rowiso/opt");
    let input = |img| ForwardInput {
        image: img,
        modality: ModalityTag::Optical,
        size: Some([0.4, -0.1, 2.2]),
    };
    let a = extract_feature(&params, input(&image), &cfg)?;
    let b = extract_feature(&poked, input(&image), &cfg)?;
    let measured = a
        .iter()
        .zip(&b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    Ok(check_exact(
        "arch/modality-row-isolation",
        measured,
        "sar row perturbed by +17".into(),
    ))
}

fn arch_checkpoint_round_trip() -> Result<Check> {
    let cfg = probe_cfg();
    let params = Params::init(&cfg, 34);
    let bytes = to_bytes(&params, &cfg);
    let (restored, restored_cfg) = from_bytes(&bytes)?;
    let bytes_again = to_bytes(&restored, &restored_cfg);
    let measured = if bytes == bytes_again && restored.fingerprint() == params.fingerprint() {
        0.0
    } else {
        1.0
    };
    Ok(check_exact(
        "arch/checkpoint-round-trip",
        measured,
        format!("{} bytes", bytes.len()),
    ))
}

fn determinism_feature() -> Result<Check> {
    let cfg = probe_cfg();
    let params = Params::init(&cfg, 35);
    let image = probe_image(1, cfg.input_h, cfg.input_w, "verify/det/sar");
    let input = |img| ForwardInput {
        image: img,
        modality: ModalityTag::Sar,
        size: Some([0.0, 0.0, 2.0]),
    };
    let a = extract_feature(&params, input(&image), &cfg)?;
    let b = extract_feature(&params, input(&image), &cfg)?;
    let same_params = Params::init(&cfg, 35).fingerprint() == params.fingerprint();
    let measured = a
        .iter()
        .zip(&b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    Ok(Check {
        name: "determinism/forward-and-init",
        measured,
        tol: 0.0,
        passed: measured == 0.0 && same_params,
        note: "repeated forward and repeated init".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes_every_check() {
        let report = run_verification(None).unwrap();
        assert!(
            report.all_passed(),
            "failing checks:\n{}",
            report.render()
        );
        assert_eq!(report.checks.len(), 15);
        let text = report.render();
        assert!(text.contains("PASS grad/full-model"));
        assert!(text.contains("checks passed"));
    }

    #[test]
    fn corruption_is_detected_and_named() {
        for op in ["matmul", "layer_norm", "softmax_rows"] {
            let report = run_verification(Some(op)).unwrap();
            assert!(!report.all_passed(), "corrupting {op} went unnoticed");
            let text = report.render();
            assert!(text.contains(&format!("op '{op}'")));
            assert!(text.contains("FAIL grad/"));
        }
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(matches!(
            run_verification(Some("made_up_op")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn corruption_leaves_forward_checks_alone() {
        // the fixture perturbs backward only; loss identities still hold
        let report = run_verification(Some("matmul")).unwrap();
        for c in &report.checks {
            if c.name.starts_with("loss/") || c.name.starts_with("metric/") {
                assert!(c.passed, "{} failed under backward corruption", c.name);
            }
        }
    }
}
