//! Network forward pass: tokenization, sequence assembly, shared encoder.
//!
//! The caller owns a [`Params`] tree; [`ParamNodes::bind`] mirrors it onto
//! a fresh graph as leaves, forward functions build the computation, and
//! after `backward` the gradients flow back into the tree through
//! [`ParamNodes::write_grads`]. One graph per batch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::config::{ModalityTag, ModelConfig};
use crate::model::params::{LinearParams, Params};
use crate::tensor::Tensor;

/// Layer-norm stabilizer used everywhere in the encoder.
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct LinearNodes {
    pub w: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockNodes {
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub wq: LinearNodes,
    pub wk: LinearNodes,
    pub wv: LinearNodes,
    pub wo: LinearNodes,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
    pub mlp1: LinearNodes,
    pub mlp2: LinearNodes,
}

/// The parameter tree bound onto one graph, in the documented visit order.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub tokenizer_opt: LinearNodes,
    pub tokenizer_sar: LinearNodes,
    pub pos_embed: NodeId,
    pub cls_token: NodeId,
    pub modality_embed: NodeId,
    pub size_proj: LinearNodes,
    pub blocks: Vec<BlockNodes>,
    pub final_gamma: NodeId,
    pub final_beta: NodeId,
    pub log_tau: NodeId,
    pub classifier: Option<LinearNodes>,
}

impl ParamNodes {
    pub fn bind(g: &mut Graph<f64>, p: &Params) -> Self {
        let lin = |g: &mut Graph<f64>, l: &LinearParams| LinearNodes {
            w: g.leaf(l.w.clone()),
            b: g.leaf(l.b.clone()),
        };
        let tokenizer_opt = lin(g, &p.tokenizer_opt);
        let tokenizer_sar = lin(g, &p.tokenizer_sar);
        let pos_embed = g.leaf(p.pos_embed.clone());
        let cls_token = g.leaf(p.cls_token.clone());
        let modality_embed = g.leaf(p.modality_embed.clone());
        let size_proj = lin(g, &p.size_proj);
        let blocks = p
            .blocks
            .iter()
            .map(|b| BlockNodes {
                ln1_gamma: g.leaf(b.ln1_gamma.clone()),
                ln1_beta: g.leaf(b.ln1_beta.clone()),
                wq: lin(g, &b.wq),
                wk: lin(g, &b.wk),
                wv: lin(g, &b.wv),
                wo: lin(g, &b.wo),
                ln2_gamma: g.leaf(b.ln2_gamma.clone()),
                ln2_beta: g.leaf(b.ln2_beta.clone()),
                mlp1: lin(g, &b.mlp1),
                mlp2: lin(g, &b.mlp2),
            })
            .collect();
        let final_gamma = g.leaf(p.final_gamma.clone());
        let final_beta = g.leaf(p.final_beta.clone());
        let log_tau = g.leaf(p.log_tau.clone());
        let classifier = p.classifier.as_ref().map(|l| lin(g, l));
        ParamNodes {
            tokenizer_opt,
            tokenizer_sar,
            pos_embed,
            cls_token,
            modality_embed,
            size_proj,
            blocks,
            final_gamma,
            final_beta,
            log_tau,
            classifier,
        }
    }

    /// Node ids in the same order as [`Params::for_each_tensor`].
    pub fn for_each_node(&self, f: &mut dyn FnMut(NodeId)) {
        let lin = |l: &LinearNodes, f: &mut dyn FnMut(NodeId)| {
            f(l.w);
            f(l.b);
        };
        lin(&self.tokenizer_opt, f);
        lin(&self.tokenizer_sar, f);
        f(self.pos_embed);
        f(self.cls_token);
        f(self.modality_embed);
        lin(&self.size_proj, f);
        for b in &self.blocks {
            f(b.ln1_gamma);
            f(b.ln1_beta);
            lin(&b.wq, f);
            lin(&b.wk, f);
            lin(&b.wv, f);
            lin(&b.wo, f);
            f(b.ln2_gamma);
            f(b.ln2_beta);
            lin(&b.mlp1, f);
            lin(&b.mlp2, f);
        }
        f(self.final_gamma);
        f(self.final_beta);
        f(self.log_tau);
        if let Some(head) = &self.classifier {
            lin(head, f);
        }
    }

    /// Copy accumulated gradients from the graph back into the tree.
    pub fn write_grads(&self, g: &Graph<f64>, p: &mut Params) {
        let mut ids = Vec::new();
        self.for_each_node(&mut |id| ids.push(id));
        let mut i = 0;
        p.for_each_tensor_mut(&mut |t| {
            t.set_grad(g.grad(ids[i]).to_vec());
            i += 1;
        });
        assert_eq!(i, ids.len(), "parameter/node count mismatch");
    }
}

/// One image heading into the encoder.
#[derive(Debug, Clone, Copy)]
pub struct ForwardInput<'a> {
    /// Preprocessed pixels, shape `[channels, input_h, input_w]`.
    pub image: &'a Tensor<f64>,
    pub modality: ModalityTag,
    /// Standardized (width, length, aspect) triple; requires the size
    /// embedding flag.
    pub size: Option<[f64; 3]>,
}

/// `x·W + b` with the bias broadcast over rows.
pub fn linear(g: &mut Graph<f64>, x: NodeId, l: &LinearNodes) -> Result<NodeId> {
    let y = g.matmul(x, l.w)?;
    g.add_row_broadcast(y, l.b)
}

/// Split `[C,H,W]` pixels into the `[N, patch²·C]` patch matrix,
/// row-major over the patch grid, channel-major within a patch.
pub fn patches_matrix(image: &Tensor<f64>, patch: usize) -> Tensor<f64> {
    let shape = image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (gh, gw) = (h / patch, w / patch);
    let d = image.data();
    let mut out = Vec::with_capacity(gh * gw * c * patch * patch);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for y in 0..patch {
                    let row = (gy * patch + y) * w + gx * patch;
                    let base = ch * h * w + row;
                    out.extend_from_slice(&d[base..base + patch]);
                }
            }
        }
    }
    Tensor::from_vec(vec![gh * gw, c * patch * patch], out)
}

/// Map an image to its `[N, D]` patch tokens through the head chosen by
/// modality. Without the dual tokenizer, SAR patches are replicated to
/// three channels and pushed through the optical head.
pub fn tokenize(
    g: &mut Graph<f64>,
    pn: &ParamNodes,
    image: &Tensor<f64>,
    modality: ModalityTag,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let expected = vec![modality.channels(), cfg.input_h, cfg.input_w];
    if image.shape() != expected.as_slice() {
        return Err(Error::Dimension {
            op: "tokenize",
            lhs: image.shape().to_vec(),
            rhs: expected,
        });
    }
    let patches = patches_matrix(image, cfg.patch_size);
    match (cfg.use_dual_tokenizer, modality) {
        (true, ModalityTag::Optical) | (false, ModalityTag::Optical) => {
            let p = g.leaf(patches);
            linear(g, p, &pn.tokenizer_opt)
        }
        (true, ModalityTag::Sar) => {
            let p = g.leaf(patches);
            linear(g, p, &pn.tokenizer_sar)
        }
        (false, ModalityTag::Sar) => {
            let n = patches.shape()[0];
            let psq = patches.shape()[1];
            let mut tripled = Vec::with_capacity(n * psq * 3);
            for r in 0..n {
                let row = patches.row(r);
                for _ in 0..3 {
                    tripled.extend_from_slice(row);
                }
            }
            let p = g.leaf(Tensor::from_vec(vec![n, 3 * psq], tripled));
            linear(g, p, &pn.tokenizer_opt)
        }
    }
}

/// Build the encoder input: class token, patch tokens, position table,
/// scaled modality row, and optionally the projected size token. The size
/// token is appended after the position/modality additions and receives
/// neither.
pub fn assemble_sequence(
    g: &mut Graph<f64>,
    pn: &ParamNodes,
    tokens: NodeId,
    modality: ModalityTag,
    size_feats: Option<[f64; 3]>,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let n = g.value(tokens).shape()[0];
    let mut seq = g.concat_rows(&[pn.cls_token, tokens])?;
    let pos = g.slice_rows(pn.pos_embed, 0, n + 1)?;
    seq = g.add(seq, pos)?;
    if cfg.use_modality_embed && cfg.lambda_mie != 0.0 {
        let row = g.slice_rows(pn.modality_embed, modality.index(), 1)?;
        let scaled = g.scale_const(row, cfg.lambda_mie);
        seq = g.add_row_broadcast(seq, scaled)?;
    }
    if let Some(sf) = size_feats {
        if !cfg.use_size_embed {
            return Err(Error::Config(
                "size features supplied but use_size_embed is false".into(),
            ));
        }
        let s = g.leaf_from(vec![1, 3], sf.to_vec());
        let x_size = linear(g, s, &pn.size_proj)?;
        seq = g.concat_rows(&[seq, x_size])?;
    }
    Ok(seq)
}

fn maybe_dropout(
    g: &mut Graph<f64>,
    x: NodeId,
    cfg: &ModelConfig,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let rate = cfg.dropout_rate;
    if rate <= 0.0 {
        return Ok(x);
    }
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    let keep = 1.0 - rate;
    let shape = g.value(x).shape().to_vec();
    let mask: Vec<f64> = (0..g.value(x).numel())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.leaf_from(shape, mask);
    g.mul(x, m)
}

fn encoder_block(
    g: &mut Graph<f64>,
    b: &BlockNodes,
    x: NodeId,
    cfg: &ModelConfig,
    dropout_rng: &mut Option<&mut ChaCha8Rng>,
    attn_sink: &mut Option<&mut Vec<Tensor<f64>>>,
) -> Result<NodeId> {
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let h = g.layer_norm(x, b.ln1_gamma, b.ln1_beta, LN_EPS)?;
    let q = linear(g, h, &b.wq)?;
    let k = linear(g, h, &b.wk)?;
    let v = linear(g, h, &b.wv)?;
    let mut head_outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = g.slice_cols(q, hd * dh, dh)?;
        let kh = g.slice_cols(k, hd * dh, dh)?;
        let vh = g.slice_cols(v, hd * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale_const(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_rows(scaled)?;
        if let Some(sink) = attn_sink.as_deref_mut() {
            sink.push(g.value(attn).clone());
        }
        head_outs.push(g.matmul(attn, vh)?);
    }
    let cat = g.concat_cols(&head_outs)?;
    let proj = linear(g, cat, &b.wo)?;
    let proj = maybe_dropout(g, proj, cfg, dropout_rng)?;
    let x = g.add(x, proj)?;

    let h2 = g.layer_norm(x, b.ln2_gamma, b.ln2_beta, LN_EPS)?;
    let m = linear(g, h2, &b.mlp1)?;
    let m = g.gelu(m, cfg.gelu_form);
    let m = linear(g, m, &b.mlp2)?;
    let m = maybe_dropout(g, m, cfg, dropout_rng)?;
    g.add(x, m)
}

/// Run the shared encoder stack and final norm. `attn_sink`, when given,
/// receives the post-softmax attention of every (layer, head) in order.
pub fn encode_full(
    g: &mut Graph<f64>,
    pn: &ParamNodes,
    seq: NodeId,
    cfg: &ModelConfig,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    mut attn_sink: Option<&mut Vec<Tensor<f64>>>,
) -> Result<NodeId> {
    let mut x = seq;
    for b in &pn.blocks {
        x = encoder_block(g, b, x, cfg, &mut dropout_rng, &mut attn_sink)?;
    }
    g.layer_norm(x, pn.final_gamma, pn.final_beta, LN_EPS)
}

pub fn encode(
    g: &mut Graph<f64>,
    pn: &ParamNodes,
    seq: NodeId,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    encode_full(g, pn, seq, cfg, None, None)
}

/// Full single-image forward; returns the `[1, D]` class-token feature.
pub fn feature_node(
    g: &mut Graph<f64>,
    pn: &ParamNodes,
    input: ForwardInput,
    cfg: &ModelConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let tokens = tokenize(g, pn, input.image, input.modality, cfg)?;
    let seq = assemble_sequence(g, pn, tokens, input.modality, input.size, cfg)?;
    let encoded = encode_full(g, pn, seq, cfg, dropout_rng, None)?;
    g.slice_rows(encoded, 0, 1)
}

/// Features for a batch, one row per input, shape `[B, D]`.
pub fn batch_feature_node(
    g: &mut Graph<f64>,
    pn: &ParamNodes,
    inputs: &[ForwardInput],
    cfg: &ModelConfig,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    if inputs.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut rows = Vec::with_capacity(inputs.len());
    for inp in inputs {
        rows.push(feature_node(g, pn, *inp, cfg, dropout_rng.as_deref_mut())?);
    }
    g.concat_rows(&rows)
}

/// Inference-only feature extraction on a private graph.
pub fn extract_feature(
    params: &Params,
    input: ForwardInput,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let pn = ParamNodes::bind(&mut g, params);
    let f = feature_node(&mut g, &pn, input, cfg, None)?;
    Ok(g.value(f).data().to_vec())
}

/// Rebuild a [`ParamNodes`] mirror from leaf ids laid out in the
/// [`Params::for_each_tensor`] order (the gradient-check harness creates
/// leaves from a flat tensor list).
pub fn param_nodes_from_ids(ids: &[NodeId], cfg: &ModelConfig) -> ParamNodes {
    fn lin(it: &mut std::slice::Iter<'_, NodeId>) -> LinearNodes {
        LinearNodes {
            w: *it.next().unwrap(),
            b: *it.next().unwrap(),
        }
    }
    let it = &mut ids.iter();
    let tokenizer_opt = lin(it);
    let tokenizer_sar = lin(it);
    let pos_embed = *it.next().unwrap();
    let cls_token = *it.next().unwrap();
    let modality_embed = *it.next().unwrap();
    let size_proj = lin(it);
    let mut blocks = Vec::new();
    for _ in 0..cfg.num_layers {
        blocks.push(BlockNodes {
            ln1_gamma: *it.next().unwrap(),
            ln1_beta: *it.next().unwrap(),
            wq: lin(it),
            wk: lin(it),
            wv: lin(it),
            wo: lin(it),
            ln2_gamma: *it.next().unwrap(),
            ln2_beta: *it.next().unwrap(),
            mlp1: lin(it),
            mlp2: lin(it),
        });
    }
    let final_gamma = *it.next().unwrap();
    let final_beta = *it.next().unwrap();
    let log_tau = *it.next().unwrap();
    let classifier = if cfg.num_classes > 0 { Some(lin(it)) } else { None };
    assert!(it.next().is_none(), "leftover ids after rebuilding param nodes");
    ParamNodes {
        tokenizer_opt,
        tokenizer_sar,
        pos_embed,
        cls_token,
        modality_embed,
        size_proj,
        blocks,
        final_gamma,
        final_beta,
        log_tau,
        classifier,
    }
}

/// Post-softmax attention weights, indexed `[layer][head]`, each `[L, L]`.
pub fn attention_maps(
    params: &Params,
    input: ForwardInput,
    cfg: &ModelConfig,
) -> Result<Vec<Vec<Tensor<f64>>>> {
    let mut g = Graph::new();
    let pn = ParamNodes::bind(&mut g, params);
    let tokens = tokenize(&mut g, &pn, input.image, input.modality, cfg)?;
    let seq = assemble_sequence(&mut g, &pn, tokens, input.modality, input.size, cfg)?;
    let mut flat = Vec::new();
    encode_full(&mut g, &pn, seq, cfg, None, Some(&mut flat))?;
    let heads = cfg.num_heads;
    Ok(flat
        .chunks(heads)
        .map(|layer| layer.to_vec())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.embed_dim = 16;
        cfg.num_layers = 2;
        cfg.num_heads = 2;
        cfg.patch_size = 4;
        cfg.input_h = 8;
        cfg.input_w = 16;
        cfg
    }

    fn test_image(modality: ModalityTag, cfg: &ModelConfig, scale: f64) -> Tensor<f64> {
        let c = modality.channels();
        let n = c * cfg.input_h * cfg.input_w;
        let data: Vec<f64> = (0..n)
            .map(|i| scale * ((i as f64 * 0.37).sin() * 0.5 + 0.5))
            .collect();
        Tensor::from_vec(vec![c, cfg.input_h, cfg.input_w], data)
    }

    #[test]
    fn patch_count_and_token_shape() {
        let cfg = tiny_cfg();
        let p = Params::init(&cfg, 5);
        let img = test_image(ModalityTag::Optical, &cfg, 1.0);
        let mut g = Graph::new();
        let pn = ParamNodes::bind(&mut g, &p);
        let tokens = tokenize(&mut g, &pn, &img, ModalityTag::Optical, &cfg).unwrap();
        assert_eq!(g.value(tokens).shape(), &[cfg.num_patches(), cfg.embed_dim]);
        assert_eq!(cfg.num_patches(), 8);
    }

    #[test]
    fn desk_patch_arithmetic() {
        assert_eq!(ModelConfig::desk().num_patches(), 32);
        assert_eq!(ModelConfig::reference().num_patches(), 128);
    }

    #[test]
    fn zero_head_annihilates() {
        let cfg = tiny_cfg();
        let p = Params::zeros(&cfg);
        let img = test_image(ModalityTag::Optical, &cfg, 1.0);
        let mut g = Graph::new();
        let pn = ParamNodes::bind(&mut g, &p);
        let tokens = tokenize(&mut g, &pn, &img, ModalityTag::Optical, &cfg).unwrap();
        assert!(g.value(tokens).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sequence_lengths() {
        let cfg = tiny_cfg();
        let p = Params::init(&cfg, 5);
        let img = test_image(ModalityTag::Sar, &cfg, 1.0);
        let mut g = Graph::new();
        let pn = ParamNodes::bind(&mut g, &p);
        let tokens = tokenize(&mut g, &pn, &img, ModalityTag::Sar, &cfg).unwrap();
        let plain = assemble_sequence(&mut g, &pn, tokens, ModalityTag::Sar, None, &cfg).unwrap();
        assert_eq!(g.value(plain).shape()[0], cfg.num_patches() + 1);
        let with_size =
            assemble_sequence(&mut g, &pn, tokens, ModalityTag::Sar, Some([0.1, -0.4, 2.0]), &cfg)
                .unwrap();
        assert_eq!(g.value(with_size).shape()[0], cfg.num_patches() + 2);
    }

    #[test]
    fn size_feats_rejected_when_disabled() {
        let mut cfg = tiny_cfg();
        cfg.use_size_embed = false;
        let p = Params::init(&cfg, 5);
        let img = test_image(ModalityTag::Optical, &cfg, 1.0);
        let mut g = Graph::new();
        let pn = ParamNodes::bind(&mut g, &p);
        let tokens = tokenize(&mut g, &pn, &img, ModalityTag::Optical, &cfg).unwrap();
        let r = assemble_sequence(&mut g, &pn, tokens, ModalityTag::Optical, Some([0.0; 3]), &cfg);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn modality_rows_differ_by_lambda_delta() {
        let cfg = tiny_cfg();
        let p = Params::init(&cfg, 5);
        let img = test_image(ModalityTag::Sar, &cfg, 1.0);
        let mut g = Graph::new();
        let pn = ParamNodes::bind(&mut g, &p);
        let tokens = tokenize(&mut g, &pn, &img, ModalityTag::Sar, &cfg).unwrap();
        let as_sar = assemble_sequence(&mut g, &pn, tokens, ModalityTag::Sar, None, &cfg).unwrap();
        let as_opt =
            assemble_sequence(&mut g, &pn, tokens, ModalityTag::Optical, None, &cfg).unwrap();
        let d = cfg.embed_dim;
        let delta: Vec<f64> = (0..d)
            .map(|j| {
                cfg.lambda_mie * (p.modality_embed.at2(0, j) - p.modality_embed.at2(1, j))
            })
            .collect();
        let sar_v = g.value(as_sar);
        let opt_v = g.value(as_opt);
        for r in 0..cfg.num_patches() + 1 {
            for j in 0..d {
                let got = opt_v.at2(r, j) - sar_v.at2(r, j);
                assert!((got - delta[j]).abs() < 1e-12, "row {r} col {j}");
            }
        }
    }

    #[test]
    fn lambda_zero_bitwise_equals_mie_off() {
        let cfg_on = {
            let mut c = tiny_cfg();
            c.lambda_mie = 0.0;
            c
        };
        let cfg_off = {
            let mut c = tiny_cfg();
            c.use_modality_embed = false;
            c
        };
        let p = Params::init(&tiny_cfg(), 21);
        let img = test_image(ModalityTag::Sar, &tiny_cfg(), 1.0);
        let inp = ForwardInput {
            image: &img,
            modality: ModalityTag::Sar,
            size: None,
        };
        let f_on = extract_feature(&p, inp, &cfg_on).unwrap();
        let f_off = extract_feature(&p, inp, &cfg_off).unwrap();
        assert_eq!(f_on, f_off);
    }

    #[test]
    fn dual_head_gradient_isolation() {
        let cfg = tiny_cfg();
        let mut p = Params::init(&cfg, 8);
        let img = test_image(ModalityTag::Optical, &cfg, 1.0);
        let mut g = Graph::new();
        let pn = ParamNodes::bind(&mut g, &p);
        let f = feature_node(
            &mut g,
            &pn,
            ForwardInput {
                image: &img,
                modality: ModalityTag::Optical,
                size: None,
            },
            &cfg,
            None,
        )
        .unwrap();
        let sq = g.mul(f, f).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        pn.write_grads(&g, &mut p);
        assert!(p.tokenizer_sar.w.grad().unwrap().iter().all(|&v| v == 0.0));
        assert!(p.tokenizer_opt.w.grad().unwrap().iter().any(|&v| v != 0.0));

        // and the mirror case
        let sar = test_image(ModalityTag::Sar, &cfg, 1.0);
        let mut g2 = Graph::new();
        let pn2 = ParamNodes::bind(&mut g2, &p);
        let f2 = feature_node(
            &mut g2,
            &pn2,
            ForwardInput {
                image: &sar,
                modality: ModalityTag::Sar,
                size: None,
            },
            &cfg,
            None,
        )
        .unwrap();
        let sq2 = g2.mul(f2, f2).unwrap();
        let loss2 = g2.sum_all(sq2);
        g2.backward(loss2).unwrap();
        pn2.write_grads(&g2, &mut p);
        assert!(p.tokenizer_opt.w.grad().unwrap().iter().all(|&v| v == 0.0));
        assert!(p.tokenizer_sar.w.grad().unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn single_tokenizer_weight_sharing() {
        // a SAR image equals an optical image with three identical
        // channels once replicated, so with the single head and no
        // modality term the features must match bitwise
        let mut cfg = tiny_cfg();
        cfg.use_dual_tokenizer = false;
        cfg.use_modality_embed = false;
        let p = Params::init(&cfg, 4);
        let sar = test_image(ModalityTag::Sar, &cfg, 1.0);
        let mut opt_data = Vec::new();
        for _ in 0..3 {
            opt_data.extend_from_slice(sar.data());
        }
        let opt = Tensor::from_vec(vec![3, cfg.input_h, cfg.input_w], opt_data);
        let f_sar = extract_feature(
            &p,
            ForwardInput {
                image: &sar,
                modality: ModalityTag::Sar,
                size: None,
            },
            &cfg,
        )
        .unwrap();
        let f_opt = extract_feature(
            &p,
            ForwardInput {
                image: &opt,
                modality: ModalityTag::Optical,
                size: None,
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(f_sar, f_opt);
    }

    #[test]
    fn feature_is_deterministic() {
        let cfg = tiny_cfg();
        let p = Params::init(&cfg, 2);
        let img = test_image(ModalityTag::Optical, &cfg, 1.0);
        let inp = ForwardInput {
            image: &img,
            modality: ModalityTag::Optical,
            size: None,
        };
        let a = extract_feature(&p, inp, &cfg).unwrap();
        let b = extract_feature(&p, inp, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), cfg.embed_dim);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn attention_maps_rows_sum_to_one() {
        let cfg = tiny_cfg();
        let p = Params::init(&cfg, 6);
        let img = test_image(ModalityTag::Optical, &cfg, 1.0);
        let maps = attention_maps(
            &p,
            ForwardInput {
                image: &img,
                modality: ModalityTag::Optical,
                size: Some([0.3, 0.1, 2.0]),
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(maps.len(), cfg.num_layers);
        let l = cfg.num_patches() + 2;
        for layer in &maps {
            assert_eq!(layer.len(), cfg.num_heads);
            for head in layer {
                assert_eq!(head.shape(), &[l, l]);
                for r in 0..l {
                    let s: f64 = head.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bind_order_matches_visit_order() {
        let mut cfg = tiny_cfg();
        cfg.num_classes = 3;
        let p = Params::init(&cfg, 13);
        let mut g = Graph::new();
        let pn = ParamNodes::bind(&mut g, &p);
        let mut ids = Vec::new();
        pn.for_each_node(&mut |id| ids.push(id));
        let mut tensors = Vec::new();
        p.for_each_tensor(&mut |t| tensors.push(t));
        assert_eq!(ids.len(), tensors.len());
        for (id, t) in ids.iter().zip(&tensors) {
            assert_eq!(g.value(*id).data(), t.data());
        }
    }

    #[test]
    fn every_parameter_reaches_the_loss_path() {
        // sum of all bound leaves: gradient 1 everywhere; catches a field
        // forgotten by bind/visit
        let mut cfg = tiny_cfg();
        cfg.num_classes = 3;
        let mut p = Params::init(&cfg, 1);
        let mut g = Graph::new();
        let pn = ParamNodes::bind(&mut g, &p);
        let mut ids = Vec::new();
        pn.for_each_node(&mut |id| ids.push(id));
        let sums: Vec<NodeId> = ids.iter().map(|&id| g.sum_all(id)).collect();
        let mut acc = sums[0];
        for &s in &sums[1..] {
            acc = g.add(acc, s).unwrap();
        }
        g.backward(acc).unwrap();
        pn.write_grads(&g, &mut p);
        p.for_each_tensor(&mut |t| {
            assert!(t.grad().unwrap().iter().all(|&v| v == 1.0));
        });
    }

    #[test]
    fn tiny_model_gradient_check() {
        let mut cfg = tiny_cfg();
        cfg.embed_dim = 8;
        cfg.num_heads = 2;
        cfg.num_layers = 1;
        cfg.patch_size = 4;
        cfg.input_h = 4;
        cfg.input_w = 8;
        cfg.num_classes = 3;
        let p = Params::init(&cfg, 77);
        let img = test_image(ModalityTag::Sar, &cfg, 1.0);
        let mut tensors = Vec::new();
        p.for_each_tensor(&mut |t| tensors.push(t.clone()));
        let cfg2 = cfg.clone();
        let check = crate::gradcheck::grad_check(
            move |g: &mut Graph<f64>, ids: &[NodeId]| {
                let pn = param_nodes_from_ids(ids, &cfg2);
                let f = feature_node(
                    g,
                    &pn,
                    ForwardInput {
                        image: &img,
                        modality: ModalityTag::Sar,
                        size: Some([0.2, -0.1, 2.0]),
                    },
                    &cfg2,
                    None,
                )?;
                let head = pn.classifier.unwrap();
                let logits = linear(g, f, &head)?;
                g.cross_entropy_rows(logits, &[1])
            },
            &tensors,
            1e-5,
            3,
            99,
        )
        .unwrap();
        assert!(
            check.max_rel_err < 1e-4,
            "max rel err {} at {:?}",
            check.max_rel_err,
            check.worst
        );
    }
}
