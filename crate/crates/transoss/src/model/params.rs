//! The parameter tree and its deterministic initialization.
//!
//! Visit order is a stable contract: checkpoints, optimizer slots, and the
//! init RNG all consume tensors in exactly the order of
//! [`Params::for_each_tensor`]. The classifier head, when present, comes
//! last so pretrain checkpoints (no head) prefix fine-tune ones.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::model::config::ModelConfig;
use crate::tensor::Tensor;

/// Weight matrix `[in, out]` plus bias row `[1, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub w: Tensor<f64>,
    pub b: Tensor<f64>,
}

impl LinearParams {
    fn zeros(input: usize, output: usize) -> Self {
        LinearParams {
            w: Tensor::zeros(vec![input, output]).with_grad(),
            b: Tensor::zeros(vec![1, output]).with_grad(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.w.numel() + self.b.numel()
    }
}

/// One pre-norm encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Tensor<f64>,
    pub ln1_beta: Tensor<f64>,
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub ln2_gamma: Tensor<f64>,
    pub ln2_beta: Tensor<f64>,
    pub mlp1: LinearParams,
    pub mlp2: LinearParams,
}

/// Every learnable tensor of the network, including the contrastive
/// temperature. All ablation variants share this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// Optical patch head: patch_size²·3 → D.
    pub tokenizer_opt: LinearParams,
    /// SAR patch head: patch_size²·1 → D.
    pub tokenizer_sar: LinearParams,
    /// Position table over the full capacity (class token + N patches +
    /// size slot); the size token never reads it but the slot is reserved
    /// so checkpoints do not change shape across the size-embedding flag.
    pub pos_embed: Tensor<f64>,
    pub cls_token: Tensor<f64>,
    /// Row 0 optical, row 1 SAR.
    pub modality_embed: Tensor<f64>,
    /// Ship size projection: 3 → D.
    pub size_proj: LinearParams,
    pub blocks: Vec<BlockParams>,
    pub final_gamma: Tensor<f64>,
    pub final_beta: Tensor<f64>,
    /// Contrastive temperature, stored as log τ so τ stays positive.
    pub log_tau: Tensor<f64>,
    /// Identity classifier (D → num_classes), fine-tune stage only.
    pub classifier: Option<LinearParams>,
}

/// Initial log τ: τ = 1/0.07², so the logit scale √τ starts near 14.3.
pub const LOG_TAU_INIT: f64 = 5.318520073887792;

/// Init scale for weights and embeddings.
const INIT_STD: f64 = 0.02;

impl Params {
    /// All-zero tree with the right shapes (checkpoint loading target).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let patch_in_opt = cfg.patch_size * cfg.patch_size * 3;
        let patch_in_sar = cfg.patch_size * cfg.patch_size;
        let blocks = (0..cfg.num_layers)
            .map(|_| BlockParams {
                ln1_gamma: Tensor::zeros(vec![1, d]).with_grad(),
                ln1_beta: Tensor::zeros(vec![1, d]).with_grad(),
                wq: LinearParams::zeros(d, d),
                wk: LinearParams::zeros(d, d),
                wv: LinearParams::zeros(d, d),
                wo: LinearParams::zeros(d, d),
                ln2_gamma: Tensor::zeros(vec![1, d]).with_grad(),
                ln2_beta: Tensor::zeros(vec![1, d]).with_grad(),
                mlp1: LinearParams::zeros(d, cfg.mlp_dim()),
                mlp2: LinearParams::zeros(cfg.mlp_dim(), d),
            })
            .collect();
        Params {
            tokenizer_opt: LinearParams::zeros(patch_in_opt, d),
            tokenizer_sar: LinearParams::zeros(patch_in_sar, d),
            pos_embed: Tensor::zeros(vec![cfg.seq_capacity(), d]).with_grad(),
            cls_token: Tensor::zeros(vec![1, d]).with_grad(),
            modality_embed: Tensor::zeros(vec![2, d]).with_grad(),
            size_proj: LinearParams::zeros(3, d),
            blocks,
            final_gamma: Tensor::zeros(vec![1, d]).with_grad(),
            final_beta: Tensor::zeros(vec![1, d]).with_grad(),
            log_tau: Tensor::zeros(vec![1]).with_grad(),
            classifier: if cfg.num_classes > 0 {
                Some(LinearParams::zeros(d, cfg.num_classes))
            } else {
                None
            },
        }
    }

    /// Deterministic initialization. Weight and embedding tensors draw
    /// truncated normals (±2σ) in visit order; the modality table draws a
    /// plain normal; norms, biases, and log τ are constants and consume no
    /// randomness.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut p = Params::zeros(cfg);
        let mut rng = crate::stream::named_rng(seed, "init");
        fill_linear(&mut p.tokenizer_opt, &mut rng);
        fill_linear(&mut p.tokenizer_sar, &mut rng);
        fill_trunc_normal(&mut p.pos_embed, &mut rng);
        fill_trunc_normal(&mut p.cls_token, &mut rng);
        fill_normal(&mut p.modality_embed, &mut rng);
        fill_linear(&mut p.size_proj, &mut rng);
        for b in &mut p.blocks {
            fill_ones(&mut b.ln1_gamma);
            fill_linear(&mut b.wq, &mut rng);
            fill_linear(&mut b.wk, &mut rng);
            fill_linear(&mut b.wv, &mut rng);
            fill_linear(&mut b.wo, &mut rng);
            fill_ones(&mut b.ln2_gamma);
            fill_linear(&mut b.mlp1, &mut rng);
            fill_linear(&mut b.mlp2, &mut rng);
        }
        fill_ones(&mut p.final_gamma);
        p.log_tau.data_mut()[0] = LOG_TAU_INIT;
        if let Some(head) = p.classifier.as_mut() {
            fill_linear(head, &mut rng);
        }
        p
    }

    /// Attach a freshly initialized classifier head (fine-tune handoff
    /// from a pretrain checkpoint). Uses its own named stream so the draw
    /// does not depend on how the trunk was produced.
    pub fn attach_classifier(&mut self, num_classes: usize, d: usize, seed: u64) {
        let mut rng = crate::stream::named_rng(seed, "init/classifier");
        let mut head = LinearParams::zeros(d, num_classes);
        fill_linear(&mut head, &mut rng);
        self.classifier = Some(head);
    }

    /// Visit every tensor in the documented fixed order.
    pub fn for_each_tensor<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor<f64>)) {
        let lin = |l: &'a LinearParams, f: &mut dyn FnMut(&'a Tensor<f64>)| {
            f(&l.w);
            f(&l.b);
        };
        lin(&self.tokenizer_opt, f);
        lin(&self.tokenizer_sar, f);
        f(&self.pos_embed);
        f(&self.cls_token);
        f(&self.modality_embed);
        lin(&self.size_proj, f);
        for b in &self.blocks {
            f(&b.ln1_gamma);
            f(&b.ln1_beta);
            lin(&b.wq, f);
            lin(&b.wk, f);
            lin(&b.wv, f);
            lin(&b.wo, f);
            f(&b.ln2_gamma);
            f(&b.ln2_beta);
            lin(&b.mlp1, f);
            lin(&b.mlp2, f);
        }
        f(&self.final_gamma);
        f(&self.final_beta);
        f(&self.log_tau);
        if let Some(head) = &self.classifier {
            lin(head, f);
        }
    }

    /// Mutable visit in the same order as [`Params::for_each_tensor`].
    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<f64>)) {
        let lin = |l: &mut LinearParams, f: &mut dyn FnMut(&mut Tensor<f64>)| {
            f(&mut l.w);
            f(&mut l.b);
        };
        lin(&mut self.tokenizer_opt, f);
        lin(&mut self.tokenizer_sar, f);
        f(&mut self.pos_embed);
        f(&mut self.cls_token);
        f(&mut self.modality_embed);
        lin(&mut self.size_proj, f);
        for b in &mut self.blocks {
            f(&mut b.ln1_gamma);
            f(&mut b.ln1_beta);
            lin(&mut b.wq, f);
            lin(&mut b.wk, f);
            lin(&mut b.wv, f);
            lin(&mut b.wo, f);
            f(&mut b.ln2_gamma);
            f(&mut b.ln2_beta);
            lin(&mut b.mlp1, f);
            lin(&mut b.mlp2, f);
        }
        f(&mut self.final_gamma);
        f(&mut self.final_beta);
        f(&mut self.log_tau);
        if let Some(head) = &mut self.classifier {
            lin(head, f);
        }
    }

    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |_| n += 1);
        n
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |t| n += t.numel());
        n
    }

    pub fn clear_grads(&mut self) {
        self.for_each_tensor_mut(&mut |t| t.clear_grad());
    }

    /// FNV-1a digest of all parameter bytes, for cheap equality checks in
    /// determinism tests.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        self.for_each_tensor(&mut |t| {
            for v in t.data() {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        });
        h
    }
}

fn fill_trunc_normal(t: &mut Tensor<f64>, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
    for v in t.data_mut() {
        *v = loop {
            let x: f64 = dist.sample(rng);
            if x.abs() <= 2.0 * INIT_STD {
                break x;
            }
        };
    }
}

fn fill_normal(t: &mut Tensor<f64>, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
    for v in t.data_mut() {
        *v = dist.sample(rng);
    }
}

fn fill_linear(l: &mut LinearParams, rng: &mut impl Rng) {
    let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
    for v in l.w.data_mut() {
        *v = loop {
            let x: f64 = dist.sample(rng);
            if x.abs() <= 2.0 * INIT_STD {
                break x;
            }
        };
    }
    // biases stay zero
}

fn fill_ones(t: &mut Tensor<f64>) {
    for v in t.data_mut() {
        *v = 1.0;
    }
}
