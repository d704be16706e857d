//! Student/teacher encoders, masked-token predictor, projection heads.
//!
//! All three components are pre-norm transformer stacks built on the
//! autodiff graph; the plain-array entry points (`encode`,
//! `predict_masked`, `head_forward`) run the same construction with
//! gradients disabled, so training and inference share one forward path.
//!
//! The projection head follows the self-distillation design: three fully
//! connected layers with GELU down to a bottleneck, l2 normalization,
//! then a weight-normalized output layer (direction rows are normalized
//! on every forward; the per-class gain stays frozen at 1 unless
//! explicitly made trainable).

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::masking::MaskPartition;
use crate::objectives::CenterState;

/// Epsilon inside `x / max(||x||, eps)` row normalization.
pub const L2_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;
/// Feed-forward expansion factor of every transformer block.
pub const FFN_RATIO: usize = 4;

/// Architecture sizes shared by every component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub patch_dim: usize,
    pub d_model: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub d_pred: usize,
    pub pred_depth: usize,
    pub pred_heads: usize,
    pub head_hidden: usize,
    pub head_bottleneck: usize,
    pub k: usize,
    /// Rows of both positional tables (= grid cells per clip).
    pub n_positions: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let check = |label: &str, v: usize| {
            if v == 0 {
                Err(Error::InvalidArg(format!("{label} must be positive")))
            } else {
                Ok(())
            }
        };
        check("patch_dim", self.patch_dim)?;
        check("d_model", self.d_model)?;
        check("depth", self.depth)?;
        check("d_pred", self.d_pred)?;
        check("pred_depth", self.pred_depth)?;
        check("head_hidden", self.head_hidden)?;
        check("head_bottleneck", self.head_bottleneck)?;
        check("k", self.k)?;
        check("n_positions", self.n_positions)?;
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArg(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.pred_heads == 0 || self.d_pred % self.pred_heads != 0 {
            return Err(Error::InvalidArg(format!(
                "pred_heads {} must divide d_pred {}",
                self.pred_heads, self.d_pred
            )));
        }
        Ok(())
    }

    /// Desk-scale defaults used throughout the test suite.
    pub fn toy(n_positions: usize, k: usize) -> Self {
        ModelDims {
            patch_dim: crate::frontend::PATCH_DIM,
            d_model: 64,
            depth: 4,
            n_heads: 4,
            d_pred: 32,
            pred_depth: 2,
            pred_heads: 4,
            head_hidden: 128,
            head_bottleneck: 64,
            k,
            n_positions,
        }
    }
}

fn trunc_normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| loop {
        // Box-Muller, resampled beyond two standard deviations.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    })
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
}

impl LayerNormParams {
    fn new(d: usize) -> Self {
        LayerNormParams {
            gamma: Array2::ones((1, d)),
            beta: Array2::zeros((1, d)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln2: LayerNormParams,
    pub ffn_w1: Array2<f64>,
    pub ffn_b1: Array2<f64>,
    pub ffn_w2: Array2<f64>,
    pub ffn_b2: Array2<f64>,
}

impl BlockParams {
    fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let h = d * FFN_RATIO;
        BlockParams {
            ln1: LayerNormParams::new(d),
            wq: trunc_normal(d, d, INIT_STD, rng),
            bq: Array2::zeros((1, d)),
            wk: trunc_normal(d, d, INIT_STD, rng),
            bk: Array2::zeros((1, d)),
            wv: trunc_normal(d, d, INIT_STD, rng),
            bv: Array2::zeros((1, d)),
            wo: trunc_normal(d, d, INIT_STD, rng),
            bo: Array2::zeros((1, d)),
            ln2: LayerNormParams::new(d),
            ffn_w1: trunc_normal(d, h, INIT_STD, rng),
            ffn_b1: Array2::zeros((1, h)),
            ffn_w2: trunc_normal(h, d, INIT_STD, rng),
            ffn_b2: Array2::zeros((1, d)),
        }
    }
}

/// ViT-style encoder: patch projection + positional table + blocks +
/// final layer norm. Student and teacher share this shape.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub patch_w: Array2<f64>,
    pub patch_b: Array2<f64>,
    pub pos: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNormParams,
    pub n_heads: usize,
}

impl EncoderParams {
    pub fn init(dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        EncoderParams {
            patch_w: trunc_normal(dims.patch_dim, dims.d_model, INIT_STD, rng),
            patch_b: Array2::zeros((1, dims.d_model)),
            pos: trunc_normal(dims.n_positions, dims.d_model, INIT_STD, rng),
            blocks: (0..dims.depth)
                .map(|_| BlockParams::init(dims.d_model, rng))
                .collect(),
            norm: LayerNormParams::new(dims.d_model),
            n_heads: dims.n_heads,
        }
    }

    pub fn d_model(&self) -> usize {
        self.patch_w.ncols()
    }
}

/// Shallow transformer predicting teacher latents at masked positions
/// from (projected) visible latents plus a shared mask token.
#[derive(Debug, Clone)]
pub struct PredictorParams {
    pub in_w: Array2<f64>,
    pub in_b: Array2<f64>,
    pub mask_token: Array2<f64>,
    pub pos: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNormParams,
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
    pub n_heads: usize,
}

impl PredictorParams {
    pub fn init(dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        PredictorParams {
            in_w: trunc_normal(dims.d_model, dims.d_pred, INIT_STD, rng),
            in_b: Array2::zeros((1, dims.d_pred)),
            mask_token: trunc_normal(1, dims.d_pred, INIT_STD, rng),
            pos: trunc_normal(dims.n_positions, dims.d_pred, INIT_STD, rng),
            blocks: (0..dims.pred_depth)
                .map(|_| BlockParams::init(dims.d_pred, rng))
                .collect(),
            norm: LayerNormParams::new(dims.d_pred),
            out_w: trunc_normal(dims.d_pred, dims.d_model, INIT_STD, rng),
            out_b: Array2::zeros((1, dims.d_model)),
            n_heads: dims.pred_heads,
        }
    }
}

/// Projection head: 3-layer MLP to a bottleneck, l2 normalization, then
/// a weight-normalized output layer of `K` logits.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub w3: Array2<f64>,
    pub b3: Array2<f64>,
    /// Weight-norm directions, one row per output class `[K x bottleneck]`.
    pub wn_v: Array2<f64>,
    /// Per-class gains `[1 x K]`; frozen at 1 by default.
    pub wn_g: Array2<f64>,
}

impl HeadParams {
    pub fn init(dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        HeadParams {
            w1: trunc_normal(dims.d_model, dims.head_hidden, INIT_STD, rng),
            b1: Array2::zeros((1, dims.head_hidden)),
            w2: trunc_normal(dims.head_hidden, dims.head_hidden, INIT_STD, rng),
            b2: Array2::zeros((1, dims.head_hidden)),
            w3: trunc_normal(dims.head_hidden, dims.head_bottleneck, INIT_STD, rng),
            b3: Array2::zeros((1, dims.head_bottleneck)),
            wn_v: trunc_normal(dims.k, dims.head_bottleneck, INIT_STD, rng),
            wn_g: Array2::ones((1, dims.k)),
        }
    }

    pub fn k(&self) -> usize {
        self.wn_v.nrows()
    }
}

/// Everything the trainer owns: student side, EMA teacher side, center.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub student: EncoderParams,
    pub teacher: EncoderParams,
    pub predictor: PredictorParams,
    pub student_head: HeadParams,
    pub teacher_head: HeadParams,
    pub center: CenterState,
}

impl ModelState {
    /// Teacher sides start as exact copies of the student sides.
    pub fn init(dims: &ModelDims, center_momentum: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        dims.validate()?;
        let student = EncoderParams::init(dims, rng);
        let predictor = PredictorParams::init(dims, rng);
        let student_head = HeadParams::init(dims, rng);
        Ok(ModelState {
            teacher: student.clone(),
            teacher_head: student_head.clone(),
            student,
            predictor,
            student_head,
            center: CenterState::new(dims.k, center_momentum),
        })
    }
}

// ---------------------------------------------------------------------------
// Named parameter traversal (canonical order for optimizer / EMA / IO).
// ---------------------------------------------------------------------------

impl EncoderParams {
    pub fn for_each<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Array2<f64>)) {
        f(format!("{prefix}.patch_w"), &self.patch_w);
        f(format!("{prefix}.patch_b"), &self.patch_b);
        f(format!("{prefix}.pos"), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("{prefix}.blocks.{i}");
            f(format!("{p}.ln1.gamma"), &b.ln1.gamma);
            f(format!("{p}.ln1.beta"), &b.ln1.beta);
            f(format!("{p}.wq"), &b.wq);
            f(format!("{p}.bq"), &b.bq);
            f(format!("{p}.wk"), &b.wk);
            f(format!("{p}.bk"), &b.bk);
            f(format!("{p}.wv"), &b.wv);
            f(format!("{p}.bv"), &b.bv);
            f(format!("{p}.wo"), &b.wo);
            f(format!("{p}.bo"), &b.bo);
            f(format!("{p}.ln2.gamma"), &b.ln2.gamma);
            f(format!("{p}.ln2.beta"), &b.ln2.beta);
            f(format!("{p}.ffn_w1"), &b.ffn_w1);
            f(format!("{p}.ffn_b1"), &b.ffn_b1);
            f(format!("{p}.ffn_w2"), &b.ffn_w2);
            f(format!("{p}.ffn_b2"), &b.ffn_b2);
        }
        f(format!("{prefix}.norm.gamma"), &self.norm.gamma);
        f(format!("{prefix}.norm.beta"), &self.norm.beta);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(format!("{prefix}.patch_w"), &mut self.patch_w);
        f(format!("{prefix}.patch_b"), &mut self.patch_b);
        f(format!("{prefix}.pos"), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("{prefix}.blocks.{i}");
            f(format!("{p}.ln1.gamma"), &mut b.ln1.gamma);
            f(format!("{p}.ln1.beta"), &mut b.ln1.beta);
            f(format!("{p}.wq"), &mut b.wq);
            f(format!("{p}.bq"), &mut b.bq);
            f(format!("{p}.wk"), &mut b.wk);
            f(format!("{p}.bk"), &mut b.bk);
            f(format!("{p}.wv"), &mut b.wv);
            f(format!("{p}.bv"), &mut b.bv);
            f(format!("{p}.wo"), &mut b.wo);
            f(format!("{p}.bo"), &mut b.bo);
            f(format!("{p}.ln2.gamma"), &mut b.ln2.gamma);
            f(format!("{p}.ln2.beta"), &mut b.ln2.beta);
            f(format!("{p}.ffn_w1"), &mut b.ffn_w1);
            f(format!("{p}.ffn_b1"), &mut b.ffn_b1);
            f(format!("{p}.ffn_w2"), &mut b.ffn_w2);
            f(format!("{p}.ffn_b2"), &mut b.ffn_b2);
        }
        f(format!("{prefix}.norm.gamma"), &mut self.norm.gamma);
        f(format!("{prefix}.norm.beta"), &mut self.norm.beta);
    }
}

impl PredictorParams {
    pub fn for_each<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Array2<f64>)) {
        f(format!("{prefix}.in_w"), &self.in_w);
        f(format!("{prefix}.in_b"), &self.in_b);
        f(format!("{prefix}.mask_token"), &self.mask_token);
        f(format!("{prefix}.pos"), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("{prefix}.blocks.{i}");
            f(format!("{p}.ln1.gamma"), &b.ln1.gamma);
            f(format!("{p}.ln1.beta"), &b.ln1.beta);
            f(format!("{p}.wq"), &b.wq);
            f(format!("{p}.bq"), &b.bq);
            f(format!("{p}.wk"), &b.wk);
            f(format!("{p}.bk"), &b.bk);
            f(format!("{p}.wv"), &b.wv);
            f(format!("{p}.bv"), &b.bv);
            f(format!("{p}.wo"), &b.wo);
            f(format!("{p}.bo"), &b.bo);
            f(format!("{p}.ln2.gamma"), &b.ln2.gamma);
            f(format!("{p}.ln2.beta"), &b.ln2.beta);
            f(format!("{p}.ffn_w1"), &b.ffn_w1);
            f(format!("{p}.ffn_b1"), &b.ffn_b1);
            f(format!("{p}.ffn_w2"), &b.ffn_w2);
            f(format!("{p}.ffn_b2"), &b.ffn_b2);
        }
        f(format!("{prefix}.norm.gamma"), &self.norm.gamma);
        f(format!("{prefix}.norm.beta"), &self.norm.beta);
        f(format!("{prefix}.out_w"), &self.out_w);
        f(format!("{prefix}.out_b"), &self.out_b);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(format!("{prefix}.in_w"), &mut self.in_w);
        f(format!("{prefix}.in_b"), &mut self.in_b);
        f(format!("{prefix}.mask_token"), &mut self.mask_token);
        f(format!("{prefix}.pos"), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("{prefix}.blocks.{i}");
            f(format!("{p}.ln1.gamma"), &mut b.ln1.gamma);
            f(format!("{p}.ln1.beta"), &mut b.ln1.beta);
            f(format!("{p}.wq"), &mut b.wq);
            f(format!("{p}.bq"), &mut b.bq);
            f(format!("{p}.wk"), &mut b.wk);
            f(format!("{p}.bk"), &mut b.bk);
            f(format!("{p}.wv"), &mut b.wv);
            f(format!("{p}.bv"), &mut b.bv);
            f(format!("{p}.wo"), &mut b.wo);
            f(format!("{p}.bo"), &mut b.bo);
            f(format!("{p}.ln2.gamma"), &mut b.ln2.gamma);
            f(format!("{p}.ln2.beta"), &mut b.ln2.beta);
            f(format!("{p}.ffn_w1"), &mut b.ffn_w1);
            f(format!("{p}.ffn_b1"), &mut b.ffn_b1);
            f(format!("{p}.ffn_w2"), &mut b.ffn_w2);
            f(format!("{p}.ffn_b2"), &mut b.ffn_b2);
        }
        f(format!("{prefix}.norm.gamma"), &mut self.norm.gamma);
        f(format!("{prefix}.norm.beta"), &mut self.norm.beta);
        f(format!("{prefix}.out_w"), &mut self.out_w);
        f(format!("{prefix}.out_b"), &mut self.out_b);
    }
}

impl HeadParams {
    pub fn for_each<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Array2<f64>)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
        f(format!("{prefix}.w3"), &self.w3);
        f(format!("{prefix}.b3"), &self.b3);
        f(format!("{prefix}.wn_v"), &self.wn_v);
        f(format!("{prefix}.wn_g"), &self.wn_g);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
        f(format!("{prefix}.w3"), &mut self.w3);
        f(format!("{prefix}.b3"), &mut self.b3);
        f(format!("{prefix}.wn_v"), &mut self.wn_v);
        f(format!("{prefix}.wn_g"), &mut self.wn_g);
    }
}

// ---------------------------------------------------------------------------
// Graph bindings (NodeId mirrors of the parameter structs).
// ---------------------------------------------------------------------------

pub struct BlockNodes {
    ln1: (NodeId, NodeId),
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln2: (NodeId, NodeId),
    ffn_w1: NodeId,
    ffn_b1: NodeId,
    ffn_w2: NodeId,
    ffn_b2: NodeId,
}

pub struct EncoderNodes {
    patch_w: NodeId,
    patch_b: NodeId,
    pos: NodeId,
    blocks: Vec<BlockNodes>,
    norm: (NodeId, NodeId),
    n_heads: usize,
}

pub struct PredictorNodes {
    in_w: NodeId,
    in_b: NodeId,
    pub mask_token: NodeId,
    pub pos: NodeId,
    blocks: Vec<BlockNodes>,
    norm: (NodeId, NodeId),
    out_w: NodeId,
    out_b: NodeId,
    n_heads: usize,
}

pub struct HeadNodes {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
    w3: NodeId,
    b3: NodeId,
    wn_v: NodeId,
    wn_g: NodeId,
    gain_trainable: bool,
}

fn bind(g: &mut Graph, a: &Array2<f64>, trainable: bool) -> NodeId {
    if trainable {
        g.leaf(a.clone())
    } else {
        g.constant(a.clone())
    }
}

fn bind_block(g: &mut Graph, b: &BlockParams, t: bool) -> BlockNodes {
    BlockNodes {
        ln1: (bind(g, &b.ln1.gamma, t), bind(g, &b.ln1.beta, t)),
        wq: bind(g, &b.wq, t),
        bq: bind(g, &b.bq, t),
        wk: bind(g, &b.wk, t),
        bk: bind(g, &b.bk, t),
        wv: bind(g, &b.wv, t),
        bv: bind(g, &b.bv, t),
        wo: bind(g, &b.wo, t),
        bo: bind(g, &b.bo, t),
        ln2: (bind(g, &b.ln2.gamma, t), bind(g, &b.ln2.beta, t)),
        ffn_w1: bind(g, &b.ffn_w1, t),
        ffn_b1: bind(g, &b.ffn_b1, t),
        ffn_w2: bind(g, &b.ffn_w2, t),
        ffn_b2: bind(g, &b.ffn_b2, t),
    }
}

pub fn bind_encoder(g: &mut Graph, p: &EncoderParams, trainable: bool) -> EncoderNodes {
    EncoderNodes {
        patch_w: bind(g, &p.patch_w, trainable),
        patch_b: bind(g, &p.patch_b, trainable),
        pos: bind(g, &p.pos, trainable),
        blocks: p
            .blocks
            .iter()
            .map(|b| bind_block(g, b, trainable))
            .collect(),
        norm: (
            bind(g, &p.norm.gamma, trainable),
            bind(g, &p.norm.beta, trainable),
        ),
        n_heads: p.n_heads,
    }
}

pub fn bind_predictor(g: &mut Graph, p: &PredictorParams, trainable: bool) -> PredictorNodes {
    PredictorNodes {
        in_w: bind(g, &p.in_w, trainable),
        in_b: bind(g, &p.in_b, trainable),
        mask_token: bind(g, &p.mask_token, trainable),
        pos: bind(g, &p.pos, trainable),
        blocks: p
            .blocks
            .iter()
            .map(|b| bind_block(g, b, trainable))
            .collect(),
        norm: (
            bind(g, &p.norm.gamma, trainable),
            bind(g, &p.norm.beta, trainable),
        ),
        out_w: bind(g, &p.out_w, trainable),
        out_b: bind(g, &p.out_b, trainable),
        n_heads: p.n_heads,
    }
}

pub fn bind_head(
    g: &mut Graph,
    p: &HeadParams,
    trainable: bool,
    gain_trainable: bool,
) -> HeadNodes {
    HeadNodes {
        w1: bind(g, &p.w1, trainable),
        b1: bind(g, &p.b1, trainable),
        w2: bind(g, &p.w2, trainable),
        b2: bind(g, &p.b2, trainable),
        w3: bind(g, &p.w3, trainable),
        b3: bind(g, &p.b3, trainable),
        wn_v: bind(g, &p.wn_v, trainable),
        wn_g: bind(g, &p.wn_g, trainable && gain_trainable),
        gain_trainable,
    }
}

impl BlockNodes {
    fn collect_ids(&self, out: &mut Vec<NodeId>) {
        out.extend([
            self.ln1.0, self.ln1.1, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
            self.wo, self.bo, self.ln2.0, self.ln2.1, self.ffn_w1, self.ffn_b1, self.ffn_w2,
            self.ffn_b2,
        ]);
    }
}

impl EncoderNodes {
    /// Node ids in the same order `EncoderParams::for_each` visits.
    pub fn collect_ids(&self, out: &mut Vec<NodeId>) {
        out.push(self.patch_w);
        out.push(self.patch_b);
        out.push(self.pos);
        for b in &self.blocks {
            b.collect_ids(out);
        }
        out.push(self.norm.0);
        out.push(self.norm.1);
    }
}

impl PredictorNodes {
    pub fn collect_ids(&self, out: &mut Vec<NodeId>) {
        out.push(self.in_w);
        out.push(self.in_b);
        out.push(self.mask_token);
        out.push(self.pos);
        for b in &self.blocks {
            b.collect_ids(out);
        }
        out.push(self.norm.0);
        out.push(self.norm.1);
        out.push(self.out_w);
        out.push(self.out_b);
    }
}

impl HeadNodes {
    /// Trainable node ids; the gain is included only when trainable so
    /// the list lines up with the optimizer's parameter set.
    pub fn collect_ids(&self, out: &mut Vec<NodeId>) {
        out.extend([self.w1, self.b1, self.w2, self.b2, self.w3, self.b3, self.wn_v]);
        if self.gain_trainable {
            out.push(self.wn_g);
        }
    }
}

// ---------------------------------------------------------------------------
// Forward passes.
// ---------------------------------------------------------------------------

fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let y = g.matmul(x, w);
    g.add_row_vec(y, b)
}

fn attention(g: &mut Graph, b: &BlockNodes, x: NodeId, n_heads: usize) -> NodeId {
    let d = g.value(x).ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(g, x, b.wq, b.bq);
    let k = linear(g, x, b.wk, b.bk);
    let v = linear(g, x, b.wv, b.bv);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scaled = g.scale(scores, scale);
        let attn = g.softmax_rows(scaled);
        heads.push(g.matmul(attn, vh));
    }
    let cat = g.concat_cols(&heads);
    linear(g, cat, b.wo, b.bo)
}

fn block_forward(g: &mut Graph, b: &BlockNodes, x: NodeId, n_heads: usize) -> NodeId {
    // Pre-norm residual block.
    let h = g.layer_norm(x, b.ln1.0, b.ln1.1);
    let a = attention(g, b, h, n_heads);
    let x = g.add(x, a);
    let h = g.layer_norm(x, b.ln2.0, b.ln2.1);
    let f = linear(g, h, b.ffn_w1, b.ffn_b1);
    let f = g.gelu(f);
    let f = linear(g, f, b.ffn_w2, b.ffn_b2);
    g.add(x, f)
}

/// Encoder forward on the graph. `positions` maps each input row to its
/// grid cell (positional-table row); encodings are added before any
/// partitioning, so a visible subset keeps its original positions.
pub fn encoder_forward(
    g: &mut Graph,
    e: &EncoderNodes,
    patches: NodeId,
    positions: &[usize],
) -> NodeId {
    let mut x = linear(g, patches, e.patch_w, e.patch_b);
    let pos_rows = g.gather_rows(e.pos, positions);
    x = g.add(x, pos_rows);
    for b in &e.blocks {
        x = block_forward(g, b, x, e.n_heads);
    }
    g.layer_norm(x, e.norm.0, e.norm.1)
}

/// Predictor forward: project visible latents, splice in the shared mask
/// token at masked slots, add the predictor's positional rows, run the
/// blocks and return projections of the masked rows only (in `masked`
/// order). `positions[i]` is the grid cell of sequence slot `i`.
pub fn predictor_forward(
    g: &mut Graph,
    p: &PredictorNodes,
    z_visible: NodeId,
    partition: &MaskPartition,
    positions: &[usize],
    pos_at_all_slots: bool,
) -> NodeId {
    let zv = linear(g, z_visible, p.in_w, p.in_b);
    let mut x = g.scatter_fill(zv, p.mask_token, &partition.visible, &partition.masked);
    let pos_rows = g.gather_rows(p.pos, positions);
    let pos_rows = if pos_at_all_slots {
        pos_rows
    } else {
        // Location information only at masked slots.
        let mut factors = vec![0.0; partition.n_total];
        for &i in &partition.masked {
            factors[i] = 1.0;
        }
        g.row_scale(pos_rows, &factors)
    };
    x = g.add(x, pos_rows);
    for b in &p.blocks {
        x = block_forward(g, b, x, p.n_heads);
    }
    x = g.layer_norm(x, p.norm.0, p.norm.1);
    let masked = g.gather_rows(x, &partition.masked);
    linear(g, masked, p.out_w, p.out_b)
}

/// Head forward: MLP, l2-normalized bottleneck, weight-normalized output.
pub fn head_forward_on(g: &mut Graph, h: &HeadNodes, z: NodeId) -> NodeId {
    let x = linear(g, z, h.w1, h.b1);
    let x = g.gelu(x);
    let x = linear(g, x, h.w2, h.b2);
    let x = g.gelu(x);
    let x = linear(g, x, h.w3, h.b3);
    let bn = g.l2_normalize_rows(x, L2_EPS);
    debug_assert!(g.value(bn).outer_iter().all(|row| {
        let n = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
        (n - 1.0).abs() < 1e-9 || n < 1.0
    }));
    let vdir = g.l2_normalize_rows(h.wn_v, L2_EPS);
    let vt = g.transpose(vdir);
    let logits = g.matmul(bn, vt);
    g.mul_row_vec(logits, h.wn_g)
}

// ---------------------------------------------------------------------------
// Plain-array operation contracts (inference mode).
// ---------------------------------------------------------------------------

/// One latent per input patch: `[n x patch_dim] -> [n x d_model]`.
pub fn encode(
    params: &EncoderParams,
    patches: &Array2<f64>,
    positions: &[usize],
) -> Result<Array2<f64>> {
    if patches.ncols() != params.patch_w.nrows() {
        return Err(Error::Shape(format!(
            "patch dim {} vs projection input {}",
            patches.ncols(),
            params.patch_w.nrows()
        )));
    }
    if patches.nrows() != positions.len() {
        return Err(Error::Shape(format!(
            "{} patches but {} positions",
            patches.nrows(),
            positions.len()
        )));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= params.pos.nrows()) {
        return Err(Error::Shape(format!(
            "position {p} outside table of {} rows",
            params.pos.nrows()
        )));
    }
    let mut g = Graph::new();
    let e = bind_encoder(&mut g, params, false);
    let x = g.constant(patches.clone());
    let out = encoder_forward(&mut g, &e, x, positions);
    Ok(g.value(out).clone())
}

/// Predict teacher latents for the masked positions from visible-patch
/// latents: returns `[|masked| x d_model]` rows in masked order.
pub fn predict_masked(
    params: &PredictorParams,
    z_visible: &Array2<f64>,
    partition: &MaskPartition,
) -> Result<Array2<f64>> {
    if partition.masked.is_empty() {
        return Err(Error::InvalidArg("nothing to predict: empty mask".into()));
    }
    partition.validate()?;
    if z_visible.nrows() != partition.visible.len() {
        return Err(Error::Shape(format!(
            "{} visible latents vs partition with {}",
            z_visible.nrows(),
            partition.visible.len()
        )));
    }
    if z_visible.ncols() != params.in_w.nrows() {
        return Err(Error::Shape(format!(
            "latent dim {} vs predictor input {}",
            z_visible.ncols(),
            params.in_w.nrows()
        )));
    }
    if partition.n_total > params.pos.nrows() {
        return Err(Error::Shape(format!(
            "sequence of {} exceeds positional table of {} rows",
            partition.n_total,
            params.pos.nrows()
        )));
    }
    let positions: Vec<usize> = (0..partition.n_total).collect();
    let mut g = Graph::new();
    let p = bind_predictor(&mut g, params, false);
    let zv = g.constant(z_visible.clone());
    let out = predictor_forward(&mut g, &p, zv, partition, &positions, true);
    Ok(g.value(out).clone())
}

/// Project latents to `K` logits (no softmax).
pub fn head_forward(params: &HeadParams, z: &Array2<f64>) -> Result<Array2<f64>> {
    if z.ncols() != params.w1.nrows() {
        return Err(Error::Shape(format!(
            "latent dim {} vs head input {}",
            z.ncols(),
            params.w1.nrows()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite head input".into()));
    }
    let mut g = Graph::new();
    let h = bind_head(&mut g, params, false, false);
    let zn = g.constant(z.clone());
    let out = head_forward_on(&mut g, &h, zn);
    Ok(g.value(out).clone())
}
