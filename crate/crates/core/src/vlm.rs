//! Decoder-only vision-language backbone: patch-embedded image tokens, text
//! tokens and a tail of learnable action-query embeddings, with optional
//! low-rank expert adapters on every projection. Two forward paths exist: a
//! tape-based one for training and a cached one for decoding; they are tested
//! to agree.

use crate::corpus::tokenizer::ACT;
use crate::env::Image;
use crate::moe::{
    adapted_linear_mat, adapted_linear_tape, GatingPlan, Lambdas, MoeActive, MoeConfig, ParamVars,
};
use crate::nn::Params;
use crate::tensor::{layer_norm_rows, softmax_rows, Mat, Tape, Var};
use ndarray::{s, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub hidden_d: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub max_sequence: usize,
    pub num_queries_n: usize,
    pub mlp_mult: usize,
    pub scale_head_depth: usize,
    pub scale_head_hidden: usize,
}

impl BackboneConfig {
    /// Small preset sized for single-core CPU runs; the full pipeline trains
    /// in minutes with it.
    pub fn desk(vocab_size: usize) -> Self {
        BackboneConfig {
            layers: 2,
            hidden_d: 48,
            heads: 2,
            vocab_size,
            patch_size: 8,
            image_size: 32,
            max_sequence: 192,
            num_queries_n: 4,
            mlp_mult: 4,
            scale_head_depth: 3,
            scale_head_hidden: 32,
        }
    }

    /// Larger reference preset; not used by the test suite.
    pub fn reference(vocab_size: usize) -> Self {
        BackboneConfig {
            layers: 4,
            hidden_d: 256,
            heads: 4,
            vocab_size,
            patch_size: 8,
            image_size: 64,
            max_sequence: 512,
            num_queries_n: 64,
            mlp_mult: 4,
            scale_head_depth: 4,
            scale_head_hidden: 128,
        }
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_image_tokens(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_d / self.heads
    }

    /// Projection targets that carry expert adapters, with shapes.
    pub fn adapter_targets(&self) -> Vec<(String, usize, usize)> {
        let d = self.hidden_d;
        let mut out = Vec::new();
        for l in 0..self.layers {
            for p in ["q", "k", "v", "o"] {
                out.push((format!("vlm.l{l}.attn.{p}"), d, d));
            }
            out.push((format!("vlm.l{l}.mlp.up"), d, d * self.mlp_mult));
            out.push((format!("vlm.l{l}.mlp.down"), d * self.mlp_mult, d));
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VlmError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("sequence length {len} exceeds maximum {max}")]
    Overflow { len: usize, max: usize },
    #[error("<ACT> not emitted within the decode budget")]
    DecodeTimeout,
    #[error("configuration error: {0}")]
    Config(String),
}

pub fn init_backbone(params: &mut Params, rng: &mut ChaCha8Rng, cfg: &BackboneConfig) {
    let d = cfg.hidden_d;
    params.init_normal(rng, "vlm.tok_emb", cfg.vocab_size, d, 0.02);
    params.init_normal(rng, "vlm.pos_emb", cfg.max_sequence, d, 0.02);
    let side = cfg.patches_per_side();
    params.init_normal(rng, "vlm.img_row_emb", side, d, 0.02);
    params.init_normal(rng, "vlm.img_col_emb", side, d, 0.02);
    params.init_linear(rng, "vlm.patch_proj", 3 * cfg.patch_size * cfg.patch_size, d);
    params.init_normal(rng, "vlm.query_emb", cfg.num_queries_n, d, 0.02);
    for l in 0..cfg.layers {
        params.init_layer_norm(&format!("vlm.l{l}.ln1"), d);
        params.init_layer_norm(&format!("vlm.l{l}.ln2"), d);
        for p in ["q", "k", "v", "o"] {
            params.init_linear(rng, &format!("vlm.l{l}.attn.{p}"), d, d);
        }
        params.init_linear(rng, &format!("vlm.l{l}.mlp.up"), d, d * cfg.mlp_mult);
        params.init_linear(rng, &format!("vlm.l{l}.mlp.down"), d * cfg.mlp_mult, d);
    }
    params.init_layer_norm("vlm.ln_f", d);
    params.init_linear(rng, "vlm.lm_head", d, cfg.vocab_size);
    params.init_linear(rng, "vlm.query_readout", d, d);
    init_scale_head(params, rng, cfg);
}

fn init_scale_head(params: &mut Params, rng: &mut ChaCha8Rng, cfg: &BackboneConfig) {
    let (depth, h, k) = (cfg.scale_head_depth, cfg.scale_head_hidden, 2);
    for i in 0..depth {
        let d_in = if i == 0 { cfg.hidden_d } else { h };
        let d_out = if i == depth - 1 { k } else { h };
        if i == depth - 1 {
            // Zero-init final layer: gating starts exactly uniform.
            params.init_zeros(&format!("vlm.scale_head.{i}.w"), d_in, d_out);
            params.init_zeros(&format!("vlm.scale_head.{i}.b"), 1, d_out);
        } else {
            params.init_linear(rng, &format!("vlm.scale_head.{i}"), d_in, d_out);
        }
    }
}

/// Parameter-name predicates used by the stage plans.
pub fn is_backbone_base(name: &str) -> bool {
    name.starts_with("vlm.") && !is_scale_head(name) && !is_query_io(name)
}

pub fn is_scale_head(name: &str) -> bool {
    name.starts_with("vlm.scale_head.")
}

pub fn is_query_io(name: &str) -> bool {
    name == "vlm.query_emb" || name.starts_with("vlm.query_readout")
}

/// Flattens an image into rows of patch pixels in [-0.5, 0.5].
pub fn image_patches(image: &Image, patch: usize) -> Result<Mat, VlmError> {
    if image.width % patch != 0 || image.height % patch != 0 {
        return Err(VlmError::Shape(format!(
            "image {}x{} not divisible by patch {patch}",
            image.width, image.height
        )));
    }
    let (pw, ph) = (image.width / patch, image.height / patch);
    let mut out = Array2::zeros((pw * ph, 3 * patch * patch));
    for py in 0..ph {
        for px in 0..pw {
            let row = py * pw + px;
            let mut c = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    let [r, g, b] = image.get(px * patch + dx, py * patch + dy);
                    out[[row, c]] = r as f64 / 255.0 - 0.5;
                    out[[row, c + 1]] = g as f64 / 255.0 - 0.5;
                    out[[row, c + 2]] = b as f64 / 255.0 - 0.5;
                    c += 3;
                }
            }
        }
    }
    Ok(out)
}

/// Image token embeddings: linear patch projection plus learned row/column
/// position embeddings.
pub fn encode_image(params: &Params, cfg: &BackboneConfig, image: &Image) -> Result<Mat, VlmError> {
    let patches = image_patches(image, cfg.patch_size)?;
    let mut x = patches.dot(params.get("vlm.patch_proj.w")) + params.get("vlm.patch_proj.b");
    let side = image.width / cfg.patch_size;
    let rows = params.get("vlm.img_row_emb");
    let cols = params.get("vlm.img_col_emb");
    for i in 0..x.nrows() {
        let (r, c) = (i / side, i % side);
        let mut row = x.row_mut(i);
        row += &rows.row(r);
        row += &cols.row(c);
    }
    Ok(x)
}

/// Token embeddings with absolute positions starting at `pos_offset`.
pub fn embed_tokens(params: &Params, ids: &[u32], pos_offset: usize) -> Mat {
    let tok = params.get("vlm.tok_emb");
    let pos = params.get("vlm.pos_emb");
    let d = tok.ncols();
    let mut out = Array2::zeros((ids.len(), d));
    for (i, &id) in ids.iter().enumerate() {
        let mut row = out.row_mut(i);
        row += &tok.row(id as usize);
        row += &pos.row(pos_offset + i);
    }
    out
}

fn query_embeds(params: &Params, pos_offset: usize) -> Mat {
    let q = params.get("vlm.query_emb");
    let pos = params.get("vlm.pos_emb");
    let mut out = q.clone();
    for i in 0..out.nrows() {
        let mut row = out.row_mut(i);
        row += &pos.row(pos_offset + i);
    }
    out
}

fn causal_mask(rows: usize, cols: usize, row_offset: usize) -> Mat {
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        if j <= i + row_offset {
            0.0
        } else {
            -1e9
        }
    })
}

/// Output of the tape forward. Ranges index rows of the full sequence.
pub struct ForwardOutput {
    pub logits: Var,
    pub hidden: Var,
    pub query_hidden: Option<Var>,
    pub text_start: usize,
}

pub struct SeqLayout {
    pub n_image: usize,
    pub n_text: usize,
    pub n_queries: usize,
}

impl SeqLayout {
    pub fn total(&self) -> usize {
        self.n_image + self.n_text + self.n_queries
    }
}

fn check_budget(cfg: &BackboneConfig, total: usize) -> Result<(), VlmError> {
    if total > cfg.max_sequence {
        Err(VlmError::Overflow {
            len: total,
            max: cfg.max_sequence,
        })
    } else {
        Ok(())
    }
}

fn layer_norm_tape(t: &mut Tape, pv: &mut ParamVars, x: Var, name: &str) -> Var {
    let g = pv.var(t, &format!("{name}.g"));
    let b = pv.var(t, &format!("{name}.b"));
    let n = t.layer_norm(x, 1e-5);
    let n = t.mul_row(n, g);
    t.add_row(n, b)
}

fn attention_tape(
    t: &mut Tape,
    pv: &mut ParamVars,
    cfg: &BackboneConfig,
    x: Var,
    layer: usize,
    mask: Var,
    moe: &mut Option<MoeActive>,
) -> Var {
    let pre = format!("vlm.l{layer}.attn");
    let q = adapted_linear_tape(t, pv, x, &format!("{pre}.q"), moe.as_mut());
    let k = adapted_linear_tape(t, pv, x, &format!("{pre}.k"), moe.as_mut());
    let v = adapted_linear_tape(t, pv, x, &format!("{pre}.v"), moe.as_mut());
    let dh = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = t.slice_cols(q, h * dh, (h + 1) * dh);
        let kh = t.slice_cols(k, h * dh, (h + 1) * dh);
        let vh = t.slice_cols(v, h * dh, (h + 1) * dh);
        let kt = t.transpose(kh);
        let mut scores = t.matmul(qh, kt);
        scores = t.scale(scores, 1.0 / (dh as f64).sqrt());
        scores = t.add(scores, mask);
        let att = t.softmax(scores);
        heads.push(t.matmul(att, vh));
    }
    let cat = t.concat_cols(&heads);
    adapted_linear_tape(t, pv, cat, &format!("{pre}.o"), moe.as_mut())
}

/// Training forward over [image tokens ++ text tokens ++ optional queries].
pub fn forward_tape(
    t: &mut Tape,
    pv: &mut ParamVars,
    cfg: &BackboneConfig,
    tokens: &[u32],
    image: Option<&Image>,
    with_queries: bool,
    mut moe: Option<MoeActive>,
) -> Result<(ForwardOutput, SeqLayout), VlmError> {
    let mut parts: Vec<Var> = Vec::new();
    let n_image = if let Some(img) = image {
        let patches = t.constant(image_patches(img, cfg.patch_size)?);
        let w = pv.var(t, "vlm.patch_proj.w");
        let b = pv.var(t, "vlm.patch_proj.b");
        let mut x = t.matmul(patches, w);
        x = t.add_row(x, b);
        let side = cfg.patches_per_side();
        let row_idx: Vec<usize> = (0..side * side).map(|i| i / side).collect();
        let col_idx: Vec<usize> = (0..side * side).map(|i| i % side).collect();
        let rows = pv.var(t, "vlm.img_row_emb");
        let cols = pv.var(t, "vlm.img_col_emb");
        let rp = t.gather_rows(rows, &row_idx);
        let cp = t.gather_rows(cols, &col_idx);
        x = t.add(x, rp);
        x = t.add(x, cp);
        parts.push(x);
        side * side
    } else {
        0
    };
    let layout = SeqLayout {
        n_image,
        n_text: tokens.len(),
        n_queries: if with_queries { cfg.num_queries_n } else { 0 },
    };
    check_budget(cfg, layout.total())?;

    let ids: Vec<usize> = tokens.iter().map(|&i| i as usize).collect();
    let tok_emb = pv.var(t, "vlm.tok_emb");
    let pos_emb = pv.var(t, "vlm.pos_emb");
    let text = t.gather_rows(tok_emb, &ids);
    let text_pos: Vec<usize> = (n_image..n_image + tokens.len()).collect();
    let tp = t.gather_rows(pos_emb, &text_pos);
    parts.push(t.add(text, tp));
    if with_queries {
        let qe = pv.var(t, "vlm.query_emb");
        let qpos: Vec<usize> = (n_image + tokens.len()..layout.total()).collect();
        let qp = t.gather_rows(pos_emb, &qpos);
        parts.push(t.add(qe, qp));
    }
    let mut x = t.concat_rows(&parts);

    let total = layout.total();
    let mask = t.constant(causal_mask(total, total, 0));
    for l in 0..cfg.layers {
        let n1 = layer_norm_tape(t, pv, x, &format!("vlm.l{l}.ln1"));
        let att = attention_tape(t, pv, cfg, n1, l, mask, &mut moe);
        x = t.add(x, att);
        let n2 = layer_norm_tape(t, pv, x, &format!("vlm.l{l}.ln2"));
        let up = adapted_linear_tape(t, pv, n2, &format!("vlm.l{l}.mlp.up"), moe.as_mut());
        let act = t.silu(up);
        let down = adapted_linear_tape(t, pv, act, &format!("vlm.l{l}.mlp.down"), moe.as_mut());
        x = t.add(x, down);
    }
    let hidden = layer_norm_tape(t, pv, x, "vlm.ln_f");

    let text_rows = t.slice_rows(hidden, n_image, n_image + tokens.len());
    let wh = pv.var(t, "vlm.lm_head.w");
    let bh = pv.var(t, "vlm.lm_head.b");
    let mut logits = t.matmul(text_rows, wh);
    logits = t.add_row(logits, bh);

    let query_hidden = if with_queries {
        let qrows = t.slice_rows(hidden, n_image + tokens.len(), total);
        let wr = pv.var(t, "vlm.query_readout.w");
        let br = pv.var(t, "vlm.query_readout.b");
        let mut qh = t.matmul(qrows, wr);
        qh = t.add_row(qh, br);
        Some(qh)
    } else {
        None
    };
    Ok((
        ForwardOutput {
            logits,
            hidden,
            query_hidden,
            text_start: n_image,
        },
        layout,
    ))
}

/// Per-token gating coefficients on the tape: base forward with adapters off,
/// scale head over final hidden states, softmax over experts.
pub fn compute_gating_tape(
    t: &mut Tape,
    pv: &mut ParamVars,
    cfg: &BackboneConfig,
    tokens: &[u32],
    image: Option<&Image>,
    with_queries: bool,
) -> Result<Var, VlmError> {
    let (base, _) = forward_tape(t, pv, cfg, tokens, image, with_queries, None)?;
    Ok(scale_head_tape(t, pv, cfg, base.hidden))
}

pub fn scale_head_tape(t: &mut Tape, pv: &mut ParamVars, cfg: &BackboneConfig, hidden: Var) -> Var {
    let mut x = hidden;
    for i in 0..cfg.scale_head_depth {
        let w = pv.var(t, &format!("vlm.scale_head.{i}.w"));
        let b = pv.var(t, &format!("vlm.scale_head.{i}.b"));
        x = t.matmul(x, w);
        x = t.add_row(x, b);
        if i + 1 < cfg.scale_head_depth {
            x = t.silu(x);
        }
    }
    t.softmax(x)
}

pub fn scale_head_mat(params: &Params, cfg: &BackboneConfig, hidden: &Mat) -> Mat {
    let mut x = hidden.clone();
    for i in 0..cfg.scale_head_depth {
        x = x.dot(params.get(&format!("vlm.scale_head.{i}.w")))
            + params.get(&format!("vlm.scale_head.{i}.b"));
        if i + 1 < cfg.scale_head_depth {
            x.mapv_inplace(|v| v / (1.0 + (-v).exp()));
        }
    }
    softmax_rows(&x)
}

/// Mean cross-entropy over positions whose *target* is mask-supervised.
/// Position i predicts token i+1. Empty mask yields zero.
pub fn lm_loss(t: &mut Tape, logits: Var, tokens: &[u32], loss_mask: &[bool]) -> Var {
    let mut idx = Vec::new();
    for i in 0..tokens.len().saturating_sub(1) {
        if loss_mask[i + 1] {
            idx.push((i, tokens[i + 1] as usize));
        }
    }
    if idx.is_empty() {
        return t.constant(crate::tensor::scalar(0.0));
    }
    let lp = t.log_softmax(logits);
    t.neg_gather_mean(lp, &idx)
}

// ---------------------------------------------------------------------------
// Cached inference path.

#[derive(Clone, Default)]
struct LayerCache {
    k: Option<Mat>,
    v: Option<Mat>,
}

#[derive(Clone)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    pub len: usize,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        KvCache {
            layers: vec![LayerCache::default(); layers],
            len: 0,
        }
    }
}

fn append(cache: &mut Option<Mat>, new: &Mat) -> Mat {
    let merged = match cache.take() {
        Some(old) => ndarray::concatenate(Axis(0), &[old.view(), new.view()]).unwrap(),
        None => new.clone(),
    };
    *cache = Some(merged.clone());
    merged
}

fn ln_mat(params: &Params, x: &Mat, name: &str) -> Mat {
    let n = layer_norm_rows(x, 1e-5);
    n * params.get(&format!("{name}.g")) + params.get(&format!("{name}.b"))
}

/// Advances the cache by `x_new` embedded rows; returns their final-LN hidden
/// states. Lambdas::Value rows must align with `x_new`.
pub fn forward_cached(
    params: &Params,
    cfg: &BackboneConfig,
    x_new: &Mat,
    cache: &mut KvCache,
    moe: Option<(&MoeConfig, &Lambdas)>,
) -> Mat {
    let mut x = x_new.clone();
    let t_new = x.nrows();
    let offset = cache.len;
    let dh = cfg.head_dim();
    for l in 0..cfg.layers {
        let n1 = ln_mat(params, &x, &format!("vlm.l{l}.ln1"));
        let pre = format!("vlm.l{l}.attn");
        let q = adapted_linear_mat(params, &n1, &format!("{pre}.q"), moe);
        let k_new = adapted_linear_mat(params, &n1, &format!("{pre}.k"), moe);
        let v_new = adapted_linear_mat(params, &n1, &format!("{pre}.v"), moe);
        let k = append(&mut cache.layers[l].k, &k_new);
        let v = append(&mut cache.layers[l].v, &v_new);
        let mask = causal_mask(t_new, k.nrows(), offset);
        let mut out = Array2::zeros((t_new, cfg.hidden_d));
        for h in 0..cfg.heads {
            let qh = q.slice(s![.., h * dh..(h + 1) * dh]);
            let kh = k.slice(s![.., h * dh..(h + 1) * dh]);
            let vh = v.slice(s![.., h * dh..(h + 1) * dh]);
            let scores = qh.dot(&kh.t()) / (dh as f64).sqrt() + &mask;
            let att = softmax_rows(&scores).dot(&vh);
            out.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&att);
        }
        let att = adapted_linear_mat(params, &out, &format!("{pre}.o"), moe);
        x = x + att;
        let n2 = ln_mat(params, &x, &format!("vlm.l{l}.ln2"));
        let mut up = adapted_linear_mat(params, &n2, &format!("vlm.l{l}.mlp.up"), moe);
        up.mapv_inplace(|v| v / (1.0 + (-v).exp()));
        let down = adapted_linear_mat(params, &up, &format!("vlm.l{l}.mlp.down"), moe);
        x = x + down;
    }
    cache.len += t_new;
    ln_mat(params, &x, "vlm.ln_f")
}

pub fn logits_mat(params: &Params, hidden: &Mat) -> Mat {
    hidden.dot(params.get("vlm.lm_head.w")) + params.get("vlm.lm_head.b")
}

fn argmax(row: ndarray::ArrayView1<f64>) -> u32 {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Shared inference state: the adapted cache plus, under learned gating, a
/// parallel base cache feeding the scale head.
pub struct DecodeState<'a> {
    pub params: &'a Params,
    pub cfg: &'a BackboneConfig,
    pub moe_cfg: Option<&'a MoeConfig>,
    pub plan: GatingPlan,
    adapted: KvCache,
    base: Option<KvCache>,
    pub pos: usize,
}

impl<'a> DecodeState<'a> {
    pub fn new(
        params: &'a Params,
        cfg: &'a BackboneConfig,
        moe_cfg: Option<&'a MoeConfig>,
        plan: GatingPlan,
    ) -> Self {
        let base = match (moe_cfg, plan) {
            (Some(_), GatingPlan::LearnedTwoPass) => Some(KvCache::new(cfg.layers)),
            _ => None,
        };
        DecodeState {
            params,
            cfg,
            moe_cfg,
            plan,
            adapted: KvCache::new(cfg.layers),
            base,
            pos: 0,
        }
    }

    /// Feeds embedded rows through the model, handling gating; returns final
    /// hidden states for the new rows.
    pub fn advance(&mut self, x_new: &Mat) -> Mat {
        let lambdas = match (self.moe_cfg, self.plan) {
            (None, _) => None,
            (Some(cfg), GatingPlan::LearnedTwoPass) => {
                let base_hidden = forward_cached(
                    self.params,
                    self.cfg,
                    x_new,
                    self.base.as_mut().unwrap(),
                    None,
                );
                Some((cfg, Lambdas::Value(scale_head_mat(self.params, self.cfg, &base_hidden))))
            }
            (Some(cfg), plan) => Some((
                cfg,
                Lambdas::Fixed(plan.fixed_lambdas(cfg.k_experts).unwrap()),
            )),
        };
        let moe = lambdas.as_ref().map(|(c, l)| (*c, l));
        let h = forward_cached(self.params, self.cfg, x_new, &mut self.adapted, moe);
        self.pos += x_new.nrows();
        h
    }
}

/// Greedy decoding of plain text: stops at (and drops) the first `stop_id`,
/// or returns the whole budget if it never appears.
pub fn greedy_decode_text(
    params: &Params,
    cfg: &BackboneConfig,
    moe_cfg: Option<&MoeConfig>,
    plan: GatingPlan,
    prompt: &[u32],
    image: Option<&Image>,
    max_new: usize,
    stop_id: u32,
) -> Result<Vec<u32>, VlmError> {
    let mut st = DecodeState::new(params, cfg, moe_cfg, plan);
    let mut prefill_parts: Vec<Mat> = Vec::new();
    let n_image = if let Some(img) = image {
        prefill_parts.push(encode_image(params, cfg, img)?);
        cfg.n_image_tokens()
    } else {
        0
    };
    check_budget(cfg, n_image + prompt.len() + max_new)?;
    prefill_parts.push(embed_tokens(params, prompt, n_image));
    let prefill = ndarray::concatenate(
        Axis(0),
        &prefill_parts.iter().map(|m| m.view()).collect::<Vec<_>>(),
    )
    .unwrap();
    let mut hidden = st.advance(&prefill);
    let mut out = Vec::new();
    for _ in 0..max_new {
        let next = argmax(logits_mat(params, &hidden.slice(s![-1.., ..]).to_owned()).row(0));
        if next == stop_id {
            break;
        }
        out.push(next);
        let emb = embed_tokens(params, &[next], n_image + prompt.len() + out.len() - 1);
        hidden = st.advance(&emb);
    }
    Ok(out)
}

/// Greedy decoding until the first emitted <ACT>, then one parallel pass over
/// the N query embeddings. Returns (generated text tokens, latent set N×D).
pub fn greedy_decode_until_act(
    params: &Params,
    cfg: &BackboneConfig,
    moe_cfg: Option<&MoeConfig>,
    plan: GatingPlan,
    prompt: &[u32],
    image: Option<&Image>,
    max_new: usize,
) -> Result<(Vec<u32>, Mat), VlmError> {
    assert!(max_new >= 1);
    let mut st = DecodeState::new(params, cfg, moe_cfg, plan);
    let mut prefill_parts: Vec<Mat> = Vec::new();
    let n_image = if let Some(img) = image {
        prefill_parts.push(encode_image(params, cfg, img)?);
        cfg.n_image_tokens()
    } else {
        0
    };
    check_budget(cfg, n_image + prompt.len() + max_new + 1 + cfg.num_queries_n)?;
    prefill_parts.push(embed_tokens(params, prompt, n_image));
    let prefill = ndarray::concatenate(
        Axis(0),
        &prefill_parts.iter().map(|m| m.view()).collect::<Vec<_>>(),
    )
    .unwrap();
    let mut hidden = st.advance(&prefill);
    let mut response = Vec::new();
    let mut next = argmax(logits_mat(params, &hidden.slice(s![-1.., ..]).to_owned()).row(0));
    let mut emitted_act = next == ACT;
    for _ in 0..max_new {
        if emitted_act {
            break;
        }
        response.push(next);
        let emb = embed_tokens(params, &[next], n_image + prompt.len() + response.len() - 1);
        hidden = st.advance(&emb);
        next = argmax(logits_mat(params, &hidden.slice(s![-1.., ..]).to_owned()).row(0));
        emitted_act = next == ACT;
    }
    if !emitted_act {
        return Err(VlmError::DecodeTimeout);
    }
    // Feed the <ACT> token, then the N queries in a single pass.
    let act_pos = n_image + prompt.len() + response.len();
    let act_emb = embed_tokens(params, &[ACT], act_pos);
    st.advance(&act_emb);
    let q = query_embeds(params, act_pos + 1);
    let qh = st.advance(&q);
    let latents =
        qh.dot(params.get("vlm.query_readout.w")) + params.get("vlm.query_readout.b");
    Ok((response, latents))
}
