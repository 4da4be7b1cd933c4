//! The counting forward pass: feature enhancer, query selection, decoder,
//! similarity matrix and count enumeration.
//!
//! Layer blocks are residual (x + block(x)) throughout, so zeroing a
//! block's weights turns it into a passthrough; tests lean on that to pin
//! the similarity equation. The whole forward is a deterministic pure
//! function of (inputs, parameters, config).

use serde::{Deserialize, Serialize};

use crate::attention::{attention_leaves, inject_level_node, injection_leaves, mha_node, AttentionNodes, InjectionNodes};
use crate::autodiff::{NodeId, Tape};
use crate::encoders::{
    box_to_feature_coords, map_to_tokens, roi_pool_weights, ExemplarBoxes, FeaturePyramid,
    TokenMatrix, TokenRole,
};
use crate::error::{Error, Result};
use crate::model::{DecoderParams, EnhancerParams, FfnParams, ModelConfig, ModelParams};
use crate::tensor::{self, Tensor};

/// Sigmoid-activated token/prompt confidences for the k selected queries,
/// plus the query provenance and predicted centers.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    /// k x (p+q), entries strictly inside (0, 1).
    pub y: Tensor,
    /// Image-token index each selected query came from.
    pub selected: Vec<usize>,
    /// k x 2 normalized (x, y) centers.
    pub centers: Tensor,
}

impl SimilarityMatrix {
    pub fn new(y: Tensor, selected: Vec<usize>, centers: Tensor) -> Result<Self> {
        if y.rank() != 2 {
            return Err(Error::shape(
                "similarity_matrix",
                format!("expected rank 2, got {:?}", y.dims()),
            ));
        }
        let k = y.dims()[0];
        if selected.len() != k || centers.dims() != [k, 2] {
            return Err(Error::shape(
                "similarity_matrix",
                format!(
                    "k {} vs {} selected and centers {:?}",
                    k,
                    selected.len(),
                    centers.dims()
                ),
            ));
        }
        if y.data().iter().any(|&v| v <= 0.0 || v >= 1.0) {
            return Err(Error::arg(
                "similarity_matrix",
                "entries must lie strictly inside (0, 1)".to_string(),
            ));
        }
        Ok(SimilarityMatrix { y, selected, centers })
    }

    pub fn k(&self) -> usize {
        self.y.dims()[0]
    }

    pub fn prompt_width(&self) -> usize {
        self.y.dims()[1]
    }

    /// Confidence of one selected token: max over its prompt columns.
    pub fn token_confidence(&self, row: usize) -> f64 {
        self.y
            .row(row)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest entry of the matrix; drives adaptive thresholding.
    pub fn max_confidence(&self) -> f64 {
        (0..self.k())
            .map(|i| self.token_confidence(i))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Result of enumerating tokens above a confidence threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountResult {
    pub count: usize,
    /// Rows of the similarity matrix that were kept (indices into the
    /// selected-query order).
    pub kept: Vec<usize>,
    /// Per-row confidence, max over prompt columns.
    pub confidences: Vec<f64>,
    pub threshold: f64,
}

/// Where each image token sits on the fused grid; all fused levels share
/// the query grid, so one (row, col) cell per token suffices.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub grid: (usize, usize),
    pub positions: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub sim: SimilarityMatrix,
    pub token_grid: TokenGrid,
    pub n_tokens: usize,
}

pub(crate) struct FfnNodes {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

fn ffn_leaves(tape: &mut Tape, p: &FfnParams) -> FfnNodes {
    FfnNodes {
        w1: tape.leaf(p.w1.clone()),
        b1: tape.leaf(p.b1.clone()),
        w2: tape.leaf(p.w2.clone()),
        b2: tape.leaf(p.b2.clone()),
    }
}

fn ffn_block(tape: &mut Tape, x: NodeId, f: &FfnNodes) -> Result<NodeId> {
    let h = tape.matmul(x, f.w1)?;
    let h = tape.broadcast_add_row(h, f.b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, f.w2)?;
    tape.broadcast_add_row(o, f.b2)
}

fn residual_mha(tape: &mut Tape, x: NodeId, kv: NodeId, a: &AttentionNodes) -> Result<NodeId> {
    let out = mha_node(tape, x, kv, a)?;
    tape.add(x, out)
}

fn residual_ffn(tape: &mut Tape, x: NodeId, f: &FfnNodes) -> Result<NodeId> {
    let out = ffn_block(tape, x, f)?;
    tape.add(x, out)
}

pub(crate) struct EnhancerLayerNodes {
    img_self: AttentionNodes,
    prompt_self: AttentionNodes,
    img_cross: AttentionNodes,
    prompt_cross: AttentionNodes,
    img_ffn: FfnNodes,
    prompt_ffn: FfnNodes,
}

pub(crate) struct EnhancerNodes {
    layers: Vec<EnhancerLayerNodes>,
}

pub(crate) fn enhancer_leaves(tape: &mut Tape, p: &EnhancerParams) -> EnhancerNodes {
    EnhancerNodes {
        layers: p
            .layers
            .iter()
            .map(|l| EnhancerLayerNodes {
                img_self: attention_leaves(tape, &l.img_self),
                prompt_self: attention_leaves(tape, &l.prompt_self),
                img_cross: attention_leaves(tape, &l.img_cross),
                prompt_cross: attention_leaves(tape, &l.prompt_cross),
                img_ffn: ffn_leaves(tape, &l.img_ffn),
                prompt_ffn: ffn_leaves(tape, &l.prompt_ffn),
            })
            .collect(),
    }
}

/// Enhancer forward on the tape. Per layer: prompt self-attention over the
/// concatenated [exemplar; text] tokens, image self-attention, then the
/// bidirectional cross block (both directions read the layer-entry values),
/// then the feed-forwards. Every block is residual.
pub(crate) fn enhancer_nodes(
    tape: &mut Tape,
    img: NodeId,
    z_v: NodeId,
    z_t: NodeId,
    nodes: &EnhancerNodes,
) -> Result<(NodeId, NodeId)> {
    let mut prompt = tape.concat_rows(z_v, z_t)?;
    let mut img = img;
    for layer in &nodes.layers {
        prompt = residual_mha(tape, prompt, prompt, &layer.prompt_self)?;
        img = residual_mha(tape, img, img, &layer.img_self)?;
        let img_in = img;
        let prompt_in = prompt;
        img = residual_mha(tape, img_in, prompt_in, &layer.img_cross)?;
        prompt = residual_mha(tape, prompt_in, img_in, &layer.prompt_cross)?;
        img = residual_ffn(tape, img, &layer.img_ffn)?;
        prompt = residual_ffn(tape, prompt, &layer.prompt_ffn)?;
    }
    Ok((prompt, img))
}

/// Jointly refines image tokens and the [exemplar; text] prompt tokens.
/// Returns the fused prompt tokens ((p+q) x d) and image tokens (n x d).
pub fn feature_enhancer(
    z_fused_tokens: &TokenMatrix,
    z_v: &TokenMatrix,
    z_t: &TokenMatrix,
    p: &EnhancerParams,
) -> Result<(TokenMatrix, TokenMatrix)> {
    if z_t.count() == 0 {
        return Err(Error::arg("feature_enhancer", "text tokens must be non-empty".to_string()));
    }
    let d = z_fused_tokens.width();
    if z_t.width() != d || (z_v.count() > 0 && z_v.width() != d) {
        return Err(Error::shape(
            "feature_enhancer",
            format!(
                "token widths differ: image {}, exemplar {}, text {}",
                d,
                z_v.width(),
                z_t.width()
            ),
        ));
    }
    let mut tape = Tape::new();
    let img = tape.leaf(z_fused_tokens.tokens.clone());
    let zv = tape.leaf(if z_v.count() == 0 {
        Tensor::zeros(vec![0, d])
    } else {
        z_v.tokens.clone()
    });
    let zt = tape.leaf(z_t.tokens.clone());
    let nodes = enhancer_leaves(&mut tape, p);
    let (prompt, img) = enhancer_nodes(&mut tape, img, zv, zt, &nodes)?;
    Ok((
        TokenMatrix::new(tape.value(prompt)?.clone(), TokenRole::Fused)?,
        TokenMatrix::new(tape.value(img)?.clone(), TokenRole::Image)?,
    ))
}

/// Picks the k image tokens most similar to the prompt tokens. A token's
/// score is the max over the prompt columns of z_i z_vt^T; k clamps to the
/// token count and ties resolve toward the smaller index.
pub fn select_queries(z_i: &Tensor, z_vt: &Tensor, k: usize) -> Result<(Vec<usize>, Tensor)> {
    if z_vt.rank() != 2 || z_vt.dims()[0] == 0 {
        return Err(Error::arg("select_queries", "empty prompt token set".to_string()));
    }
    if z_i.rank() != 2 || z_i.dims()[0] == 0 {
        return Err(Error::arg("select_queries", "need at least one image token".to_string()));
    }
    let sim = tensor::matmul(z_i, &z_vt.transpose2()?)?;
    let cols = sim.dims()[1];
    let scores: Vec<f64> = (0..sim.dims()[0])
        .map(|i| {
            sim.row(i)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    debug_assert_eq!(cols, z_vt.dims()[0]);
    let indices = tensor::topk_indices(&scores, k)?;
    let queries = tensor::gather_rows(z_i, &indices)?;
    Ok((indices, queries))
}

pub(crate) struct DecoderLayerNodes {
    self_attn: AttentionNodes,
    img_cross: AttentionNodes,
    prompt_cross: AttentionNodes,
    ffn: FfnNodes,
}

pub(crate) struct DecoderNodes {
    layers: Vec<DecoderLayerNodes>,
    center_w: NodeId,
    center_b: NodeId,
}

pub(crate) fn decoder_leaves(tape: &mut Tape, p: &DecoderParams) -> DecoderNodes {
    DecoderNodes {
        layers: p
            .layers
            .iter()
            .map(|l| DecoderLayerNodes {
                self_attn: attention_leaves(tape, &l.self_attn),
                img_cross: attention_leaves(tape, &l.img_cross),
                prompt_cross: attention_leaves(tape, &l.prompt_cross),
                ffn: ffn_leaves(tape, &l.ffn),
            })
            .collect(),
        center_w: tape.leaf(p.center_w.clone()),
        center_b: tape.leaf(p.center_b.clone()),
    }
}

/// Decoder forward on the tape: refines the selected queries, then emits
/// the sigmoid similarity matrix and sigmoid center coordinates.
pub(crate) fn decoder_nodes(
    tape: &mut Tape,
    z_i: NodeId,
    z_vt: NodeId,
    selected: &[usize],
    nodes: &DecoderNodes,
) -> Result<(NodeId, NodeId)> {
    let mut q = tape.gather_rows(z_i, selected)?;
    for layer in &nodes.layers {
        q = residual_mha(tape, q, q, &layer.self_attn)?;
        q = residual_mha(tape, q, z_i, &layer.img_cross)?;
        q = residual_mha(tape, q, z_vt, &layer.prompt_cross)?;
        q = residual_ffn(tape, q, &layer.ffn)?;
    }
    let vt_t = tape.transpose(z_vt)?;
    let logits = tape.matmul(q, vt_t)?;
    let y = tape.sigmoid(logits)?;
    let center_logits = tape.matmul(q, nodes.center_w)?;
    let center_logits = tape.broadcast_add_row(center_logits, nodes.center_b)?;
    let centers = tape.sigmoid(center_logits)?;
    Ok((y, centers))
}

/// Runs the decoder over the selected queries and assembles the similarity
/// matrix with predicted centers.
pub fn decode_similarity(
    z_i: &TokenMatrix,
    z_vt: &TokenMatrix,
    selected: &[usize],
    p: &DecoderParams,
) -> Result<SimilarityMatrix> {
    let mut tape = Tape::new();
    let zi = tape.leaf(z_i.tokens.clone());
    let zvt = tape.leaf(z_vt.tokens.clone());
    let nodes = decoder_leaves(&mut tape, p);
    let (y, centers) = decoder_nodes(&mut tape, zi, zvt, selected, &nodes)?;
    SimilarityMatrix::new(
        tape.value(y)?.clone(),
        selected.to_vec(),
        tape.value(centers)?.clone(),
    )
}

/// Enumerates tokens whose confidence strictly exceeds the threshold.
pub fn count_from_similarity(sm: &SimilarityMatrix, threshold: f64) -> CountResult {
    let confidences: Vec<f64> = (0..sm.k()).map(|i| sm.token_confidence(i)).collect();
    let kept: Vec<usize> = confidences
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > threshold)
        .map(|(i, _)| i)
        .collect();
    CountResult {
        count: kept.len(),
        kept,
        confidences,
        threshold,
    }
}

/// Everything the model consumes for one sample: encoder outputs plus the
/// conditioning. Production features can be loaded from OVCT files; the
/// fixture encoders produce the same shapes.
#[derive(Debug, Clone)]
pub struct ForwardInputs {
    pub z_cv: FeaturePyramid,
    pub z_rs: Tensor,
    pub text: TokenMatrix,
    pub boxes: ExemplarBoxes,
}

pub(crate) struct PipelineNodes {
    pub injection: InjectionNodes,
    pub exemplar: Vec<(NodeId, NodeId)>,
    pub enhancer: EnhancerNodes,
    pub decoder: DecoderNodes,
}

/// Registers every trainable parameter as a tape leaf. Returns the node
/// bundle and the (name, node) registry aligned with the canonical
/// parameter order (encoder parameters are not included: they are frozen
/// inputs to the graph, not leaves).
pub(crate) fn model_leaves(tape: &mut Tape, params: &ModelParams) -> (PipelineNodes, Vec<(String, NodeId)>) {
    let mut registry = Vec::new();
    let injection = injection_leaves(tape, &params.injection);
    for (i, (w, b)) in injection.level_proj.iter().enumerate() {
        registry.push((format!("injection.level{i}.weight"), *w));
        registry.push((format!("injection.level{i}.bias"), *b));
    }
    registry.push(("injection.attn.w_q".to_string(), injection.attention.w_q));
    registry.push(("injection.attn.w_k".to_string(), injection.attention.w_k));
    registry.push(("injection.attn.w_v".to_string(), injection.attention.w_v));
    registry.push(("injection.attn.w_o".to_string(), injection.attention.w_o));

    let exemplar: Vec<(NodeId, NodeId)> = params
        .exemplar_proj
        .levels
        .iter()
        .map(|(w, b)| (tape.leaf(w.clone()), tape.leaf(b.clone())))
        .collect();
    for (i, (w, b)) in exemplar.iter().enumerate() {
        registry.push((format!("exemplar.level{i}.weight"), *w));
        registry.push((format!("exemplar.level{i}.bias"), *b));
    }

    let enhancer = enhancer_leaves(tape, &params.enhancer);
    for (i, l) in enhancer.layers.iter().enumerate() {
        for (tag, a) in [
            ("img_self", &l.img_self),
            ("prompt_self", &l.prompt_self),
            ("img_cross", &l.img_cross),
            ("prompt_cross", &l.prompt_cross),
        ] {
            registry.push((format!("enhancer.l{i}.{tag}.w_q"), a.w_q));
            registry.push((format!("enhancer.l{i}.{tag}.w_k"), a.w_k));
            registry.push((format!("enhancer.l{i}.{tag}.w_v"), a.w_v));
            registry.push((format!("enhancer.l{i}.{tag}.w_o"), a.w_o));
        }
        for (tag, f) in [("img_ffn", &l.img_ffn), ("prompt_ffn", &l.prompt_ffn)] {
            registry.push((format!("enhancer.l{i}.{tag}.w1"), f.w1));
            registry.push((format!("enhancer.l{i}.{tag}.b1"), f.b1));
            registry.push((format!("enhancer.l{i}.{tag}.w2"), f.w2));
            registry.push((format!("enhancer.l{i}.{tag}.b2"), f.b2));
        }
    }

    let decoder = decoder_leaves(tape, &params.decoder);
    for (i, l) in decoder.layers.iter().enumerate() {
        for (tag, a) in [
            ("self_attn", &l.self_attn),
            ("img_cross", &l.img_cross),
            ("prompt_cross", &l.prompt_cross),
        ] {
            registry.push((format!("decoder.l{i}.{tag}.w_q"), a.w_q));
            registry.push((format!("decoder.l{i}.{tag}.w_k"), a.w_k));
            registry.push((format!("decoder.l{i}.{tag}.w_v"), a.w_v));
            registry.push((format!("decoder.l{i}.{tag}.w_o"), a.w_o));
        }
        registry.push((format!("decoder.l{i}.ffn.w1"), l.ffn.w1));
        registry.push((format!("decoder.l{i}.ffn.b1"), l.ffn.b1));
        registry.push((format!("decoder.l{i}.ffn.w2"), l.ffn.w2));
        registry.push((format!("decoder.l{i}.ffn.b2"), l.ffn.b2));
    }
    registry.push(("decoder.center.weight".to_string(), decoder.center_w));
    registry.push(("decoder.center.bias".to_string(), decoder.center_b));

    (
        PipelineNodes {
            injection,
            exemplar,
            enhancer,
            decoder,
        },
        registry,
    )
}

pub(crate) struct ForwardNodes {
    pub y: NodeId,
    pub centers: NodeId,
    pub selected: Vec<usize>,
    pub token_grid: TokenGrid,
    pub n_tokens: usize,
}

/// Builds the full forward graph on `tape`. Query selection and the top-k
/// cut happen on values and re-enter the graph as a row gather, so
/// gradients flow through the selected tokens only.
pub(crate) fn forward_graph(
    tape: &mut Tape,
    inputs: &ForwardInputs,
    nodes: &PipelineNodes,
    cfg: &ModelConfig,
) -> Result<ForwardNodes> {
    let z_rs = &inputs.z_rs;
    if z_rs.rank() != 3 || z_rs.dims()[2] != cfg.d {
        return Err(Error::shape(
            "forward",
            format!("aerial map {:?} vs model width {}", z_rs.dims(), cfg.d),
        ));
    }
    if inputs.z_cv.levels().len() != nodes.injection.level_proj.len() {
        return Err(Error::shape(
            "forward",
            format!(
                "pyramid has {} levels, parameters expect {}",
                inputs.z_cv.levels().len(),
                nodes.injection.level_proj.len()
            ),
        ));
    }
    let (hr, wr) = (z_rs.dims()[0], z_rs.dims()[1]);
    let cells = hr * wr;
    let rs_flat = tape.leaf(map_to_tokens(z_rs)?);

    // Inject the aerial queries into every resized pyramid level.
    let mut fused_levels = Vec::with_capacity(inputs.z_cv.levels().len());
    for (level, proj) in inputs.z_cv.levels().iter().zip(&nodes.injection.level_proj) {
        let resized = tensor::bilinear_resize(&level.map, (hr, wr))?;
        let flat = tape.leaf(map_to_tokens(&resized)?);
        fused_levels.push(inject_level_node(tape, flat, rs_flat, *proj, &nodes.injection.attention)?);
    }

    // Image tokens: fused levels flattened and stacked, level-major.
    let mut img = fused_levels[0];
    for &level in &fused_levels[1..] {
        img = tape.concat_rows(img, level)?;
    }
    let n_tokens = inputs.z_cv.levels().len() * cells;

    // Exemplar tokens from the fused maps: RoIAlign + mean pooling folded
    // into one weight row per (box, level), then the level projection.
    let d = cfg.d;
    let mut z_v = tape.leaf(Tensor::zeros(vec![0, d]));
    for b in inputs.boxes.boxes() {
        for (level_idx, &fused) in fused_levels.iter().enumerate() {
            let fb = box_to_feature_coords(*b, (hr, wr), inputs.z_cv.image_dims());
            let weights = roi_pool_weights(hr, wr, fb, cfg.roi.size, cfg.roi.samples_per_cell)?;
            let wnode = tape.leaf(weights);
            let pooled = tape.matmul(wnode, fused)?;
            let (pw, pb) = nodes.exemplar[level_idx];
            let projected = tape.matmul(pooled, pw)?;
            let token = tape.broadcast_add_row(projected, pb)?;
            z_v = tape.concat_rows(z_v, token)?;
        }
    }

    let zt = tape.leaf(inputs.text.tokens.clone());
    let (z_vt, z_i) = enhancer_nodes(tape, img, z_v, zt, &nodes.enhancer)?;

    let (selected, _) = select_queries(tape.value(z_i)?, tape.value(z_vt)?, cfg.k)?;
    let (y, centers) = decoder_nodes(tape, z_i, z_vt, &selected, &nodes.decoder)?;

    let mut positions = Vec::with_capacity(n_tokens);
    for _ in 0..inputs.z_cv.levels().len() {
        for r in 0..hr {
            for c in 0..wr {
                positions.push((r, c));
            }
        }
    }
    Ok(ForwardNodes {
        y,
        centers,
        selected,
        token_grid: TokenGrid {
            grid: (hr, wr),
            positions,
        },
        n_tokens,
    })
}

/// Full inference pass. Deterministic: identical inputs, parameters and
/// config produce bit-identical output.
pub fn forward(inputs: &ForwardInputs, params: &ModelParams, cfg: &ModelConfig) -> Result<ForwardOutput> {
    cfg.validate()?;
    if inputs.text.count() == 0 {
        return Err(Error::arg("forward", "text conditioning must be non-empty".to_string()));
    }
    let mut tape = Tape::new();
    let (nodes, _) = model_leaves(&mut tape, params);
    let fwd = forward_graph(&mut tape, inputs, &nodes, cfg)?;
    let sim = SimilarityMatrix::new(
        tape.value(fwd.y)?.clone(),
        fwd.selected.clone(),
        tape.value(fwd.centers)?.clone(),
    )?;
    Ok(ForwardOutput {
        sim,
        token_grid: fwd.token_grid,
        n_tokens: fwd.n_tokens,
    })
}
