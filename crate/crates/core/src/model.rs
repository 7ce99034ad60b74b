//! A miniature decoder-only transformer with a visual-token prefix.
//!
//! Layout of one sequence: `N` visual tokens, then the prompt, then all but
//! the last target token (teacher forcing). Visual tokens see each other
//! bidirectionally; text positions see the whole prefix plus earlier text.
//! Blocks are pre-norm (RMS norm without gain) with GELU MLPs. Every block
//! linear carries an optional low-rank adapter `A · B`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::interp::{FeatureGrid, GridShape};
use crate::tape::{Mat, NodeId, Tape};
use crate::tensor::{log_softmax, SeededRng};

/// Which query row supplies the per-head visual attention tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionQuery {
    #[default]
    LastPrompt,
    MeanPrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    pub grid: GridShape,
    /// Width of the raw per-cell input fed to the patch embedder.
    pub image_channels: usize,
    pub max_text_len: usize,
    pub positional: bool,
    pub attention_query: AttentionQuery,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 32,
            mlp_hidden: 128,
            vocab: 32,
            grid: GridShape::square(4),
            image_channels: 8,
            max_text_len: 8,
            positional: true,
            attention_query: AttentionQuery::LastPrompt,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("mlp_hidden", self.mlp_hidden),
            ("vocab", self.vocab),
            ("image_channels", self.image_channels),
            ("max_text_len", self.max_text_len),
            ("grid", self.grid.tokens()),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn n_visual(&self) -> usize {
        self.grid.tokens()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Names of the adapted linears inside each block, in storage order.
pub const LINEARS: [&str; 6] = ["q", "k", "v", "o", "up", "down"];

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    /// `q, k, v, o` are `d × d`; `up` is `d × hidden`; `down` is `hidden × d`.
    pub linears: [Mat; 6],
}

/// Frozen base parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseParams {
    pub patch: Mat,
    pub tokens: Mat,
    pub positions: Mat,
    pub blocks: Vec<BlockWeights>,
    pub head: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    config: ModelConfig,
    base: BaseParams,
}

fn gaussian(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::new(rows, cols, rng.normal_vec(rows * cols, scale))
}

impl ToyTransformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derive(seed, 0x7E57);
        let d = config.d_model;
        let hid = config.mlp_hidden;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let patch = gaussian(&mut rng, config.image_channels, d, fan(config.image_channels));
        let tokens = gaussian(&mut rng, config.vocab, d, 1.0);
        let positions = gaussian(&mut rng, config.n_visual() + config.max_text_len, d, 0.5);
        let blocks = (0..config.n_layers)
            .map(|_| BlockWeights {
                linears: [
                    gaussian(&mut rng, d, d, fan(d)),
                    gaussian(&mut rng, d, d, fan(d)),
                    gaussian(&mut rng, d, d, fan(d)),
                    gaussian(&mut rng, d, d, fan(d)),
                    gaussian(&mut rng, d, hid, fan(d)),
                    gaussian(&mut rng, hid, d, fan(hid)),
                ],
            })
            .collect();
        let head = gaussian(&mut rng, d, config.vocab, fan(d));
        Ok(Self { config, base: BaseParams { patch, tokens, positions, blocks, head } })
    }

    pub fn from_parts(config: ModelConfig, base: BaseParams) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, base })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn base(&self) -> &BaseParams {
        &self.base
    }

    /// Frozen linear map from raw cell values (`N × c`) to visual tokens (`N × d`).
    pub fn embed_patches(&self, image: &[f64]) -> Result<Vec<f64>> {
        let c = self.config.image_channels;
        if image.len() != self.config.n_visual() * c {
            return Err(invalid(format!(
                "image has {} values, expected {} x {c}",
                image.len(),
                self.config.n_visual()
            )));
        }
        let img = Mat::new(self.config.n_visual(), c, image.to_vec());
        Ok(crate::tape::matmul(&img, &self.base.patch).data)
    }

    /// SHA-256 over every frozen weight, in a fixed order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let b = &self.base;
        let mats = [&b.patch, &b.tokens, &b.positions]
            .into_iter()
            .chain(b.blocks.iter().flat_map(|blk| blk.linears.iter()))
            .chain(std::iter::once(&b.head));
        for m in mats {
            for v in &m.data {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One low-rank pair; the update applied to the frozen weight is `a · b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Mat,
    pub b: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    rank: usize,
    blocks: Vec<[LoraPair; 6]>,
}

impl AdapterParams {
    /// `A` Gaussian with variance `1 / fan_in`, `B` zero.
    pub fn new(model: &ToyTransformer, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        let mut rng = SeededRng::derive(seed, 0x10_4A);
        let blocks = model
            .base
            .blocks
            .iter()
            .map(|blk| {
                blk.linears.clone().map(|w| LoraPair {
                    a: gaussian(&mut rng, w.rows, rank, 1.0 / (w.rows as f64).sqrt()),
                    b: Mat::zeros(rank, w.cols),
                })
            })
            .collect();
        Ok(Self { rank, blocks })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn pair(&self, layer: usize, linear: usize) -> &LoraPair {
        &self.blocks[layer][linear]
    }

    /// `(name, matrix)` for every trainable factor, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (l, blk) in self.blocks.iter().enumerate() {
            for (i, pair) in blk.iter().enumerate() {
                out.push((adapter_name(l, i, 'a'), &pair.a));
                out.push((adapter_name(l, i, 'b'), &pair.b));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        for (l, blk) in self.blocks.iter_mut().enumerate() {
            for (i, pair) in blk.iter_mut().enumerate() {
                out.push((adapter_name(l, i, 'a'), &mut pair.a));
                out.push((adapter_name(l, i, 'b'), &mut pair.b));
            }
        }
        out
    }
}

pub fn adapter_name(layer: usize, linear: usize, factor: char) -> String {
    format!("layer{}.{}.lora_{factor}", layer + 1, LINEARS[linear])
}

/// Visual tokens (`N × d`, already embedded) followed by integer text ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub visual: Vec<f64>,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

/// Everything the losses read from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub grid: GridShape,
    /// One row per target position.
    pub logits: Mat,
    /// `visual_states[l - 1]` is the visual part of the input to layer `l`.
    pub visual_states: Vec<Mat>,
    /// `attention[l - 1]` holds raw pre-softmax scores, one row per head,
    /// from the designated query position to the `N` visual keys of layer `l`.
    pub attention: Vec<Mat>,
}

impl ForwardTrace {
    /// SHA-256 over logits, states and attention taps.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mats = std::iter::once(&self.logits)
            .chain(&self.visual_states)
            .chain(&self.attention);
        for m in mats {
            for v in &m.data {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

/// Tape handles for the trainable adapter factors.
#[derive(Debug, Clone)]
pub(crate) struct AdapterNodes {
    pub blocks: Vec<[(NodeId, NodeId); 6]>,
}

impl AdapterNodes {
    pub fn register(tape: &mut Tape, adapters: &AdapterParams) -> Self {
        let blocks = adapters
            .blocks
            .iter()
            .map(|blk| blk.clone().map(|p| (tape.leaf(p.a), tape.leaf(p.b))))
            .collect();
        Self { blocks }
    }
}

/// Modifications to the plain forward pass used by distillation.
#[derive(Debug, Clone, Default)]
pub(crate) struct Intervention {
    /// `(layer, W)`: rotate the visual input of `layer` by `I + W`.
    pub rotations: Vec<(usize, NodeId)>,
    /// Feed the rotated tokens into the layer instead of only scoring them.
    pub rotation_in_forward: bool,
    /// `(layer, tokens)`: overwrite the visual input of `layer`.
    pub replace: Option<(usize, Mat)>,
}

#[derive(Debug, Clone)]
pub(crate) struct GraphTaps {
    pub logits: NodeId,
    pub states: Vec<NodeId>,
    pub rotated: BTreeMap<usize, NodeId>,
    pub attention: Vec<NodeId>,
}

fn linear(tape: &mut Tape, x: NodeId, w: NodeId, lora: Option<(NodeId, NodeId)>) -> NodeId {
    let y = tape.matmul(x, w);
    match lora {
        Some((a, b)) => {
            let xa = tape.matmul(x, a);
            let xab = tape.matmul(xa, b);
            tape.add(y, xab)
        }
        None => y,
    }
}

fn validate_sequence(model: &ToyTransformer, seq: &TokenSequence) -> Result<()> {
    let cfg = &model.config;
    if seq.visual.len() != cfg.n_visual() * cfg.d_model {
        return Err(invalid(format!(
            "visual tokens have {} values, expected {} x {}",
            seq.visual.len(),
            cfg.n_visual(),
            cfg.d_model
        )));
    }
    if seq.prompt.is_empty() || seq.target.is_empty() {
        return Err(invalid("prompt and target must be nonempty"));
    }
    let text = seq.prompt.len() + seq.target.len() - 1;
    if text > cfg.max_text_len {
        return Err(invalid(format!(
            "text length {text} exceeds max_text_len {}",
            cfg.max_text_len
        )));
    }
    if let Some(&bad) = seq.prompt.iter().chain(&seq.target).find(|&&t| t >= cfg.vocab) {
        return Err(invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab)));
    }
    Ok(())
}

/// Records the forward pass on `tape`.
pub(crate) fn build_graph(
    tape: &mut Tape,
    model: &ToyTransformer,
    adapters: Option<&AdapterNodes>,
    seq: &TokenSequence,
    iv: &Intervention,
) -> Result<GraphTaps> {
    validate_sequence(model, seq)?;
    let cfg = &model.config;
    let base = &model.base;
    let (n, d) = (cfg.n_visual(), cfg.d_model);
    let t_prompt = seq.prompt.len();
    let text: Vec<usize> = seq
        .prompt
        .iter()
        .chain(&seq.target[..seq.target.len() - 1])
        .copied()
        .collect();
    let len = n + text.len();
    tape.set_visible_prefix(n);

    let mut input = seq.visual.clone();
    for &t in &text {
        input.extend_from_slice(base.tokens.row(t));
    }
    if cfg.positional {
        input.iter_mut().zip(&base.positions.data[..len * d]).for_each(|(x, p)| *x += p);
    }
    let mut h = tape.constant(Mat::new(len, d, input));

    let query_row = n + t_prompt - 1;
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut states = Vec::with_capacity(cfg.n_layers);
    let mut rotated = BTreeMap::new();
    let mut attention = Vec::with_capacity(cfg.n_layers);

    for (li, blk) in base.blocks.iter().enumerate() {
        let layer = li + 1;
        let visual = tape.slice_rows(h, 0, n);
        states.push(visual);
        if let Some(&(_, w)) = iv.rotations.iter().find(|(l, _)| *l == layer) {
            let eye = tape.constant(Mat::identity(d));
            let m = tape.add(eye, w);
            let mt = tape.transpose(m);
            let r = tape.matmul(visual, mt);
            rotated.insert(layer, r);
            if iv.rotation_in_forward {
                let rest = tape.slice_rows(h, n, len - n);
                h = tape.concat_rows(&[r, rest]);
            }
        }
        if let Some((_, tokens)) = iv.replace.as_ref().filter(|(l, _)| *l == layer) {
            let sub = tape.constant(tokens.clone());
            let rest = tape.slice_rows(h, n, len - n);
            h = tape.concat_rows(&[sub, rest]);
        }

        let lora = |i: usize| adapters.map(|a| a.blocks[li][i]);
        let w: Vec<NodeId> = blk.linears.iter().map(|m| tape.constant(m.clone())).collect();

        let x = tape.rms_norm(h);
        let q = linear(tape, x, w[0], lora(0));
        let k = linear(tape, x, w[1], lora(1));
        let v = linear(tape, x, w[2], lora(2));
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut taps = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, hd * dh, dh);
            let kh = tape.slice_cols(k, hd * dh, dh);
            let vh = tape.slice_cols(v, hd * dh, dh);
            let raw = tape.matmul_t(qh, kh);
            let scores = tape.scale(raw, inv_sqrt);
            let rows = match cfg.attention_query {
                AttentionQuery::LastPrompt => tape.slice_rows(scores, query_row, 1),
                AttentionQuery::MeanPrompt => {
                    let p = tape.slice_rows(scores, n, t_prompt);
                    tape.mean_rows(p)
                }
            };
            taps.push(tape.slice_cols(rows, 0, n));
            let probs = tape.prefix_softmax(scores);
            heads.push(tape.matmul(probs, vh));
        }
        attention.push(tape.concat_rows(&taps));
        let merged = tape.concat_cols(&heads);
        let attn_out = linear(tape, merged, w[3], lora(3));
        h = tape.add(h, attn_out);

        let x = tape.rms_norm(h);
        let up = linear(tape, x, w[4], lora(4));
        let act = tape.gelu(up);
        let down = linear(tape, act, w[5], lora(5));
        h = tape.add(h, down);
    }

    let out = tape.slice_rows(h, query_row, seq.target.len());
    let normed = tape.rms_norm(out);
    let head = tape.constant(base.head.clone());
    let logits = tape.matmul(normed, head);
    Ok(GraphTaps { logits, states, rotated, attention })
}

pub(crate) fn trace_from(tape: &Tape, model: &ToyTransformer, taps: &GraphTaps) -> ForwardTrace {
    ForwardTrace {
        grid: model.config.grid,
        logits: tape.value(taps.logits).clone(),
        visual_states: taps.states.iter().map(|&s| tape.value(s).clone()).collect(),
        attention: taps.attention.iter().map(|&a| tape.value(a).clone()).collect(),
    }
}

/// Plain forward pass. `adapters = None` runs the frozen base model.
pub fn forward(
    model: &ToyTransformer,
    adapters: Option<&AdapterParams>,
    seq: &TokenSequence,
) -> Result<ForwardTrace> {
    let mut tape = Tape::new();
    let nodes = adapters.map(|a| AdapterNodes::register(&mut tape, a));
    let taps = build_graph(&mut tape, model, nodes.as_ref(), seq, &Intervention::default())?;
    Ok(trace_from(&tape, model, &taps))
}

/// Mean over target positions of `-ln p(target)`.
pub fn lm_loss(trace: &ForwardTrace, targets: &[usize]) -> Result<f64> {
    if targets.len() != trace.logits.rows {
        return Err(invalid(format!(
            "{} targets for {} logit rows",
            targets.len(),
            trace.logits.rows
        )));
    }
    let vocab = trace.logits.cols;
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= vocab {
            return Err(invalid(format!("target {t} outside vocabulary")));
        }
        total -= log_softmax(trace.logits.row(r))[t];
    }
    Ok(total / targets.len() as f64)
}

fn check_layer(trace: &ForwardTrace, layer: usize) -> Result<()> {
    if layer == 0 || layer > trace.visual_states.len() {
        return Err(invalid(format!(
            "layer {layer} outside 1..={}",
            trace.visual_states.len()
        )));
    }
    Ok(())
}

/// Visual input to `layer` (the output of layer `layer - 1`) as a grid.
pub fn extract_visual_states(trace: &ForwardTrace, layer: usize) -> Result<FeatureGrid> {
    check_layer(trace, layer)?;
    let m = &trace.visual_states[layer - 1];
    FeatureGrid::new(trace.grid, m.cols, m.data.clone())
}

/// Raw per-head attention scores to the visual keys at `layer`, `H` rows.
pub fn extract_visual_attention(trace: &ForwardTrace, layer: usize) -> Result<Vec<Vec<f64>>> {
    check_layer(trace, layer)?;
    let m = &trace.attention[layer - 1];
    Ok((0..m.rows).map(|r| m.row(r).to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            mlp_hidden: 16,
            vocab: 12,
            grid: GridShape::new(2, 2).unwrap(),
            image_channels: 3,
            max_text_len: 4,
            positional: true,
            attention_query: AttentionQuery::LastPrompt,
        }
    }

    fn seq(model: &ToyTransformer, seed: u64) -> TokenSequence {
        let mut rng = SeededRng::new(seed);
        let c = model.config().image_channels;
        let img = rng.normal_vec(model.config().n_visual() * c, 1.0);
        TokenSequence { visual: model.embed_patches(&img).unwrap(), prompt: vec![0, 3, 1], target: vec![7] }
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.n_heads = 3;
        assert!(ToyTransformer::new(c, 0).is_err());
        let mut c = small();
        c.n_layers = 0;
        assert!(ToyTransformer::new(c, 0).is_err());
    }

    #[test]
    fn zero_init_adapters_match_base_bitwise() {
        let m = ToyTransformer::new(small(), 1).unwrap();
        let a = AdapterParams::new(&m, 2, 5).unwrap();
        let s = seq(&m, 2);
        let base = forward(&m, None, &s).unwrap();
        let adapted = forward(&m, Some(&a), &s).unwrap();
        assert_eq!(base.logits.data, adapted.logits.data);
        assert_eq!(base, adapted);
    }

    #[test]
    fn trace_is_deterministic() {
        let m = ToyTransformer::new(small(), 1).unwrap();
        let s = seq(&m, 2);
        let a = forward(&m, None, &s).unwrap();
        let b = forward(&m, None, &s).unwrap();
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn layer_one_state_is_the_input() {
        let mut c = small();
        c.positional = false;
        let m = ToyTransformer::new(c, 4).unwrap();
        let s = seq(&m, 3);
        let t = forward(&m, None, &s).unwrap();
        let g = extract_visual_states(&t, 1).unwrap();
        assert_eq!(g.values(), s.visual.as_slice());
        assert_eq!(g.shape(), GridShape::new(2, 2).unwrap());
        assert!(extract_visual_states(&t, 0).is_err());
        assert!(extract_visual_states(&t, 3).is_err());
        assert_eq!(extract_visual_attention(&t, 2).unwrap().len(), 2);
        assert!(extract_visual_attention(&t, 5).is_err());
    }

    #[test]
    fn permuting_visual_tokens_permutes_states() {
        let mut c = small();
        c.positional = false;
        let m = ToyTransformer::new(c, 6).unwrap();
        let s = seq(&m, 7);
        let d = m.config().d_model;
        let mut swapped = s.clone();
        for k in 0..d {
            swapped.visual.swap(k, 2 * d + k);
        }
        let a = forward(&m, None, &s).unwrap();
        let b = forward(&m, None, &swapped).unwrap();
        for layer in 1..=2 {
            let (sa, sb) = (&a.visual_states[layer - 1], &b.visual_states[layer - 1]);
            for k in 0..d {
                assert!((sa.row(0)[k] - sb.row(2)[k]).abs() < 1e-12);
                assert!((sa.row(2)[k] - sb.row(0)[k]).abs() < 1e-12);
                assert!((sa.row(1)[k] - sb.row(1)[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_sequences() {
        let m = ToyTransformer::new(small(), 1).unwrap();
        let mut s = seq(&m, 0);
        s.prompt = vec![0, 99];
        assert!(forward(&m, None, &s).is_err());
        let mut s = seq(&m, 0);
        s.prompt = vec![0; 5];
        assert!(forward(&m, None, &s).is_err());
        let mut s = seq(&m, 0);
        s.visual.pop();
        assert!(forward(&m, None, &s).is_err());
    }

    #[test]
    fn lm_loss_closed_forms() {
        let uniform = ForwardTrace {
            grid: GridShape::square(1),
            logits: Mat::new(1, 4, vec![0.0; 4]),
            visual_states: vec![],
            attention: vec![],
        };
        assert!((lm_loss(&uniform, &[2]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((lm_loss(&uniform, &[2]).unwrap() - 1.386294).abs() < 5e-7);
        let peaked = ForwardTrace { logits: Mat::new(1, 4, vec![10.0, 0.0, 0.0, 0.0]), ..uniform.clone() };
        let expected = (1.0 + 3.0 * (-10f64).exp()).ln();
        assert!((lm_loss(&peaked, &[0]).unwrap() - expected).abs() < 1e-15);
        assert!((lm_loss(&peaked, &[0]).unwrap() - 1.3619e-4).abs() < 1e-8);
        let two = ForwardTrace { logits: Mat::new(2, 4, vec![0.0; 8]), ..uniform.clone() };
        assert_eq!(lm_loss(&two, &[1, 3]).unwrap(), lm_loss(&uniform, &[0]).unwrap());
        assert!(lm_loss(&two, &[1]).is_err());
    }

    #[test]
    fn equal_projections_give_uniform_scores() {
        let mut c = small();
        c.n_layers = 1;
        c.n_heads = 1;
        c.positional = false;
        let m = ToyTransformer::new(c, 2).unwrap();
        let mut base = m.base().clone();
        // every visual token identical => identical keys => flat score row
        let s = TokenSequence {
            visual: (0..4).flat_map(|_| (0..8).map(|k| k as f64 * 0.1 - 0.2)).collect(),
            prompt: vec![1, 2],
            target: vec![3],
        };
        base.blocks[0].linears[1] = base.blocks[0].linears[0].clone();
        let m = ToyTransformer::from_parts(m.config().clone(), base).unwrap();
        let t = forward(&m, None, &s).unwrap();
        let row = &extract_visual_attention(&t, 1).unwrap()[0];
        assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-12));
    }
}
