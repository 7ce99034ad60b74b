//! Objective assembly and optimization over the trainable set: the adapters
//! plus one steering matrix per distillation layer. The base model is only
//! ever borrowed immutably.

use std::collections::BTreeMap;

use crate::error::{invalid, Error, Result};
use crate::grad::{GradientBundle, ParamSet};
use crate::interp::{interpolate_attention, interpolate_features, GridShape};
use crate::losses::{similarity_matrix, DistillationWeights, RotationParams};
use crate::model::{adapter_name, build_graph, trace_from, AdapterNodes, ForwardTrace, GraphTaps, AdapterParams, Intervention, ToyTransformer, TokenSequence};
use crate::synth::ExpertBundle;
use crate::tape::{Mat, NodeId, Tape};
use crate::tensor::{Tensor, SeededRng};

/// Expert signals resampled onto the student grid, computed once per example.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTargets {
    /// Expert cosine matrix on the student grid, `N × N`.
    pub similarity: Vec<f64>,
    /// Interpolated raw expert attention, length `N`.
    pub attention: Vec<f64>,
    /// Interpolated expert features embedded in the student width, used when
    /// they replace the student's visual states outright.
    pub direct: Mat,
    /// Student cells covered by the queried entity.
    pub region: Vec<usize>,
    /// Rows of the interpolated features that were zero before normalization.
    pub zero_rows: usize,
}

impl AlignmentTargets {
    pub fn new(bundle: &ExpertBundle, grid: GridShape, d_model: usize) -> Result<Self> {
        let interp = interpolate_features(&bundle.features, grid)?;
        let similarity = similarity_matrix(&interp.grid).values().to_vec();
        let attention = interpolate_attention(&bundle.attention.scores, bundle.features.shape(), grid)?;
        let region = bundle.scene.region_on_grid(bundle.query, grid)?;
        // unit rows zero-padded or truncated to d, scaled to unit RMS
        let b = interp.grid.channels();
        let scale = (d_model as f64).sqrt();
        let mut direct = Mat::zeros(grid.tokens(), d_model);
        for t in 0..grid.tokens() {
            let row = interp.grid.token(t);
            for c in 0..b.min(d_model) {
                direct.data[t * d_model + c] = row[c] * scale;
            }
        }
        Ok(Self { similarity, attention, direct, region, zero_rows: interp.zero_rows })
    }
}

/// The trainable set: adapters plus steering matrices keyed by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainables {
    pub adapters: AdapterParams,
    pub rotations: BTreeMap<usize, RotationParams>,
}

pub fn rotation_name(layer: usize) -> String {
    format!("rotation.layer{layer}")
}

impl Trainables {
    pub fn new(model: &ToyTransformer, rank: usize, layers: &[usize], seed: u64) -> Result<Self> {
        let n = model.config().n_layers;
        if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > n) {
            return Err(Error::Config(format!("distillation layer {bad} outside 1..={n}")));
        }
        let d = model.config().d_model;
        Ok(Self {
            adapters: AdapterParams::new(model, rank, seed)?,
            rotations: layers.iter().map(|&l| (l, RotationParams::zeros(d))).collect(),
        })
    }

    /// Adds `N(0, scale^2)` noise to every entry, including the zero-initialized
    /// ones. Used to check gradients away from the initial point.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = SeededRng::new(seed);
        for (_, m) in self.adapters.named_mut() {
            m.data.iter_mut().for_each(|v| *v += scale * rng.normal());
        }
        for r in self.rotations.values_mut() {
            r.matrix_mut().iter_mut().for_each(|v| *v += scale * rng.normal());
        }
    }

    pub fn to_params(&self) -> ParamSet {
        let mut p: ParamSet = self
            .adapters
            .named()
            .into_iter()
            .map(|(k, m)| (k, m.data.clone()))
            .collect();
        for (&l, r) in &self.rotations {
            p.insert(rotation_name(l), r.matrix().to_vec());
        }
        p
    }

    pub fn set_params(&mut self, p: &ParamSet) -> Result<()> {
        for (name, m) in self.adapters.named_mut() {
            if let Some(v) = p.get(&name) {
                copy_into(&name, &mut m.data, v)?;
            }
        }
        for (&l, r) in self.rotations.iter_mut() {
            let name = rotation_name(l);
            if let Some(v) = p.get(&name) {
                copy_into(&name, r.matrix_mut(), v)?;
            }
        }
        Ok(())
    }
}

fn copy_into(name: &str, dst: &mut [f64], src: &[f64]) -> Result<()> {
    if dst.len() != src.len() {
        return Err(invalid(format!("{name}: expected {} values, got {}", dst.len(), src.len())));
    }
    dst.copy_from_slice(src);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepConfig {
    pub weights: DistillationWeights,
    /// Layers receiving the distillation losses; the first one is the
    /// primary layer used for reporting and for direct substitution.
    pub distill_layers: Vec<usize>,
    pub rotation_in_forward: bool,
    /// Replace the student's visual states at the primary layer with the
    /// expert features instead of distilling.
    pub direct: bool,
}

impl StepConfig {
    pub fn primary_layer(&self) -> usize {
        self.distill_layers[0]
    }

    /// Steering matrices exist to serve the structure loss; they are applied
    /// and trained only while it is on.
    pub fn rotation_active(&self) -> bool {
        self.weights.alpha > 0.0 && !self.direct
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l_llm: f64,
    pub l_vis: f64,
    pub l_att: f64,
    pub combined: f64,
}

impl LossReport {
    fn is_finite(&self) -> bool {
        [self.l_llm, self.l_vis, self.l_att, self.combined].iter().all(|v| v.is_finite())
    }
}

pub(crate) struct ObjectiveGraph {
    pub tape: Tape,
    pub lm: NodeId,
    pub vis: NodeId,
    pub att: NodeId,
    pub combined: NodeId,
    /// Student attention (head mean, raw) at the primary layer.
    pub attention: NodeId,
    pub taps: GraphTaps,
    pub params: BTreeMap<String, NodeId>,
}

impl ObjectiveGraph {
    pub fn report(&self) -> LossReport {
        LossReport {
            l_llm: self.tape.value(self.lm).scalar(),
            l_vis: self.tape.value(self.vis).scalar(),
            l_att: self.tape.value(self.att).scalar(),
            combined: self.tape.value(self.combined).scalar(),
        }
    }

    pub fn gradients(&self, root: NodeId) -> Result<GradientBundle> {
        let g = self.tape.backward(root, 1.0);
        let mut bundle = GradientBundle::new();
        for (name, &id) in &self.params {
            let m = g.get_or_zeros(&self.tape, id);
            bundle.insert(name.clone(), Tensor::new(vec![m.rows, m.cols], m.data).map_err(|_| {
                Error::NonFinite(format!("gradient of {name}"))
            })?);
        }
        Ok(bundle)
    }
}

pub(crate) fn objective_graph(
    model: &ToyTransformer,
    tr: &Trainables,
    seq: &TokenSequence,
    tgt: &AlignmentTargets,
    cfg: &StepConfig,
) -> Result<ObjectiveGraph> {
    let n = model.config().n_visual();
    if tgt.attention.len() != n || tgt.similarity.len() != n * n {
        return Err(invalid("alignment targets do not match the student grid"));
    }
    let mut tape = Tape::new();
    let adapters = AdapterNodes::register(&mut tape, &tr.adapters);
    let mut params = BTreeMap::new();
    for (l, blk) in adapters.blocks.iter().enumerate() {
        for (i, &(a, b)) in blk.iter().enumerate() {
            params.insert(adapter_name(l, i, 'a'), a);
            params.insert(adapter_name(l, i, 'b'), b);
        }
    }
    let mut iv = Intervention { rotation_in_forward: cfg.rotation_in_forward, ..Default::default() };
    if cfg.rotation_active() {
        for &l in &cfg.distill_layers {
            let r = tr
                .rotations
                .get(&l)
                .ok_or_else(|| Error::Config(format!("no steering matrix for layer {l}")))?;
            let d = r.dim();
            let id = tape.leaf(Mat::new(d, d, r.matrix().to_vec()));
            iv.rotations.push((l, id));
            params.insert(rotation_name(l), id);
        }
    }
    if cfg.direct {
        iv.replace = Some((cfg.primary_layer(), tgt.direct.clone()));
    }
    let taps = build_graph(&mut tape, model, Some(&adapters), seq, &iv)?;

    let lm = tape.cross_entropy(taps.logits, &seq.target);
    let mut vis_terms = Vec::new();
    let mut att_terms = Vec::new();
    let mut primary_attention = None;
    for &l in &cfg.distill_layers {
        let feats = taps.rotated.get(&l).copied().unwrap_or(taps.states[l - 1]);
        let cos = tape.cosine(feats);
        vis_terms.push((tape.mse_const(cos, &tgt.similarity), 1.0));
        let avg = tape.mean_rows(taps.attention[l - 1]);
        primary_attention.get_or_insert(avg);
        att_terms.push((tape.kl_const(avg, &tgt.attention), 1.0));
    }
    // several layers: losses are summed
    let vis = tape.weighted_sum(&vis_terms);
    let att = tape.weighted_sum(&att_terms);
    let mut terms = vec![(lm, 1.0)];
    if !cfg.direct {
        if cfg.weights.alpha > 0.0 {
            terms.push((vis, cfg.weights.alpha));
        }
        if cfg.weights.beta > 0.0 {
            terms.push((att, cfg.weights.beta));
        }
    }
    let combined = tape.weighted_sum(&terms);
    Ok(ObjectiveGraph {
        tape,
        lm,
        vis,
        att,
        combined,
        attention: primary_attention.expect("at least one distillation layer"),
        params,
        taps,
    })
}

fn check_config(model: &ToyTransformer, cfg: &StepConfig) -> Result<()> {
    let n = model.config().n_layers;
    if cfg.distill_layers.is_empty() {
        return Err(Error::Config("at least one distillation layer is required".into()));
    }
    if let Some(&bad) = cfg.distill_layers.iter().find(|&&l| l == 0 || l > n) {
        return Err(Error::Config(format!("distillation layer {bad} outside 1..={n}")));
    }
    DistillationWeights::new(cfg.weights.alpha, cfg.weights.beta)?;
    Ok(())
}

/// Loss values for one example without differentiating.
pub fn evaluate_objective(
    model: &ToyTransformer,
    tr: &Trainables,
    seq: &TokenSequence,
    tgt: &AlignmentTargets,
    cfg: &StepConfig,
) -> Result<LossReport> {
    check_config(model, cfg)?;
    Ok(objective_graph(model, tr, seq, tgt, cfg)?.report())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: LossReport,
    /// Head-averaged raw student attention at the primary layer.
    pub attention: Vec<f64>,
    pub trace: ForwardTrace,
}

/// Full forward pass with the training-time interventions applied.
pub fn evaluate_example(
    model: &ToyTransformer,
    tr: &Trainables,
    seq: &TokenSequence,
    tgt: &AlignmentTargets,
    cfg: &StepConfig,
) -> Result<Evaluation> {
    check_config(model, cfg)?;
    let g = objective_graph(model, tr, seq, tgt, cfg)?;
    Ok(Evaluation {
        report: g.report(),
        attention: g.tape.value(g.attention).data.clone(),
        trace: trace_from(&g.tape, model, &g.taps),
    })
}

/// Which loss to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Lm,
    Vis,
    Att,
    Combined,
}

/// Loss values and the gradient of `term` over the active trainable set.
pub fn compute_gradients(
    model: &ToyTransformer,
    tr: &Trainables,
    seq: &TokenSequence,
    tgt: &AlignmentTargets,
    cfg: &StepConfig,
    term: LossTerm,
) -> Result<(LossReport, GradientBundle)> {
    check_config(model, cfg)?;
    let g = objective_graph(model, tr, seq, tgt, cfg)?;
    let root = match term {
        LossTerm::Lm => g.lm,
        LossTerm::Vis => g.vis,
        LossTerm::Att => g.att,
        LossTerm::Combined => g.combined,
    };
    Ok((g.report(), g.gradients(root)?))
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every parameter present in `grads`; others are untouched.
    pub fn step(&mut self, tr: &mut Trainables, grads: &GradientBundle) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut params = tr.to_params();
        for (name, g) in grads.iter() {
            let p = params
                .get_mut(name)
                .ok_or_else(|| invalid(format!("gradient for unknown parameter {name}")))?;
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        tr.set_params(&params)
    }
}

/// One optimizer step on the batch mean of the combined objective.
pub fn train_step(
    model: &ToyTransformer,
    tr: &mut Trainables,
    batch: &[(&TokenSequence, &AlignmentTargets)],
    cfg: &StepConfig,
    opt: &mut Adam,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    check_config(model, cfg)?;
    let mut total = LossReport::default();
    let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (i, (seq, tgt)) in batch.iter().enumerate() {
        let g = objective_graph(model, tr, seq, tgt, cfg)?;
        let report = g.report();
        if !report.is_finite() {
            return Err(Error::NonFinite(format!("loss on batch item {i}: {report:?}")));
        }
        total.l_llm += report.l_llm;
        total.l_vis += report.l_vis;
        total.l_att += report.l_att;
        total.combined += report.combined;
        for (name, t) in g.gradients(g.combined)?.iter() {
            let acc = sum.entry(name.to_string()).or_insert_with(|| vec![0.0; t.len()]);
            acc.iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
        }
    }
    let n = batch.len() as f64;
    let mut mean = GradientBundle::new();
    for (name, v) in sum {
        let len = v.len();
        let data = v.into_iter().map(|x| x / n).collect();
        mean.insert(name, Tensor::new(vec![len], data)?);
    }
    opt.step(tr, &mean)?;
    Ok(LossReport {
        l_llm: total.l_llm / n,
        l_vis: total.l_vis / n,
        l_att: total.l_att / n,
        combined: total.combined / n,
    })
}
