//! Experiment orchestration: training runs, ablation arms, layer sweeps and
//! the whole-model gradient check.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::config::{ExperimentConfig, Mode};
use crate::error::{invalid, Error, Result};
use crate::grad::{finite_difference_check, GradientBundle, FiniteDiffReport, ParamCheck, ParamSet};
use crate::interp::GridShape;
use crate::io::{emit_heatmap, format_float, write_tgrid};
use crate::model::{ToyTransformer, TokenSequence};
use crate::synth::make_dataset;
use crate::tape::Mat;
use crate::tensor::{mix_seed, softmax, SeededRng, Tensor};
use crate::train::{
    compute_gradients, evaluate_example, evaluate_objective, train_step, Adam, AlignmentTargets, LossReport,
    LossTerm, StepConfig, Trainables,
};

const MODEL_STREAM: u64 = 0x30DE;
const ADAPTER_STREAM: u64 = 0xADA7;
const DATA_STREAM: u64 = 0xDA7A;
const BATCH_STREAM: u64 = 0xBA7C;

/// Post-softmax attention mass on `region`.
pub fn attention_overlap(raw: &[f64], region: &[usize]) -> Result<f64> {
    if region.is_empty() {
        return Err(invalid("attention overlap needs a non-empty region"));
    }
    if let Some(&bad) = region.iter().find(|&&i| i >= raw.len()) {
        return Err(invalid(format!("region cell {bad} outside {} tokens", raw.len())));
    }
    let p = softmax(raw)?;
    Ok(region.iter().map(|&i| p[i]).sum::<f64>().min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FinalMetrics {
    pub eval_lm_loss: f64,
    pub eval_accuracy: f64,
    pub attention_kl: f64,
    pub similarity_mse: f64,
    pub attention_overlap: f64,
}

impl FinalMetrics {
    pub const NAMES: [&'static str; 5] =
        ["eval_lm_loss", "eval_accuracy", "attention_kl", "similarity_mse", "attention_overlap"];

    pub fn values(&self) -> [f64; 5] {
        [self.eval_lm_loss, self.eval_accuracy, self.attention_kl, self.similarity_mse, self.attention_overlap]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub steps: Vec<LossReport>,
    pub final_metrics: FinalMetrics,
    pub wall_seconds: f64,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    /// Everything except wall-clock time, which would break byte equality
    /// between identical runs.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,l_llm,l_vis,l_att,combined\n");
        for (i, s) in self.steps.iter().enumerate() {
            let cells = [s.l_llm, s.l_vis, s.l_att, s.combined].map(format_float);
            writeln!(out, "{i},{}", cells.join(",")).unwrap();
        }
        for (name, v) in FinalMetrics::NAMES.iter().zip(self.final_metrics.values()) {
            writeln!(out, "final,{name},{}", format_float(v)).unwrap();
        }
        writeln!(out, "final,config_hash,{}", self.config_hash).unwrap();
        writeln!(out, "final,seed,{}", self.seed).unwrap();
        out
    }

    pub fn summary_json(&self) -> String {
        let mut m = serde_json::Map::new();
        for (name, v) in FinalMetrics::NAMES.iter().zip(self.final_metrics.values()) {
            m.insert(name.to_string(), v.into());
        }
        m.insert("wall_seconds".into(), self.wall_seconds.into());
        m.insert("config_hash".into(), self.config_hash.clone().into());
        m.insert("seed".into(), self.seed.into());
        serde_json::to_string_pretty(&m).expect("summary serializes")
    }
}

/// A prepared dataset: token sequences with their expert targets.
pub struct Prepared {
    pub model: ToyTransformer,
    pub train: Vec<(TokenSequence, AlignmentTargets)>,
    pub eval: Vec<(TokenSequence, AlignmentTargets)>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let model = ToyTransformer::new(cfg.model_config(), mix_seed(cfg.seed, MODEL_STREAM))?;
    // one world: evaluation examples share entity appearances and expert
    // prototypes with training, and differ only in their scenes
    let mut all = make_dataset(
        mix_seed(cfg.seed, DATA_STREAM),
        cfg.train_count + cfg.eval_count,
        &cfg.dataset_config(),
        &model,
    )?
    .into_iter()
    .map(|ex| {
        let t = AlignmentTargets::new(&ex.expert, cfg.student_grid, cfg.d_model)?;
        Ok((ex.sequence, t))
    })
    .collect::<Result<Vec<_>>>()?;
    let eval = all.split_off(cfg.train_count);
    let train = all;
    Ok(Prepared { model, train, eval })
}

/// Everything a run produces. Files are written by [`RunOutput::write`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub trainables: Trainables,
    pub grid: GridShape,
    /// Student and expert attention on the first evaluation example.
    pub student_attention: Vec<f64>,
    pub expert_attention: Vec<f64>,
    pub base_checksum_before: String,
    pub base_checksum_after: String,
}

pub fn evaluate(
    model: &ToyTransformer,
    tr: &Trainables,
    data: &[(TokenSequence, AlignmentTargets)],
    step: &StepConfig,
) -> Result<FinalMetrics> {
    let mut m = FinalMetrics::default();
    for (seq, tgt) in data {
        let ev = evaluate_example(model, tr, seq, tgt, step)?;
        m.eval_lm_loss += ev.report.l_llm;
        m.attention_kl += ev.report.l_att;
        m.similarity_mse += ev.report.l_vis;
        m.attention_overlap += attention_overlap(&ev.attention, &tgt.region)?;
        let logits = &ev.trace.logits;
        let correct = (0..seq.target.len()).all(|r| {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            best == seq.target[r]
        });
        m.eval_accuracy += f64::from(u8::from(correct));
    }
    let n = data.len() as f64;
    Ok(FinalMetrics {
        eval_lm_loss: m.eval_lm_loss / n,
        eval_accuracy: m.eval_accuracy / n,
        attention_kl: m.attention_kl / n,
        similarity_mse: m.similarity_mse / n,
        attention_overlap: m.attention_overlap / n,
    })
}

pub fn run_prepared(cfg: &ExperimentConfig, prep: &Prepared) -> Result<RunOutput> {
    let start = Instant::now();
    let model = &prep.model;
    let before = model.checksum();
    let step = cfg.step_config();
    let mut tr = Trainables::new(model, cfg.adapter_rank, &step.distill_layers, mix_seed(cfg.seed, ADAPTER_STREAM))?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut rng = SeededRng::derive(cfg.seed, BATCH_STREAM);
    let mut order: Vec<usize> = Vec::new();
    let mut steps = Vec::with_capacity(cfg.steps);
    for i in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..prep.train.len()).collect();
                rng.shuffle(&mut order);
                order.reverse();
            }
            let (seq, tgt) = &prep.train[order.pop().expect("refilled")];
            batch.push((seq, tgt));
        }
        let report = train_step(model, &mut tr, &batch, &step, &mut opt).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("step {i}: {msg}")),
            other => other,
        })?;
        steps.push(report);
    }
    let final_metrics = evaluate(model, &tr, &prep.eval, &step)?;
    let (seq, tgt) = &prep.eval[0];
    let student_attention = evaluate_example(model, &tr, seq, tgt, &step)?.attention;
    let report = MetricsReport {
        steps,
        final_metrics,
        wall_seconds: start.elapsed().as_secs_f64(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    Ok(RunOutput {
        report,
        trainables: tr,
        grid: cfg.student_grid,
        student_attention,
        expert_attention: tgt.attention.clone(),
        base_checksum_before: before,
        base_checksum_after: model.checksum(),
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_prepared(cfg, &prepare(cfg)?)
}

fn mat_tensor(m: &Mat) -> Tensor {
    Tensor::new(vec![m.rows, m.cols], m.data.clone()).expect("trained parameters are finite")
}

impl RunOutput {
    /// Writes `metrics.csv`, `summary.json`, `config.json`, heatmaps and a
    /// `checkpoint/` directory of TGRID1 files.
    pub fn write(&self, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("checkpoint"))?;
        fs::write(dir.join("metrics.csv"), self.report.to_csv())?;
        fs::write(dir.join("summary.json"), self.report.summary_json())?;
        fs::write(dir.join("config.json"), cfg.to_json())?;
        emit_heatmap(&self.student_attention, self.grid, dir, "attention_student")?;
        emit_heatmap(&self.expert_attention, self.grid, dir, "attention_expert")?;
        for (name, m) in self.trainables.adapters.named() {
            write_tgrid(&dir.join("checkpoint").join(format!("{name}.tgrid")), &mat_tensor(m))?;
        }
        for (&l, r) in &self.trainables.rotations {
            let t = Tensor::new(vec![r.dim(), r.dim()], r.matrix().to_vec())?;
            write_tgrid(&dir.join("checkpoint").join(format!("rotation.layer{l}.tgrid")), &t)?;
        }
        Ok(())
    }
}

fn metrics_header(first: &str) -> String {
    format!("{first},{},config_hash\n", FinalMetrics::NAMES.join(","))
}

fn metrics_row(label: &str, r: &MetricsReport) -> String {
    let cells = r.final_metrics.values().map(format_float);
    format!("{label},{},{}\n", cells.join(","), r.config_hash)
}

/// One run per mode on a shared dataset.
pub fn ablation(cfg: &ExperimentConfig) -> Result<Vec<(Mode, RunOutput)>> {
    let prep = prepare(cfg)?;
    Mode::ALL
        .into_iter()
        .map(|mode| Ok((mode, run_prepared(&ExperimentConfig { mode, ..cfg.clone() }, &prep)?)))
        .collect()
}

pub fn ablation_csv(runs: &[(Mode, RunOutput)]) -> String {
    let mut out = metrics_header("mode");
    for (mode, run) in runs {
        out.push_str(&metrics_row(mode.name(), &run.report));
    }
    out
}

/// One run per listed layer, each otherwise identical to `cfg`.
pub fn layer_sweep(cfg: &ExperimentConfig, layers: &[usize]) -> Result<Vec<(usize, MetricsReport)>> {
    if layers.is_empty() {
        return Err(Error::Config("layer sweep needs at least one layer".into()));
    }
    let prep = prepare(cfg)?;
    let mut cache: BTreeMap<usize, MetricsReport> = BTreeMap::new();
    let mut out = Vec::with_capacity(layers.len());
    for &l in layers {
        let run = ExperimentConfig { distill_layer: l, ..cfg.clone() };
        run.validate()?;
        if !cache.contains_key(&l) {
            cache.insert(l, run_prepared(&run, &prep)?.report);
        }
        out.push((l, cache[&l].clone()));
    }
    Ok(out)
}

pub fn layer_sweep_csv(rows: &[(usize, MetricsReport)]) -> String {
    let mut out = metrics_header("layer");
    for (l, r) in rows {
        out.push_str(&metrics_row(&l.to_string(), r));
    }
    out
}

pub const GRAD_CHECK_MAX_TOKENS: usize = 16;
pub const GRAD_CHECK_MAX_LAYERS: usize = 2;
pub const GRAD_CHECK_EPSILON: f64 = 1e-5;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub instances: usize,
    /// Parameter whose analytic gradient gets perturbed before comparison.
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { instances: 3, corrupt: None }
    }
}

/// Finite-difference check of the combined objective over the whole model,
/// at randomized parameters. Reports the worst error per parameter across
/// instances.
pub fn grad_check_command(cfg: &ExperimentConfig, opts: &GradCheckOptions) -> Result<FiniteDiffReport> {
    if cfg.student_grid.tokens() > GRAD_CHECK_MAX_TOKENS || cfg.n_layers > GRAD_CHECK_MAX_LAYERS {
        return Err(Error::Config(format!(
            "grad-check needs at most {GRAD_CHECK_MAX_TOKENS} visual tokens and {GRAD_CHECK_MAX_LAYERS} layers \
             (got {} and {}); shrink student_grid and n_layers",
            cfg.student_grid.tokens(),
            cfg.n_layers
        )));
    }
    if opts.instances == 0 {
        return Err(Error::Config("grad-check needs at least one instance".into()));
    }
    let small = ExperimentConfig { train_count: opts.instances, eval_count: 1, ..cfg.clone() };
    let prep = prepare(&small)?;
    let step = small.step_config();
    let mut worst: BTreeMap<String, ParamCheck> = BTreeMap::new();
    let mut failure = None;
    for (i, (seq, tgt)) in prep.train.iter().enumerate() {
        let seed = mix_seed(small.seed, i as u64);
        let mut tr = Trainables::new(&prep.model, small.adapter_rank, &step.distill_layers, seed)?;
        tr.randomize(mix_seed(seed, 1), 0.3);
        let (_, mut grads) = compute_gradients(&prep.model, &tr, seq, tgt, &step, LossTerm::Combined)?;
        if let Some(name) = &opts.corrupt {
            if grads.get(name).is_none() {
                return Err(Error::Config(format!("no trainable parameter named {name}")));
            }
            let mut corrupted = GradientBundle::new();
            for (n, g) in grads.iter() {
                let mut g = g.clone();
                if n == name {
                    g.data_mut()[0] += 1e-2 * (1.0 + g.data()[0].abs());
                }
                corrupted.insert(n, g);
            }
            grads = corrupted;
        }
        let mut params: ParamSet = tr.to_params();
        params.retain(|k, _| grads.get(k).is_some());
        let objective = |p: &ParamSet| {
            let mut t = tr.clone();
            t.set_params(p).map_or(f64::NAN, |_| {
                evaluate_objective(&prep.model, &t, seq, tgt, &step).map_or(f64::NAN, |r| r.combined)
            })
        };
        let report = finite_difference_check(objective, &params, &grads, GRAD_CHECK_EPSILON, GRAD_CHECK_TOLERANCE)?;
        if failure.is_none() {
            failure = report.failure.clone();
        }
        for p in report.params {
            match worst.get(&p.name) {
                Some(w) if w.max_rel_error >= p.max_rel_error => {}
                _ => {
                    worst.insert(p.name.clone(), p);
                }
            }
        }
    }
    let params: Vec<ParamCheck> = worst.into_values().collect();
    let passed = failure.is_none() && params.iter().all(|p| p.passed);
    Ok(FiniteDiffReport {
        epsilon: GRAD_CHECK_EPSILON,
        tolerance: GRAD_CHECK_TOLERANCE,
        params,
        failure,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            steps: 4,
            batch_size: 2,
            train_count: 6,
            eval_count: 3,
            learning_rate: 1e-2,
            ..ExperimentConfig::grad_check_default()
        }
    }

    #[test]
    fn overlap_examples() {
        let uniform = vec![0.0; 16];
        assert!((attention_overlap(&uniform, &[0, 1, 4, 5]).unwrap() - 0.25).abs() < 1e-12);
        let mut peaked = vec![-1e6; 16];
        peaked[5] = 0.0;
        assert!((attention_overlap(&peaked, &[5, 6]).unwrap() - 1.0).abs() < 1e-12);
        assert!(attention_overlap(&uniform, &[]).is_err());
        assert!(attention_overlap(&uniform, &[16]).is_err());
    }

    #[test]
    fn zero_weight_full_run_equals_adapter_only_run() {
        let full = ExperimentConfig { alpha: 0.0, beta: 0.0, ..tiny() };
        let lora = ExperimentConfig { mode: Mode::LoraOnly, ..tiny() };
        let a = run_experiment(&full).unwrap();
        let b = run_experiment(&lora).unwrap();
        assert_eq!(a.report.to_csv(), b.report.to_csv());
        assert_eq!(a.trainables, b.trainables);
    }

    #[test]
    fn single_loss_modes_match_zeroed_weights() {
        for (mode, alpha, beta) in [(Mode::NoVis, 0.0, 0.5), (Mode::NoAtt, 1.0, 0.0)] {
            let by_mode = run_experiment(&ExperimentConfig { mode, ..tiny() }).unwrap();
            let by_weight = run_experiment(&ExperimentConfig { alpha, beta, ..tiny() }).unwrap();
            assert_eq!(by_mode.report.to_csv(), by_weight.report.to_csv(), "{}", mode.name());
        }
    }

    #[test]
    fn runs_are_reproducible_and_leave_the_base_alone() {
        let a = run_experiment(&tiny()).unwrap();
        let b = run_experiment(&tiny()).unwrap();
        assert_eq!(a.report.to_csv(), b.report.to_csv());
        assert_eq!(a.base_checksum_before, a.base_checksum_after);
        let m = a.report.final_metrics;
        assert!((0.0..=1.0).contains(&m.attention_overlap));
        assert!(m.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn metrics_csv_layout() {
        let out = run_experiment(&tiny()).unwrap();
        let csv = out.report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,l_llm,l_vis,l_att,combined");
        assert!(lines[1].starts_with("0,"));
        assert_eq!(lines[1].split(',').count(), 5);
        let finals: Vec<&str> = lines.iter().filter(|l| l.starts_with("final,")).copied().collect();
        assert_eq!(finals.len(), 7);
        assert!(finals[0].starts_with("final,eval_lm_loss,"));
        assert_eq!(finals[6], "final,seed,0");
        assert_eq!(lines.len(), 1 + 4 + 7);
    }

    #[test]
    fn write_produces_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        run_experiment(&cfg).unwrap().write(&cfg, dir.path()).unwrap();
        for f in ["metrics.csv", "summary.json", "config.json", "attention_student.pgm", "attention_expert.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let ck = dir.path().join("checkpoint");
        assert!(ck.join("layer1.q.lora_a.tgrid").exists());
        assert!(ck.join("rotation.layer2.tgrid").exists());
        let back = ExperimentConfig::load(&dir.path().join("config.json")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sweep_repeats_duplicates_and_matches_single_runs() {
        let rows = layer_sweep(&tiny(), &[2, 1, 2]).unwrap();
        assert_eq!(rows[0].1, rows[2].1);
        let single = run_experiment(&ExperimentConfig { distill_layer: 1, ..tiny() }).unwrap();
        assert_eq!(rows[1].1.to_csv(), single.report.to_csv());
        assert_eq!(layer_sweep_csv(&rows).lines().count(), 4);
        assert!(layer_sweep(&tiny(), &[3]).is_err());
        assert!(layer_sweep(&tiny(), &[]).is_err());
    }

    #[test]
    fn grad_check_passes_and_catches_corruption() {
        let cfg = ExperimentConfig::grad_check_default();
        let opts = GradCheckOptions { instances: 1, corrupt: None };
        let ok = grad_check_command(&cfg, &opts).unwrap();
        assert!(ok.passed, "{}", ok.render());
        assert!(ok.params.iter().any(|p| p.name == "rotation.layer2"));

        let bad = GradCheckOptions { corrupt: Some("layer2.v.lora_a".into()), ..opts.clone() };
        let report = grad_check_command(&cfg, &bad).unwrap();
        assert!(!report.passed);
        assert_eq!(report.failed_params(), vec!["layer2.v.lora_a"]);

        let lm_only = ExperimentConfig { alpha: 0.0, beta: 0.0, ..cfg.clone() };
        let report = grad_check_command(&lm_only, &opts).unwrap();
        assert!(report.passed);
        assert!(report.params.iter().all(|p| p.name.starts_with("layer")));

        assert!(grad_check_command(&ExperimentConfig::default(), &opts).is_err());
        let unknown = GradCheckOptions { corrupt: Some("nope".into()), ..opts };
        assert!(grad_check_command(&cfg, &unknown).is_err());
    }

    #[test]
    fn direct_mode_runs() {
        let out = run_experiment(&ExperimentConfig { mode: Mode::NoDistillDirect, ..tiny() }).unwrap();
        assert!(out.trainables.rotations.values().all(|r| r.matrix().iter().all(|&v| v == 0.0)));
        assert!(out.report.steps.iter().all(|s| s.combined == s.l_llm));
    }
}
