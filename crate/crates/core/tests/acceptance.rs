//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any blocking criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{max_diff, oracle};
use distill_core::config::{ExperimentConfig, Mode};
use distill_core::grad::{finite_difference_check, grad_attention_alignment, grad_visual_alignment, ParamSet};
use distill_core::harness::{prepare, run_prepared, FinalMetrics, MetricsReport, Prepared};
use distill_core::interp::{bilinear_resize, FeatureGrid, GridShape};
use distill_core::losses::{
    attention_alignment_loss, rotate_features, similarity_matrix, visual_alignment_loss, AttentionVector,
    RotationParams,
};
use distill_core::model::forward;
use distill_core::tensor::{softmax, SeededRng};
use distill_core::train::{compute_gradients, evaluate_example, evaluate_objective, LossTerm, Trainables};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn fd_worst(
    objective: impl Fn(&ParamSet) -> f64,
    params: &ParamSet,
    grads: &distill_core::grad::GradientBundle,
) -> (bool, f64) {
    let r = finite_difference_check(objective, params, grads, EPS, TOL).expect("fd check runs");
    (r.passed, r.max_rel_error())
}

fn random_small_config(rng: &mut SeededRng, seed: u64) -> ExperimentConfig {
    let side = 2 + rng.below(2);
    let (d, heads) = [(4, 2), (6, 2), (6, 3), (4, 1)][rng.below(4)];
    let layers = 1 + rng.below(2);
    ExperimentConfig {
        n_layers: layers,
        n_heads: heads,
        d_model: d,
        mlp_hidden: 2 * d,
        student_grid: GridShape::square(side),
        vocab: 20,
        image_channels: 3,
        max_text_len: 4,
        expert_grid: GridShape::square([4, 6][rng.below(2)]),
        expert_channels: 2 + rng.below(3),
        distill_layer: 1 + rng.below(layers),
        adapter_rank: 1 + rng.below(2),
        alpha: 0.5 + rng.uniform(),
        beta: 0.1 + rng.uniform(),
        rotation_in_forward: rng.below(2) == 0,
        train_count: 1,
        eval_count: 1,
        seed,
        ..ExperimentConfig::default()
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(11);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut note = |name: &'static str, ok: bool, err: f64, i: usize| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(err);
        if !ok {
            failures.push(format!("{name}#{i}"));
        }
    };
    for i in 0..20 {
        // structure loss against X and W on raw features
        let n = 2 + rng.below(8);
        let d = 2 + rng.below(5);
        let shape = GridShape::new(1, n).unwrap();
        let x = rng.normal_vec(n * d, 1.0);
        let w = rng.normal_vec(d * d, 0.3);
        let b = 1 + rng.below(4);
        let se = similarity_matrix(&FeatureGrid::new(shape, b, rng.normal_vec(n * b, 1.0)).unwrap());
        let grid = FeatureGrid::new(shape, d, x.clone()).unwrap();
        let rot = RotationParams::from_matrix(d, w.clone()).unwrap();
        let g = grad_visual_alignment(&grid, &rot, &se).unwrap().bundle;
        let params: ParamSet = [("x".to_string(), x), ("w".to_string(), w)].into();
        let obj = |p: &ParamSet| {
            let xg = FeatureGrid::new(shape, d, p["x"].clone()).unwrap();
            let r = RotationParams::from_matrix(d, p["w"].clone()).unwrap();
            visual_alignment_loss(&se, &similarity_matrix(&rotate_features(&xg, &r).unwrap())).unwrap()
        };
        let (ok, err) = fd_worst(obj, &params, &g);
        note("l_vis", ok, err, i);

        // attention loss against student scores
        let m = 2 + rng.below(8);
        let teacher = AttentionVector::raw(rng.normal_vec(m, 2.0));
        let student = rng.normal_vec(m, 2.0);
        let g = grad_attention_alignment(&teacher, &AttentionVector::raw(student.clone())).unwrap();
        let params: ParamSet = [("student".to_string(), student)].into();
        let obj = |p: &ParamSet| attention_alignment_loss(&teacher, &AttentionVector::raw(p["student"].clone())).unwrap();
        let (ok, err) = fd_worst(obj, &params, &g);
        note("l_att", ok, err, i);

        // language-model and combined objective through the whole toy model
        let cfg = random_small_config(&mut rng, i as u64);
        let prep = prepare(&cfg).unwrap();
        let step = cfg.step_config();
        let mut tr = Trainables::new(&prep.model, cfg.adapter_rank, &step.distill_layers, i as u64).unwrap();
        tr.randomize(100 + i as u64, 0.3);
        let (seq, tgt) = &prep.train[0];
        for (term, name) in [(LossTerm::Lm, "l_llm"), (LossTerm::Combined, "combined")] {
            let (_, g) = compute_gradients(&prep.model, &tr, seq, tgt, &step, term).unwrap();
            let mut params = tr.to_params();
            params.retain(|k, _| g.get(k).is_some());
            let obj = |p: &ParamSet| {
                let mut t = tr.clone();
                t.set_params(p).unwrap();
                let r = evaluate_objective(&prep.model, &t, seq, tgt, &step).unwrap();
                if term == LossTerm::Lm { r.l_llm } else { r.combined }
            };
            let (ok, err) = fd_worst(obj, &params, &g);
            note(name, ok, err, i);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let errs: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    let timely = secs <= 30.0;
    outcome(
        failures.is_empty() && timely,
        format!("20 instances, max rel error {} (tol 1e-4), {secs:.1}s{}", errs.join(", "),
            if failures.is_empty() { String::new() } else { format!(", failed {}", failures.join(" ")) }),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = SeededRng::new(7);
    let mut cases = vec![(GridShape::square(14), GridShape::square(24))];
    while cases.len() < 50 {
        let mut side = || 1 + rng.below(20);
        let src = GridShape::new(side(), side()).unwrap();
        let dst = GridShape::new(side(), side()).unwrap();
        cases.push((src, dst));
    }
    let mut worst = 0.0f64;
    let mut identity = true;
    let mut constant = 0.0f64;
    for &(src, dst) in &cases {
        let field = rng.normal_vec(src.tokens(), 5.0);
        worst = worst.max(max_diff(&bilinear_resize(&field, src, dst).unwrap(), &oracle(&field, src, dst)));
        identity &= bilinear_resize(&field, src, src).unwrap() == field;
        let c = rng.normal();
        let out = bilinear_resize(&vec![c; src.tokens()], src, dst).unwrap();
        constant = constant.max(out.iter().map(|v| (v - c).abs()).fold(0.0, f64::max));
    }
    outcome(
        worst <= 1e-12 && identity && constant <= 1e-12,
        format!("50 grids incl. 14x14->24x24: max |diff| {worst:.1e}, identity exact {identity}, constant drift {constant:.1e}"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = SeededRng::new(3);
    let mut bad = Vec::new();
    let p = softmax(&[1.0, 0.0]).unwrap();
    if (p[0] - 0.731059).abs() > 5e-7 || (p[1] - 0.268941).abs() > 5e-7 {
        bad.push("softmax(1,0)".to_string());
    }
    let kl = attention_alignment_loss(&AttentionVector::raw(vec![1.0, 0.0]), &AttentionVector::raw(vec![0.0, 1.0])).unwrap();
    let e = std::f64::consts::E;
    if (kl - 0.462117).abs() > 5e-7 || (kl - (e - 1.0) / (e + 1.0)).abs() > 1e-12 {
        bad.push(format!("kl example {kl}"));
    }
    for _ in 0..200 {
        let n = 1 + rng.below(12);
        let t = rng.normal_vec(n, 3.0);
        let s = rng.normal_vec(n, 3.0);
        let av = |v: &[f64]| AttentionVector::raw(v.to_vec());
        let l = attention_alignment_loss(&av(&t), &av(&s)).unwrap();
        if l < 0.0 {
            bad.push("kl negative".into());
        }
        if attention_alignment_loss(&av(&t), &av(&t)).unwrap().abs() > 1e-9 {
            bad.push("kl self".into());
        }
        let shift = rng.normal() * 10.0;
        let ts: Vec<f64> = t.iter().map(|v| v + shift).collect();
        let ss: Vec<f64> = s.iter().map(|v| v - shift).collect();
        if (attention_alignment_loss(&av(&ts), &av(&ss)).unwrap() - l).abs() > 1e-9 {
            bad.push("kl shift".into());
        }

        let k = 1 + rng.below(5);
        let shape = GridShape::new(1, n).unwrap();
        let x = rng.normal_vec(n * k, 1.0);
        let sx = similarity_matrix(&FeatureGrid::new(shape, k, x.clone()).unwrap());
        for i in 0..n {
            if (sx.get(i, i) - 1.0).abs() > 1e-12 {
                bad.push("diagonal".into());
            }
            for j in 0..n {
                if (sx.get(i, j) - sx.get(j, i)).abs() > 1e-12 {
                    bad.push("symmetry".into());
                }
            }
        }
        let scaled: Vec<f64> = x
            .chunks(k)
            .flat_map(|row| {
                let c = 0.01 + 100.0 * rng.uniform();
                row.iter().map(move |v| v * c).collect::<Vec<_>>()
            })
            .collect();
        let ss = similarity_matrix(&FeatureGrid::new(shape, k, scaled).unwrap());
        if max_diff(sx.values(), ss.values()) > 1e-9 {
            bad.push("scale invariance".into());
        }
        let sy = similarity_matrix(&FeatureGrid::new(shape, k, rng.normal_vec(n * k, 1.0)).unwrap());
        let ab = visual_alignment_loss(&sx, &sy).unwrap();
        if (ab - visual_alignment_loss(&sy, &sx).unwrap()).abs() > 1e-15 || visual_alignment_loss(&sx, &sx).unwrap() != 0.0 {
            bad.push("l_vis symmetry/zero".into());
        }
    }
    // gradient linearity over the whole model
    let cfg = ExperimentConfig { alpha: 0.7, beta: 0.4, ..ExperimentConfig::grad_check_default() };
    let prep = prepare(&ExperimentConfig { train_count: 3, ..cfg.clone() }).unwrap();
    let step = cfg.step_config();
    let mut worst = 0.0f64;
    for (i, (seq, tgt)) in prep.train.iter().enumerate() {
        let mut tr = Trainables::new(&prep.model, cfg.adapter_rank, &step.distill_layers, i as u64).unwrap();
        tr.randomize(i as u64, 0.2);
        let g = |t| compute_gradients(&prep.model, &tr, seq, tgt, &step, t).unwrap().1;
        let (lm, vis, att, all) = (g(LossTerm::Lm), g(LossTerm::Vis), g(LossTerm::Att), g(LossTerm::Combined));
        for (name, total) in all.iter() {
            for (j, v) in total.data().iter().enumerate() {
                let want = lm.get(name).unwrap().data()[j]
                    + cfg.alpha * vis.get(name).unwrap().data()[j]
                    + cfg.beta * att.get(name).unwrap().data()[j];
                worst = worst.max((v - want).abs() / want.abs().max(1.0));
            }
        }
    }
    if worst > 1e-12 {
        bad.push(format!("linearity {worst:.1e}"));
    }
    bad.dedup();
    outcome(
        bad.is_empty(),
        format!(
            "softmax(1,0)=({:.6},{:.6}), KL example {kl:.6}, 200 random cases, gradient linearity {worst:.1e}{}",
            p[0],
            p[1],
            if bad.is_empty() { String::new() } else { format!(", violations: {}", bad.join(", ")) }
        ),
    )
}

struct Ablation {
    /// Seed 0 metrics per mode.
    seed0: BTreeMap<&'static str, MetricsReport>,
    /// Final metrics per seed and mode.
    by_seed: Vec<BTreeMap<&'static str, FinalMetrics>>,
    /// The seed-0 data, reused for later checks.
    prep0: Prepared,
}

fn run_ablation() -> (Ablation, f64) {
    let start = Instant::now();
    let mut by_seed = Vec::new();
    let mut seed0 = BTreeMap::new();
    let mut prep0 = None;
    for seed in 0..5u64 {
        let cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
        let prep = prepare(&cfg).unwrap();
        let mut row = BTreeMap::new();
        for mode in Mode::ALL {
            if seed > 0 && mode == Mode::NoDistillDirect {
                continue;
            }
            let out = run_prepared(&ExperimentConfig { mode, ..cfg.clone() }, &prep).unwrap();
            row.insert(mode.name(), out.report.final_metrics);
            if seed == 0 {
                seed0.insert(mode.name(), out.report);
            }
        }
        by_seed.push(row);
        if seed == 0 {
            prep0 = Some(prep);
        }
    }
    (Ablation { seed0, by_seed, prep0: prep0.unwrap() }, start.elapsed().as_secs_f64())
}

fn criterion_4(ab: &Ablation, secs: f64) -> Outcome {
    let m = |mode: &str| ab.seed0[mode].final_metrics;
    let (full, lora) = (m("full"), m("lora_only"));
    let a = full.attention_kl <= 0.5 * lora.attention_kl;
    let b = full.similarity_mse <= 0.7 * lora.similarity_mse;
    let c = full.attention_overlap >= lora.attention_overlap + 0.10;
    let band = 0.02;
    let ordered = |row: &BTreeMap<&str, FinalMetrics>| {
        let acc = |k: &str| row[k].eval_accuracy;
        let singles = [acc("no_vis"), acc("no_att")];
        singles.iter().all(|&s| acc("full") >= s - band && s >= acc("lora_only") - band)
    };
    let good: Vec<bool> = ab.by_seed.iter().map(ordered).collect();
    let d = good.iter().filter(|&&g| g).count() >= 3;
    let e = m("no_distill_direct").eval_lm_loss > full.eval_lm_loss;
    let timely = secs <= 300.0;
    let flag = |ok: bool| if ok { "ok" } else { "FAIL" };
    outcome(
        a && b && c && d && e && timely,
        format!(
            "(a) kl {:.3} vs {:.3} {} (b) mse {:.4} vs {:.4} {} (c) overlap {:.3} vs {:.3} {} \
             (d) accuracy ordering in {}/5 seeds {} (e) direct lm {:.3} vs full {:.3} {}; {secs:.0}s",
            full.attention_kl, lora.attention_kl, flag(a),
            full.similarity_mse, lora.similarity_mse, flag(b),
            full.attention_overlap, lora.attention_overlap, flag(c),
            good.iter().filter(|&&g| g).count(), flag(d),
            m("no_distill_direct").eval_lm_loss, full.eval_lm_loss, flag(e),
        ),
    )
}

fn criterion_5(ab: &Ablation) -> Outcome {
    let zero = ExperimentConfig { alpha: 0.0, beta: 0.0, ..ExperimentConfig::default() };
    let out = run_prepared(&zero, &ab.prep0).unwrap();
    let csv_equal = out.report.to_csv() == ab.seed0["lora_only"].to_csv();
    let theta = out.base_checksum_before == out.base_checksum_after
        && out.base_checksum_before == ab.prep0.model.checksum();

    let full = ExperimentConfig::default();
    let step = full.step_config();
    let tr = Trainables::new(&ab.prep0.model, full.adapter_rank, &step.distill_layers, 0).unwrap();
    let logits_equal = ab.prep0.eval.iter().take(20).all(|(seq, tgt)| {
        let base = forward(&ab.prep0.model, None, seq).unwrap();
        let ev = evaluate_example(&ab.prep0.model, &tr, seq, tgt, &step).unwrap();
        base.logits == ev.trace.logits
    });
    outcome(
        csv_equal && theta && logits_equal,
        format!("full(0,0) csv == lora_only csv: {csv_equal}; base checksum unchanged: {theta}; zero-init logits bitwise equal: {logits_equal}"),
    )
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "tgrid" || e == "csv") {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_6() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_distill"))
            .args(["run", "--seed", "0", "--out"])
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        dir_bytes(&out)
    };
    let (a, b) = (run("a"), run("b"));
    let tgrids = a.keys().filter(|k| k.ends_with(".tgrid")).count();
    outcome(
        a == b && a.contains_key("metrics.csv") && tgrids > 0,
        format!("two `run --seed 0` invocations: {} files ({tgrids} TGRID1) byte-identical: {}", a.len(), a == b),
    )
}

fn criterion_7(ab: &Ablation) -> Outcome {
    let start = Instant::now();
    let mut interior = 0;
    let mut lines = Vec::new();
    let mut csv = String::from("seed,layer,eval_lm_loss,eval_accuracy\n");
    for seed in 0..5u64 {
        let cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
        let prep = if seed == 0 { None } else { Some(prepare(&cfg).unwrap()) };
        let prep = prep.as_ref().unwrap_or(&ab.prep0);
        let mut losses = Vec::new();
        for layer in 1..=cfg.n_layers {
            let m = if layer == cfg.distill_layer {
                ab.by_seed[seed as usize]["full"]
            } else {
                run_prepared(&ExperimentConfig { distill_layer: layer, ..cfg.clone() }, prep)
                    .unwrap()
                    .report
                    .final_metrics
            };
            csv.push_str(&format!("{seed},{layer},{},{}\n", m.eval_lm_loss, m.eval_accuracy));
            losses.push(m.eval_lm_loss);
        }
        let best = 1 + (0..losses.len()).fold(0, |b, i| if losses[i] < losses[b] { i } else { b });
        if best > 1 && best < cfg.n_layers {
            interior += 1;
        }
        lines.push(format!("seed {seed} best l={best}"));
    }
    let out = std::env::temp_dir().join("distill_layer_sweep.csv");
    fs::write(&out, csv).unwrap();
    outcome(
        interior >= 3,
        format!(
            "interior best layer (by eval LM loss) in {interior}/5 seeds [{}]; csv at {}; {:.0}s",
            lines.join(", "),
            out.display(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn report(id: &str, o: &Outcome, blocking: bool) -> bool {
    let tag = match (o.passed, blocking) {
        (true, _) => "PASS",
        (false, true) => "FAIL",
        (false, false) => "WARN",
    };
    println!("criterion {id}: {tag} - {}", o.detail);
    o.passed || !blocking
}

fn main() {
    let mut ok = true;
    ok &= report("1 gradient correctness", &criterion_1(), true);
    ok &= report("2 interpolation oracle", &criterion_2(), true);
    ok &= report("3 loss invariants", &criterion_3(), true);
    let (ab, secs) = run_ablation();
    ok &= report("4 toy ablation", &criterion_4(&ab, secs), true);
    ok &= report("5 mode equivalence and frozen base", &criterion_5(&ab), true);
    ok &= report("6 determinism", &criterion_6(), true);
    ok &= report("7 layer sweep", &criterion_7(&ab), false);
    if !ok {
        std::process::exit(1);
    }
}
