use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use distill_core::config::{ExperimentConfig, Mode};
use distill_core::harness::{
    ablation, ablation_csv, grad_check_command, layer_sweep, layer_sweep_csv, run_experiment, GradCheckOptions,
};
use distill_core::interp::{interpolate_attention, interpolate_features, FeatureGrid, GridShape};
use distill_core::io::{format_float, read_tgrid, write_tgrid};
use distill_core::losses::{
    attention_alignment_loss, average_heads, similarity_matrix, visual_alignment_loss, AttentionVector,
};
use distill_core::tensor::Tensor;

/// Alignment distillation experiments on a toy vision-language transformer.
#[derive(Parser)]
#[command(name = "distill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Run {
        #[command(flatten)]
        common: Common,
        /// Overrides the mode in the config.
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Run all five modes on the same data.
    Ablation {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of the whole model's gradients.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        instances: usize,
        /// Perturb this parameter's analytic gradient; the check should fail.
        #[arg(long)]
        corrupt_param: Option<String>,
    },
    /// One run per distillation layer.
    LayerSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated layers; defaults to every layer.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
    },
    /// Resize a TGRID1 grid: rank 3 (h, w, c) features are renormalized,
    /// rank 2 (h, w) scores are resized raw.
    Interp {
        #[arg(long)]
        input: PathBuf,
        /// Target grid as HxW.
        #[arg(long)]
        to: GridShape,
        #[arg(long)]
        output: PathBuf,
    },
    /// Structure and attention losses between TGRID1 inputs.
    Losses {
        /// Expert features, (h, w, b).
        #[arg(long)]
        expert_features: Option<PathBuf>,
        /// Student features, (h, w, d).
        #[arg(long)]
        student_features: Option<PathBuf>,
        /// Expert attention, (h, w).
        #[arg(long)]
        expert_attention: Option<PathBuf>,
        /// Student attention, (h, w) or per head (heads, h, w).
        #[arg(long)]
        student_attention: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self, fallback: ExperimentConfig) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => fallback,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let out = self
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok((cfg, out))
    }
}

fn grid_of(t: &Tensor, what: &str) -> Result<(GridShape, usize)> {
    match *t.dims() {
        [h, w] => Ok((GridShape::new(h, w)?, 1)),
        [h, w, c] => Ok((GridShape::new(h, w)?, c)),
        _ => bail!("{what}: expected rank 2 or 3, got dims {:?}", t.dims()),
    }
}

fn features(path: &Path) -> Result<FeatureGrid> {
    let t = read_tgrid(path)?;
    if t.dims().len() != 3 {
        bail!("{}: features must be rank 3 (h, w, channels)", path.display());
    }
    let (shape, c) = grid_of(&t, "features")?;
    Ok(FeatureGrid::new(shape, c, t.into_data())?)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { common, mode } => {
            let (mut cfg, out) = common.load(ExperimentConfig::default())?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let result = run_experiment(&cfg)?;
            result.write(&cfg, &out)?;
            print!("{}", result.report.summary_json());
            println!();
        }
        Command::Ablation { common } => {
            let (cfg, out) = common.load(ExperimentConfig::default())?;
            let runs = ablation(&cfg)?;
            for (mode, r) in &runs {
                let arm = ExperimentConfig { mode: *mode, ..cfg.clone() };
                r.write(&arm, &out.join(mode.name()))?;
            }
            let csv = ablation_csv(&runs);
            fs::write(out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Command::GradCheck { common, instances, corrupt_param } => {
            let (cfg, out) = common.load(ExperimentConfig::grad_check_default())?;
            let report = grad_check_command(&cfg, &GradCheckOptions { instances, corrupt: corrupt_param })?;
            let text = report.render();
            fs::write(out.join("grad_check.txt"), &text)?;
            print!("{text}");
            return Ok(report.passed);
        }
        Command::LayerSweep { common, layers } => {
            let (cfg, out) = common.load(ExperimentConfig::default())?;
            let layers = if layers.is_empty() { (1..=cfg.n_layers).collect() } else { layers };
            let rows = layer_sweep(&cfg, &layers)?;
            let csv = layer_sweep_csv(&rows);
            fs::write(out.join("layer_sweep.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Interp { input, to, output } => {
            let t = read_tgrid(&input)?;
            let (shape, c) = grid_of(&t, "input")?;
            let resized = if t.dims().len() == 3 {
                let grid = interpolate_features(&FeatureGrid::new(shape, c, t.into_data())?, to)?.grid;
                Tensor::new(vec![to.h, to.w, c], grid.into_values())?
            } else {
                Tensor::new(vec![to.h, to.w], interpolate_attention(t.data(), shape, to)?)?
            };
            write_tgrid(&output, &resized)?;
        }
        Command::Losses { expert_features, student_features, expert_attention, student_attention } => {
            let mut any = false;
            if let (Some(e), Some(x)) = (&expert_features, &student_features) {
                let x = features(x)?;
                let e = interpolate_features(&features(e)?, x.shape())?.grid;
                let l = visual_alignment_loss(&similarity_matrix(&e), &similarity_matrix(&x))?;
                println!("l_vis,{}", format_float(l));
                any = true;
            }
            if let (Some(e), Some(s)) = (&expert_attention, &student_attention) {
                let s = read_tgrid(s)?;
                let (student, heads): (GridShape, Vec<Vec<f64>>) = match *s.dims() {
                    [h, w] => (GridShape::new(h, w)?, vec![s.data().to_vec()]),
                    [n, h, w] => (GridShape::new(h, w)?, s.data().chunks(h * w).take(n).map(<[f64]>::to_vec).collect()),
                    _ => bail!("student attention must be rank 2 or 3"),
                };
                let e = read_tgrid(e)?;
                let (expert, _) = grid_of(&e, "expert attention")?;
                if e.dims().len() != 2 {
                    bail!("expert attention must be rank 2 (h, w)");
                }
                let teacher = AttentionVector::raw(interpolate_attention(e.data(), expert, student)?);
                let l = attention_alignment_loss(&teacher, &average_heads(&heads)?)?;
                println!("l_att,{}", format_float(l));
                any = true;
            }
            if !any {
                bail!("give --expert-features with --student-features and/or --expert-attention with --student-attention");
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
