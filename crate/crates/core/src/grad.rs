//! Closed-form gradients of the distillation losses and the central-difference
//! checker that gates every analytic gradient in the crate.

use std::collections::BTreeMap;

use crate::error::{invalid, Error, Result};
use crate::interp::FeatureGrid;
use crate::losses::{check_pair, AttentionVector, RotationParams, SimilarityMatrix};
use crate::tensor::{softmax_unchecked, Tensor};

/// Partial derivatives keyed by parameter name, each shaped like its parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientBundle {
    entries: BTreeMap<String, Tensor>,
}

impl GradientBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.entries.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Gradient of the structure loss plus the number of rotated tokens with zero
/// norm, whose contribution is defined as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualGrad {
    pub bundle: GradientBundle,
    pub zero_rows: usize,
}

/// Gradient of the structure loss with respect to the student tokens (`"x"`)
/// and the rotation (`"w"`). The expert matrix is a constant.
pub fn grad_visual_alignment(
    x: &FeatureGrid,
    r: &RotationParams,
    se: &SimilarityMatrix,
) -> Result<VisualGrad> {
    let d = x.channels();
    let n = x.tokens();
    if r.dim() != d {
        return Err(invalid("rotation and feature widths differ"));
    }
    if se.size() != n {
        return Err(invalid(format!(
            "expert similarity is {0}x{0}, student has {n} tokens",
            se.size()
        )));
    }
    let (gx, gw, zero_rows) = visual_grad_raw(x.values(), d, r.matrix(), se.values());
    let mut bundle = GradientBundle::new();
    bundle.insert("x", Tensor::new(vec![n, d], gx)?);
    bundle.insert("w", Tensor::new(vec![d, d], gw)?);
    Ok(VisualGrad { bundle, zero_rows })
}

/// Returns `(dL/dX, dL/dW, zero_rows)` for `X` row-major `n × d`.
///
/// With `y_i = (I + W) x_i`, `u_i = y_i / |y_i|` and `G = -2 (Se - Sx) / n^2`:
/// `dL/du_i = 2 sum_j G_ij u_j`, `dL/dy_i = (I - u_i u_i^T) dL/du_i / |y_i|`,
/// `dL/dx_i = (I + W)^T dL/dy_i`, `dL/dW = sum_i dL/dy_i x_i^T`.
pub(crate) fn visual_grad_raw(
    x: &[f64],
    d: usize,
    w: &[f64],
    se: &[f64],
) -> (Vec<f64>, Vec<f64>, usize) {
    let n = x.len() / d;
    let mut m = w.to_vec();
    for i in 0..d {
        m[i * d + i] += 1.0;
    }
    let y: Vec<f64> = x
        .chunks(d)
        .flat_map(|xi| m.chunks(d).map(move |row| row.iter().zip(xi).map(|(a, b)| a * b).sum()))
        .collect();
    let norms: Vec<f64> = y.chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let u: Vec<f64> = y
        .chunks(d)
        .zip(&norms)
        .flat_map(|(r, &nm)| r.iter().map(move |v| if nm > 0.0 { v / nm } else { 0.0 }))
        .collect();
    let scale = -2.0 / (n * n) as f64;
    let mut gy = vec![0.0; n * d];
    let mut zero_rows = 0;
    for i in 0..n {
        if norms[i] == 0.0 {
            zero_rows += 1;
            continue;
        }
        let ui = &u[i * d..(i + 1) * d];
        let mut gu = vec![0.0; d];
        for j in 0..n {
            if j == i || norms[j] == 0.0 {
                continue;
            }
            let uj = &u[j * d..(j + 1) * d];
            let sx: f64 = ui.iter().zip(uj).map(|(a, b)| a * b).sum();
            let g = 2.0 * scale * (se[i * n + j] - sx);
            gu.iter_mut().zip(uj).for_each(|(acc, v)| *acc += g * v);
        }
        let proj: f64 = gu.iter().zip(ui).map(|(a, b)| a * b).sum();
        for c in 0..d {
            gy[i * d + c] = (gu[c] - proj * ui[c]) / norms[i];
        }
    }
    let mut gx = vec![0.0; n * d];
    let mut gw = vec![0.0; d * d];
    for i in 0..n {
        let gyi = &gy[i * d..(i + 1) * d];
        let xi = &x[i * d..(i + 1) * d];
        for a in 0..d {
            for b in 0..d {
                gx[i * d + b] += m[a * d + b] * gyi[a];
                gw[a * d + b] += gyi[a] * xi[b];
            }
        }
    }
    (gx, gw, zero_rows)
}

/// Gradient of `KL(softmax(teacher) || softmax(student))` in the student
/// scores: `softmax(student) - softmax(teacher)`.
pub fn grad_attention_alignment(
    teacher_raw: &AttentionVector,
    student_raw: &AttentionVector,
) -> Result<GradientBundle> {
    check_pair(teacher_raw, student_raw)?;
    let g = attention_grad_raw(&teacher_raw.scores, &student_raw.scores);
    let mut bundle = GradientBundle::new();
    bundle.insert("student", Tensor::new(vec![g.len()], g)?);
    Ok(bundle)
}

pub(crate) fn attention_grad_raw(teacher: &[f64], student: &[f64]) -> Vec<f64> {
    let p = softmax_unchecked(teacher);
    let q = softmax_unchecked(student);
    q.iter().zip(&p).map(|(q, p)| q - p).collect()
}

/// Named flat parameter vectors, the domain of a checked objective.
pub type ParamSet = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    /// Set when the objective became non-finite at some probe.
    pub failure: Option<String>,
    pub passed: bool,
}

impl FiniteDiffReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failed_params(&self) -> Vec<&str> {
        self.params.iter().filter(|p| !p.passed).map(|p| p.name.as_str()).collect()
    }

    /// Plain-text summary, one line per parameter.
    pub fn render(&self) -> String {
        let mut out = format!(
            "epsilon {:e} tolerance {:e} result {}\n",
            self.epsilon,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        );
        if let Some(f) = &self.failure {
            out.push_str(&format!("failure {f}\n"));
        }
        for p in &self.params {
            out.push_str(&format!(
                "{} {} max_rel_error {:.3e} at {}\n",
                if p.passed { "PASS" } else { "FAIL" },
                p.name,
                p.max_rel_error,
                p.worst_index
            ));
        }
        out
    }
}

pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against central differences of `objective` for every
/// entry of every parameter in `analytic`.
pub fn finite_difference_check<F>(
    objective: F,
    params: &ParamSet,
    analytic: &GradientBundle,
    epsilon: f64,
    tolerance: f64,
) -> Result<FiniteDiffReport>
where
    F: Fn(&ParamSet) -> f64,
{
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon must be positive"));
    }
    let mut probe = params.clone();
    let mut checks = Vec::new();
    let mut failure = None;
    'outer: for (name, grad) in analytic.iter() {
        let Some(base) = params.get(name) else {
            return Err(invalid(format!("gradient for unknown parameter {name}")));
        };
        if base.len() != grad.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient for {name} has {} entries, parameter has {}",
                grad.len(),
                base.len()
            )));
        }
        let mut worst = (0.0, 0);
        for i in 0..base.len() {
            let slot = |p: &mut ParamSet, v: f64| p.get_mut(name).expect("present")[i] = v;
            slot(&mut probe, base[i] + epsilon);
            let plus = objective(&probe);
            slot(&mut probe, base[i] - epsilon);
            let minus = objective(&probe);
            slot(&mut probe, base[i]);
            if !plus.is_finite() || !minus.is_finite() {
                failure = Some(format!("objective not finite when probing {name}[{i}]"));
                checks.push(ParamCheck {
                    name: name.to_string(),
                    max_rel_error: f64::INFINITY,
                    worst_index: i,
                    passed: false,
                });
                break 'outer;
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(grad.data()[i], numeric);
            if err > worst.0 || i == 0 {
                worst = (err, i);
            }
        }
        checks.push(ParamCheck {
            name: name.to_string(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            passed: worst.0 <= tolerance,
        });
    }
    let passed = failure.is_none() && checks.iter().all(|c| c.passed);
    Ok(FiniteDiffReport { epsilon, tolerance, params: checks, failure, passed })
}
