//! Structure and attention distillation losses.
//!
//! * rotation: each student token `x` becomes `(I + W) x`
//! * structure loss: mean squared difference of the pairwise cosine matrices
//! * attention loss: `KL(softmax(teacher) || softmax(student))`
//! * combined: `lm + alpha * structure + beta * attention`

use crate::error::{invalid, Error, Result};
use crate::interp::FeatureGrid;
use crate::tensor::{log_softmax, softmax};

/// Trainable `d × d` steering matrix; starts at zero so `I + W = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationParams {
    dim: usize,
    w: Vec<f64>,
}

impl RotationParams {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, w: vec![0.0; dim * dim] }
    }

    pub fn from_matrix(dim: usize, w: Vec<f64>) -> Result<Self> {
        if dim == 0 || w.len() != dim * dim {
            return Err(invalid(format!(
                "rotation matrix must be {dim}x{dim}, got {} values",
                w.len()
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(invalid("rotation matrix contains non-finite values"));
        }
        Ok(Self { dim, w })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.w
    }

    pub fn matrix_mut(&mut self) -> &mut [f64] {
        &mut self.w
    }

    /// `I + W` as a dense row-major matrix.
    pub fn transform(&self) -> Vec<f64> {
        let mut m = self.w.clone();
        for i in 0..self.dim {
            m[i * self.dim + i] += 1.0;
        }
        m
    }
}

/// Pairwise cosine similarities between the tokens of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    s: Vec<f64>,
    zero_rows: usize,
}

impl SimilarityMatrix {
    pub fn from_values(n: usize, s: Vec<f64>) -> Result<Self> {
        if n == 0 || s.len() != n * n {
            return Err(invalid(format!("similarity matrix must be {n}x{n}")));
        }
        Ok(Self { n, s, zero_rows: 0 })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.s
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s[i * self.n + j]
    }

    /// Rows with zero norm encountered while building the matrix.
    pub fn zero_rows(&self) -> usize {
        self.zero_rows
    }
}

/// Attention scores over a token grid. `normalized` marks softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionVector {
    pub scores: Vec<f64>,
    pub normalized: bool,
}

impl AttentionVector {
    pub fn raw(scores: Vec<f64>) -> Self {
        Self { scores, normalized: false }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn softmaxed(&self) -> Result<Self> {
        if self.normalized {
            return Ok(self.clone());
        }
        Ok(Self { scores: softmax(&self.scores)?, normalized: true })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillationWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl DistillationWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(Self { alpha, beta })
    }
}

impl Default for DistillationWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.03 }
    }
}

/// Applies `(I + W)` to every token vector; row-major this is `X (I + W)^T`.
pub fn rotate_features(x: &FeatureGrid, r: &RotationParams) -> Result<FeatureGrid> {
    let d = x.channels();
    if r.dim() != d {
        return Err(invalid(format!(
            "rotation is {0}x{0} but features have {d} channels",
            r.dim()
        )));
    }
    let m = r.transform();
    let mut out = Vec::with_capacity(x.values().len());
    for t in 0..x.tokens() {
        let token = x.token(t);
        for row in m.chunks(d) {
            out.push(row.iter().zip(token).map(|(a, b)| a * b).sum());
        }
    }
    FeatureGrid::new(x.shape(), d, out)
}

/// Cosine similarity of every token pair. A zero token has similarity 0 with
/// every other token and 1 with itself.
pub fn similarity_matrix(f: &FeatureGrid) -> SimilarityMatrix {
    cosine_matrix(f.values(), f.channels())
}

pub(crate) fn cosine_matrix(values: &[f64], k: usize) -> SimilarityMatrix {
    let n = values.len() / k;
    let norms: Vec<f64> = values
        .chunks(k)
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let units: Vec<Option<Vec<f64>>> = values
        .chunks(k)
        .zip(&norms)
        .map(|(r, &n)| (n > 0.0).then(|| r.iter().map(|x| x / n).collect()))
        .collect();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        s[i * n + i] = 1.0;
        let Some(ui) = &units[i] else { continue };
        for j in (i + 1)..n {
            if let Some(uj) = &units[j] {
                let c: f64 = ui.iter().zip(uj).map(|(a, b)| a * b).sum();
                s[i * n + j] = c;
                s[j * n + i] = c;
            }
        }
    }
    let zero_rows = norms.iter().filter(|&&n| n == 0.0).count();
    SimilarityMatrix { n, s, zero_rows }
}

/// Mean squared difference between two similarity matrices.
pub fn visual_alignment_loss(se: &SimilarityMatrix, sx: &SimilarityMatrix) -> Result<f64> {
    if se.size() != sx.size() {
        return Err(invalid(format!(
            "similarity matrices differ in size: {} vs {}",
            se.size(),
            sx.size()
        )));
    }
    let n = se.size() as f64;
    let sum: f64 = se.values().iter().zip(sx.values()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / (n * n))
}

/// Element-wise mean over heads of raw (pre-softmax) scores.
pub fn average_heads(per_head: &[Vec<f64>]) -> Result<AttentionVector> {
    let Some(first) = per_head.first() else {
        return Err(invalid("average_heads needs at least one head"));
    };
    let n = first.len();
    if per_head.iter().any(|h| h.len() != n) {
        return Err(invalid("heads have different lengths"));
    }
    let h = per_head.len() as f64;
    let scores = (0..n)
        .map(|i| per_head.iter().map(|row| row[i]).sum::<f64>() / h)
        .collect();
    Ok(AttentionVector::raw(scores))
}

/// `KL(softmax(teacher) || softmax(student))` on raw scores.
pub fn attention_alignment_loss(teacher_raw: &AttentionVector, student_raw: &AttentionVector) -> Result<f64> {
    check_pair(teacher_raw, student_raw)?;
    Ok(kl_from_raw(&teacher_raw.scores, &student_raw.scores))
}

pub(crate) fn kl_from_raw(teacher: &[f64], student: &[f64]) -> f64 {
    let log_p = log_softmax(teacher);
    let log_q = log_softmax(student);
    let kl: f64 = log_p
        .iter()
        .zip(&log_q)
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum();
    // rounding can leave a tiny negative value at equality
    kl.max(0.0)
}

pub(crate) fn check_pair(teacher: &AttentionVector, student: &AttentionVector) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(invalid(format!(
            "attention lengths differ: teacher {} vs student {}",
            teacher.len(),
            student.len()
        )));
    }
    if teacher.is_empty() {
        return Err(invalid("attention vectors are empty"));
    }
    if teacher.scores.iter().chain(&student.scores).any(|v| !v.is_finite()) {
        return Err(invalid("attention scores must be finite"));
    }
    Ok(())
}

pub fn combined_objective(l_llm: f64, l_vis: f64, l_att: f64, w: DistillationWeights) -> Result<f64> {
    for (name, v) in [("l_llm", l_llm), ("l_vis", l_vis), ("l_att", l_att)] {
        if !v.is_finite() {
            return Err(invalid(format!("{name} is not finite")));
        }
    }
    let w = DistillationWeights::new(w.alpha, w.beta)
        .map_err(|e| invalid(e.to_string()))?;
    Ok(l_llm + w.alpha * l_vis + w.beta * l_att)
}
