//! Minimal reverse-mode autodiff over dense row-major matrices.
//!
//! Every op records its inputs; [`Tape::backward`] walks the nodes in reverse
//! creation order, so a node's gradient is complete before it is propagated.
//! Reduction order is fixed, which keeps results bitwise reproducible.

use crate::tensor::{log_softmax, softmax_unchecked};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols} from {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn rows_range(&self, start: usize, len: usize) -> Mat {
        Mat::new(len, self.cols, self.data[start * self.cols..(start + len) * self.cols].to_vec())
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// `a · b`
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols);
    let mut out = vec![0.0; a.rows * b.cols];
    for (orow, arow) in out.chunks_exact_mut(b.cols).zip(a.data.chunks_exact(a.cols)) {
        for (&aik, brow) in arow.iter().zip(b.data.chunks_exact(b.cols)) {
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += aik * bv);
        }
    }
    Mat::new(a.rows, b.cols, out)
}

/// `a · bᵀ`
fn matmul_bt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols);
    matmul(a, &transpose(b))
}

/// `aᵀ · b`
fn matmul_at(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows);
    let mut out = vec![0.0; a.cols * b.cols];
    for (ar, br) in a.data.chunks_exact(a.cols).zip(b.data.chunks_exact(b.cols)) {
        for (&av, orow) in ar.iter().zip(out.chunks_exact_mut(b.cols)) {
            orow.iter_mut().zip(br).for_each(|(o, bv)| *o += av * bv);
        }
    }
    Mat::new(a.cols, b.cols, out)
}

fn transpose(a: &Mat) -> Mat {
    let mut out = vec![0.0; a.data.len()];
    for i in 0..a.rows {
        for j in 0..a.cols {
            out[j * a.rows + i] = a.data[i * a.cols + j];
        }
    }
    Mat::new(a.cols, a.rows, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    WeightedSum(Vec<(NodeId, f64)>),
    Transpose(NodeId),
    RmsNorm { input: NodeId, inv_rms: Vec<f64> },
    Gelu { input: NodeId, tanh: Vec<f64> },
    MatMulT(NodeId, NodeId),
    SliceRows { input: NodeId, start: usize },
    SliceCols { input: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    MeanRows(NodeId),
    /// Row softmax where query `i` may see key `j` iff `j < prefix || j <= i`.
    PrefixSoftmax { input: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    Cosine { input: NodeId, units: Vec<f64>, norms: Vec<f64> },
    MseConst { input: NodeId, target: Vec<f64> },
    KlConst { student: NodeId, teacher_probs: Vec<f64>, student_probs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    /// Depends on some `Leaf`; gradients are only computed for these.
    live: bool,
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) => vec![*a, *b],
            Op::WeightedSum(t) => t.iter().map(|(id, _)| *id).collect(),
            Op::ConcatRows(p) | Op::ConcatCols(p) => p.clone(),
            Op::Scale(a, _) | Op::Transpose(a) | Op::MeanRows(a) => vec![*a],
            Op::Gelu { input, .. } => vec![*input],
            Op::RmsNorm { input, .. }
            | Op::SliceRows { input, .. }
            | Op::SliceCols { input, .. }
            | Op::PrefixSoftmax { input }
            | Op::Cosine { input, .. }
            | Op::MseConst { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::KlConst { student, .. } => vec![*student],
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    prefix: usize,
}

/// Gradients of one scalar root with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of `id`, or zeros of the node's shape if nothing reached it.
    pub fn get_or_zeros(&self, tape: &Tape, id: NodeId) -> Mat {
        self.get(id).cloned().unwrap_or_else(|| {
            let v = tape.value(id);
            Mat::zeros(v.rows, v.cols)
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of always-visible key positions used by [`Tape::prefix_softmax`].
    pub fn set_visible_prefix(&mut self, prefix: usize) {
        self.prefix = prefix;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        let live = matches!(op, Op::Leaf) || op.inputs().iter().any(|id| self.nodes[id.0].live);
        self.nodes.push(Node { value, op, live });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_bt(self.value(a), self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let src = self.value(a);
        let v = Mat::new(src.rows, src.cols, src.data.iter().map(|x| x * s).collect());
        self.push(v, Op::Scale(a, s))
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let first = self.value(terms[0].0);
        let mut v = Mat::zeros(first.rows, first.cols);
        for &(id, w) in terms {
            let src = self.value(id);
            v.data.iter_mut().zip(&src.data).for_each(|(o, x)| *o += w * x);
        }
        self.push(v, Op::WeightedSum(terms.to_vec()))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = transpose(self.value(a));
        self.push(v, Op::Transpose(a))
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps)` without a learned gain.
    pub fn rms_norm(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut out = src.data.clone();
        let mut inv = Vec::with_capacity(src.rows);
        for row in out.chunks_mut(src.cols) {
            let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            row.iter_mut().for_each(|x| *x *= r);
            inv.push(r);
        }
        let v = Mat::new(src.rows, src.cols, out);
        self.push(v, Op::RmsNorm { input: a, inv_rms: inv })
    }

    /// tanh approximation of GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let tanh: Vec<f64> = src.data.iter().map(|&x| (GELU_C * (x + 0.044715 * x * x * x)).tanh()).collect();
        let data = src.data.iter().zip(&tanh).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let v = Mat::new(src.rows, src.cols, data);
        self.push(v, Op::Gelu { input: a, tanh })
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).rows_range(start, len);
        self.push(v, Op::SliceRows { input: a, start })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let src = self.value(a);
        let data = (0..src.rows)
            .flat_map(|r| src.row(r)[start..start + len].iter().copied())
            .collect();
        let v = Mat::new(src.rows, len, data);
        self.push(v, Op::SliceCols { input: a, start })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols);
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        self.push(Mat::new(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(Mat::new(rows, cols, data), Op::ConcatCols(parts.to_vec()))
    }

    /// Column means as a `1 × cols` row.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut out = vec![0.0; src.cols];
        for r in 0..src.rows {
            out.iter_mut().zip(src.row(r)).for_each(|(o, x)| *o += x);
        }
        let n = src.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        self.push(Mat::new(1, src.cols, out), Op::MeanRows(a))
    }

    /// Row softmax over a square score matrix with a bidirectional prefix of
    /// [`Tape::set_visible_prefix`] keys and causal masking after it.
    pub fn prefix_softmax(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let prefix = self.prefix;
        let mut out = vec![0.0; src.data.len()];
        for i in 0..src.rows {
            let visible = prefix.max(i + 1).min(src.cols);
            let p = softmax_unchecked(&src.row(i)[..visible]);
            out[i * src.cols..i * src.cols + visible].copy_from_slice(&p);
        }
        let v = Mat::new(src.rows, src.cols, out);
        self.push(v, Op::PrefixSoftmax { input: a })
    }

    /// Mean over rows of `-ln softmax(logits_r)[targets_r]`, as a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let src = self.value(logits);
        assert_eq!(src.rows, targets.len());
        let mut probs = Vec::with_capacity(src.data.len());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let lp = log_softmax(src.row(r));
            total -= lp[t];
            probs.extend(lp.iter().map(|x| x.exp()));
        }
        let v = Mat::new(1, 1, vec![total / targets.len() as f64]);
        self.push(v, Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Pairwise cosine similarity of rows. Zero rows: 0 off-diagonal, 1 on it.
    pub fn cosine(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let (n, k) = (src.rows, src.cols);
        let norms: Vec<f64> = (0..n)
            .map(|r| src.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let units: Vec<f64> = (0..n)
            .flat_map(|r| {
                let nr = norms[r];
                src.row(r).iter().map(move |x| if nr > 0.0 { x / nr } else { 0.0 })
            })
            .collect();
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            s[i * n + i] = 1.0;
            for j in (i + 1)..n {
                let c: f64 = units[i * k..(i + 1) * k]
                    .iter()
                    .zip(&units[j * k..(j + 1) * k])
                    .map(|(x, y)| x * y)
                    .sum();
                s[i * n + j] = c;
                s[j * n + i] = c;
            }
        }
        self.push(Mat::new(n, n, s), Op::Cosine { input: a, units, norms })
    }

    /// `mean((a - target)^2)` with a constant target.
    pub fn mse_const(&mut self, a: NodeId, target: &[f64]) -> NodeId {
        let src = self.value(a);
        assert_eq!(src.data.len(), target.len());
        let sum: f64 = src.data.iter().zip(target).map(|(x, t)| (x - t) * (x - t)).sum();
        let v = Mat::new(1, 1, vec![sum / target.len() as f64]);
        self.push(v, Op::MseConst { input: a, target: target.to_vec() })
    }

    /// `KL(softmax(teacher) || softmax(student))` for a `1 × n` student row and
    /// constant teacher scores.
    pub fn kl_const(&mut self, student: NodeId, teacher_raw: &[f64]) -> NodeId {
        let src = self.value(student);
        assert_eq!(src.data.len(), teacher_raw.len());
        let log_p = log_softmax(teacher_raw);
        let log_q = log_softmax(&src.data);
        let kl: f64 = log_p.iter().zip(&log_q).map(|(lp, lq)| lp.exp() * (lp - lq)).sum();
        let v = Mat::new(1, 1, vec![kl]);
        self.push(
            v,
            Op::KlConst {
                student,
                teacher_probs: log_p.iter().map(|x| x.exp()).collect(),
                student_probs: log_q.iter().map(|x| x.exp()).collect(),
            },
        )
    }

    /// Backpropagates `seed · d(root)` through the tape.
    pub fn backward(&self, root: NodeId, seed: f64) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let rv = self.value(root);
        grads[root.0] = Some(Mat::new(rv.rows, rv.cols, vec![seed; rv.data.len()]));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let live = |id: NodeId| self.nodes[id.0].live;
        let mut acc = |id: NodeId, delta: Mat| {
            if !live(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if live(*a) {
                    acc(*a, matmul_bt(g, self.value(*b)));
                }
                if live(*b) {
                    acc(*b, matmul_at(self.value(*a), g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale(a, s) => {
                acc(*a, Mat::new(g.rows, g.cols, g.data.iter().map(|x| x * s).collect()));
            }
            Op::WeightedSum(terms) => {
                for &(id, w) in terms {
                    acc(id, Mat::new(g.rows, g.cols, g.data.iter().map(|x| x * w).collect()));
                }
            }
            Op::Transpose(a) => acc(*a, transpose(g)),
            Op::RmsNorm { input, inv_rms } => {
                let y = &node.value;
                let cols = y.cols;
                let mut dx = vec![0.0; g.data.len()];
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = (gr[c] - yr[c] * dot) * inv_rms[r];
                    }
                }
                acc(*input, Mat::new(y.rows, cols, dx));
            }
            Op::Gelu { input, tanh } => {
                let x = self.value(*input);
                let data = x
                    .data
                    .iter()
                    .zip(tanh)
                    .zip(&g.data)
                    .map(|((&x, &t), &gv)| {
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                acc(*input, Mat::new(x.rows, x.cols, data));
            }
            Op::MatMulT(a, b) => {
                if live(*a) {
                    acc(*a, matmul(g, self.value(*b)));
                }
                if live(*b) {
                    acc(*b, matmul_at(g, self.value(*a)));
                }
            }
            Op::SliceRows { input, start } => {
                let src = self.value(*input);
                let mut d = Mat::zeros(src.rows, src.cols);
                d.data[start * src.cols..start * src.cols + g.data.len()].copy_from_slice(&g.data);
                acc(*input, d);
            }
            Op::SliceCols { input, start } => {
                let src = self.value(*input);
                let mut d = Mat::zeros(src.rows, src.cols);
                for r in 0..g.rows {
                    d.data[r * src.cols + start..r * src.cols + start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*input, d);
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    acc(p, g.rows_range(row, rows));
                    row += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    let data = (0..g.rows)
                        .flat_map(|r| g.row(r)[col..col + cols].iter().copied())
                        .collect();
                    acc(p, Mat::new(g.rows, cols, data));
                    col += cols;
                }
            }
            Op::MeanRows(a) => {
                let src = self.value(*a);
                let n = src.rows as f64;
                let row: Vec<f64> = g.data.iter().map(|x| x / n).collect();
                let data = (0..src.rows).flat_map(|_| row.iter().copied()).collect();
                acc(*a, Mat::new(src.rows, src.cols, data));
            }
            Op::PrefixSoftmax { input } => {
                let p = &node.value;
                let mut d = vec![0.0; p.data.len()];
                for r in 0..p.rows {
                    let pr = p.row(r);
                    let gr = g.row(r);
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..p.cols {
                        d[r * p.cols + c] = pr[c] * (gr[c] - dot);
                    }
                }
                acc(*input, Mat::new(p.rows, p.cols, d));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let src = self.value(*logits);
                let scale = g.scalar() / targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * src.cols + t] -= scale;
                }
                acc(*logits, Mat::new(src.rows, src.cols, d));
            }
            Op::Cosine { input, units, norms } => {
                let src = self.value(*input);
                let (n, k) = (src.rows, src.cols);
                let mut d = vec![0.0; n * k];
                for i in 0..n {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    let ui = &units[i * k..(i + 1) * k];
                    let mut gu = vec![0.0; k];
                    for j in 0..n {
                        if j == i || norms[j] == 0.0 {
                            continue;
                        }
                        let w = g.data[i * n + j] + g.data[j * n + i];
                        gu.iter_mut()
                            .zip(&units[j * k..(j + 1) * k])
                            .for_each(|(o, u)| *o += w * u);
                    }
                    let proj: f64 = gu.iter().zip(ui).map(|(a, b)| a * b).sum();
                    for c in 0..k {
                        d[i * k + c] = (gu[c] - proj * ui[c]) / norms[i];
                    }
                }
                acc(*input, Mat::new(n, k, d));
            }
            Op::MseConst { input, target } => {
                let src = self.value(*input);
                let scale = 2.0 * g.scalar() / target.len() as f64;
                let d = src.data.iter().zip(target).map(|(x, t)| scale * (x - t)).collect();
                acc(*input, Mat::new(src.rows, src.cols, d));
            }
            Op::KlConst { student, teacher_probs, student_probs } => {
                let src = self.value(*student);
                let s = g.scalar();
                let d = student_probs.iter().zip(teacher_probs).map(|(q, p)| s * (q - p)).collect();
                acc(*student, Mat::new(src.rows, src.cols, d));
            }
        }
    }
}
