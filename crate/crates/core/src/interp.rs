//! Bilinear resizing between expert and student token grids.
//!
//! Sampling uses half-pixel centers with corner alignment off: output index
//! `i` reads source coordinate `(i + 0.5) * (src / dst) - 0.5`, clamped to
//! `[0, src - 1]`.

use crate::error::{invalid, Result};
use crate::tensor::l2_normalize_rows;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct GridShape {
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(invalid(format!("grid shape must be positive, got {h}x{w}")));
        }
        Ok(Self { h, w })
    }

    pub const fn square(side: usize) -> Self {
        Self { h: side, w: side }
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.w + col
    }
}

impl std::str::FromStr for GridShape {
    type Err = crate::error::Error;

    /// Parses `HxW`.
    fn from_str(s: &str) -> Result<Self> {
        let (h, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| invalid(format!("expected HxW, got {s:?}")))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| invalid(format!("bad grid side {v:?}")));
        Self::new(parse(h)?, parse(w)?)
    }
}

impl std::fmt::Display for GridShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

/// Feature vectors laid out on a grid, token `r * w + c` at row `r`, col `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    shape: GridShape,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(shape: GridShape, channels: usize, values: Vec<f64>) -> Result<Self> {
        if shape.h == 0 || shape.w == 0 || channels == 0 {
            return Err(invalid("feature grid dimensions must be positive"));
        }
        if values.len() != shape.tokens() * channels {
            return Err(invalid(format!(
                "feature grid {shape} x {channels} needs {} values, got {}",
                shape.tokens() * channels,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature grid contains non-finite values"));
        }
        Ok(Self { shape, channels, values })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tokens(&self) -> usize {
        self.shape.tokens()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    /// One channel as an `h × w` scalar field.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.channels).copied().collect()
    }
}

/// Per-axis sampling table: for each output index the two source taps and the
/// weight of the upper tap.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Resizes a single `src.h × src.w` scalar field to `dst`.
pub fn bilinear_resize(field: &[f64], src: GridShape, dst: GridShape) -> Result<Vec<f64>> {
    if src.h == 0 || src.w == 0 || dst.h == 0 || dst.w == 0 {
        return Err(invalid("bilinear_resize: zero-sized grid"));
    }
    if field.len() != src.tokens() {
        return Err(invalid(format!(
            "bilinear_resize: field has {} values, shape {src} needs {}",
            field.len(),
            src.tokens()
        )));
    }
    let rows = axis_taps(src.h, dst.h);
    let cols = axis_taps(src.w, dst.w);
    let mut out = Vec::with_capacity(dst.tokens());
    for &(r0, r1, ty) in &rows {
        let top = &field[r0 * src.w..(r0 + 1) * src.w];
        let bottom = &field[r1 * src.w..(r1 + 1) * src.w];
        for &(c0, c1, tx) in &cols {
            let upper = (1.0 - tx) * top[c0] + tx * top[c1];
            let lower = (1.0 - tx) * bottom[c0] + tx * bottom[c1];
            out.push((1.0 - ty) * upper + ty * lower);
        }
    }
    Ok(out)
}

/// Interpolated features and the number of rows that could not be normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolated {
    pub grid: FeatureGrid,
    pub zero_rows: usize,
}

/// Resizes every channel independently onto `target`, then rescales each token
/// vector to unit norm.
pub fn interpolate_features(e: &FeatureGrid, target: GridShape) -> Result<Interpolated> {
    let k = e.channels();
    let mut out = vec![0.0; target.tokens() * k];
    for c in 0..k {
        let resized = bilinear_resize(&e.channel(c), e.shape(), target)?;
        for (t, v) in resized.into_iter().enumerate() {
            out[t * k + c] = v;
        }
    }
    let normalized = l2_normalize_rows(&out, k)?;
    Ok(Interpolated {
        grid: FeatureGrid::new(target, k, normalized.rows)?,
        zero_rows: normalized.zero_rows,
    })
}

/// Resizes raw attention scores. No renormalization: the loss applies softmax.
pub fn interpolate_attention(a: &[f64], source: GridShape, target: GridShape) -> Result<Vec<f64>> {
    if a.len() != source.tokens() {
        return Err(invalid(format!(
            "attention has {} entries but source grid {source} has {} tokens",
            a.len(),
            source.tokens()
        )));
    }
    bilinear_resize(a, source, target)
}
