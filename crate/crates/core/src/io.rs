//! Text formats: TGRID1 tensors, P2 graymaps with a CSV sidecar.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::interp::GridShape;
use crate::tensor::Tensor;

pub const TGRID_MAGIC: &str = "TGRID1";

/// Floats are written with 17 significant digits, which round-trips `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn tgrid_to_string(t: &Tensor) -> String {
    let dims: Vec<String> = t.dims().iter().map(|d| d.to_string()).collect();
    let mut out = format!("{TGRID_MAGIC}\n{} {}\n", t.dims().len(), dims.join(" "));
    for &v in t.data() {
        out.push_str(&format_float(v));
        out.push('\n');
    }
    out
}

pub fn parse_tgrid(text: &str) -> Result<Tensor> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TGRID_MAGIC) {
        return Err(Error::Format(format!("missing {TGRID_MAGIC} header")));
    }
    let header = lines.next().ok_or_else(|| Error::Format("missing dims line".into()))?;
    let nums = header
        .split_whitespace()
        .map(|s| s.parse::<usize>().map_err(|_| Error::Format(format!("bad dims entry {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let (&rank, dims) = nums.split_first().ok_or_else(|| Error::Format("empty dims line".into()))?;
    if rank != dims.len() {
        return Err(Error::Format(format!("rank {rank} but {} dims given", dims.len())));
    }
    let data = lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("bad value on data line {}: {l:?}", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(dims.to_vec(), data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tgrid(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, tgrid_to_string(t))?;
    Ok(())
}

pub fn read_tgrid(path: &Path) -> Result<Tensor> {
    parse_tgrid(&fs::read_to_string(path)?)
}

fn check_len(values: &[f64], shape: GridShape) -> Result<()> {
    if values.len() != shape.tokens() {
        return Err(crate::error::invalid(format!(
            "{} values do not fill a {shape} grid",
            values.len()
        )));
    }
    Ok(())
}

/// Min-max scaled to 0..=255. A constant map is all zeros.
pub fn graymap_pixels(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect()
}

pub fn pgm_string(values: &[f64], shape: GridShape) -> Result<String> {
    check_len(values, shape)?;
    let px = graymap_pixels(values);
    let mut out = format!("P2\n{} {}\n255\n", shape.w, shape.h);
    for row in px.chunks(shape.w) {
        let cells: Vec<String> = row.iter().map(|p| p.to_string()).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn grid_csv_string(values: &[f64], shape: GridShape) -> Result<String> {
    check_len(values, shape)?;
    let mut out = String::new();
    for row in values.chunks(shape.w) {
        let cells: Vec<String> = row.iter().map(|&v| format_float(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_grid_csv(text: &str) -> Result<(Vec<f64>, GridShape)> {
    let mut values = Vec::new();
    let mut w = None;
    let mut h = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad value {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if *w.get_or_insert(row.len()) != row.len() {
            return Err(Error::Format(format!("ragged row {}", h + 1)));
        }
        values.extend(row);
        h += 1;
    }
    let shape = GridShape::new(h, w.unwrap_or(0)).map_err(|_| Error::Format("empty grid csv".into()))?;
    Ok((values, shape))
}

/// Writes `<stem>.pgm` and `<stem>.csv` into `dir`.
pub fn emit_heatmap(values: &[f64], shape: GridShape, dir: &Path, stem: &str) -> Result<()> {
    let pgm = pgm_string(values, shape)?;
    let csv = grid_csv_string(values, shape)?;
    fs::write(dir.join(format!("{stem}.pgm")), pgm)?;
    fs::write(dir.join(format!("{stem}.csv")), csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tgrid_round_trips_exactly() {
        let t = Tensor::new(vec![2, 3], vec![0.1, -1e-300, 1.0 / 3.0, 5e17, -0.0, 2.5]).unwrap();
        let back = parse_tgrid(&tgrid_to_string(&t)).unwrap();
        assert_eq!(back.dims(), t.dims());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn tgrid_layout() {
        let t = Tensor::new(vec![2], vec![1.0, 0.5]).unwrap();
        assert_eq!(tgrid_to_string(&t), "TGRID1\n1 2\n1.0000000000000000e0\n5.0000000000000000e-1\n");
    }

    #[test]
    fn tgrid_rejects_malformed() {
        assert!(parse_tgrid("TGRID2\n1 1\n0\n").is_err());
        assert!(parse_tgrid("TGRID1\n2 2\n0\n").is_err());
        assert!(parse_tgrid("TGRID1\n1 2\n0\n").is_err());
        assert!(parse_tgrid("TGRID1\n1 1\nabc\n").is_err());
        assert!(parse_tgrid("TGRID1\n1 1\nNaN\n").is_err());
    }

    #[test]
    fn pgm_scales_min_to_max() {
        let s = pgm_string(&[0.0, 1.0, 2.0, 3.0], GridShape::square(2)).unwrap();
        assert_eq!(s, "P2\n2 2\n255\n0 85\n170 255\n");
    }

    #[test]
    fn constant_map_is_black() {
        assert_eq!(graymap_pixels(&[4.0; 6]), vec![0; 6]);
    }

    #[test]
    fn csv_sidecar_round_trips() {
        let v = vec![0.1, 0.2, -3.0, 1e-9, 7.25, 1.0 / 7.0];
        let shape = GridShape::new(2, 3).unwrap();
        let (back, s) = parse_grid_csv(&grid_csv_string(&v, shape).unwrap()).unwrap();
        assert_eq!(s, shape);
        assert_eq!(back, v);
    }

    #[test]
    fn heatmap_needs_matching_length() {
        assert!(pgm_string(&[1.0, 2.0], GridShape::square(2)).is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_heatmap(&[1.0], GridShape::square(1), &dir.path().join("missing"), "x").is_err());
    }
}
