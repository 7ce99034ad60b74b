use distill_core::interp::GridShape;

/// Per-pixel reference: for each output pixel, locate the source point and
/// blend its four neighbours directly.
pub fn oracle(field: &[f64], src: GridShape, dst: GridShape) -> Vec<f64> {
    let coord = |i: usize, from: usize, to: usize| -> f64 {
        let x = (i as f64 + 0.5) * (from as f64 / to as f64) - 0.5;
        x.max(0.0).min((from - 1) as f64)
    };
    let mut out = vec![0.0; dst.h * dst.w];
    for oy in 0..dst.h {
        for ox in 0..dst.w {
            let y = coord(oy, src.h, dst.h);
            let x = coord(ox, src.w, dst.w);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(src.h - 1), (x0 + 1).min(src.w - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let at = |r: usize, c: usize| field[r * src.w + c];
            out[oy * dst.w + ox] = (1.0 - fy) * (1.0 - fx) * at(y0, x0)
                + (1.0 - fy) * fx * at(y0, x1)
                + fy * (1.0 - fx) * at(y1, x0)
                + fy * fx * at(y1, x1);
        }
    }
    out
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

