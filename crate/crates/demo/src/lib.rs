//! Browser bindings over `distill-core`. Every exported function has a plain
//! Rust counterpart so the logic can be tested natively.

use distill_core::error::Result;
use distill_core::interp::{interpolate_attention, interpolate_features, GridShape};
use distill_core::losses::{attention_alignment_loss, similarity_matrix, visual_alignment_loss, AttentionVector};
use distill_core::synth::{expert_attention, expert_features, make_planted_scene, ExpertSpace};
use distill_core::tensor::{mix_seed, softmax};
use wasm_bindgen::prelude::*;

/// Source attention, resized attention and a 0/1 region mask on the target
/// grid, concatenated.
pub fn planted_attention(seed: u64, src: usize, dst: usize, tau: f64) -> Result<Vec<f64>> {
    let (s, d) = (GridShape::new(src, src)?, GridShape::new(dst, dst)?);
    let scene = make_planted_scene(seed, s, 1)?;
    let raw = expert_attention(&scene, 1, tau, mix_seed(seed, 2))?.scores;
    let resized = interpolate_attention(&raw, s, d)?;
    let mut mask = vec![0.0; d.tokens()];
    for i in scene.region_on_grid(1, d)? {
        mask[i] = 1.0;
    }
    Ok([raw, resized, mask].concat())
}

/// Cosine similarity of a noisy planted scene after resizing to `dst`,
/// followed by its alignment loss against the noiseless version.
pub fn similarity_vs_noise(seed: u64, src: usize, dst: usize, sigma: f64) -> Result<Vec<f64>> {
    let (s, d) = (GridShape::new(src, src)?, GridShape::new(dst, dst)?);
    let scene = make_planted_scene(seed, s, 2)?;
    let space = ExpertSpace::new(mix_seed(seed, 3), 16, 2)?;
    let sim = |sigma: f64| -> Result<_> {
        let f = expert_features(&scene, &space, sigma, mix_seed(seed, 1))?;
        Ok(similarity_matrix(&interpolate_features(&f, d)?.grid))
    };
    let noisy = sim(sigma)?;
    let loss = visual_alignment_loss(&sim(0.0)?, &noisy)?;
    let mut out = noisy.values().to_vec();
    out.push(loss);
    Ok(out)
}

/// KL divergence from the teacher to the student, then its gradient with
/// respect to the student scores, then both softmax distributions.
pub fn kl_explorer(teacher: &[f64], student: &[f64]) -> Result<Vec<f64>> {
    let kl = attention_alignment_loss(&AttentionVector::raw(teacher.to_vec()), &AttentionVector::raw(student.to_vec()))?;
    let p = softmax(teacher)?;
    let q = softmax(student)?;
    let mut out = vec![kl];
    out.extend(q.iter().zip(&p).map(|(q, p)| q - p));
    out.extend(p);
    out.extend(q);
    Ok(out)
}

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = plantedAttention)]
pub fn planted_attention_js(seed: u32, src: usize, dst: usize, tau: f64) -> std::result::Result<Vec<f64>, JsError> {
    js(planted_attention(seed.into(), src, dst, tau))
}

#[wasm_bindgen(js_name = similarityVsNoise)]
pub fn similarity_vs_noise_js(seed: u32, src: usize, dst: usize, sigma: f64) -> std::result::Result<Vec<f64>, JsError> {
    js(similarity_vs_noise(seed.into(), src, dst, sigma))
}

#[wasm_bindgen(js_name = klExplorer)]
pub fn kl_explorer_js(teacher: &[f64], student: &[f64]) -> std::result::Result<Vec<f64>, JsError> {
    js(kl_explorer(teacher, student))
}
