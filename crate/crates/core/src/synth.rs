//! Synthetic expert: planted rectangular entities on a grid, per-entity
//! feature prototypes, attention peaked on the queried entity, and a toy
//! "where is entity e?" dataset whose answer is the entity's quadrant.

use crate::error::{invalid, Error, Result};
use crate::interp::{bilinear_resize, FeatureGrid, GridShape};
use crate::losses::AttentionVector;
use crate::model::{ToyTransformer, TokenSequence};
use crate::tensor::{l2_normalize_rows, mix_seed, softmax, SeededRng};

pub const MAX_PLACEMENT_RETRIES: usize = 1000;
const DATASET_RETRIES: u64 = 200;

const PROTOTYPE_STREAM: u64 = 0xE4_9E27;
const APPEARANCE_STREAM: u64 = 0xA9_9EA2;

/// Token ids of the toy vocabulary.
pub mod vocab {
    pub const BOS: usize = 0;
    pub const ASK: usize = 1;
    pub const LABEL_BASE: usize = 16;
    pub const QUADRANTS: usize = 4;
    pub const MAX_ENTITIES: usize = LABEL_BASE - 2;
    /// Smallest vocabulary that holds every id.
    pub const MIN_VOCAB: usize = LABEL_BASE + QUADRANTS;

    pub fn entity(e: usize) -> usize {
        1 + e
    }

    pub fn label(q: usize) -> usize {
        LABEL_BASE + q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.top + self.height).contains(&row) && (self.left..self.left + self.width).contains(&col)
    }

    fn overlaps(&self, o: &Rect) -> bool {
        self.top < o.top + o.height
            && o.top < self.top + self.height
            && self.left < o.left + o.width
            && o.left < self.left + self.width
    }

    /// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right, by center;
    /// a center exactly on the midline counts as top / left.
    pub fn quadrant(&self, shape: GridShape) -> usize {
        let bottom = 2 * self.top + self.height > shape.h;
        let right = 2 * self.left + self.width > shape.w;
        2 * usize::from(bottom) + usize::from(right)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedScene {
    shape: GridShape,
    labels: Vec<usize>,
    regions: Vec<Rect>,
    seed: u64,
}

impl PlantedScene {
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    /// Entity id per cell, 0 for background.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn entities(&self) -> usize {
        self.regions.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn region(&self, entity: usize) -> Result<Rect> {
        if entity == 0 || entity > self.regions.len() {
            return Err(invalid(format!(
                "entity {entity} not in scene with {} entities",
                self.regions.len()
            )));
        }
        Ok(self.regions[entity - 1])
    }

    pub fn cells(&self, entity: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == entity)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn quadrant(&self, entity: usize) -> Result<usize> {
        Ok(self.region(entity)?.quadrant(self.shape))
    }

    /// Cells of `target` whose center falls inside the entity's region.
    pub fn region_on_grid(&self, entity: usize, target: GridShape) -> Result<Vec<usize>> {
        let rect = self.region(entity)?;
        let nearest = |i: usize, src: usize, dst: usize| {
            (((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
        };
        let mut out = Vec::new();
        for r in 0..target.h {
            for c in 0..target.w {
                if rect.contains(nearest(r, self.shape.h, target.h), nearest(c, self.shape.w, target.w)) {
                    out.push(target.index(r, c));
                }
            }
        }
        Ok(out)
    }
}

fn side_range(dim: usize) -> (usize, usize) {
    let lo = dim.min(2);
    (lo, lo.max(dim / 2))
}

/// `(start, len)` of the two halves of an axis; the first half takes the extra
/// cell when `dim` is odd.
fn halves(dim: usize) -> [(usize, usize); 2] {
    let first = (dim + 1) / 2;
    [(0, first), (first, dim - first)]
}

/// Places `k` disjoint rectangles by rejection sampling. Each rectangle lies
/// inside a single quadrant with its corner on an even offset from the
/// quadrant origin.
pub fn make_planted_scene(seed: u64, shape: GridShape, k: usize) -> Result<PlantedScene> {
    if k == 0 {
        return Err(Error::Config("entity count must be at least 1".into()));
    }
    if shape.h == 0 || shape.w == 0 {
        return Err(Error::Config("scene grid must be nonempty".into()));
    }
    let quadrants: Vec<((usize, usize), (usize, usize))> = halves(shape.h)
        .into_iter()
        .flat_map(|r| halves(shape.w).into_iter().map(move |c| (r, c)))
        .filter(|((_, h), (_, w))| *h > 0 && *w > 0)
        .collect();
    let mut rng = SeededRng::new(seed);
    let mut regions: Vec<Rect> = Vec::with_capacity(k);
    for e in 1..=k {
        let placed = (0..MAX_PLACEMENT_RETRIES).find_map(|_| {
            let ((r0, qh), (c0, qw)) = quadrants[rng.below(quadrants.len())];
            let (hmin, hmax) = side_range(qh);
            let (wmin, wmax) = side_range(qw);
            let height = hmin + rng.below(hmax - hmin + 1);
            let width = wmin + rng.below(wmax - wmin + 1);
            let rect = Rect {
                top: r0 + 2 * rng.below((qh - height) / 2 + 1),
                left: c0 + 2 * rng.below((qw - width) / 2 + 1),
                height,
                width,
            };
            (!regions.iter().any(|r| r.overlaps(&rect))).then_some(rect)
        });
        match placed {
            Some(r) => regions.push(r),
            None => {
                return Err(Error::Config(format!(
                    "could not place entity {e} of {k} on a {shape} grid after {MAX_PLACEMENT_RETRIES} tries"
                )))
            }
        }
    }
    let mut labels = vec![0; shape.tokens()];
    for (i, rect) in regions.iter().enumerate() {
        for r in rect.top..rect.top + rect.height {
            for c in rect.left..rect.left + rect.width {
                labels[shape.index(r, c)] = i + 1;
            }
        }
    }
    Ok(PlantedScene { shape, labels, regions, seed })
}

/// Fixed unit prototypes, one per entity id (0 is background).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSpace {
    channels: usize,
    prototypes: Vec<Vec<f64>>,
}

impl ExpertSpace {
    pub fn new(seed: u64, channels: usize, entities: usize) -> Result<Self> {
        Ok(Self { channels, prototypes: unit_vectors(seed, channels, entities + 1)? })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn prototype(&self, id: usize) -> &[f64] {
        &self.prototypes[id]
    }
}

fn unit_vectors(seed: u64, channels: usize, count: usize) -> Result<Vec<Vec<f64>>> {
    if channels == 0 {
        return Err(Error::Config("channel count must be positive".into()));
    }
    let mut rng = SeededRng::new(seed);
    (0..count)
        .map(|_| Ok(l2_normalize_rows(&rng.normal_vec(channels, 1.0), channels)?.rows))
        .collect()
}

/// Each cell: its entity prototype plus isotropic Gaussian noise of expected
/// norm `sigma`, unit-normalized.
pub fn expert_features(scene: &PlantedScene, space: &ExpertSpace, sigma: f64, seed: u64) -> Result<FeatureGrid> {
    if !(sigma >= 0.0) {
        return Err(invalid("noise sigma must be >= 0"));
    }
    if scene.entities() >= space.prototypes.len() {
        return Err(invalid("expert space has fewer prototypes than scene entities"));
    }
    let b = space.channels;
    // per-channel std sigma / sqrt(b): the noise vector has expected norm ~sigma
    let std = sigma / (b as f64).sqrt();
    let mut rng = SeededRng::new(seed);
    let mut values = Vec::with_capacity(scene.labels.len() * b);
    for &l in &scene.labels {
        values.extend(space.prototype(l).iter().map(|p| p + std * rng.normal()));
    }
    let normalized = l2_normalize_rows(&values, b)?;
    FeatureGrid::new(scene.shape, b, normalized.rows)
}

/// Raw scores: `tau` on the queried region, 0 elsewhere, plus uniform jitter
/// of amplitude `tau / 100`.
pub fn expert_attention(scene: &PlantedScene, query: usize, tau: f64, seed: u64) -> Result<AttentionVector> {
    scene.region(query)?;
    let mut rng = SeededRng::new(seed);
    let jitter = tau / 100.0;
    let scores = scene
        .labels
        .iter()
        .map(|&l| {
            let base = if l == query { tau } else { 0.0 };
            base + jitter * (2.0 * rng.uniform() - 1.0)
        })
        .collect();
    Ok(AttentionVector::raw(scores))
}

/// Softmax mass that `raw` puts on `cells`.
pub fn attention_mass(raw: &[f64], cells: &[usize]) -> Result<f64> {
    let p = softmax(raw)?;
    Ok(cells.iter().map(|&i| p[i]).sum())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ExpertConfig {
    pub grid: GridShape,
    pub entities: usize,
    pub channels: usize,
    pub sigma: f64,
    pub tau: f64,
    /// Minimum softmax mass the expert attention must put on the queried region.
    pub concentration: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            grid: GridShape::square(8),
            entities: 2,
            channels: 32,
            sigma: 0.1,
            tau: 5.0,
            concentration: 0.8,
        }
    }
}

/// What the expert contributes for one image and query.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBundle {
    /// Mean of the entity prototypes; carried but not consumed by any loss.
    pub cls: Vec<f64>,
    pub features: FeatureGrid,
    pub attention: AttentionVector,
    pub scene: PlantedScene,
    pub query: usize,
}

impl ExpertBundle {
    pub fn build(scene: PlantedScene, query: usize, space: &ExpertSpace, cfg: &ExpertConfig, seed: u64) -> Result<Self> {
        let features = expert_features(&scene, space, cfg.sigma, mix_seed(seed, 1))?;
        let attention = expert_attention(&scene, query, cfg.tau, mix_seed(seed, 2))?;
        let mass = attention_mass(&attention.scores, &scene.cells(query))?;
        if mass < cfg.concentration {
            return Err(Error::Config(format!(
                "expert attention mass {mass:.3} on entity {query} is below {}; raise tau",
                cfg.concentration
            )));
        }
        let mut cls = vec![0.0; space.channels];
        for e in 1..=scene.entities() {
            cls.iter_mut().zip(space.prototype(e)).for_each(|(c, p)| *c += p / scene.entities() as f64);
        }
        Ok(Self { cls, features, attention, scene, query })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DatasetConfig {
    pub expert: ExpertConfig,
    /// Noise added to the raw cell appearance the student sees.
    pub pixel_noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { expert: ExpertConfig::default(), pixel_noise: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub sequence: TokenSequence,
    pub expert: ExpertBundle,
    /// Quadrant of the queried entity, 0..4.
    pub label: usize,
}

/// `count` examples. Example `i` is a pure function of `(seed, i)`, and its
/// label is `i mod 4`, so labels are balanced.
pub fn make_dataset(seed: u64, count: usize, cfg: &DatasetConfig, model: &ToyTransformer) -> Result<Vec<Example>> {
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    let mc = model.config();
    let ec = &cfg.expert;
    if ec.entities > vocab::MAX_ENTITIES {
        return Err(Error::Config(format!("at most {} entities supported", vocab::MAX_ENTITIES)));
    }
    if mc.vocab < vocab::MIN_VOCAB {
        return Err(Error::Config(format!("vocabulary must hold at least {} ids", vocab::MIN_VOCAB)));
    }
    let space = ExpertSpace::new(mix_seed(seed, PROTOTYPE_STREAM), ec.channels, ec.entities)?;
    let appearance = unit_vectors(mix_seed(seed, APPEARANCE_STREAM), mc.image_channels, ec.entities + 1)?;
    (0..count)
        .map(|i| make_example(mix_seed(seed, i as u64), i % vocab::QUADRANTS, cfg, &space, &appearance, model))
        .collect()
}

fn make_example(
    seed: u64,
    label: usize,
    cfg: &DatasetConfig,
    space: &ExpertSpace,
    appearance: &[Vec<f64>],
    model: &ToyTransformer,
) -> Result<Example> {
    let ec = &cfg.expert;
    for attempt in 0..DATASET_RETRIES {
        let s = mix_seed(seed, attempt);
        let scene = make_planted_scene(s, ec.grid, ec.entities)?;
        let matching: Vec<usize> = (1..=ec.entities)
            .filter(|&e| scene.quadrant(e).ok() == Some(label))
            .collect();
        if matching.is_empty() {
            continue;
        }
        let mut rng = SeededRng::new(mix_seed(s, 3));
        let query = matching[rng.below(matching.len())];
        let image = student_image(&scene, appearance, cfg.pixel_noise, model, mix_seed(s, 4))?;
        let expert = ExpertBundle::build(scene, query, space, ec, mix_seed(s, 5))?;
        let sequence = TokenSequence {
            visual: model.embed_patches(&image)?,
            prompt: vec![vocab::BOS, vocab::entity(query), vocab::ASK],
            target: vec![vocab::label(label)],
        };
        return Ok(Example { sequence, expert, label });
    }
    Err(Error::Config(format!(
        "no scene with an entity in quadrant {label} after {DATASET_RETRIES} draws"
    )))
}

/// Raw cell appearance on the expert grid, resized to the student grid.
fn student_image(
    scene: &PlantedScene,
    appearance: &[Vec<f64>],
    noise: f64,
    model: &ToyTransformer,
    seed: u64,
) -> Result<Vec<f64>> {
    let c = model.config().image_channels;
    let target = model.config().grid;
    let mut rng = SeededRng::new(seed);
    let pixels: Vec<f64> = scene
        .labels
        .iter()
        .flat_map(|&l| appearance[l].clone())
        .map(|v| v + noise * rng.normal())
        .collect();
    let mut out = vec![0.0; target.tokens() * c];
    for ch in 0..c {
        let plane: Vec<f64> = pixels.iter().skip(ch).step_by(c).copied().collect();
        for (t, v) in bilinear_resize(&plane, scene.shape, target)?.into_iter().enumerate() {
            out[t * c + ch] = v;
        }
    }
    Ok(out)
}
