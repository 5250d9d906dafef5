use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::shapes::{rasterize_mask, ShapeClass, ShapeInstance, NUM_CLASSES};
use super::{downsample_mask, IMAGE_SIZE};
use crate::error::{Result, TbsError};
use crate::tensor::Tensor;

const MAX_TRIES: u64 = 100;
const MIN_RADIUS: f32 = 9.0;
const MAX_RADIUS: f32 = 14.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Difficulty {
    Clean,
    IrrelevantBg,
    TargetSimilarBg,
    Mixed,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [
        Difficulty::Clean,
        Difficulty::IrrelevantBg,
        Difficulty::TargetSimilarBg,
        Difficulty::Mixed,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Clean => "clean",
            Difficulty::IrrelevantBg => "irrelevant_bg",
            Difficulty::TargetSimilarBg => "target_similar_bg",
            Difficulty::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == s)
    }
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub shots: usize,
    /// Classes an episode category is drawn from.
    pub classes: Vec<usize>,
    /// Classes allowed to appear as background distractors.
    pub distractor_classes: Vec<usize>,
    /// Sampling weights over [`Difficulty::ALL`].
    pub mix: [f64; 4],
    pub noise: f32,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            shots: 1,
            classes: (0..NUM_CLASSES).collect(),
            distractor_classes: (0..NUM_CLASSES).collect(),
            mix: [0.0, 0.0, 0.0, 1.0],
            noise: 0.05,
        }
    }
}

impl GenConfig {
    pub fn with_classes(mut self, classes: &[usize]) -> Self {
        self.classes = classes.to_vec();
        self
    }

    pub fn only(mut self, d: Difficulty) -> Self {
        self.mix = [0.0; 4];
        self.mix[d as usize] = 1.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(TbsError::Generation("shots must be at least 1".into()));
        }
        if self.classes.len() < 2 {
            return Err(TbsError::Generation("need at least 2 classes".into()));
        }
        if self
            .classes
            .iter()
            .chain(&self.distractor_classes)
            .any(|&c| c >= NUM_CLASSES)
        {
            return Err(TbsError::Generation("class id out of range".into()));
        }
        if self.mix.iter().any(|w| !(*w >= 0.0)) || self.mix.iter().sum::<f64>() <= 0.0 {
            return Err(TbsError::Generation("difficulty weights must be nonnegative with positive sum".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(TbsError::Generation("noise must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// One image with its ground truth and the metadata it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `1 × 64 × 64`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `64 × 64`, h-major.
    pub mask: Vec<bool>,
    pub shapes: Vec<ShapeInstance>,
}

impl Sample {
    pub fn mask_feat(&self) -> Vec<bool> {
        downsample_mask(&self.mask)
    }

    pub fn distractors(&self) -> impl Iterator<Item = &ShapeInstance> {
        self.shapes.iter().filter(|s| !s.is_target)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub query: Sample,
    pub supports: Vec<Sample>,
    pub category: usize,
    pub difficulty: Difficulty,
    pub seed: u64,
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-episode seed derived from the run seed and the episode index.
pub fn episode_seed(run_seed: u64, index: u64) -> u64 {
    mix64(run_seed ^ mix64(index.wrapping_add(0x5EED)))
}

/// Draws category and difficulty from the seed, then renders.
pub fn generate_episode(cfg: &GenConfig, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0xC0FF_EE00));
    let category = *cfg.classes.choose(&mut rng).expect("validated");
    let difficulty = sample_difficulty(&cfg.mix, &mut rng);
    generate_episode_with(cfg, category, difficulty, seed)
}

fn sample_difficulty(mix: &[f64; 4], rng: &mut impl Rng) -> Difficulty {
    let total: f64 = mix.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (d, &w) in Difficulty::ALL.iter().zip(mix) {
        if u < w {
            return *d;
        }
        u -= w;
    }
    *Difficulty::ALL
        .iter()
        .zip(mix)
        .rev()
        .find(|(_, &w)| w > 0.0)
        .expect("positive weight")
        .0
}

/// Renders an episode of a fixed category and difficulty.
///
/// Support masks must have at least one foreground and one background cell
/// after downsampling; failed draws retry with the next sub-seed.
pub fn generate_episode_with(cfg: &GenConfig, category: usize, difficulty: Difficulty, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    let class = ShapeClass::from_id(category).ok_or_else(|| TbsError::Generation(format!("unknown class {category}")))?;
    let plan = DistractorPlan::new(cfg, class, difficulty)?;
    for attempt in 0..MAX_TRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed.wrapping_add(attempt)));
        if let Some(ep) = try_render(cfg, class, difficulty, &plan, seed, &mut rng) {
            return Ok(ep);
        }
    }
    Err(TbsError::Generation(format!(
        "no valid episode after {MAX_TRIES} tries (seed {seed:#x})"
    )))
}

/// Distractor class pools for one episode.
struct DistractorPlan {
    lookalike: Option<ShapeClass>,
    /// Candidate classes for irrelevant support distractors.
    support_pool: Vec<ShapeClass>,
}

impl DistractorPlan {
    fn new(cfg: &GenConfig, class: ShapeClass, d: Difficulty) -> Result<Self> {
        let allowed: Vec<ShapeClass> = cfg
            .distractor_classes
            .iter()
            .filter_map(|&c| ShapeClass::from_id(c))
            .filter(|&c| c != class && c != class.lookalike())
            .collect();
        let needs_lookalike = matches!(d, Difficulty::TargetSimilarBg | Difficulty::Mixed);
        let needs_irrelevant = matches!(d, Difficulty::IrrelevantBg | Difficulty::Mixed);
        let lookalike = if needs_lookalike {
            if !cfg.distractor_classes.contains(&class.lookalike().id()) {
                return Err(TbsError::Generation(format!(
                    "lookalike {} of {class} is not an allowed distractor",
                    class.lookalike()
                )));
            }
            Some(class.lookalike())
        } else {
            None
        };
        let needed = match d {
            Difficulty::IrrelevantBg => 2,
            Difficulty::Mixed => 1,
            _ => 0,
        };
        if allowed.len() < needed {
            return Err(TbsError::Generation(format!(
                "need {needed} distractor classes besides {class} and its lookalike"
            )));
        }
        Ok(DistractorPlan {
            lookalike,
            support_pool: if needs_irrelevant { allowed } else { Vec::new() },
        })
    }
}

fn try_render(
    cfg: &GenConfig,
    class: ShapeClass,
    difficulty: Difficulty,
    plan: &DistractorPlan,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Option<Episode> {
    // The query holds the target alone, so every support distractor is
    // absent from it.
    let query_shapes = place(vec![draw_shape(class, true, None, rng)], rng)?;
    let query = render(query_shapes, cfg.noise, rng);
    if !query.mask.iter().any(|&m| m) {
        return None;
    }

    let irrelevant_count = match difficulty {
        Difficulty::IrrelevantBg => 2,
        Difficulty::Mixed => 1,
        _ => 0,
    };
    let mut supports = Vec::with_capacity(cfg.shots);
    for _ in 0..cfg.shots {
        let target = draw_shape(class, true, None, rng);
        let mut shapes = vec![target];
        if let Some(l) = plan.lookalike {
            // same size and brightness as the target; only the outline differs
            let mut look = draw_shape(l, false, Some(target.intensity), rng);
            look.radius = target.radius;
            shapes.push(look);
        }
        let picks: Vec<ShapeClass> = plan.support_pool.choose_multiple(rng, irrelevant_count).copied().collect();
        for c in picks {
            shapes.push(draw_shape(c, false, None, rng));
        }
        let s = render(place(shapes, rng)?, cfg.noise, rng);
        let feat = s.mask_feat();
        if !feat.iter().any(|&m| m) || feat.iter().all(|&m| m) {
            return None;
        }
        supports.push(s);
    }
    Some(Episode {
        query,
        supports,
        category: class.id(),
        difficulty,
        seed,
    })
}

fn draw_shape(class: ShapeClass, is_target: bool, intensity: Option<f32>, rng: &mut ChaCha8Rng) -> ShapeInstance {
    ShapeInstance {
        class,
        cx: 0.0,
        cy: 0.0,
        radius: rng.random_range(MIN_RADIUS..=MAX_RADIUS),
        intensity: intensity.unwrap_or_else(|| rng.random_range(0.55f32..=1.0)),
        is_target,
    }
}

/// Assigns non-overlapping centers; `None` if the shapes do not fit.
fn place(mut shapes: Vec<ShapeInstance>, rng: &mut ChaCha8Rng) -> Option<Vec<ShapeInstance>> {
    let size = IMAGE_SIZE as f32;
    for i in 0..shapes.len() {
        let e = shapes[i].half_extent();
        let mut ok = false;
        for _ in 0..200 {
            shapes[i].cx = rng.random_range(e + 1.0..=size - e - 1.0);
            shapes[i].cy = rng.random_range(e + 1.0..=size - e - 1.0);
            if shapes[..i].iter().all(|o| !o.overlaps(&shapes[i], 2.0)) {
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }
    Some(shapes)
}

fn render(shapes: Vec<ShapeInstance>, noise: f32, rng: &mut ChaCha8Rng) -> Sample {
    let n = IMAGE_SIZE;
    let bg: f32 = rng.random_range(0.0..=0.3);
    let mut img = vec![bg; n * n];
    for s in &shapes {
        for y in 0..n {
            for x in 0..n {
                if s.covers(x, y) {
                    img[y * n + x] = s.intensity;
                }
            }
        }
    }
    if noise > 0.0 {
        let normal = Normal::new(0.0f32, noise).expect("positive sigma");
        for v in &mut img {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    let mask = rasterize_mask(&shapes, n);
    Sample {
        image: Tensor::new(vec![1, n, n], img).expect("static shape"),
        mask,
        shapes,
    }
}

/// Yields the episodes of one run: index `i` gets seed `episode_seed(run, i)`
/// and category `classes[i % len]`, so categories are exactly balanced.
#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    pub cfg: GenConfig,
    pub run_seed: u64,
}

impl EpisodeSampler {
    pub fn new(cfg: GenConfig, run_seed: u64) -> Self {
        EpisodeSampler { cfg, run_seed }
    }

    pub fn episode(&self, index: u64) -> Result<Episode> {
        let seed = episode_seed(self.run_seed, index);
        let category = self.cfg.classes[(index % self.cfg.classes.len() as u64) as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0xD1FF));
        let difficulty = sample_difficulty(&self.cfg.mix, &mut rng);
        generate_episode_with(&self.cfg, category, difficulty, seed)
    }
}
