//! Run configuration as line-based `key = value` text.
//!
//! `#` starts a comment, keys are dotted (`gen.shots = 1`). Unknown or
//! repeated keys are errors. [`RunConfig::to_text`] writes every key, and
//! parsing that text gives back an identical config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::episodes::{fold_split, Difficulty, GenConfig, IMAGE_SIZE, NUM_CLASSES, NUM_FOLDS};
use crate::error::{Result, TbsError};
use crate::run::{EvalOptions, TrainOptions};
use crate::tbs::Ablation;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub image_size: usize,
    pub shots: usize,
    /// Class universe; episode categories come from the fold split within it
    /// and distractors from all of it.
    pub classes: Vec<usize>,
    pub noise: f32,
    /// Weights over clean, irrelevant_bg, target_similar_bg, mixed.
    pub mix: [f64; 4],
    pub fold: usize,
    pub lr: f32,
    pub steps: u64,
    pub batch: usize,
    pub checkpoint_every: u64,
    pub use_qs: bool,
    pub use_ts: bool,
    pub eval_episodes: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GenConfig::default();
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            image_size: IMAGE_SIZE,
            shots: gen.shots,
            classes: (0..NUM_CLASSES).collect(),
            noise: gen.noise,
            mix: gen.mix,
            fold: 0,
            lr: 1e-3,
            steps: 2000,
            batch: 4,
            checkpoint_every: 500,
            use_qs: true,
            use_ts: true,
            eval_episodes: 1000,
        }
    }
}

const KEYS: [&str; 18] = [
    "seed",
    "out_dir",
    "data.image_size",
    "gen.shots",
    "gen.classes",
    "gen.noise",
    "gen.mix.clean",
    "gen.mix.irrelevant_bg",
    "gen.mix.target_similar_bg",
    "gen.mix.mixed",
    "train.fold",
    "train.lr",
    "train.steps",
    "train.batch",
    "train.checkpoint_every",
    "model.use_qs",
    "model.use_ts",
    "eval.episodes",
];

fn bad(line: usize, msg: impl std::fmt::Display) -> TbsError {
    TbsError::Config(format!("line {line}: {msg}"))
}

fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(line, format!("invalid value {v:?} for {key}")))
}

fn boolean(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(line, format!("{key} must be true or false, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| bad(line, format!("expected `key = value`, got {content:?}")))?;
            let (key, v) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(bad(line, format!("unknown key {key:?}")));
            }
            if seen.contains(&key) {
                return Err(bad(line, format!("duplicate key {key:?}")));
            }
            seen.push(key);
            match key {
                "seed" => cfg.seed = num(line, key, v)?,
                "out_dir" => cfg.out_dir = PathBuf::from(v),
                "data.image_size" => cfg.image_size = num(line, key, v)?,
                "gen.shots" => cfg.shots = num(line, key, v)?,
                "gen.classes" => {
                    cfg.classes = v
                        .split(',')
                        .map(|c| num(line, key, c.trim()))
                        .collect::<Result<Vec<usize>>>()?
                }
                "gen.noise" => cfg.noise = num(line, key, v)?,
                "gen.mix.clean" => cfg.mix[0] = num(line, key, v)?,
                "gen.mix.irrelevant_bg" => cfg.mix[1] = num(line, key, v)?,
                "gen.mix.target_similar_bg" => cfg.mix[2] = num(line, key, v)?,
                "gen.mix.mixed" => cfg.mix[3] = num(line, key, v)?,
                "train.fold" => cfg.fold = num(line, key, v)?,
                "train.lr" => cfg.lr = num(line, key, v)?,
                "train.steps" => cfg.steps = num(line, key, v)?,
                "train.batch" => cfg.batch = num(line, key, v)?,
                "train.checkpoint_every" => cfg.checkpoint_every = num(line, key, v)?,
                "model.use_qs" => cfg.use_qs = boolean(line, key, v)?,
                "model.use_ts" => cfg.use_ts = boolean(line, key, v)?,
                "eval.episodes" => cfg.eval_episodes = num(line, key, v)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let classes: Vec<String> = self.classes.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "\n# episodes");
        let _ = writeln!(s, "data.image_size = {}", self.image_size);
        let _ = writeln!(s, "gen.shots = {}", self.shots);
        let _ = writeln!(s, "gen.classes = {}", classes.join(","));
        let _ = writeln!(s, "gen.noise = {}", self.noise);
        for (d, w) in Difficulty::ALL.iter().zip(self.mix) {
            let _ = writeln!(s, "gen.mix.{} = {w}", d.name());
        }
        let _ = writeln!(s, "\n# training");
        let _ = writeln!(s, "train.fold = {}", self.fold);
        let _ = writeln!(s, "train.lr = {}", self.lr);
        let _ = writeln!(s, "train.steps = {}", self.steps);
        let _ = writeln!(s, "train.batch = {}", self.batch);
        let _ = writeln!(s, "train.checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "model.use_qs = {}", self.use_qs);
        let _ = writeln!(s, "model.use_ts = {}", self.use_ts);
        let _ = writeln!(s, "\n# evaluation");
        let _ = writeln!(s, "eval.episodes = {}", self.eval_episodes);
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TbsError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| TbsError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TbsError::Config(m));
        if self.image_size != IMAGE_SIZE {
            return fail(format!("data.image_size must be {IMAGE_SIZE}"));
        }
        if self.shots == 0 || self.batch == 0 {
            return fail("gen.shots and train.batch must be positive".into());
        }
        if self.fold >= NUM_FOLDS {
            return fail(format!("train.fold must be below {NUM_FOLDS}"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail("train.lr must be finite and non-negative".into());
        }
        if self.checkpoint_every == 0 {
            return fail("train.checkpoint_every must be positive".into());
        }
        if self.out_dir.as_os_str().is_empty() {
            return fail("out_dir is empty".into());
        }
        let split = fold_split(self.fold)?;
        if split.test_classes.iter().chain(&split.train_classes).any(|c| !self.classes.contains(c)) {
            return fail("gen.classes must contain every class of the fold split".into());
        }
        self.gen_config().validate().map_err(|e| TbsError::Config(e.to_string()))
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            use_qs: self.use_qs,
            use_ts: self.use_ts,
        }
    }

    /// Generator settings before the fold picks episode categories.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            shots: self.shots,
            classes: self.classes.clone(),
            distractor_classes: self.classes.clone(),
            mix: self.mix,
            noise: self.noise,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            seed: self.seed,
            fold: self.fold,
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            gen: self.gen_config(),
            ablation: self.ablation(),
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            seed: self.seed,
            fold: self.fold,
            episodes: self.eval_episodes,
            gen: self.gen_config(),
        }
    }
}
