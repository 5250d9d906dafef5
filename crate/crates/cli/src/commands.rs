use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use tbs_core::checkpoint;
use tbs_core::config::RunConfig;
use tbs_core::episodes::{fold_split, generate_episode, write_dump};
use tbs_core::gradcheck::{run_suite, GradcheckConfig};
use tbs_core::metrics::EvalReport;
use tbs_core::run::{self, OraclePredictor};
use tbs_core::seg_head::Model;
use tbs_core::tbs::Ablation;
use tbs_core::viz::visualize_episode;
use tbs_core::{OpKind, TbsError};

use crate::Common;

pub enum Failure {
    Core(TbsError),
    Usage(String),
    Gradcheck(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Gradcheck(_) => 5,
            Failure::Core(e) => match e {
                TbsError::Config(_) | TbsError::Generation(_) | TbsError::Fold(_) => 2,
                TbsError::NonFinite { .. } => 3,
                TbsError::Checkpoint(_) => 4,
                _ => 1,
            },
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Usage(m) | Failure::Gradcheck(m) => f.write_str(m),
        }
    }
}

impl From<TbsError> for Failure {
    fn from(e: TbsError) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

fn resolve(a: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(k) = a.shots {
        cfg.shots = k;
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(p: &Path) -> Result<(), Failure> {
    fs::create_dir_all(p).map_err(|e| TbsError::io(p, e).into())
}

fn write(p: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    fs::write(p, bytes).map_err(|e| TbsError::io(p, e).into())
}

fn required_checkpoint(a: &Common) -> Result<&Path, Failure> {
    a.checkpoint
        .as_deref()
        .ok_or_else(|| Failure::Usage("--checkpoint is required".into()))
}

/// Directory name of an ablation row.
pub fn row_dir(ab: Ablation) -> String {
    ab.label().replace('+', "_")
}

fn load_model(p: &Path) -> Result<Model<f32>, Failure> {
    Ok(Model::from_params(checkpoint::load(p)?)?)
}

pub fn gen(a: &Common) -> Outcome {
    let cfg = resolve(a)?;
    mkdir(&cfg.out_dir)?;
    let opts = cfg.eval_options();
    let sampler = opts.sampler()?;
    let episodes = (0..opts.episodes).map(|i| sampler.episode(i)).collect::<Result<Vec<_>, _>>()?;
    let path = cfg.out_dir.join("episodes.tbse");
    let file = File::create(&path).map_err(|e| TbsError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    write_dump(&mut w, &episodes)?;
    w.flush().map_err(|e| TbsError::io(&path, e))?;
    println!("wrote {} episodes to {}", episodes.len(), path.display());
    Ok(())
}

/// Trains one row into `dir`: resolved config, loss log, periodic and final
/// checkpoints.
fn train_into(cfg: &RunConfig, dir: &Path, final_path: &Path) -> Outcome {
    mkdir(dir)?;
    cfg.save(&dir.join("config.txt"))?;
    let log_path = dir.join("loss_log.csv");
    let file = File::create(&log_path).map_err(|e| TbsError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let io = |e| TbsError::io(&log_path, e);
    writeln!(log, "step,loss").map_err(io)?;
    let every = cfg.checkpoint_every;
    let result = run::train(&cfg.train_options(), |state, loss| {
        let step = state.step();
        writeln!(log, "{step},{loss}").map_err(io)?;
        if step % every == 0 {
            checkpoint::save(&dir.join(format!("checkpoint_{step:06}.tbsc")), &state.model.params)?;
        }
        Ok(())
    });
    log.flush().map_err(io)?;
    let state = result?;
    checkpoint::save(final_path, &state.model.params)?;
    println!(
        "{}: {} steps, checkpoint {}",
        cfg.ablation().label(),
        state.step(),
        final_path.display()
    );
    Ok(())
}

pub fn train(a: &Common) -> Outcome {
    let cfg = resolve(a)?;
    if a.ablation {
        for ab in Ablation::GRID {
            let row = RunConfig {
                use_qs: ab.use_qs,
                use_ts: ab.use_ts,
                ..cfg.clone()
            };
            let dir = cfg.out_dir.join(row_dir(ab));
            train_into(&row, &dir, &dir.join("model.tbsc"))?;
        }
        return Ok(());
    }
    let final_path = a.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("model.tbsc"));
    train_into(&cfg, &cfg.out_dir, &final_path)
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Outcome {
    write(&dir.join(format!("{stem}.csv")), report.to_csv())?;
    write(&dir.join(format!("{stem}_summary.txt")), report.summary())?;
    print!("{}", report.summary());
    Ok(())
}

fn seed_digest(seeds: &[u64]) -> u32 {
    let bytes: Vec<u8> = seeds.iter().flat_map(|s| s.to_le_bytes()).collect();
    crc32fast::hash(&bytes)
}

pub fn eval(a: &Common) -> Outcome {
    let cfg = resolve(a)?;
    mkdir(&cfg.out_dir)?;
    let opts = cfg.eval_options();
    if a.oracle {
        let acc = run::evaluate_with(&OraclePredictor, &opts)?;
        return write_report(&cfg.out_dir, "metrics_oracle", &run::report(&acc, &opts, cfg.ablation())?);
    }
    let ckpt = required_checkpoint(a)?;
    if !a.ablation {
        let model = load_model(ckpt)?;
        return write_report(&cfg.out_dir, "metrics", &run::evaluate(&model, &opts, cfg.ablation())?);
    }
    let split = fold_split(cfg.fold)?;
    let mut table = String::from("ablation,miou,fb_iou,aa_sf_qf,aa_sb_qb,aa_avg\n");
    let mut meta = String::new();
    let mut first_digest = None;
    for ab in Ablation::GRID {
        let model = load_model(&ckpt.join(row_dir(ab)).join("model.tbsc"))?;
        let seeds = opts.episode_seeds()?;
        let digest = seed_digest(&seeds);
        if *first_digest.get_or_insert(digest) != digest {
            return Err(Failure::Usage("ablation rows visited different episodes".into()));
        }
        meta += &format!("{} episodes={} episode_seed_crc32={digest:08x}\n", ab.label(), seeds.len());
        let report = run::evaluate(&model, &opts, ab)?;
        let f = &report.per_fold[&cfg.fold];
        let v = |x: Option<f64>| x.map_or_else(String::new, |x| format!("{x:.6}"));
        table += &format!(
            "{},{},{},{},{},{}\n",
            ab.label(),
            v(f.miou),
            v(f.fb_iou),
            v(f.aa.sf_qf),
            v(f.aa.sb_qb),
            v(f.aa.avg)
        );
        write_report(&cfg.out_dir, &format!("metrics_{}", row_dir(ab)), &report)?;
    }
    meta += &format!("fold={} test_classes={:?} identical_episode_seeds=true\n", cfg.fold, split.test_classes);
    write(&cfg.out_dir.join("ablation.csv"), &table)?;
    write(&cfg.out_dir.join("ablation_meta.txt"), &meta)?;
    print!("{table}");
    Ok(())
}

pub fn gradcheck(a: &Common) -> Outcome {
    let cfg = resolve(a)?;
    let fault = match &a.inject_fault {
        None => None,
        Some(name) => Some(
            OpKind::ALL
                .into_iter()
                .find(|k| k.name() == name)
                .ok_or_else(|| Failure::Usage(format!("unknown op {name:?}")))?,
        ),
    };
    let report = run_suite(&GradcheckConfig {
        seed: cfg.seed,
        fault,
        ..GradcheckConfig::default()
    })?;
    print!("{report}");
    let failures: Vec<String> = report
        .failures()
        .map(|r| {
            format!(
                "{} failed: relative error {:.3e} at input {} index {}",
                r.name, r.worst_rel, r.worst_at.0, r.worst_at.1
            )
        })
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Gradcheck(failures.join("; ")))
    }
}

pub fn visualize(a: &Common) -> Outcome {
    let cfg = resolve(a)?;
    let model = load_model(required_checkpoint(a)?)?;
    let split = fold_split(cfg.fold)?;
    let ep = generate_episode(&cfg.gen_config().with_classes(&split.test_classes), cfg.seed)?;
    let dir: PathBuf = cfg.out_dir.join(format!("viz_{}", cfg.seed));
    mkdir(&dir)?;
    for f in visualize_episode(&model, &ep, cfg.ablation())? {
        write(&dir.join(&f.name), &f.bytes)?;
    }
    println!(
        "episode seed {} (class {}, {}) written to {}",
        cfg.seed,
        ep.category,
        ep.difficulty.name(),
        dir.display()
    );
    Ok(())
}
