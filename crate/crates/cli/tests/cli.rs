use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tbs_core::checkpoint;
use tbs_core::seg_head::Model;

fn tbs(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tbs"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn tbs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = "train.steps = 6\ntrain.checkpoint_every = 3\neval.episodes = 24\n";

#[test]
fn training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    config(d, "c.txt", SMALL);
    for out in ["a", "b"] {
        assert_eq!(code(&tbs(d, &["train", "--config", "c.txt", "--seed", "3", "--out", out])), 0);
        let ckpt = format!("{out}/model.tbsc");
        assert_eq!(code(&tbs(d, &["eval", "--config", "c.txt", "--seed", "3", "--out", out, "--checkpoint", &ckpt])), 0);
    }
    for f in ["loss_log.csv", "model.tbsc", "checkpoint_000003.tbsc", "metrics.csv"] {
        let a = fs::read(d.join("a").join(f)).unwrap();
        let b = fs::read(d.join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
    let log = fs::read_to_string(d.join("a/loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 7);
    assert!(log.starts_with("step,loss\n1,"));
}

#[test]
fn zero_steps_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    config(d, "c.txt", "train.steps = 0\n");
    assert_eq!(code(&tbs(d, &["train", "--config", "c.txt", "--seed", "9", "--out", "o"])), 0);
    let saved = fs::read(d.join("o/model.tbsc")).unwrap();
    assert_eq!(saved, checkpoint::encode(&Model::<f32>::init(9).params));
}

#[test]
fn corrupted_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    config(d, "c.txt", "train.steps = 1\neval.episodes = 4\n");
    assert_eq!(code(&tbs(d, &["train", "--config", "c.txt", "--out", "o"])), 0);
    let p = d.join("o/model.tbsc");
    let mut bytes = fs::read(&p).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    fs::write(&p, bytes).unwrap();
    let o = tbs(d, &["eval", "--config", "c.txt", "--out", "o", "--checkpoint", "o/model.tbsc"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("CRC"));
}

#[test]
fn oracle_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    config(d, "c.txt", "eval.episodes = 40\n");
    assert_eq!(code(&tbs(d, &["eval", "--config", "c.txt", "--oracle", "--out", "o"])), 0);
    let csv = fs::read_to_string(d.join("o/metrics_oracle.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert!(!rows.is_empty());
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[2], "1.000000", "{row}");
        assert_eq!(cols[3], "1.000000", "{row}");
    }
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    config(d, "unknown.txt", "gen.shot = 2\n");
    config(d, "fold.txt", "train.fold = 7\n");
    for c in ["unknown.txt", "fold.txt"] {
        let o = tbs(d, &["train", "--config", c]);
        assert_eq!(code(&o), 2, "{c}: {}", stderr(&o));
    }
    assert_eq!(code(&tbs(d, &["eval"])), 2, "missing --checkpoint");
}

#[test]
fn missing_files_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&tbs(d, &["train", "--config", "absent.txt"])), 1);
    assert_eq!(code(&tbs(d, &["eval", "--checkpoint", "absent.tbsc", "--out", "o"])), 1);
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    config(d, "c.txt", "train.steps = 5\ntrain.lr = 1e30\n");
    let o = tbs(d, &["train", "--config", "c.txt", "--out", "o"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("episode seed"));
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = tbs(d, &["gradcheck"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let bad = tbs(d, &["gradcheck", "--inject-fault", "softmax_rows"]);
    assert_eq!(code(&bad), 5);
    let msg = stderr(&bad);
    assert!(msg.contains("softmax_rows failed") && msg.contains("index"), "{msg}");
    assert_eq!(code(&tbs(d, &["gradcheck", "--inject-fault", "nope"])), 2);
}

#[test]
fn ablation_rows_share_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    config(d, "c.txt", "train.steps = 2\neval.episodes = 12\n");
    assert_eq!(code(&tbs(d, &["train", "--config", "c.txt", "--ablation", "--out", "o"])), 0);
    for row in ["baseline", "qs", "ts", "qs_ts"] {
        assert!(d.join("o").join(row).join("model.tbsc").exists(), "{row}");
    }
    let o = tbs(d, &["eval", "--config", "c.txt", "--ablation", "--checkpoint", "o", "--out", "e"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(d.join("e/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    let meta = fs::read_to_string(d.join("e/ablation_meta.txt")).unwrap();
    let digests: Vec<&str> = meta.lines().filter_map(|l| l.split("episode_seed_crc32=").nth(1)).collect();
    assert_eq!(digests.len(), 4);
    assert!(digests.iter().all(|x| *x == digests[0]));
}

#[test]
fn gen_and_visualize_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    config(d, "c.txt", "train.steps = 0\neval.episodes = 5\n");
    assert_eq!(code(&tbs(d, &["gen", "--config", "c.txt", "--out", "o"])), 0);
    let dump = fs::read(d.join("o/episodes.tbse")).unwrap();
    let eps = tbs_core::episodes::read_dump(&mut dump.as_slice()).unwrap();
    assert_eq!(eps.len(), 5);
    assert_eq!(code(&tbs(d, &["train", "--config", "c.txt", "--out", "o"])), 0);
    let o = tbs(d, &["visualize", "--config", "c.txt", "--out", "o", "--checkpoint", "o/model.tbsc", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["shot0_rb.pgm", "shot0_rb_pinned.pgm", "shot0_rb.range.txt", "query.ppm", "support0.ppm"] {
        assert!(d.join("o/viz_4").join(f).exists(), "{f}");
    }
}
