use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dafos");

fn config(dir: &Path) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(
        &p,
        "seed = 3\n[train]\nepisodes = 12\nlr = 0.01\nepisodes_per_step = 2\ncheckpoint_every = 6\n[eval]\nepisodes = 4\n",
    )
    .unwrap();
    p
}

fn dafos(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_a_complete_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let run = dir.path().join("run");
    let stdout = ok(&dafos(&["train", "--config", s(&cfg), "--out", s(&run)]));
    assert!(stdout.contains("Acc:") && stdout.contains("AUROC:"));
    for f in ["config.toml", "splits.json", "stats.csv", "report.json", "report.txt", "episodes.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    for f in ["meta.json", "backbone.json", "cgan_low.json", "cgan_high.json", "optimizer.json", "source_bank.json"] {
        assert!(run.join("checkpoint").join(f).is_file(), "missing checkpoint/{f}");
    }
    let stats = std::fs::read_to_string(run.join("stats.csv")).unwrap();
    assert_eq!(stats.lines().count(), 13);

    // The echoed config alone reproduces the run.
    let again = dir.path().join("again");
    ok(&dafos(&["train", "--config", s(&run.join("config.toml")), "--out", s(&again), "--no-eval"]));
    assert_eq!(std::fs::read_to_string(again.join("stats.csv")).unwrap(), stats);
}

#[test]
fn eval_reloads_checkpoint_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let run = dir.path().join("run");
    ok(&dafos(&["train", "--config", s(&cfg), "--out", s(&run)]));
    let out = dir.path().join("ev");
    let ckpt = run.join("checkpoint");
    ok(&dafos(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--splits",
        s(&run.join("splits.json")),
        "--episodes",
        "4",
        "--out",
        s(&out),
    ]));
    assert_eq!(
        std::fs::read_to_string(out.join("episodes.csv")).unwrap(),
        std::fs::read_to_string(run.join("episodes.csv")).unwrap()
    );
    let gen = ok(&dafos(&["eval", "--checkpoint", s(&ckpt), "--episodes", "3", "--mode", "generalized"]));
    assert!(gen.contains("merged bank"));
    assert!(run.join("eval-generalized/report.json").is_file());
}

#[test]
fn prepare_splits_matches_training_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let a = dir.path().join("a.json");
    ok(&dafos(&["prepare-splits", "--config", s(&cfg), "--out", s(&a)]));
    let run = dir.path().join("run");
    ok(&dafos(&["train", "--config", s(&cfg), "--out", s(&run), "--splits", s(&a), "--no-eval"]));
    assert_eq!(
        std::fs::read_to_string(a).unwrap(),
        std::fs::read_to_string(run.join("splits.json")).unwrap()
    );
}

#[test]
fn sweep_and_plot_emit_table_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let out = dir.path().join("sw");
    ok(&dafos(&["sweep", "--config", s(&cfg), "--axis", "shots", "--values", "1,5", "--out", s(&out)]));
    let table = out.join("sweep_shots.csv");
    let text = std::fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(out.join("sweep_shots.svg").is_file());
    let svg = dir.path().join("re.svg");
    ok(&dafos(&["plot", "--table", s(&table), "--out", s(&svg)]));
    assert!(std::fs::read_to_string(svg).unwrap().starts_with("<svg"));
}

#[test]
fn errors_map_to_category_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let out = s(dir.path());

    let bad = dafos(&["train", "--config", s(&cfg), "--out", out, "--set", "gan.sigma_low=0.95"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("gan.sigma_low"));

    let unknown = dafos(&["train", "--config", s(&cfg), "--out", out, "--set", "train.warmup=3"]);
    assert_eq!(unknown.status.code(), Some(2));

    let empty = dafos(&["sweep", "--config", s(&cfg), "--axis", "shots", "--out", out]);
    assert_eq!(empty.status.code(), Some(2));

    let missing = dafos(&["eval", "--checkpoint", out]);
    assert_eq!(missing.status.code(), Some(3));

    let io = dafos(&["train", "--config", s(&dir.path().join("nope.toml")), "--out", out]);
    assert_eq!(io.status.code(), Some(5));
}

#[test]
fn resume_continues_to_the_same_stats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let full = dir.path().join("full");
    ok(&dafos(&["train", "--config", s(&cfg), "--out", s(&full), "--no-eval"]));
    let part = dir.path().join("part");
    ok(&dafos(&["train", "--config", s(&cfg), "--set", "train.episodes=6", "--out", s(&part), "--no-eval"]));
    ok(&dafos(&["train", "--config", s(&cfg), "--out", s(&part), "--resume", "--no-eval"]));
    assert_eq!(
        std::fs::read_to_string(part.join("stats.csv")).unwrap(),
        std::fs::read_to_string(full.join("stats.csv")).unwrap()
    );
}
