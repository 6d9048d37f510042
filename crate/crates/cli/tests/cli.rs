use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ldg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldg"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Run directory printed on the last stdout line.
fn run_dir(dir: &Path, out: &Output) -> PathBuf {
    assert!(out.status.success(), "failed: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    dir.join(stdout.lines().last().unwrap().trim())
}

fn small_world(dir: &Path) -> PathBuf {
    let out = ldg(dir, &["synth", "--nodes", "8", "--events", "400", "--seed", "3", "--out", "data"]);
    run_dir(dir, &out)
}

fn train_small(dir: &Path, data: &Path, extra: &[&str]) -> PathBuf {
    let events = data.join("events.csv");
    let assoc = data.join("assoc_init.csv");
    let mut args = vec![
        "train",
        "--events",
        events.to_str().unwrap(),
        "--assoc",
        assoc.to_str().unwrap(),
        "--train-until",
        "80",
        "--batch",
        "50",
        "--set",
        "dim=4",
        "--out",
        "runs",
    ];
    args.extend_from_slice(extra);
    let out = ldg(dir, &args);
    run_dir(dir, &out)
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_dir(tmp.path(), &ldg(tmp.path(), &["synth", "--nodes", "20", "--events", "5000", "--seed", "1"]));
    let b = run_dir(tmp.path(), &ldg(tmp.path(), &["synth", "--nodes", "20", "--events", "5000", "--seed", "1"]));
    assert_ne!(a, b, "each invocation gets its own run directory");
    for f in ["events.csv", "assoc_init.csv", "planted.csv"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
}

#[test]
fn train_writes_five_epochs_and_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_world(tmp.path());
    let run = train_small(
        tmp.path(),
        &data,
        &["--attention", "ldg-learned", "--prior", "sparse", "--interaction", "bilinear", "--seed", "0"],
    );
    let metrics = String::from_utf8(read(&run.join("metrics.csv"))).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,split,mar,hits10,l_events,l_nonevents,l_kl,wall_seconds");
    assert_eq!(lines.len(), 6);
    for e in 1..=5 {
        assert!(run.join(format!("checkpoints/epoch{e}.ckpt")).exists());
    }
    for f in ["params.ckpt", "state.txt", "embeddings.csv", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let svg = String::from_utf8(read(&run.join("loss.svg"))).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
}

#[test]
fn evaluate_without_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(ldg(tmp.path(), &["evaluate"]).status.code(), Some(2));
    let out = ldg(tmp.path(), &["evaluate", "--checkpoint", "nowhere"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::create_dir(tmp.path().join("empty")).unwrap();
    let out = ldg(tmp.path(), &["evaluate", "--checkpoint", "empty"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_events_file_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ldg(tmp.path(), &["train", "--events", "absent.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.csv"));
}

#[test]
fn config_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(ldg(tmp.path(), &["train", "--set", "bogus=1"]).status.code(), Some(3));
    assert_eq!(ldg(tmp.path(), &["synth", "--nodes", "many"]).status.code(), Some(3));
    assert_eq!(ldg(tmp.path(), &["train", "--no-such-flag"]).status.code(), Some(3));
    std::fs::write(tmp.path().join("c.txt"), "epochs = 2\nwidth = 9\n").unwrap();
    assert_eq!(ldg(tmp.path(), &["train", "--config", "c.txt"]).status.code(), Some(3));
}

#[test]
fn divergence_exits_4_and_keeps_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_world(tmp.path());
    let events = data.join("events.csv");
    let out = ldg(
        tmp.path(),
        &["train", "--events", events.to_str().unwrap(), "--lr", "1e300", "--set", "dim=4", "--out", "runs"],
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("last good checkpoint"));
}

#[test]
fn echoed_config_reproduces_every_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_world(tmp.path());
    let a = train_small(tmp.path(), &data, &["--seed", "4"]);
    let config = a.join("config.txt");
    let b = run_dir(tmp.path(), &ldg(tmp.path(), &["train", "--config", config.to_str().unwrap()]));
    assert_ne!(a, b);
    assert_eq!(read(&a.join("config.txt")), read(&b.join("config.txt")));
    for f in ["metrics.csv", "embeddings.csv", "params.ckpt", "state.txt"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let eval = |run: &Path| {
        let out = ldg(tmp.path(), &["evaluate", "--checkpoint", run.to_str().unwrap(), "--out", "evals"]);
        read(&run_dir(tmp.path(), &out).join("results.csv"))
    };
    assert_eq!(eval(&a), eval(&b));
}

#[test]
fn evaluate_analyze_and_baselines_write_their_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_world(tmp.path());
    let run = train_small(tmp.path(), &data, &["--epochs", "2"]);
    let ckpt = run.to_str().unwrap();

    let out = ldg(tmp.path(), &["evaluate", "--checkpoint", ckpt, "--blend-freq", "0.5", "--dump-scores"]);
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(stdout.starts_with("MAR "), "{stdout}");
    let ev = run_dir(tmp.path(), &out);
    let results = String::from_utf8(read(&ev.join("results.csv"))).unwrap();
    assert!(results.starts_with("event_index,u,true_v,rank,hit10\n"));
    assert!(ev.join("scores.csv").exists());

    let planted = data.join("planted.csv");
    let out = ldg(tmp.path(), &["analyze", "--checkpoint", ckpt, "--planted", planted.to_str().unwrap()]);
    let an = run_dir(tmp.path(), &out);
    let auc = String::from_utf8(read(&an.join("auc.csv"))).unwrap();
    assert!(auc.starts_with("assoc_name,snapshot,edge_type,auc\n"));
    assert!(auc.contains("planted,final,max,"));
    assert!(an.join("attention_final_type0.csv").exists());

    let events = data.join("events.csv");
    for variant in ["no-learn", "frequency"] {
        let out = ldg(
            tmp.path(),
            &["baseline", "--events", events.to_str().unwrap(), "--train-until", "80", "--variant", variant],
        );
        assert!(run_dir(tmp.path(), &out).join("results.csv").exists());
    }
    let out = ldg(tmp.path(), &["baseline", "--events", events.to_str().unwrap(), "--variant", "frequency"]);
    assert_eq!(out.status.code(), Some(3));
}
