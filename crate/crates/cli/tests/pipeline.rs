//! End-to-end runs of the `fairpda` binary on a tiny synthetic cohort.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fairpda::cohort::ClassLabel::{ALS, HC, PD};
use fairpda::config::RunConfig;
use fairpda::evaluator::MetricsReport;

/// A cohort small enough for a few seconds of prep and training.
fn tiny_config(root: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    for ds in &mut cfg.data.synth.datasets {
        for (class, cell) in ds.n_patients.iter_mut() {
            *cell = if *class == HC { [3, 3] } else { [4, 2] };
        }
        ds.recordings_per_patient = 1;
    }
    cfg.data.synth.duration_s = (2.5, 3.0);
    cfg.data.folds = 2;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.eval.max_folds = Some(1);
    cfg.eval.n_resamples = 200;
    cfg.model.backbone.feature_dim = 16;
    cfg.model.heads.domain_hidden = vec![16];
    cfg.model.heads.gender_hidden = vec![16, 16];
    cfg.output_dir = "runs/base".into();
    let path = root.join("run.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    assert!(cfg.data.synth.datasets.iter().any(|d| d.n_patients.contains_key(&PD)));
    assert!(cfg.data.synth.datasets.iter().any(|d| d.n_patients.contains_key(&ALS)));
    path
}

fn fairpda(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairpda"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .env_remove("FAIRPDA_CACHE_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    ok(fairpda(&cfg, &["synth"]));
    let first = files_under(&tmp.path().join("synth"));
    assert!(first.iter().any(|(p, _)| p.extension().is_some_and(|e| e == "wav")));
    ok(fairpda(&cfg, &["synth"]));
    assert_eq!(first, files_under(&tmp.path().join("synth")));
}

#[test]
fn train_eval_and_report_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    ok(fairpda(&cfg, &["synth"]));
    ok(fairpda(&cfg, &["prep"]));
    ok(fairpda(&cfg, &["split"]));
    assert!(tmp.path().join("runs/base/split_plan.json").is_file());

    ok(fairpda(&cfg, &["train"]));
    let run = tmp.path().join("runs/base");
    for f in ["config.toml", "split_plan.json", "metrics.json", "fold_0/checkpoint.fpck", "fold_0/loss_curves.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    ok(fairpda(&cfg, &["eval", "--run-dir", run.to_str().unwrap()]));
    let trained = MetricsReport::read(&run.join("metrics.json")).unwrap();
    let evaluated = MetricsReport::read(&run.join("eval_metrics.json")).unwrap();
    assert_eq!(trained.predictions, evaluated.predictions);
    assert_eq!(trained.aggregate["ext_balacc"], evaluated.aggregate["ext_balacc"]);

    // Flag paths are relative to the working directory, not the config file.
    let erm = tmp.path().join("runs/erm");
    ok(fairpda(&cfg, &["train", "--run-name", "erm", "--output-dir", erm.to_str().unwrap(), "--align-mode", "none", "--no-mixstyle", "--no-fairness"]));
    let rep = tmp.path().join("report");
    ok(fairpda(&cfg, &["report", run.to_str().unwrap(), erm.to_str().unwrap(), "--out", rep.to_str().unwrap()]));
    let csv = std::fs::read_to_string(rep.join("table.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().ends_with(",p_ext"));
    assert!(lines.next().unwrap().starts_with("fairpda,"));
    let erm_row = lines.next().unwrap();
    assert!(erm_row.starts_with("erm,"));
    let p: f64 = erm_row.rsplit(',').next().unwrap().trim_end_matches('*').parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert!(rep.join("loss_fairpda_fold0.svg").is_file());
    assert!(rep.join("loss_erm_fold0.svg").is_file());

    // A missing checkpoint is reported by path with the I/O exit code.
    let missing = run.join("fold_0/nope.fpck");
    let out = fairpda(&cfg, &["eval", "--run-dir", run.to_str().unwrap(), "--checkpoint", missing.to_str().unwrap(), "--fold", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(missing.to_str().unwrap()));
}

#[test]
fn corrupt_wav_fails_prep_but_keeps_good_caches() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    ok(fairpda(&cfg, &["synth"]));
    let victim = files_under(&tmp.path().join("synth"))
        .into_iter()
        .map(|(p, _)| p)
        .find(|p| p.starts_with("synth_c") && p.extension().is_some_and(|e| e == "wav"))
        .expect("a target WAV");
    std::fs::write(tmp.path().join("synth").join(&victim), b"RIFF garbage").unwrap();

    let out = fairpda(&cfg, &["prep"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let stem = victim.file_stem().unwrap().to_str().unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains(stem));
    let cached = files_under(&tmp.path().join("cache"));
    assert!(cached.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "fpda")).count() > 10);
}

#[test]
fn unwritable_output_exits_with_io_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let blocker = tmp.path().join("blocker");
    std::fs::write(&blocker, b"").unwrap();
    let out = fairpda(&cfg, &["split", "--out", blocker.join("plan.json").to_str().unwrap()]);
    // No synthetic data yet, so the manifest read fails first; still I/O.
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    ok(fairpda(&cfg, &["synth"]));
    let out = fairpda(&cfg, &["split", "--out", blocker.join("plan.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("blocker"));
}

#[test]
fn invalid_config_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "[train]\nepochs = 0\n").unwrap();
    let out = fairpda(&path, &["split"]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(&path, "[train]\nepoch = 3\n").unwrap();
    assert_eq!(fairpda(&path, &["split"]).status.code(), Some(1));
}
