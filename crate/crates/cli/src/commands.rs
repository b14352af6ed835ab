use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use fairpda::audio::{prep_cohort, FeatureCache};
use fairpda::cohort::{
    apply_filters, load_manifest_with_role, make_cv_splits, make_uda_split, CohortManifest, Role, SplitPlan,
};
use fairpda::config::RunConfig;
use fairpda::evaluator::{table_csv, Cohort, MetricsReport};
use fairpda::model::FairPdaModel;
use fairpda::synth::build_synth_benchmark;
use fairpda::trainer::{evaluate_patients, run_experiment, FoldData, LossHistory, SegmentBank};
use fairpda::util::derive_seed;

pub const SPLIT_FILE: &str = "split_plan.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const EVAL_FILE: &str = "eval_metrics.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.fpck";
pub const LOSS_FILE: &str = "loss_curves.json";

/// A stage that completed partially; carries its exit code.
#[derive(Debug)]
pub struct StageFailure {
    pub code: u8,
    pub msg: String,
}

impl fmt::Display for StageFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for StageFailure {}

pub fn synth(cfg: &RunConfig) -> anyhow::Result<()> {
    let bench = build_synth_benchmark(&cfg.data.synth, &cfg.data.synth_dir)?;
    for (ds, path, m) in &bench.manifests {
        println!(
            "{}: {} patients, {} recordings -> {}",
            ds.id,
            m.patients.len(),
            m.recordings.len(),
            path.display()
        );
    }
    Ok(())
}

/// Source and target manifests: the configured files, or the synthetic
/// benchmark's when none are configured.
fn manifests(cfg: &RunConfig) -> anyhow::Result<(Vec<CohortManifest>, Vec<CohortManifest>)> {
    let mut listed: Vec<(PathBuf, Role)> = Vec::new();
    if cfg.data.source_manifests.is_empty() && cfg.data.target_manifests.is_empty() {
        for ds in &cfg.data.synth.datasets {
            listed.push((cfg.data.synth_dir.join(format!("{}.csv", ds.id)), ds.role));
        }
    } else {
        listed.extend(cfg.data.source_manifests.iter().map(|p| (p.clone(), Role::Source)));
        listed.extend(cfg.data.target_manifests.iter().map(|p| (p.clone(), Role::Target)));
    }
    let mut sources = Vec::new();
    let mut targets = Vec::new();
    for (path, role) in listed {
        let mut m = load_manifest_with_role(&path, role).with_context(|| format!("manifest {}", path.display()))?;
        if cfg.data.apply_filters {
            m = apply_filters(&m, &cfg.data.filters).with_context(|| format!("filtering {}", path.display()))?;
        }
        match role {
            Role::Source => sources.push(m),
            Role::Target => targets.push(m),
        }
    }
    if sources.is_empty() {
        bail!("no source manifests");
    }
    Ok((sources, targets))
}

pub fn prep(cfg: &RunConfig) -> anyhow::Result<()> {
    let (sources, targets) = manifests(cfg)?;
    let all: Vec<&CohortManifest> = sources.iter().chain(&targets).collect();
    let report = prep_cohort(&all, &cfg.prep.audio, &cfg.prep.features, &cfg.prep.cache_dir)?;
    println!(
        "prep: {} recordings processed, {} reused, {} segments, {} too short, {} failed",
        report.processed,
        report.reused,
        report.segments,
        report.too_short,
        report.failures.len()
    );
    if !report.failures.is_empty() {
        for f in &report.failures {
            eprintln!("  {}/{}: {}", f.dataset_id, f.recording_id, f.error);
        }
        return Err(StageFailure {
            code: 2,
            msg: format!("{} recordings could not be preprocessed", report.failures.len()),
        }
        .into());
    }
    Ok(())
}

fn make_plan(cfg: &RunConfig) -> anyhow::Result<SplitPlan> {
    if let Some(p) = &cfg.data.split_plan {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        return Ok(SplitPlan::from_json(&text)?);
    }
    let (sources, targets) = manifests(cfg)?;
    let src = CohortManifest::merge(&sources)?;
    let mut plan = make_cv_splits(&src, cfg.data.folds, cfg.seed)?;
    if !targets.is_empty() {
        let tgt = CohortManifest::merge(&targets)?;
        plan = plan.with_uda(&make_uda_split(&tgt, cfg.data.uda_fraction, cfg.seed)?);
    }
    Ok(plan)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| fairpda::Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| fairpda::Error::io(path, e))?;
    Ok(())
}

pub fn split(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<()> {
    let plan = make_plan(cfg)?;
    let path = out.map_or_else(|| cfg.output_dir.join(SPLIT_FILE), Path::to_path_buf);
    write_text(&path, &plan.to_json()?)?;
    println!(
        "split: {} folds, {} adaptation and {} external patients -> {}",
        plan.folds.len(),
        plan.uda_adaptation.len(),
        plan.uda_external_eval.len(),
        path.display()
    );
    Ok(())
}

fn plan_patients(plan: &SplitPlan) -> BTreeSet<String> {
    plan.folds
        .iter()
        .flat_map(|f| f.train.iter().chain(&f.test))
        .chain(&plan.uda_adaptation)
        .chain(&plan.uda_external_eval)
        .cloned()
        .collect()
}

fn open_cache(cfg: &RunConfig) -> anyhow::Result<FeatureCache> {
    let cache = FeatureCache::open(&cfg.prep.cache_dir)
        .with_context(|| format!("no feature cache at {} (run `fairpda prep`)", cfg.prep.cache_dir.display()))?;
    if (cache.index.prep.window_s - cfg.train.window_s).abs() > 1e-9 {
        bail!(
            "cache {} holds {} s windows, the run asks for {} s",
            cfg.prep.cache_dir.display(),
            cache.index.prep.window_s,
            cfg.train.window_s
        );
    }
    Ok(cache)
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| fairpda::Error::io(dir, e))?;
    cfg.echo(dir)?;
    let mut plan = make_plan(cfg)?;
    write_text(&dir.join(SPLIT_FILE), &plan.to_json()?)?;
    if let Some(k) = cfg.eval.max_folds {
        plan.folds.truncate(k);
    }
    let cache = open_cache(cfg)?;
    let bank = SegmentBank::load(&cache, &plan_patients(&plan))?;
    let mut protocol = cfg.train.clone();
    protocol.seed = cfg.seed;
    let out = run_experiment(
        &cfg.run_name,
        &protocol,
        &cfg.model,
        &bank,
        &plan,
        cfg.eval.gap_reduction,
        Some(dir),
    )?;
    out.report.write(&dir.join(METRICS_FILE))?;
    print_summary(&out.report);
    Ok(())
}

fn print_summary(r: &MetricsReport) {
    for (k, m) in &r.aggregate {
        println!("{}: {k} = {:.3} ± {:.3}", r.run_name, m.mean, m.std);
    }
}

/// Parse the fold index from a `fold_<i>` directory name.
fn fold_from_path(p: &Path) -> Option<usize> {
    p.parent()?.file_name()?.to_str()?.strip_prefix("fold_")?.parse().ok()
}

pub fn eval(run_dir: &Path, checkpoint: Option<&Path>, fold: Option<usize>, out: Option<&Path>) -> anyhow::Result<()> {
    let cfg = RunConfig::load(&run_dir.join("config.toml")).context("run configuration")?;
    let plan_path = run_dir.join(SPLIT_FILE);
    let text = std::fs::read_to_string(&plan_path).map_err(|e| fairpda::Error::io(&plan_path, e))?;
    let mut plan = SplitPlan::from_json(&text)?;
    if let Some(k) = cfg.eval.max_folds {
        plan.folds.truncate(k);
    }
    let jobs: Vec<(usize, PathBuf)> = match checkpoint {
        Some(c) => {
            let f = fold.or_else(|| fold_from_path(c)).context("--fold is required")?;
            vec![(f, c.to_path_buf())]
        }
        None => (0..plan.folds.len())
            .map(|f| (f, run_dir.join(format!("fold_{f}")).join(CHECKPOINT_FILE)))
            .collect(),
    };
    let cache = open_cache(&cfg)?;
    let bank = SegmentBank::load(&cache, &plan_patients(&plan))?;
    let mut predictions = Vec::new();
    for (f, ck) in jobs {
        if !ck.is_file() {
            return Err(fairpda::Error::io(&ck, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")).into());
        }
        let model = FairPdaModel::load(&ck)?;
        let data = FoldData::from_plan(&bank, &plan, f)?;
        predictions.extend(evaluate_patients(&model, &bank, &data.internal, Cohort::Internal, f)?);
        predictions.extend(evaluate_patients(&model, &bank, &data.external, Cohort::External, f)?);
    }
    let report = MetricsReport::from_predictions(&cfg.run_name, predictions, cfg.eval.gap_reduction)?;
    let path = out.map_or_else(|| run_dir.join(EVAL_FILE), Path::to_path_buf);
    report.write(&path)?;
    print_summary(&report);
    Ok(())
}

pub fn report(cfg: &RunConfig, runs: &[PathBuf], reference: Option<&str>, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).map_err(|e| fairpda::Error::io(out, e))?;
    let mut reports = runs
        .iter()
        .map(|d| MetricsReport::read(&d.join(METRICS_FILE)))
        .collect::<fairpda::Result<Vec<_>>>()?;
    let ref_idx = match reference {
        Some(name) => reports
            .iter()
            .position(|r| r.run_name == name)
            .with_context(|| format!("no run named {name}"))?,
        None => 0,
    };
    let mut refr = reports[ref_idx].clone();
    for (i, other) in reports.iter().enumerate() {
        if i == ref_idx {
            continue;
        }
        for (cohort, label) in [(Cohort::External, "external"), (Cohort::Internal, "internal")] {
            let seed = derive_seed(cfg.seed, &format!("paired/{}/{label}", other.run_name));
            let p = refr
                .compare(other, cohort, cfg.eval.n_resamples, seed)
                .with_context(|| format!("paired test against {}", other.run_name))?;
            refr.p_values.entry(other.run_name.clone()).or_default().insert(label.to_string(), p);
        }
    }
    reports[ref_idx] = refr.clone();
    let csv = table_csv(&reports, Some(&refr));
    write_text(&out.join("table.csv"), &csv)?;
    refr.write(&out.join(format!("{}_vs_runs.json", refr.run_name)))?;
    for (run_dir, r) in runs.iter().zip(&reports) {
        let mut fold = 0;
        loop {
            let path = run_dir.join(format!("fold_{fold}")).join(LOSS_FILE);
            if !path.is_file() {
                break;
            }
            let history = LossHistory::read(&path)?;
            let svg = crate::plot::loss_curves_svg(&format!("{} fold {fold}", r.run_name), &history);
            write_text(&out.join(format!("loss_{}_fold{fold}.svg", r.run_name)), &svg)?;
            fold += 1;
        }
    }
    print!("{csv}");
    Ok(())
}
