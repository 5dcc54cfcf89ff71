//! The six commands behind the `advtta` binary. Each one creates a fresh run
//! directory, writes everything it produces there, and records it in the
//! run's manifest. Inputs (datasets, earlier runs) are only read.

use crate::config::{ExperimentConfig, ShiftSection};
use crate::data::{
    apply_domain_shift, assign_splits, dataset_hash, generate_synthetic_dataset, load_dataset, preprocess_samples,
    save_dataset, DatasetIndex, DatasetKind, PreprocessSpec, Sample, Split, SplitSets, StoredSample, GENERATOR_VERSION,
};
use crate::diagnostics::{classify_convergence, CollapseVerdict, LossTrace, DEFAULT_TAIL, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::eval::report::{ablation_table, bar_plot, format_cell, summarize_and_report, PairedSummary};
use crate::models::{
    build_dae, build_discriminator, build_segmentor, load_checkpoint, restore_into, Dae, DaeConfig, Discriminator,
    DiscriminatorConfig, Segmentor, SegmentorConfig,
};
use crate::rng::{derive_seed, Part};
use crate::run::{DatasetRef, RunDir, RunManifest, EVENTS_FILE};
use crate::training::{train, train_dae};
use crate::ttt::{evaluate_with_ttt, Driver, TTTResult, TttModels};
use serde_json::json;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const DATASET_DIR: &str = "dataset";

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

fn dataset_ref(dir: &Path) -> Result<DatasetRef> {
    Ok(DatasetRef { path: absolute(dir)?, hash: dataset_hash(dir)? })
}

fn new_manifest(command: &str, cfg: &ExperimentConfig) -> RunManifest {
    let mut m = RunManifest::new(command, cfg.to_json(), cfg.seed);
    m.files.insert("events".into(), EVENTS_FILE.into());
    m
}

/// Generates the synthetic cohort into `<run>/dataset`.
pub fn cmd_synth_data(cfg: &ExperimentConfig, runs_root: &Path) -> Result<RunDir> {
    cfg.validate()?;
    let run = RunDir::create(runs_root, "synth-data", &cfg.hash())?;
    let synth = cfg.synth_config();
    let samples = generate_synthetic_dataset(&synth)?;
    let stored: Vec<StoredSample> =
        samples.into_iter().map(|sample| StoredSample { sample, split: None, annotated: true }).collect();
    let dir = run.join(DATASET_DIR);
    let provenance = json!({ "generator_version": GENERATOR_VERSION, "synth": synth });
    let index = save_dataset(&dir, DatasetKind::Raw, provenance, &stored)?;
    run.log(format!("synth-data: {} slices from {} patients", index.entries.len(), synth.n_patients))?;
    let mut m = new_manifest("synth-data", cfg);
    m.dataset = Some(dataset_ref(&dir)?);
    m.files.insert("dataset_index".into(), PathBuf::from(DATASET_DIR).join("index.json"));
    m.save(&run)?;
    Ok(run)
}

/// Resamples, crops and normalises a raw dataset and assigns patient splits.
pub fn cmd_preprocess(cfg: &ExperimentConfig, raw_dir: &Path, runs_root: &Path) -> Result<RunDir> {
    cfg.validate()?;
    let (index, stored) = load_dataset(raw_dir)?;
    if index.kind != DatasetKind::Raw {
        return Err(Error::Config(format!("{} is already preprocessed", raw_dir.display())));
    }
    let run = RunDir::create(runs_root, "preprocess", &cfg.hash())?;
    let samples: Vec<Sample> = stored.into_iter().map(|s| s.sample).collect();
    let (pre, warnings) = preprocess_samples(&samples, &cfg.preprocess)?;
    for w in &warnings {
        run.log(format!("warning: {w}"))?;
    }
    let ids: Vec<String> = pre.iter().map(|s| s.image.patient_id.clone()).collect();
    let assignment = assign_splits(&ids, &cfg.split_spec())?;
    let out: Vec<StoredSample> = pre
        .into_iter()
        .map(|sample| {
            let (split, annotated) = assignment[&sample.image.patient_id];
            StoredSample { sample, split: Some(split), annotated }
        })
        .collect();
    let source = dataset_ref(raw_dir)?;
    let provenance = json!({
        "source": source,
        "preprocess": cfg.preprocess,
        "split": cfg.split_spec(),
        "warnings": warnings,
    });
    let dir = run.join(DATASET_DIR);
    let index = save_dataset(&dir, DatasetKind::Preprocessed, provenance, &out)?;
    run.log(format!("preprocess: {} slices to {:?}", index.entries.len(), cfg.preprocess.target_hw))?;
    let mut m = new_manifest("preprocess", cfg);
    m.dataset = Some(dataset_ref(&dir)?);
    m.files.insert("dataset_index".into(), PathBuf::from(DATASET_DIR).join("index.json"));
    let sets = split_sets(&out)?;
    insert_splits(&mut m, &sets);
    m.save(&run)?;
    Ok(run)
}

fn insert_splits(m: &mut RunManifest, sets: &SplitSets) {
    let [annotated, unpaired, val, test] = sets.patients();
    for (k, v) in [("train_annotated", annotated), ("train_unpaired", unpaired), ("val", val), ("test", test)] {
        m.splits.insert(k.into(), v);
    }
}

/// Rebuilds the four pools from persisted split assignments.
pub fn split_sets(stored: &[StoredSample]) -> Result<SplitSets> {
    let mut sets = SplitSets::default();
    for s in stored {
        match (s.split, s.annotated) {
            (Some(Split::Train), true) => sets.train_annotated.push(s.sample.clone()),
            (Some(Split::Train), false) => sets.train_unpaired.push(s.sample.clone().unlabeled()),
            (Some(Split::Val), _) => sets.val.push(s.sample.clone()),
            (Some(Split::Test), _) => sets.test.push(s.sample.clone()),
            (None, _) => {
                return Err(Error::Config(format!("sample {:?} has no split; run preprocess first", s.sample.key())))
            }
        }
    }
    Ok(sets)
}

fn load_preprocessed(dir: &Path) -> Result<(DatasetIndex, Vec<StoredSample>)> {
    let (index, stored) = load_dataset(dir)?;
    if index.kind != DatasetKind::Preprocessed {
        return Err(Error::Config(format!("{} is a raw dataset; run preprocess first", dir.display())));
    }
    Ok((index, stored))
}

/// Trains the adversarial segmentor/discriminator pair (and the DAE when
/// `train_dae` is set) on a preprocessed dataset.
pub fn cmd_train(cfg: &ExperimentConfig, dataset: &Path, runs_root: &Path) -> Result<RunDir> {
    cfg.validate()?;
    let (_, stored) = load_preprocessed(dataset)?;
    let sets = split_sets(&stored)?;
    let run = RunDir::create(runs_root, "train", &cfg.hash())?;
    let (_, mut m) = train(&sets, &cfg.train, cfg.seed, &run)?;
    if cfg.train_dae {
        let masks: Vec<_> = sets.train_annotated.iter().filter_map(|s| s.label.clone()).collect();
        let held_out: Vec<_> = sets.val.iter().filter_map(|s| s.label.clone()).collect();
        let dae_seed = derive_seed(cfg.seed, &[Part::from("dae")]);
        let out = train_dae(&masks, &held_out, &cfg.train.corruption, &cfg.dae, dae_seed, Some(&run))?;
        run.log(format!("dae done: best epoch {}, held-out ce {:.5}", out.best_epoch, out.best_val_ce))?;
        m.checkpoints.insert("dae".into(), out.checkpoint.expect("run directory given"));
        m.notes.insert("dae_best_val_ce".into(), out.best_val_ce.into());
    }
    m.config = cfg.to_json();
    m.config_hash = cfg.hash();
    m.dataset = Some(dataset_ref(dataset)?);
    m.save(&run)?;
    Ok(run)
}

/// Re-classifies a training run's trace and stores the verdict.
pub fn cmd_diagnose(run_dir: &Path) -> Result<CollapseVerdict> {
    let run = RunDir::open(run_dir)?;
    let mut m = RunManifest::load(&run)?;
    let rel = m
        .files
        .get("trace")
        .cloned()
        .ok_or_else(|| Error::Config(format!("{} is not a training run (no trace)", run_dir.display())))?;
    let trace = LossTrace::read_csv(&run.join(rel))?;
    let v = classify_convergence(&trace, DEFAULT_TAIL, DEFAULT_TOL)?;
    run.log(format!("diagnose: {:?} (tail means {:?})", v.verdict, v.evidence))?;
    m.verdicts.insert("convergence".into(), serde_json::to_value(&v)?);
    m.save(&run)?;
    Ok(v)
}

/// Models restored from a training run.
pub struct TrainedRun {
    pub config: ExperimentConfig,
    pub manifest: RunManifest,
    pub segmentor: Segmentor,
    pub discriminator: Discriminator,
    pub dae: Option<Dae>,
}

fn sidecar_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, u64)> {
    let (_, meta) = load_checkpoint(path)?;
    let cfg = serde_json::from_value(meta.config).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((cfg, meta.seed))
}

pub fn load_trained(run_dir: &Path) -> Result<TrainedRun> {
    let run = RunDir::open(run_dir)?;
    let manifest = RunManifest::load(&run)?;
    if manifest.command != "train" {
        return Err(Error::Config(format!("{} is a {} run, not a training run", run_dir.display(), manifest.command)));
    }
    let config: ExperimentConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| Error::format(run.join(crate::run::MANIFEST_FILE), e.to_string()))?;
    let ckpt = |k: &str| manifest.checkpoints.get(k).map(|p| run.join(p));
    let seg_path = ckpt("segmentor").ok_or_else(|| Error::Config("run has no segmentor checkpoint".into()))?;
    let (sc, seed): (SegmentorConfig, u64) = sidecar_config(&seg_path)?;
    let mut segmentor = build_segmentor(&sc, seed)?;
    restore_into(&seg_path, &mut segmentor)?;
    let d_path = ckpt("discriminator").ok_or_else(|| Error::Config("run has no discriminator checkpoint".into()))?;
    let (dc, seed): (DiscriminatorConfig, u64) = sidecar_config(&d_path)?;
    let mut discriminator = build_discriminator(&dc, seed)?;
    restore_into(&d_path, &mut discriminator)?;
    let dae = match ckpt("dae") {
        Some(p) => {
            let (ac, seed): (DaeConfig, u64) = sidecar_config(&p)?;
            let mut dae = build_dae(&ac, seed)?;
            restore_into(&p, &mut dae)?;
            Some(dae)
        }
        None => None,
    };
    Ok(TrainedRun { config, manifest, segmentor, discriminator, dae })
}

/// Flag overrides for `ttt-eval`; `None` keeps the training run's value.
#[derive(Clone, Debug, Default)]
pub struct TttEvalOptions {
    pub driver: Option<Driver>,
    pub n_iter: Option<usize>,
    pub shift: Option<ShiftSection>,
    pub max_instances: Option<usize>,
    pub seed: Option<u64>,
}

/// Test pool of a training run, with the acquisition shift applied to the raw
/// images before preprocessing.
pub fn shifted_test_set(cfg: &ExperimentConfig, dataset: &Path, shift: &ShiftSection, seed: u64) -> Result<Vec<Sample>> {
    let (index, stored) = load_preprocessed(dataset)?;
    let test: Vec<Sample> =
        stored.into_iter().filter(|s| s.split == Some(Split::Test)).map(|s| s.sample).collect();
    let spec = shift.spec(derive_seed(seed, &[Part::from("shift")]));
    if spec.is_identity() {
        return Ok(test);
    }
    let source: DatasetRef = serde_json::from_value(index.provenance["source"].clone())
        .map_err(|_| Error::Config(format!("{} does not record its raw source dataset", dataset.display())))?;
    let pre: PreprocessSpec = serde_json::from_value(index.provenance["preprocess"].clone()).unwrap_or(cfg.preprocess.clone());
    let (_, raw) = load_dataset(&source.path)?;
    let keys: BTreeSet<(String, usize)> = test.iter().map(Sample::key).collect();
    let shifted: Vec<Sample> = raw
        .into_iter()
        .filter(|s| keys.contains(&s.sample.key()))
        .map(|s| Sample::new(apply_domain_shift(&s.sample.image, &spec)?, s.sample.label))
        .collect::<Result<_>>()?;
    let (out, _) = preprocess_samples(&shifted, &pre)?;
    Ok(out)
}

pub const RESULTS_FILE: &str = "ttt_results.json";

/// Adapts every test slice of a training run and writes paired metrics.
pub fn cmd_ttt_eval(train_run: &Path, opts: &TttEvalOptions, runs_root: &Path) -> Result<RunDir> {
    let trained = load_trained(train_run)?;
    let mut cfg = trained.config.clone();
    if let Some(d) = opts.driver {
        cfg.ttt.driver = d;
    }
    if let Some(n) = opts.n_iter {
        cfg.ttt.n_iter = n;
    }
    if let Some(s) = &opts.shift {
        cfg.shift = s.clone();
    }
    if let Some(n) = opts.max_instances {
        cfg.eval.max_test_instances = Some(n);
    }
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if cfg.ttt.driver == Driver::Dae && trained.dae.is_none() {
        return Err(Error::Config("the training run has no DAE checkpoint; retrain with train_dae = true".into()));
    }
    let dataset = trained
        .manifest
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("training run does not reference its dataset".into()))?;
    let mut test = shifted_test_set(&cfg, &dataset.path, &cfg.shift, cfg.seed)?;
    if let Some(n) = cfg.eval.max_test_instances {
        test.truncate(n);
    }
    let run = RunDir::create(runs_root, "ttt-eval", &cfg.hash())?;
    run.log(format!(
        "ttt-eval: {} test slices, driver {:?}, n_iter {}, shift {:?}",
        test.len(),
        cfg.ttt.driver,
        cfg.ttt.n_iter,
        cfg.shift
    ))?;
    let models = TttModels {
        segmentor: &trained.segmentor,
        discriminator: Some(&trained.discriminator),
        dae: trained.dae.as_ref(),
    };
    let ev = evaluate_with_ttt(&test, models, &cfg.ttt, cfg.seed)?;
    let files = summarize_and_report(&ev.before, &ev.after, run.path())?;
    std::fs::write(run.join(RESULTS_FILE), serde_json::to_vec_pretty(&ev.results)?)
        .map_err(|e| Error::io(run.join(RESULTS_FILE), e))?;
    let rel = |p: &Path| p.strip_prefix(run.path()).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
    let mut m = new_manifest("ttt-eval", &cfg);
    m.dataset = Some(dataset.clone());
    m.metrics.insert("metrics_csv".into(), rel(&files.metrics_csv));
    m.metrics.insert("summary_json".into(), rel(&files.summary_json));
    for p in &files.plots {
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("plot").to_string();
        m.files.insert(format!("plot_{name}"), rel(p));
    }
    m.files.insert("ttt_results".into(), RESULTS_FILE.into());
    m.notes.insert("source_run".into(), json!(absolute(train_run)?));
    m.notes.insert("n_instances".into(), test.len().into());
    m.notes.insert("diverged_instances".into(), ev.results.iter().filter(|r| r.diverged).count().into());
    m.notes.insert("loss_decreased_instances".into(), loss_decreased(&ev.results).into());
    m.save(&run)?;
    Ok(run)
}

fn loss_decreased(results: &[TTTResult]) -> usize {
    results.iter().filter(|r| matches!((r.loss_trace.first(), r.loss_trace.last()), (Some(a), Some(b)) if b < a)).count()
}

pub fn read_summary(run_dir: &Path) -> Result<Vec<PairedSummary>> {
    let run = RunDir::open(run_dir)?;
    let m = RunManifest::load(&run)?;
    let rel = m
        .metrics
        .get("summary_json")
        .ok_or_else(|| Error::Config(format!("{} is not a ttt-eval run", run_dir.display())))?;
    let p = run.join(rel);
    let raw = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_slice(&raw).map_err(|e| Error::format(&p, e.to_string()))
}

pub const REPORT_FILE: &str = "report.md";

/// Comparison table (Dice/IoU/Hausdorff before and after TTT) over several
/// `ttt-eval` runs, plus a Dice ablation row and a bar plot.
pub fn cmd_report(runs: &[PathBuf], runs_root: &Path) -> Result<RunDir> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one ttt-eval run".into()));
    }
    let mut rows = Vec::new();
    for r in runs {
        let m = RunManifest::load(&RunDir::open(r)?)?;
        let cfg: ExperimentConfig = serde_json::from_value(m.config.clone())
            .map_err(|e| Error::format(r.join(crate::run::MANIFEST_FILE), e.to_string()))?;
        let label = r.file_name().and_then(|s| s.to_str()).unwrap_or("run").to_string();
        rows.push((label, cfg, read_summary(r)?));
    }
    let hash = crate::models::json_hash(&json!(runs));
    let run = RunDir::create(runs_root, "report", &hash)?;
    let mut md = String::from("# TTT comparison\n\nMean and standard deviation over test slices; Dice and IoU in percent, Hausdorff in pixels.\n\n");
    md.push_str("| run | driver | n_iter | shift | Dice before | Dice after | IoU before | IoU after | HD before | HD after | Wilcoxon p (Dice) |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
    let mut columns = Vec::new();
    for (label, cfg, s) in &rows {
        let get = |k: &str| s.iter().find(|x| x.metric == k).expect("summary lists every metric");
        let (d, i, h) = (get("dice"), get("iou"), get("hausdorff_px"));
        let pct = |m: f64, sd: f64| format_cell(100.0 * m, 100.0 * sd);
        let p = d.wilcoxon.as_ref().map_or("n/a".to_string(), |w| format!("{:.3e}", w.p_value));
        writeln!(
            md,
            "| {label} | {:?} | {} | {} | {} | {} | {} | {} | {} | {} | {p} |",
            cfg.ttt.driver,
            cfg.ttt.n_iter,
            shift_label(&cfg.shift),
            pct(d.before_mean, d.before_std),
            pct(d.after_mean, d.after_std),
            pct(i.before_mean, i.before_std),
            pct(i.after_mean, i.after_std),
            format_cell(h.before_mean, h.before_std),
            format_cell(h.after_mean, h.after_std),
        )
        .expect("writing to a string");
        columns.push((format!("{label} no-TTT"), d.before_mean, d.before_std));
        columns.push((format!("{label} TTT"), d.after_mean, d.after_std));
    }
    md.push_str("\n## Dice\n\n");
    md.push_str(&ablation_table(&columns));
    std::fs::write(run.join(REPORT_FILE), &md).map_err(|e| Error::io(run.join(REPORT_FILE), e))?;
    let dice: Vec<PairedSummary> =
        rows.iter().map(|(_, _, s)| s.iter().find(|x| x.metric == "dice").cloned().expect("dice summary")).collect();
    let plot = run.join("dice_bars.png");
    bar_plot(&dice).save(&plot).map_err(|e| Error::format(&plot, e.to_string()))?;
    let mut m = RunManifest::new("report", json!({ "runs": runs }), 0);
    m.files.insert("events".into(), EVENTS_FILE.into());
    m.files.insert("report".into(), REPORT_FILE.into());
    m.files.insert("dice_bars".into(), "dice_bars.png".into());
    run.log(format!("report over {} runs", runs.len()))?;
    m.save(&run)?;
    Ok(run)
}

fn shift_label(s: &ShiftSection) -> String {
    if s.spec(0).is_identity() {
        "none".into()
    } else {
        format!("gamma={},blur={},noise={},bias={}", s.gamma, s.blur_sigma, s.noise_std, s.bias_field_amplitude)
    }
}

