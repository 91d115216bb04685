//! The pipeline stages behind the subcommands. File layout under the output
//! directory:
//!
//! ```text
//! config.json                 resolved configuration + tool version
//! data/x.feat[.json]          shuffled training view, raw features
//! data/y.feat[.json]
//! data/align.json             ground-truth ids (evaluation only)
//! data/x_test.feat ...        aligned test split when the dataset has one
//! runs/run_0000.uca ...       per-run artifacts
//! runs/manifest.json          seeds, failures, wall times
//! selection.json              consensus choice + per-run scores
//! eval/<method>_<split>.json  metric reports
//! eval/table.{csv,txt}        the summary grid
//! ```

use crate::config::{BaselineToggles, DatasetBuilder, ExperimentConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use uca_core::baselines::{direct_gan_auc, fit_direct_gan, fit_sup_uca, oracle_select, rcca_sweep};
use uca_core::data::{
    center, center_with, load_feature_table, load_mnist_idx, make_flipped, make_halves,
    save_raw_table, PairedEval, TableFormat, ViewDataset,
};
use uca_core::error::{Result, UcaError};
use uca_core::eval::{
    evaluate_codes, matching_auc, retrieval_topk, table_csv, table_text, EvalReport, Split,
    TableRow,
};
use uca_core::matrix::Matrix;
use uca_core::selection::{build_score_matrix, select_run, synthesize_pairs, Selection};
use uca_core::trainer::{run_ensemble, RunArtifact, RunOutcome, Variant};
use uca_core::RngStream;

const DATA_SHUFFLE_TAG: u64 = 0xda7a;
const SELECTION_TAG: u64 = 0x5e1ec7;
const EVAL_NEGATIVES_TAG: u64 = 0xe7a1;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)
        .map_err(|e| UcaError::Data(format!("{}: encode: {e}", path.display())))?;
    body.push('\n');
    std::fs::write(path, body).map_err(|e| UcaError::io(path.display().to_string(), e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UcaError::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| UcaError::Data(format!("{}: {e}", path.display())))
}

#[derive(Serialize, Deserialize)]
struct AlignFile {
    x_ids: Vec<usize>,
    y_ids: Vec<usize>,
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

struct BuiltViews {
    x_train: ViewDataset,
    y_train: ViewDataset,
    test_eval: Option<PairedEval>,
}

fn apply_limit(view: ViewDataset, limit: Option<usize>) -> ViewDataset {
    match limit {
        Some(l) if l < view.len() => view.select(&(0..l).collect::<Vec<_>>()),
        _ => view,
    }
}

fn build_views(config: &ExperimentConfig) -> Result<BuiltViews> {
    let ds = &config.dataset;
    let mut rng = RngStream::new(config.train.seed).derive(DATA_SHUFFLE_TAG);
    match ds.builder {
        DatasetBuilder::MnistFlipped | DatasetBuilder::MnistHalves => {
            let build = |view: &ViewDataset, rng: &mut RngStream| {
                if ds.builder == DatasetBuilder::MnistFlipped {
                    make_flipped(view, rng)
                } else {
                    make_halves(view, rng)
                }
            };
            let train_raw = apply_limit(load_mnist_idx(&ds.images, &ds.labels)?, ds.limit);
            let (x_train, y_train, _) = build(&train_raw, &mut rng)?;
            let test_eval = match (&ds.test_images, &ds.test_labels) {
                (Some(ti), Some(tl)) => {
                    let test_raw = load_mnist_idx(ti, tl)?;
                    let (_, _, eval) = build(&test_raw, &mut rng)?;
                    Some(eval)
                }
                _ => None,
            };
            Ok(BuiltViews {
                x_train,
                y_train,
                test_eval,
            })
        }
        DatasetBuilder::FeatureTables => {
            let (x_path, y_path) = match (&ds.x_table, &ds.y_table) {
                (Some(x), Some(y)) => (x, y),
                _ => {
                    return Err(UcaError::Data(
                        "feature-tables dataset needs x_table and y_table paths".into(),
                    ))
                }
            };
            let format = ds.table_format.unwrap_or(TableFormat::Csv);
            let x_all = apply_limit(load_feature_table(x_path, format)?, ds.limit);
            let y_all = apply_limit(load_feature_table(y_path, format)?, ds.limit);
            if x_all.len() != y_all.len() {
                return Err(UcaError::Data(format!(
                    "feature tables disagree on sample count: {} vs {}",
                    x_all.len(),
                    y_all.len()
                )));
            }
            let sx = rng.permutation(x_all.len());
            let sy = rng.permutation(y_all.len());
            let x_train = x_all.select(&sx);
            let y_train = y_all.select(&sy);
            Ok(BuiltViews {
                x_train,
                y_train,
                test_eval: None,
            })
        }
    }
}

pub fn cmd_prepare(config: &ExperimentConfig) -> Result<()> {
    config.archive()?;
    let built = build_views(config)?;
    let dir = config.data_dir();
    std::fs::create_dir_all(&dir).map_err(|e| UcaError::io(dir.display().to_string(), e))?;

    save_raw_table(&built.x_train, &dir.join("x.feat"))?;
    save_raw_table(&built.y_train, &dir.join("y.feat"))?;
    write_json(
        &dir.join("align.json"),
        &AlignFile {
            x_ids: built.x_train.sample_ids.clone(),
            y_ids: built.y_train.sample_ids.clone(),
        },
    )?;
    eprintln!(
        "prepared views: x {}x{}, y {}x{}",
        built.x_train.dim(),
        built.x_train.len(),
        built.y_train.dim(),
        built.y_train.len()
    );

    if let Some(test) = &built.test_eval {
        save_raw_table(&test.x_view, &dir.join("x_test.feat"))?;
        save_raw_table(&test.y_view, &dir.join("y_test.feat"))?;
        write_json(
            &dir.join("align_test.json"),
            &AlignFile {
                x_ids: test.x_view.sample_ids.clone(),
                y_ids: test.y_view.sample_ids.clone(),
            },
        )?;
        eprintln!("prepared test split: {} aligned pairs", test.len());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn load_train_views(config: &ExperimentConfig) -> Result<(ViewDataset, ViewDataset)> {
    let dir = config.data_dir();
    let x = load_feature_table(&dir.join("x.feat"), TableFormat::RawF64)?;
    let y = load_feature_table(&dir.join("y.feat"), TableFormat::RawF64)?;
    Ok((x, y))
}

#[derive(Serialize, Deserialize)]
struct ManifestRun {
    index: usize,
    seed: u64,
    file: String,
    wall_ms: u64,
}

#[derive(Serialize, Deserialize)]
struct ManifestFailure {
    index: usize,
    seed: u64,
    reason: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    k: usize,
    base_seed: u64,
    variant: String,
    runs: Vec<ManifestRun>,
    failures: Vec<ManifestFailure>,
    tool_version: String,
}

pub fn cmd_train(config: &ExperimentConfig) -> Result<()> {
    config.archive()?;
    let (x_raw, y_raw) = load_train_views(config)?;
    let x = center(&x_raw);
    let y = center(&y_raw);
    let dir = config.runs_dir();
    std::fs::create_dir_all(&dir).map_err(|e| UcaError::io(dir.display().to_string(), e))?;

    let workers = config.effective_workers();
    eprintln!(
        "training {} x {:?} runs on {} workers",
        config.train.k, config.train.variant, workers
    );
    let started = std::time::Instant::now();
    let outcomes = run_ensemble(&x, &y, &config.train, workers)?;
    let total_ms = started.elapsed().as_millis() as u64;

    let mut manifest = Manifest {
        k: config.train.k,
        base_seed: config.train.seed,
        variant: config.train.variant.label().to_string(),
        runs: Vec::new(),
        failures: Vec::new(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    for (j, (seed, outcome)) in outcomes.iter().enumerate() {
        match outcome {
            RunOutcome::Trained(artifact) => {
                let file = format!("run_{j:04}.uca");
                uca_core::artifact::save_artifact(artifact, &dir.join(&file))?;
                manifest.runs.push(ManifestRun {
                    index: j,
                    seed: *seed,
                    file,
                    // per-run wall time is not observable with pooled
                    // workers; record the ensemble total on each row
                    wall_ms: total_ms,
                });
            }
            RunOutcome::Failed(reason) => {
                eprintln!("run {j} failed: {reason}");
                manifest.failures.push(ManifestFailure {
                    index: j,
                    seed: *seed,
                    reason: reason.clone(),
                });
            }
        }
    }
    write_json(&dir.join("manifest.json"), &manifest)?;
    eprintln!(
        "trained {} runs ({} failed) in {:.1}s",
        manifest.runs.len(),
        manifest.failures.len(),
        total_ms as f64 / 1e3
    );
    if manifest.runs.is_empty() {
        return Err(UcaError::Numeric("every run in the ensemble diverged".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// select
// ---------------------------------------------------------------------------

fn load_runs(config: &ExperimentConfig) -> Result<Vec<(String, RunArtifact)>> {
    let dir = config.runs_dir();
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let mut runs = Vec::with_capacity(manifest.runs.len());
    for entry in &manifest.runs {
        runs.push((
            entry.file.clone(),
            uca_core::artifact::load_artifact(&dir.join(&entry.file))?,
        ));
    }
    Ok(runs)
}

#[derive(Serialize, Deserialize)]
pub struct SelectionReport {
    pub selected_file: String,
    pub run_files: Vec<String>,
    pub n_pairs_used: usize,
    #[serde(flatten)]
    pub selection: Selection,
}

pub fn cmd_select(config: &ExperimentConfig) -> Result<()> {
    config.archive()?;
    let runs = load_runs(config)?;
    if runs.len() < 2 {
        return Err(UcaError::Selection(format!(
            "consensus selection needs at least 2 surviving runs, found {}",
            runs.len()
        )));
    }
    let (x_raw, _) = load_train_views(config)?;
    let x = center(&x_raw);

    let mut sel_cfg = config.selection;
    if sel_cfg.n_pairs > x.len() {
        eprintln!(
            "clamping n_pairs {} to the {} available samples",
            sel_cfg.n_pairs,
            x.len()
        );
        sel_cfg.n_pairs = x.len();
    }
    let refs: Vec<&RunArtifact> = runs.iter().map(|(_, a)| a).collect();
    let mut rng = RngStream::new(config.train.seed).derive(SELECTION_TAG);
    let pairs = synthesize_pairs(&refs, &x, &sel_cfg, &mut rng)?;
    let score = build_score_matrix(&refs, &pairs, &sel_cfg)?;
    let selection = select_run(&score, &sel_cfg)?;

    let report = SelectionReport {
        selected_file: runs[selection.selected_run].0.clone(),
        run_files: runs.iter().map(|(f, _)| f.clone()).collect(),
        n_pairs_used: sel_cfg.n_pairs,
        selection,
    };
    write_json(&config.out.join("selection.json"), &report)?;
    println!(
        "selected run {} ({})",
        report.selection.selected_run, report.selected_file
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Aligned views from the shuffled training tables plus the id file; column
/// i of both outputs is sample id i.
fn load_aligned(dir: &Path, x_file: &str, y_file: &str, align_file: &str) -> Result<PairedEval> {
    let x = load_feature_table(&dir.join(x_file), TableFormat::RawF64)?;
    let y = load_feature_table(&dir.join(y_file), TableFormat::RawF64)?;
    let align: AlignFile = read_json(&dir.join(align_file))?;
    if align.x_ids.len() != x.len() || align.y_ids.len() != y.len() {
        return Err(UcaError::Data(format!(
            "{align_file} does not match the view tables"
        )));
    }
    let invert = |ids: &[usize]| -> Result<Vec<usize>> {
        let mut pos = vec![usize::MAX; ids.len()];
        for (col, &id) in ids.iter().enumerate() {
            if id >= pos.len() || pos[id] != usize::MAX {
                return Err(UcaError::Data(format!(
                    "{align_file}: ids are not a permutation"
                )));
            }
            pos[id] = col;
        }
        Ok(pos)
    };
    let x_aligned = x.select(&invert(&align.x_ids)?);
    let y_aligned = y.select(&invert(&align.y_ids)?);
    PairedEval::new(x_aligned, y_aligned)
}

struct EvalData {
    train: PairedEval,
    test: Option<PairedEval>,
    /// Per-feature training means for centering either split.
    mean_x: Vec<f64>,
    mean_y: Vec<f64>,
}

fn load_eval_data(config: &ExperimentConfig) -> Result<EvalData> {
    let dir = config.data_dir();
    let train = load_aligned(&dir, "x.feat", "y.feat", "align.json")?;
    let test = if dir.join("x_test.feat").exists() {
        Some(load_aligned(
            &dir,
            "x_test.feat",
            "y_test.feat",
            "align_test.json",
        )?)
    } else {
        None
    };
    let mean_x = center(&train.x_view).mean.unwrap();
    let mean_y = center(&train.y_view).mean.unwrap();
    Ok(EvalData {
        train,
        test,
        mean_x,
        mean_y,
    })
}

impl EvalData {
    fn centered(&self, split: Split) -> Result<Option<(Matrix, Matrix)>> {
        let pairs = match split {
            Split::Train => &self.train,
            Split::Test => match &self.test {
                Some(t) => t,
                None => return Ok(None),
            },
        };
        let x = center_with(&pairs.x_view, &self.mean_x)?;
        let y = center_with(&pairs.y_view, &self.mean_y)?;
        Ok(Some((x.features, y.features)))
    }
}

fn eval_projection_pair(
    method: &str,
    run: &RunArtifact,
    data: &EvalData,
    seed: u64,
    with_retrieval: bool,
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::new();
    for split in [Split::Train, Split::Test] {
        let Some((x, y)) = data.centered(split)? else {
            continue;
        };
        let c_x = run.w_x.project(&x)?;
        let c_y = run.w_y.project(&y)?;
        let mut report = evaluate_codes(method, split, &c_x, &c_y, seed)?;
        if with_retrieval && split == Split::Test && c_x.cols() >= 5 {
            let queries = c_x.select_cols(&[0, 1, 2]);
            report.retrieval_examples = Some(retrieval_topk(&queries, &c_y, 5)?);
        }
        reports.push(report);
    }
    Ok(reports)
}

fn report_file(dir: &Path, report: &EvalReport) -> PathBuf {
    let split = match report.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    dir.join(format!(
        "{}_{split}.json",
        report.method.to_lowercase().replace(' ', "_")
    ))
}

fn write_reports(config: &ExperimentConfig, reports: &[EvalReport]) -> Result<()> {
    let dir = config.eval_dir();
    std::fs::create_dir_all(&dir).map_err(|e| UcaError::io(dir.display().to_string(), e))?;
    for report in reports {
        write_json(&report_file(&dir, report), report)?;
    }
    Ok(())
}

pub fn cmd_eval(config: &ExperimentConfig) -> Result<()> {
    config.archive()?;
    let runs = load_runs(config)?;
    let data = load_eval_data(config)?;
    let eval_seed = RngStream::new(config.train.seed)
        .derive(EVAL_NEGATIVES_TAG)
        .next_u64();

    let mut reports: Vec<EvalReport> = Vec::new();

    // the consensus-selected run, labeled by its variant
    let selection_path = config.out.join("selection.json");
    if selection_path.exists() {
        let report: SelectionReport = read_json(&selection_path)?;
        let (_, selected) = runs
            .iter()
            .enumerate()
            .find(|(_, (f, _))| *f == report.selected_file)
            .map(|(i, r)| (i, &r.1))
            .ok_or_else(|| {
                UcaError::Data(format!(
                    "selected run {} not among loaded artifacts",
                    report.selected_file
                ))
            })?;
        reports.extend(eval_projection_pair(
            selected.config.variant.label(),
            selected,
            &data,
            eval_seed,
            true,
        )?);
    } else if runs.len() == 1 {
        // a k = 1 ensemble needs no selection
        reports.extend(eval_projection_pair(
            runs[0].1.config.variant.label(),
            &runs[0].1,
            &data,
            eval_seed,
            true,
        )?);
    } else {
        return Err(UcaError::Precondition(
            "no selection.json; run the select stage first".into(),
        ));
    }

    // supervised upper bound over the same ensemble
    if config.baselines.oracle {
        let (x, y) = data.centered(Split::Train)?.expect("train split always present");
        let refs: Vec<&RunArtifact> = runs.iter().map(|(_, a)| a).collect();
        let (best, scores) = oracle_select(&refs, &x, &y)?;
        eprintln!(
            "oracle picked run {best} (validation correlation {:.3})",
            scores[best]
        );
        reports.extend(eval_projection_pair(
            "Oracle", refs[best], &data, eval_seed, false,
        )?);
    }

    write_reports(config, &reports)?;

    // assemble the table from every report present (baselines included)
    let dir = config.eval_dir();
    let mut by_method: std::collections::BTreeMap<String, (Option<EvalReport>, Option<EvalReport>)> =
        Default::default();
    for entry in
        std::fs::read_dir(&dir).map_err(|e| UcaError::io(dir.display().to_string(), e))?
    {
        let path = entry
            .map_err(|e| UcaError::io(dir.display().to_string(), e))?
            .path();
        if path.extension().is_some_and(|e| e == "json")
            && path
                .file_name()
                .is_some_and(|n| n != "table.json" && !n.to_string_lossy().starts_with("sweep"))
        {
            let report: EvalReport = read_json(&path)?;
            let slot = by_method.entry(report.method.clone()).or_default();
            match report.split {
                Split::Train => slot.0 = Some(report),
                Split::Test => slot.1 = Some(report),
            }
        }
    }
    let preferred = ["GAN", "CycUCA", "LatentUCA", "AllUCA", "Oracle", "CCA10", "CCA50", "SupUCA"];
    let mut rows: Vec<TableRow> = Vec::new();
    let mut emit = |method: &str, slot: &(Option<EvalReport>, Option<EvalReport>)| {
        rows.push(TableRow {
            method: method.to_string(),
            corr_train: slot.0.as_ref().and_then(|r| r.mean_correlation),
            corr_test: slot.1.as_ref().and_then(|r| r.mean_correlation),
            auc_train: slot.0.as_ref().map(|r| r.auc),
            auc_test: slot.1.as_ref().map(|r| r.auc),
        });
    };
    for method in preferred {
        if let Some(slot) = by_method.get(method) {
            emit(method, slot);
        }
    }
    for (method, slot) in &by_method {
        if !preferred.contains(&method.as_str()) {
            emit(method, slot);
        }
    }
    let csv = table_csv(&rows);
    let txt = table_text(&rows);
    std::fs::write(dir.join("table.csv"), &csv)
        .map_err(|e| UcaError::io("table.csv", e))?;
    std::fs::write(dir.join("table.txt"), &txt)
        .map_err(|e| UcaError::io("table.txt", e))?;
    print!("{txt}");
    Ok(())
}

// ---------------------------------------------------------------------------
// baseline
// ---------------------------------------------------------------------------

const RIDGE_GRID: [f64; 6] = [0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];

pub fn cmd_baseline(config: &ExperimentConfig) -> Result<()> {
    config.archive()?;
    let toggles: BaselineToggles = config.baselines;
    if !toggles.any() {
        eprintln!("no baselines enabled in the configuration");
        return Ok(());
    }
    let data = load_eval_data(config)?;
    let eval_seed = RngStream::new(config.train.seed)
        .derive(EVAL_NEGATIVES_TAG)
        .next_u64();
    let dir = config.eval_dir();
    std::fs::create_dir_all(&dir).map_err(|e| UcaError::io(dir.display().to_string(), e))?;

    let mut reports: Vec<EvalReport> = Vec::new();

    for (enabled, d, label) in [(toggles.cca10, 10usize, "CCA10"), (toggles.cca50, 50, "CCA50")] {
        if !enabled {
            continue;
        }
        eprintln!("fitting {label} (ridge sweep over {RIDGE_GRID:?})");
        let (model, table) = rcca_sweep(&data.train, d, &RIDGE_GRID)?;
        write_json(
            &dir.join(format!("sweep_{}.json", label.to_lowercase())),
            &table,
        )?;
        for split in [Split::Train, Split::Test] {
            let pairs = match split {
                Split::Train => &data.train,
                Split::Test => match &data.test {
                    Some(t) => t,
                    None => continue,
                },
            };
            let c_x = model.project_x(&pairs.x_view)?;
            let c_y = model.project_y(&pairs.y_view)?;
            reports.push(evaluate_codes(label, split, &c_x, &c_y, eval_seed)?);
        }
        eprintln!(
            "{label}: best ridge {}, top correlation {:.3}",
            model.ridge, model.canonical_correlations[0]
        );
    }

    if toggles.sup_uca {
        eprintln!("training SupUCA");
        let mut train_cfg = config.train.clone();
        train_cfg.variant = Variant::SupUca;
        train_cfg.weights = Variant::SupUca.weights();
        let artifact = fit_sup_uca(&data.train, &train_cfg)?;
        reports.extend(eval_projection_pair(
            "SupUCA", &artifact, &data, eval_seed, false,
        )?);
    }

    if toggles.direct_gan {
        eprintln!("training the direct GAN baseline");
        let mut train_cfg = config.train.clone();
        train_cfg.variant = Variant::DirectGan;
        train_cfg.weights = Variant::DirectGan.weights();
        let (x_raw, y_raw) = load_train_views(config)?;
        let x = center(&x_raw);
        let y = center(&y_raw);
        let model = fit_direct_gan(&x, &y, &train_cfg, train_cfg.seed)?;
        for split in [Split::Train, Split::Test] {
            let Some((xc, yc)) = data.centered(split)? else {
                continue;
            };
            let auc = direct_gan_auc(&model, &xc, &yc, eval_seed)?;
            reports.push(EvalReport {
                method: "GAN".into(),
                split,
                mean_correlation: None,
                mean_abs_correlation: None,
                auc,
                per_dimension_correlations: None,
                constant_dim_warnings: Vec::new(),
                retrieval_examples: None,
            });
        }
    }

    write_reports(config, &reports)?;
    eprintln!("baseline reports written to {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// full
// ---------------------------------------------------------------------------

pub fn cmd_full(config: &ExperimentConfig, force: bool) -> Result<()> {
    if config.out.join("config.json").exists() && !force {
        return Err(UcaError::Precondition(format!(
            "output directory {} already holds an experiment; pass --force to overwrite",
            config.out.display()
        )));
    }
    cmd_prepare(config)?;
    cmd_train(config)?;
    if config.train.k >= 2 {
        cmd_select(config)?;
    } else {
        eprintln!("k = 1: skipping consensus selection");
    }
    if config.baselines.any() {
        cmd_baseline(config)?;
    }
    cmd_eval(config)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// shared helpers for the evaluation of raw code matrices (used by tests)
// ---------------------------------------------------------------------------

/// Convenience used by integration tests: AUC of a projection pair on the
/// aligned test split of a prepared experiment.
pub fn test_auc_of_run(config: &ExperimentConfig, run: &RunArtifact) -> Result<Option<f64>> {
    let data = load_eval_data(config)?;
    let Some((x, y)) = data.centered(Split::Test)? else {
        return Ok(None);
    };
    let c_x = run.w_x.project(&x)?;
    let c_y = run.w_y.project(&y)?;
    let eval_seed = RngStream::new(config.train.seed)
        .derive(EVAL_NEGATIVES_TAG)
        .next_u64();
    Ok(Some(matching_auc(
        &c_x,
        &c_y,
        &mut RngStream::new(eval_seed),
    )?))
}
