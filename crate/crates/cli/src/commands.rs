//! Implementations behind the subcommands. Every function takes the fully
//! resolved config so each artifact can embed it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use openset_core::classifier::{
    load_checkpoint, save_checkpoint, train_initial,
};
use openset_core::dataset::{load_csv, save_csv, synth_blobs, CategoryId, Dataset, FeatureSample};
use openset_core::eval::{
    ablation_table, ablation_to_csv, ablation_to_json, comparison_to_csv, comparison_to_json,
    compare_init_strategies, evaluate_closed, evaluate_open, metrics_to_csv, metrics_to_json,
    openness_sweep, sweep_to_csv, sweep_to_json, MetricsReport, ReportFormat,
};
use openset_core::openworld::{run_open_world, SessionLog};
use openset_core::thresholds::{calibrate, load_thresholds, save_thresholds};

use crate::config::ResolvedConfig;
use crate::CliError;

fn full_precision(x: f64) -> String {
    format!("{x:.16e}")
}

fn config_comment(config: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in config {
        out.push_str(&format!("# {k}={v}\n"));
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Data(anyhow::anyhow!("cannot write {}: {e}", path.display())))
}

fn emit(
    path: Option<&Path>,
    format: ReportFormat,
    csv: impl FnOnce() -> String,
    json: impl FnOnce() -> Result<String, CliError>,
) -> Result<(), CliError> {
    let text = match format {
        ReportFormat::Csv => csv(),
        ReportFormat::Json => json()?,
    };
    match path {
        Some(path) => write_text(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------

pub fn cmd_synth(cfg: &ResolvedConfig, out: &Path, quiet: bool) -> Result<(), CliError> {
    let ds = synth_blobs(
        cfg.usize_value("synth.classes")?,
        cfg.usize_value("synth.per_class")?,
        cfg.usize_value("synth.dim")?,
        cfg.f64_value("synth.spread")?,
        cfg.f64_value("synth.separation")?,
        cfg.u64_value("data.seed")?,
    )?;
    save_csv(&ds, out)?;
    if !quiet {
        println!(
            "wrote {} samples over {} categories to {}",
            ds.len(),
            ds.labels().len(),
            out.display()
        );
    }
    Ok(())
}

pub fn cmd_split(cfg: &ResolvedConfig, out: &Path, quiet: bool) -> Result<(), CliError> {
    let ds = cfg.base_dataset()?;
    let split = cfg.open_split(&ds)?;
    fs::create_dir_all(out)
        .map_err(|e| CliError::Data(anyhow::anyhow!("cannot create {}: {e}", out.display())))?;
    save_csv(&split.train, out.join("train.csv"))?;
    save_csv(&split.known_test, out.join("known_test.csv"))?;
    save_csv(&split.unknown_pool, out.join("unknown_pool.csv"))?;

    let meta = serde_json::json!({
        "config": cfg.echo(),
        "known_labels": split.known_labels.iter().map(|l| l.0).collect::<Vec<_>>(),
        "unknown_labels": split.unknown_labels.iter().map(|l| l.0).collect::<Vec<_>>(),
        "train_samples": split.train.len(),
        "known_test_samples": split.known_test.len(),
        "unknown_pool_samples": split.unknown_pool.len(),
        "seed": split.seed,
    });
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| CliError::Data(anyhow::anyhow!("serialization failed: {e}")))?;
    write_text(&out.join("split.json"), &(text + "\n"))?;

    if !quiet {
        println!(
            "split: {} train / {} known test / {} pool samples into {}",
            split.train.len(),
            split.known_test.len(),
            split.unknown_pool.len(),
            out.display()
        );
    }
    Ok(())
}

pub fn cmd_train(
    cfg: &ResolvedConfig,
    data: &Path,
    out: &Path,
    quiet: bool,
) -> Result<(), CliError> {
    let ds = load_csv(data)?;
    let state = train_initial(&ds, &cfg.train_config()?)?;
    save_checkpoint(&state, out)?;
    if !quiet {
        let report = evaluate_closed(&state, &ds)?;
        println!(
            "trained {} categories on {} samples, training accuracy {:.4}, model at {}",
            state.n_categories(),
            ds.len(),
            report.overall_accuracy,
            out.display()
        );
    }
    Ok(())
}

pub fn cmd_calibrate(
    cfg: &ResolvedConfig,
    model: &Path,
    data: &Path,
    out: &Path,
    quiet: bool,
) -> Result<(), CliError> {
    let state = load_checkpoint(model)?;
    let ds = load_csv(data)?;
    let thresholds = calibrate(
        &state,
        &ds,
        cfg.f64_value("thresholds.epsilon")?,
        cfg.f64_value("thresholds.rho")?,
        cfg.confidence_mode()?,
    )?;
    save_thresholds(&thresholds, out)?;
    if !quiet {
        let calibrated = (0..thresholds.len())
            .filter(|&i| thresholds.is_calibrated(i))
            .count();
        println!(
            "calibrated {calibrated}/{} categories, thresholds at {}",
            thresholds.len(),
            out.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn iterations_csv(log: &SessionLog, config: &BTreeMap<String, String>) -> String {
    let mut out = config_comment(config);
    out.push_str(
        "iteration,truth,assigned,detected_unknown,false_detections,teacher_labels_used,\
         known_accuracy,unknown_accuracy,overall_accuracy\n",
    );
    out.push_str(&format!(
        "0,,,0,0,0,{},{},{}\n",
        full_precision(log.initial.known_accuracy),
        full_precision(log.initial.unknown_accuracy),
        full_precision(log.initial.overall_accuracy)
    ));
    for r in &log.iterations {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.iteration,
            r.truth,
            r.assigned,
            r.detected_unknown,
            r.false_detections,
            r.teacher_labels_used,
            full_precision(r.metrics.known_accuracy),
            full_precision(r.metrics.unknown_accuracy),
            full_precision(r.metrics.overall_accuracy)
        ));
    }
    out
}

pub fn cmd_run(cfg: &ResolvedConfig, out: &Path, quiet: bool) -> Result<(), CliError> {
    let ds = cfg.base_dataset()?;
    let split = cfg.open_split(&ds)?;
    let session_cfg = cfg.session_config()?;

    let mut log = run_open_world(&split, &session_cfg)?;
    // The library echoes its own view; artifacts carry the full resolved
    // CLI config instead so a run is reproducible from any output file.
    log.config = cfg.echo().clone();

    fs::create_dir_all(out)
        .map_err(|e| CliError::Data(anyhow::anyhow!("cannot create {}: {e}", out.display())))?;
    log.save(out.join("session.json"))?;
    write_text(&out.join("iterations.csv"), &iterations_csv(&log, cfg.echo()))?;
    write_text(
        &out.join("per_category.csv"),
        &metrics_to_csv(log.final_metrics(), cfg.echo()),
    )?;

    if !quiet {
        println!(
            "initial: known {:.4}, unknown {:.4}, overall {:.4}",
            log.initial.known_accuracy,
            log.initial.unknown_accuracy,
            log.initial.overall_accuracy
        );
        for r in &log.iterations {
            println!(
                "iteration {}: category {} added as label {}, overall {:.4}",
                r.iteration, r.truth, r.assigned, r.metrics.overall_accuracy
            );
        }
        println!(
            "{} categories added, {} teacher labels ({:.2} per category), stopped: {:?}",
            log.iterations.len(),
            log.labels_issued,
            log.average_labels_per_category,
            log.termination
        );
        println!("artifacts in {}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------

pub struct EvalArgs<'a> {
    pub model: &'a Path,
    pub closed: bool,
    pub test: Option<&'a Path>,
    pub thresholds: Option<&'a Path>,
    pub known_test: Option<&'a Path>,
    pub unknown_test: Option<&'a Path>,
    pub incorporated: Option<&'a str>,
    pub out: Option<&'a Path>,
}

fn offset_ids(ds: Dataset, offset: u64) -> Result<Dataset, CliError> {
    let dim = ds.dim();
    let samples = ds
        .samples()
        .iter()
        .map(|s| FeatureSample::new(s.id + offset, s.true_label, s.features.clone()))
        .collect();
    Dataset::new(dim, samples).map_err(CliError::from)
}

fn parse_incorporated(
    pairs: &str,
) -> Result<BTreeMap<CategoryId, CategoryId>, CliError> {
    let mut map = BTreeMap::new();
    for part in pairs.split(',') {
        let Some((truth, assigned)) = part.split_once('=') else {
            return Err(CliError::Usage(format!(
                "--incorporated expects truth=assigned pairs, found `{part}`"
            )));
        };
        let parse = |s: &str| -> Result<CategoryId, CliError> {
            s.trim()
                .parse::<u32>()
                .map(CategoryId)
                .map_err(|_| CliError::Usage(format!("`{s}` is not a category id")))
        };
        map.insert(parse(truth)?, parse(assigned)?);
    }
    Ok(map)
}

pub fn cmd_eval(
    cfg: &ResolvedConfig,
    args: &EvalArgs<'_>,
    format: ReportFormat,
    quiet: bool,
) -> Result<(), CliError> {
    let state = load_checkpoint(args.model)?;

    let report: MetricsReport = if args.closed {
        let test_path = args.test.ok_or_else(|| {
            CliError::Usage("--closed evaluation requires --test".into())
        })?;
        let test = load_csv(test_path)?;
        evaluate_closed(&state, &test)?
    } else {
        let thresholds_path = args.thresholds.ok_or_else(|| {
            CliError::Usage("open evaluation requires --thresholds (or pass --closed)".into())
        })?;
        let known_path = args.known_test.ok_or_else(|| {
            CliError::Usage("open evaluation requires --known-test".into())
        })?;
        let unknown_path = args.unknown_test.ok_or_else(|| {
            CliError::Usage("open evaluation requires --unknown-test".into())
        })?;
        let thresholds = load_thresholds(thresholds_path)?;
        let known_test = load_csv(known_path)?;
        // CSV rows get ids from their position in the file, so two loaded
        // files always collide; shift the second set past the first.
        let unknown_test = offset_ids(load_csv(unknown_path)?, known_test.len() as u64)?;
        let incorporated = match args.incorporated {
            Some(pairs) => parse_incorporated(pairs)?,
            None => BTreeMap::new(),
        };
        evaluate_open(
            &state,
            &thresholds,
            &known_test,
            &unknown_test,
            &incorporated,
            &BTreeSet::new(),
        )?
    };

    emit(
        args.out,
        format,
        || metrics_to_csv(&report, cfg.echo()),
        || metrics_to_json(&report, cfg.echo()).map_err(CliError::from),
    )?;
    if !quiet && args.out.is_some() {
        println!(
            "known {:.4}, unknown {:.4}, overall {:.4}",
            report.known_accuracy, report.unknown_accuracy, report.overall_accuracy
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn cmd_sweep(
    cfg: &ResolvedConfig,
    out: &Path,
    format: ReportFormat,
    quiet: bool,
) -> Result<(), CliError> {
    let ds = cfg.base_dataset()?;
    let rows = openness_sweep(
        &ds,
        cfg.usize_value("split.n_known")?,
        &cfg.unknown_counts()?,
        cfg.f64_value("split.train_frac")?,
        cfg.u64_value("split.seed")?,
        &cfg.session_config()?,
    )?;
    emit(
        Some(out),
        format,
        || sweep_to_csv(&rows, cfg.echo()),
        || sweep_to_json(&rows, cfg.echo()).map_err(CliError::from),
    )?;
    if !quiet {
        for row in &rows {
            println!(
                "{} held-out categories: overall {:.4}",
                row.unknown_count, row.report.overall_accuracy
            );
        }
        println!("table at {}", out.display());
    }
    Ok(())
}

fn seed_family(cfg: &ResolvedConfig) -> Result<Vec<u64>, CliError> {
    let base = cfg.u64_value("compare.base_seed")?;
    let n_seeds = cfg.usize_value("compare.seeds")?;
    if n_seeds == 0 {
        return Err(CliError::Usage("compare.seeds must be positive".into()));
    }
    Ok((0..n_seeds as u64).map(|i| base.wrapping_add(i)).collect())
}

pub fn cmd_compare(
    cfg: &ResolvedConfig,
    out: &Path,
    format: ReportFormat,
    quiet: bool,
) -> Result<(), CliError> {
    let ds = cfg.base_dataset()?;
    let split = cfg.open_split(&ds)?;
    let seeds = seed_family(cfg)?;
    let comparison = compare_init_strategies(&split, &cfg.session_config()?, &seeds)?;
    emit(
        Some(out),
        format,
        || comparison_to_csv(&comparison, cfg.echo()),
        || comparison_to_json(&comparison, cfg.echo()).map_err(CliError::from),
    )?;
    if !quiet {
        println!(
            "final accuracy over {} seeds: mean init {:.4}, stochastic init {:.4}",
            seeds.len(),
            comparison.mean_init_final,
            comparison.stochastic_init_final
        );
        println!("table at {}", out.display());
    }
    Ok(())
}

pub fn cmd_ablate(
    cfg: &ResolvedConfig,
    out: &Path,
    format: ReportFormat,
    quiet: bool,
) -> Result<(), CliError> {
    let ds = cfg.base_dataset()?;
    let split = cfg.open_split(&ds)?;
    let outcome = ablation_table(&split, &cfg.session_config()?, &seed_family(cfg)?)?;
    emit(
        Some(out),
        format,
        || ablation_to_csv(&outcome, cfg.echo()),
        || ablation_to_json(&outcome, cfg.echo()).map_err(CliError::from),
    )?;
    if !quiet {
        for (variant, accuracy) in &outcome.final_by_variant {
            println!("{variant}: final overall {accuracy:.4}");
        }
        println!("table at {}", out.display());
    }
    Ok(())
}
