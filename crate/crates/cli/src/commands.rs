//! Implementations of the six subcommands. Each returns `Ok(())` on
//! success; errors bubble to `main`, which maps them to exit codes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use afsl_core::data::Dataset;
use afsl_core::eval::{self, EvalCondition, EvalReport};
use afsl_core::loss::loss_gradient_battery_with_tolerance;
use afsl_core::model::ModelParams;
use afsl_core::tensor::{gradient_battery_with_tolerance, BatteryEntry};
use afsl_core::train;
use afsl_core::{Error, Result};

use crate::config::{
    default_dataset_config, load_dataset_config, load_experiment, sha256_hex, ExperimentConfig,
};

/// Global flags shared by every subcommand.
pub struct Ctx {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub force: bool,
    pub jobs: usize,
}

impl Ctx {
    fn require_out(&self, fallback: Option<&Path>) -> Result<PathBuf> {
        self.out
            .clone()
            .or_else(|| fallback.map(Path::to_path_buf))
            .ok_or_else(|| Error::InvalidConfig("an output directory is required; pass --out".into()))
    }
}

/// Claims a directory this command owns outright: refuses to clobber
/// existing content unless `--force` was given.
fn claim_dir(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        let non_empty = path.read_dir().map(|mut it| it.next().is_some()).unwrap_or(false);
        if non_empty {
            if !force {
                return Err(Error::InvalidConfig(format!(
                    "output directory '{}' is not empty; pass --force to overwrite",
                    path.display()
                )));
            }
            fs::remove_dir_all(path)?;
        }
    }
    fs::create_dir_all(path)?;
    Ok(())
}

const INCOMPLETE_MARKER: &str = ".incomplete";

pub fn gen_data(ctx: &Ctx, config: Option<&Path>) -> Result<()> {
    let mut cfg = match config {
        Some(path) => load_dataset_config(path)?,
        None => default_dataset_config(),
    };
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    let out = ctx.require_out(None)?;
    claim_dir(&out, ctx.force)?;
    let dataset = afsl_core::data::generate_dataset(&cfg)?;
    dataset.save(&out)?;
    println!(
        "dataset written to {} ({} clips, {} videos)",
        out.display(),
        dataset.len(),
        dataset.video_ids().len()
    );
    println!("manifest hash {}", dataset.manifest_hash()?);
    Ok(())
}

fn write_metrics(path: &Path, header: &serde_json::Value, history: &train::TrainHistory) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "{header}")?;
    for record in &history.steps {
        writeln!(file, "{}", serde_json::to_string(record)?)?;
    }
    // Per-epoch fold snapshots go in the same stream; their distinct field
    // set ("epoch"/"clean_auc") keeps them distinguishable from step records.
    for snap in &history.snapshots {
        writeln!(file, "{}", serde_json::to_string(snap)?)?;
    }
    Ok(())
}

fn write_config_json(dir: &Path, cfg: &ExperimentConfig, hash: &str) -> Result<()> {
    let mut value = serde_json::to_value(cfg)?;
    value
        .as_object_mut()
        .expect("config serializes to an object")
        .insert("config_hash".into(), serde_json::Value::String(hash.into()));
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&value)?)?;
    Ok(())
}

pub fn train(ctx: &Ctx, config_path: &Path, data: &Path) -> Result<()> {
    let mut cfg = load_experiment(config_path)?;
    if let Some(seed) = ctx.seed {
        cfg.train.seed = seed;
        cfg.seed = seed;
    }
    let dataset = Dataset::load(data)?;
    let out = ctx.require_out(cfg.out.as_deref())?;
    claim_dir(&out, ctx.force)?;
    let hash = cfg.hash()?;
    fs::write(out.join(INCOMPLETE_MARKER), "run in progress or aborted\n")?;
    write_config_json(&out, &cfg, &hash)?;

    // Generalisation protocol: hold one manipulation family out of training
    // and measure on it; otherwise measure on the training loop's own
    // held-out video fold (train() re-derives that fold internally, so the
    // full dataset is handed over unchanged).
    let (fit_ds, eval_ds) = match cfg.holdout()? {
        Some(family) => dataset.split_leave_one_family_out(family)?,
        None => (dataset.clone(), train::snapshot_split(&dataset)?.1),
    };

    let (params, history) = train::train(&fit_ds, &cfg.train)?;

    let header = serde_json::json!({
        "config_hash": hash,
        "regime": cfg.train.regime,
        "architecture": cfg.train.architecture,
        "total_steps": cfg.train.total_steps(),
    });
    write_metrics(&out.join("metrics.jsonl"), &header, &history)?;
    params.save_checkpoint(&out.join("checkpoint"))?;

    let mut report =
        eval::robust_eval(&params, &eval_ds, &[EvalCondition::Clean], None, cfg.seed, ctx.jobs)?;
    report.meta.config = Some(hash.clone());
    fs::write(out.join("report.json"), report.to_json()?)?;
    fs::remove_file(out.join(INCOMPLETE_MARKER))?;

    println!(
        "trained {} for {} steps on {} clips",
        cfg.train.regime,
        history.steps.len(),
        fit_ds.len()
    );
    println!("checkpoint hash {}", params.content_hash());
    println!("final clean video AUC {:.4}", report.results[0].auc_video);
    println!("run directory {}", out.display());
    Ok(())
}

struct EvalInputs {
    params: ModelParams,
    dataset: Dataset,
    conditions: Vec<EvalCondition>,
    surrogate: Option<ModelParams>,
    seed: u64,
    config_hash: String,
}

fn resolve_eval_inputs(
    ctx: &Ctx,
    checkpoint: &Path,
    data: &Path,
    conditions: Option<&str>,
    surrogate: Option<&Path>,
    config_path: Option<&Path>,
) -> Result<EvalInputs> {
    let config = config_path.map(load_experiment).transpose()?;
    let params = ModelParams::load_checkpoint(checkpoint)?;
    let dataset = Dataset::load(data)?;

    let names: Vec<String> = match (conditions, &config) {
        (Some(list), _) => list.split(',').map(|s| s.trim().to_string()).collect(),
        (None, Some(cfg)) if !cfg.conditions.is_empty() => cfg.conditions.clone(),
        _ => {
            return Err(Error::InvalidConfig(
                "no evaluation conditions; pass --conditions a,b,... or a config with a conditions list".into(),
            ))
        }
    };
    let parsed: Vec<EvalCondition> =
        names.iter().map(|n| EvalCondition::parse(n)).collect::<Result<_>>()?;

    let needs_surrogate = parsed.iter().any(|c| matches!(c, EvalCondition::Transfer { .. }));
    if needs_surrogate && surrogate.is_none() {
        return Err(Error::InvalidConfig(
            "usage: condition 'transfer' requires --surrogate <checkpoint dir>".into(),
        ));
    }
    let surrogate = surrogate.map(ModelParams::load_checkpoint).transpose()?;

    let seed = ctx.seed.or_else(|| config.as_ref().map(|c| c.seed)).unwrap_or(0);
    let config_hash = match &config {
        Some(cfg) => cfg.hash()?,
        None => sha256_hex(&serde_json::to_vec(&serde_json::json!({
            "checkpoint": params.content_hash(),
            "dataset": dataset.manifest_hash()?,
            "conditions": names,
            "seed": seed,
        }))?),
    };
    Ok(EvalInputs { params, dataset, conditions: parsed, surrogate, seed, config_hash })
}

fn report_csv(report: &EvalReport, config_hash: &str) -> String {
    let mut csv = format!("# config {config_hash}\ncondition,auc_video,auc_clip,accuracy\n");
    for entry in &report.results {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            entry.condition, entry.auc_video, entry.auc_clip, entry.accuracy
        ));
    }
    csv
}

pub fn eval(
    ctx: &Ctx,
    checkpoint: &Path,
    data: &Path,
    conditions: Option<&str>,
    surrogate: Option<&Path>,
    config_path: Option<&Path>,
) -> Result<()> {
    let inputs = resolve_eval_inputs(ctx, checkpoint, data, conditions, surrogate, config_path)?;
    let out = ctx.require_out(None)?;
    fs::create_dir_all(&out)?;

    let mut report = eval::robust_eval(
        &inputs.params,
        &inputs.dataset,
        &inputs.conditions,
        inputs.surrogate.as_ref(),
        inputs.seed,
        ctx.jobs,
    )?;
    report.meta.config = Some(inputs.config_hash.clone());

    fs::write(out.join("report.json"), report.to_json()?)?;
    fs::write(out.join("report.csv"), report_csv(&report, &inputs.config_hash))?;

    for entry in &report.results {
        println!(
            "{:<16} video AUC {:.4}  clip AUC {:.4}  accuracy {:.4}",
            entry.condition, entry.auc_video, entry.auc_clip, entry.accuracy
        );
    }
    println!("report written to {}", out.join("report.json").display());
    Ok(())
}

pub fn sweep(
    ctx: &Ctx,
    checkpoint: &Path,
    data: &Path,
    config_path: Option<&Path>,
) -> Result<()> {
    let config = config_path.map(load_experiment).transpose()?;
    let params = ModelParams::load_checkpoint(checkpoint)?;
    let dataset = Dataset::load(data)?;
    let seed = ctx.seed.or_else(|| config.as_ref().map(|c| c.seed)).unwrap_or(0);
    let config_hash = match &config {
        Some(cfg) => cfg.hash()?,
        None => sha256_hex(&serde_json::to_vec(&serde_json::json!({
            "checkpoint": params.content_hash(),
            "dataset": dataset.manifest_hash()?,
            "sweep": "distortion",
            "seed": seed,
        }))?),
    };
    let out = ctx.require_out(None)?;
    fs::create_dir_all(&out)?;

    let sweep = eval::distortion_sweep(&params, &dataset, seed, ctx.jobs)?;
    let csv = format!("# config {config_hash}\n{}", sweep.to_csv());
    fs::write(out.join("sweep.csv"), &csv)?;
    let json = serde_json::json!({ "config": config_hash, "sweep": sweep });
    fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&json)?)?;

    for (i, avg) in sweep.average.iter().enumerate() {
        println!("severity {} average video AUC {:.4}", i + 1, avg);
    }
    println!("sweep written to {}", out.join("sweep.csv").display());
    Ok(())
}

struct RunReport {
    name: String,
    config_hash: Option<String>,
    /// Condition name -> raw JSON token of the video AUC, kept verbatim.
    cells: Vec<(String, String)>,
}

fn read_run(dir: &Path) -> Result<RunReport> {
    if dir.join(INCOMPLETE_MARKER).exists() {
        return Err(Error::Artifact(format!("run '{}' is marked incomplete", dir.display())));
    }
    let path = dir.join("report.json");
    let raw = fs::read_to_string(&path)
        .map_err(|e| Error::Artifact(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&raw)
        .map_err(|e| Error::Artifact(format!("{} is not valid JSON: {e}", path.display())))?;
    let results = value
        .get("results")
        .and_then(|r| r.as_array())
        .ok_or_else(|| Error::Artifact(format!("{} has no results array", path.display())))?;
    let mut cells = Vec::new();
    for entry in results {
        let condition = entry
            .get("condition")
            .and_then(|c| c.as_str())
            .ok_or_else(|| Error::Artifact(format!("{}: entry without condition", path.display())))?;
        let auc = entry
            .get("auc_video")
            .and_then(|v| v.as_number())
            .ok_or_else(|| Error::Artifact(format!("{}: entry without auc_video", path.display())))?;
        cells.push((condition.to_string(), auc.to_string()));
    }
    let config_hash = fs::read_to_string(dir.join("config.json"))
        .ok()
        .and_then(|raw| serde_json::from_str::<serde_json::Value>(&raw).ok())
        .and_then(|v| v.get("config_hash").and_then(|h| h.as_str()).map(String::from));
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunReport { name, config_hash, cells })
}

pub fn tables(ctx: &Ctx, runs: &[PathBuf]) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::InvalidConfig("tables needs at least one run directory".into()));
    }
    let reports: Vec<RunReport> = runs.iter().map(|d| read_run(d)).collect::<Result<_>>()?;

    // Column order: first appearance across runs in input order.
    let mut columns: Vec<String> = Vec::new();
    for report in &reports {
        for (condition, _) in &report.cells {
            if !columns.iter().any(|c| c == condition) {
                columns.push(condition.clone());
            }
        }
    }

    let mut csv = String::new();
    for report in &reports {
        if let Some(hash) = &report.config_hash {
            csv.push_str(&format!("# {} config {hash}\n", report.name));
        }
    }
    csv.push_str(&format!("run,{}\n", columns.join(",")));
    for report in &reports {
        let row: Vec<&str> = columns
            .iter()
            .map(|col| {
                report
                    .cells
                    .iter()
                    .find(|(c, _)| c == col)
                    .map(|(_, v)| v.as_str())
                    .unwrap_or("")
            })
            .collect();
        csv.push_str(&format!("{},{}\n", report.name, row.join(",")));
    }

    let name_width = reports.iter().map(|r| r.name.len()).max().unwrap_or(3).max(3);
    let col_width = columns.iter().map(|c| c.len()).max().unwrap_or(6).max(6);
    let mut text = format!("{:<name_width$}", "run");
    for col in &columns {
        text.push_str(&format!("  {col:>col_width$}"));
    }
    text.push('\n');
    for report in &reports {
        text.push_str(&format!("{:<name_width$}", report.name));
        for col in &columns {
            let cell = report
                .cells
                .iter()
                .find(|(c, _)| c == col)
                .map(|(_, v)| format!("{:.4}", v.parse::<f64>().unwrap_or(f64::NAN)))
                .unwrap_or_else(|| "-".into());
            text.push_str(&format!("  {cell:>col_width$}"));
        }
        text.push('\n');
    }

    print!("{text}");
    if let Some(out) = &ctx.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("table.csv"), &csv)?;
        fs::write(out.join("table.txt"), &text)?;
        println!("table written to {}", out.join("table.csv").display());
    }
    Ok(())
}

pub fn gradcheck(ctx: &Ctx, tolerance: Option<f64>) -> Result<()> {
    if let Some(t) = tolerance {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::InvalidConfig(format!("tolerance must be > 0, got {t}")));
        }
    }
    let seed = ctx.seed.unwrap_or(7);
    let mut entries = gradient_battery_with_tolerance(seed, tolerance)?;
    entries.extend(loss_gradient_battery_with_tolerance(seed, tolerance)?);

    let mut failures = 0usize;
    let mut worst: Option<&BatteryEntry> = None;
    for entry in &entries {
        println!(
            "{} {:<34} max_rel {:>12.3e}  tol {:.0e}",
            if entry.pass { "PASS" } else { "FAIL" },
            entry.name,
            entry.max_rel_error,
            entry.tolerance
        );
        if !entry.pass {
            failures += 1;
        }
        if worst.map(|w| entry.max_rel_error > w.max_rel_error).unwrap_or(true) {
            worst = Some(entry);
        }
    }
    let worst = worst.expect("batteries are non-empty");
    println!("worst op {} at max_rel {:.3e}", worst.name, worst.max_rel_error);
    if failures > 0 {
        return Err(Error::Numerical(format!(
            "{failures} of {} gradient checks failed; worst '{}' at {:.3e}",
            entries.len(),
            worst.name,
            worst.max_rel_error
        )));
    }
    println!("all {} gradient checks passed", entries.len());
    Ok(())
}
