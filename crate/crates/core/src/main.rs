use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use creditkit::gbdt::GrowthMode;
use creditkit::ingest::{agency_counts, bind_schema, load_table, summarize, Agency, ObservationSet};
use creditkit::runner::steps::{self, target_slug, AgencyData, ModelBundle, StageResult};
use creditkit::runner::{emit_report, run_experiment, AgencyOutcome, RunConfig, RunManifest};
use creditkit::targets::TargetMode;
use creditkit::Error;

#[derive(Parser)]
#[command(name = "creditkit", version, about = "Temporal credit-rating modelling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Input CSV, overriding the configuration.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Agency name or id; repeat for several.
    #[arg(long, global = true)]
    agency: Vec<String>,
    #[arg(long, global = true, value_enum)]
    target: Option<TargetArg>,
    /// Growth preset (symmetric, leafwise, depthwise); repeat for several.
    #[arg(long, global = true)]
    preset: Vec<String>,
    /// TPE trials per preset and fold.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Binary,
    Continuous,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate the input file.
    Ingest,
    /// Dataset summary table.
    Summarize,
    /// Temporal fold plan per agency.
    PlanFolds,
    /// Hyperparameter studies on the final holdout fold.
    Tune,
    /// Tune, ensemble and calibrate on the final holdout fold; saves a model bundle.
    Train,
    /// Metrics of a saved model bundle on its test period.
    Evaluate,
    /// SHAP, permutation importance and partial dependence of a saved bundle.
    Explain,
    /// Feature drift (PSI) between the final fold's train and test periods.
    Drift,
    /// Tables and plot data from an existing manifest.
    Report,
    /// The full pipeline followed by the report.
    RunAll,
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Run(other.to_string()),
        }
    }
}

type CliResult = Result<bool, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = build_config(&cli).and_then(|config| dispatch(&cli.command, &config));
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Run(m)) => {
            log::error!("{m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            log::error!("configuration error: {m}");
            ExitCode::from(2)
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &cli.data {
        config.data_path = d.clone();
    }
    if !cli.agency.is_empty() {
        config.agencies = cli.agency.clone();
    }
    if let Some(t) = cli.target {
        config.targets = vec![match t {
            TargetArg::Binary => TargetMode::Binary,
            TargetArg::Continuous => TargetMode::Continuous,
        }];
    }
    if !cli.preset.is_empty() {
        config.presets = cli
            .preset
            .iter()
            .map(|p| GrowthMode::parse(p).ok_or_else(|| Failure::Config(format!("unknown preset `{p}`"))))
            .collect::<Result<_, _>>()?;
    }
    if let Some(n) = cli.trials {
        config.trials = n;
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = &cli.out {
        config.out_dir = o.clone();
    }
    config.validate()?;
    Ok(config)
}

fn dispatch(command: &Command, config: &RunConfig) -> CliResult {
    match command {
        Command::Ingest => ingest(config),
        Command::Summarize => summarize_cmd(config),
        Command::PlanFolds => per_agency(config, plan_folds),
        Command::Tune => per_agency(config, tune),
        Command::Train => per_agency(config, train),
        Command::Evaluate => per_agency(config, evaluate),
        Command::Explain => per_agency(config, explain),
        Command::Drift => per_agency(config, drift),
        Command::Report => report(config),
        Command::RunAll => run_all(config),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Run(e.to_string()))?;
    creditkit::io::write_string(path, &text)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load(config: &RunConfig) -> Result<(usize, ObservationSet), Failure> {
    let table = load_table(&config.data_path, config.delimiter_byte())?;
    let obs = bind_schema(&table, &config.schema()?)?;
    for r in &obs.rejected {
        log::warn!("row {} rejected: {}", r.source_row, r.reason);
    }
    Ok((table.rows.len(), obs))
}

fn ingest(config: &RunConfig) -> CliResult {
    let (n_rows, obs) = load(config)?;
    let counts: Vec<(String, usize)> = agency_counts(&obs)
        .into_iter()
        .map(|(a, n)| (a.display_name().to_string(), n))
        .collect();
    println!("{}: {n_rows} rows, {} accepted, {} rejected", config.data_path.display(), obs.len(), obs.rejected.len());
    println!("content hash {}", obs.content_hash);
    for (a, n) in &counts {
        println!("  {a:<24} {n}");
    }
    write_json(
        &config.out_dir.join("ingest.json"),
        &serde_json::json!({
            "path": config.data_path.display().to_string(),
            "content_hash": obs.content_hash,
            "n_rows": n_rows,
            "n_accepted": obs.len(),
            "rejected": obs.rejected,
            "agencies": counts,
        }),
    )?;
    Ok(true)
}

fn summarize_cmd(config: &RunConfig) -> CliResult {
    let (_, obs) = load(config)?;
    let report = summarize(&obs)?;
    print!("{}", report.to_text_table());
    write_json(&config.out_dir.join("summary.json"), &report)?;
    Ok(true)
}

/// Runs `step` for every configured (agency, target); false when any failed.
fn per_agency(config: &RunConfig, step: fn(&RunConfig, &AgencyData) -> StageResult<()>) -> CliResult {
    let (_, obs) = load(config)?;
    let mut ok = true;
    for agency in config.agency_list()? {
        let subset = obs.filter_agency(agency);
        if subset.is_empty() {
            log::warn!("{}: no data", agency.display_name());
            continue;
        }
        for &target in &config.targets {
            let result = steps::prepare_agency(config, &subset, agency, target).and_then(|data| step(config, &data));
            if let Err(e) = result {
                log::error!("{} ({}): {e}", agency.display_name(), target_slug(target));
                ok = false;
            }
        }
    }
    Ok(ok)
}

fn run_name(agency: Agency, target: TargetMode) -> String {
    format!("{}_{}", agency.slug(), target_slug(target))
}

fn stage_io(stage: &'static str) -> impl Fn(Error) -> steps::StageError {
    move |error| steps::StageError { stage, error }
}

fn save(stage: &'static str, path: &Path, value: &impl serde::Serialize) -> StageResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| stage_io(stage)(e.into()))?;
    creditkit::io::write_string(path, &text).map_err(stage_io(stage))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn plan_folds(config: &RunConfig, data: &AgencyData) -> StageResult<()> {
    println!("{} ({}): {} periods", data.agency.display_name(), target_slug(data.target), data.index.len());
    for f in &data.plan.folds {
        println!(
            "  fold {}: train {:?}, val {}, test {}",
            f.id, f.train_periods, f.val_period, f.test_period
        );
    }
    let path = config
        .out_dir
        .join("agencies")
        .join(data.slug())
        .join(target_slug(data.target))
        .join("fold_plan.json");
    save("folds", &path, &data.plan)
}

fn tune(config: &RunConfig, data: &AgencyData) -> StageResult<()> {
    let fold = data.prepare_fold(config, data.holdout_fold())?;
    let tuned = steps::tune_presets(config, data, &fold)?;
    let name = run_name(data.agency, data.target);
    for t in &tuned {
        println!("{name} {}: best validation objective {:.6} with {:?}", t.preset.name(), t.best_value, t.best_params);
        let path = config.out_dir.join("studies").join(format!("{name}_{}.json", t.preset.name()));
        save(
            "tune",
            &path,
            &serde_json::json!({
                "preset": t.preset,
                "fold": fold.fold.id,
                "best_params": t.best_params,
                "best_value": t.best_value,
                "study": t.study,
            }),
        )?;
    }
    Ok(())
}

fn bundle_path(config: &RunConfig, agency: Agency, target: TargetMode) -> PathBuf {
    config.out_dir.join("models").join(format!("{}.json", run_name(agency, target)))
}

fn train(config: &RunConfig, data: &AgencyData) -> StageResult<()> {
    let fold = data.prepare_fold(config, data.holdout_fold())?;
    let tuned = steps::tune_presets(config, data, &fold)?;
    let bundle = steps::fit_ensemble(data, &fold, &tuned)?;
    println!(
        "{}: ensemble weights {:?} over {:?}",
        run_name(data.agency, data.target),
        bundle.weights.weights,
        bundle.presets.iter().map(|p| p.name()).collect::<Vec<_>>()
    );
    let path = bundle_path(config, data.agency, data.target);
    let text = bundle.to_json().map_err(stage_io("ensemble"))?;
    creditkit::io::write_string(&path, &text).map_err(stage_io("ensemble"))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_bundle(config: &RunConfig, data: &AgencyData) -> StageResult<ModelBundle> {
    let path = bundle_path(config, data.agency, data.target);
    let text = std::fs::read_to_string(&path).map_err(|e| steps::StageError {
        stage: "evaluate",
        error: Error::InvalidInput(format!("{}: {e} (run `train` first)", path.display())),
    })?;
    ModelBundle::from_json(&text).map_err(stage_io("evaluate"))
}

/// The bundle's fold rebuilt from the data; the refitted preprocessor must
/// match the saved one.
fn bundle_fold(config: &RunConfig, data: &AgencyData, bundle: &ModelBundle) -> StageResult<steps::PreparedFold> {
    let fold = data.prepare_fold(config, &bundle.fold)?;
    if fold.preprocessor.state_hash() != bundle.preprocessor.state_hash() {
        return Err(steps::StageError {
            stage: "preprocess",
            error: Error::InvalidInput("the data or configuration changed since the bundle was trained".into()),
        });
    }
    Ok(fold)
}

fn evaluate(config: &RunConfig, data: &AgencyData) -> StageResult<()> {
    let bundle = load_bundle(config, data)?;
    let fold = bundle_fold(config, data, &bundle)?;
    let eval = steps::evaluate(config, data, &fold, &bundle)?;
    let name = run_name(data.agency, data.target);
    println!("{name} (test period {}):", fold.fold.test_period);
    println!("  train {}", eval.train.to_compact_string());
    println!("  test  {}", eval.test.to_compact_string());
    if let Some(ci) = &eval.test_ci {
        println!("  test {:.0}% interval [{:.4}, {:.4}]", ci.level * 100.0, ci.lower, ci.upper);
    }
    save(
        "evaluate",
        &config.out_dir.join("evaluation").join(format!("{name}.json")),
        &serde_json::json!({
            "fold": fold.fold,
            "train": eval.train,
            "val": eval.val,
            "test": eval.test,
            "test_brier_calibrated": eval.test_brier_calibrated,
            "test_ci": eval.test_ci,
            "delong_vs_best_member": eval.delong_vs_best_member,
        }),
    )?;
    let csv = steps::predictions_csv(&fold, &eval).map_err(stage_io("evaluate"))?;
    let path = config.out_dir.join("evaluation").join(format!("{name}_predictions.csv"));
    creditkit::io::write_atomic(&path, &csv).map_err(stage_io("evaluate"))?;
    Ok(())
}

fn explain(config: &RunConfig, data: &AgencyData) -> StageResult<()> {
    let bundle = load_bundle(config, data)?;
    let fold = bundle_fold(config, data, &bundle)?;
    let ex = steps::explain_bundle(config, data, &fold, &bundle).map_err(stage_io("explain"))?;
    let name = run_name(data.agency, data.target);
    println!("{name}: top features by mean |SHAP|");
    for (i, e) in ex.shap_ranking.entries.iter().take(10).enumerate() {
        println!("  {:>2}. {:<40} {:.6}", i + 1, e.feature, e.score);
    }
    let dir = config.out_dir.join("explain");
    let mut buf = Vec::new();
    ex.shap.write_delimited(&mut buf, b',').map_err(stage_io("explain"))?;
    creditkit::io::write_atomic(&dir.join(format!("{name}_shap.csv")), &buf).map_err(stage_io("explain"))?;
    save(
        "explain",
        &dir.join(format!("{name}.json")),
        &serde_json::json!({
            "shap": ex.shap_ranking,
            "permutation": ex.permutation.ranking,
            "permutation_baseline": ex.permutation.baseline,
            "pdp": ex.pdp,
        }),
    )
}

fn drift(config: &RunConfig, data: &AgencyData) -> StageResult<()> {
    let fold = data.prepare_fold(config, data.holdout_fold())?;
    let psi = steps::drift(config, &fold).map_err(stage_io("drift"))?;
    let name = run_name(data.agency, data.target);
    println!("{name}: {} features, {} flagged {:?}", psi.features.len(), psi.flagged.len(), psi.flagged);
    save("drift", &config.out_dir.join("drift").join(format!("{name}.json")), &psi)
}

fn print_report(manifest: &RunManifest, out_dir: &Path) -> Result<(), Failure> {
    let bundle = emit_report(manifest, out_dir)?;
    let summary = std::fs::read_to_string(out_dir.join("reports").join("summary.txt"))
        .map_err(|e| Failure::Run(e.to_string()))?;
    print!("{summary}");
    log::info!("{} report files under {}", bundle.files.len(), out_dir.join("reports").display());
    Ok(())
}

fn any_failed(manifest: &RunManifest) -> bool {
    manifest.runs.iter().any(|r| matches!(r.outcome, AgencyOutcome::Failed { .. }))
}

fn report(config: &RunConfig) -> CliResult {
    let path = config.out_dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?;
    let manifest = RunManifest::from_json(&text)?;
    print_report(&manifest, &config.out_dir)?;
    Ok(!any_failed(&manifest))
}

fn run_all(config: &RunConfig) -> CliResult {
    let manifest = run_experiment(config)?;
    print_report(&manifest, &config.out_dir)?;
    Ok(!any_failed(&manifest))
}
