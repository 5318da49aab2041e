//! Command-line entry point: dataset generation, vocabulary curation,
//! model training, and evaluation, all driven by one TOML configuration.
//!
//! Exit codes are a stable contract: 0 success, 1 usage error, 2 runtime
//! failure.

mod config;
mod viz;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use scenewise_data::curate::{builtin_colors, curate_labels, ClusterConfig, NoopTagger};
use scenewise_data::{
    builtin_antonyms, load_manifest, load_scene, render_dataset, DatasetManifest, Split,
};
use scenewise_model::checkpoint::load_checkpoint;
use scenewise_model::eval::{
    dump_embeddings, linear_probe, most_frequent_predicates, predicate_classification,
    relation_localization, relevance_map, scene_graph_classification, zero_shot_retrieval,
    LocalizationDecoderConfig, PromptTemplateSet,
};
use scenewise_model::optim::LambdaSchedule;
use scenewise_model::{Level, MetricsReport, ScenarioModel};

use crate::config::{RunConfig, ALL_TASKS};

#[derive(Parser)]
#[command(name = "scenewise", version, about = "Scenario dataset, training, and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural scenario dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured scene count.
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Curate the object vocabulary and write the grouping report.
    Curate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the six-tower model on a rendered dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Distillation weight schedule: fixed:X or anneal:A-B.
        #[arg(long, conflicts_with = "no_kd")]
        lambda_kd: Option<String>,
        /// Disable distillation (weight fixed at zero).
        #[arg(long)]
        no_kd: bool,
    },
    /// Evaluate a checkpoint and write per-task reports.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to evaluate; defaults to the final training one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated subset of the evaluation tasks.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
    },
}

enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

/// Wraps a library error as a runtime failure.
fn rt(e: impl std::error::Error + Send + Sync + 'static) -> CliError {
    CliError::Runtime(anyhow::Error::new(e))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { config, scenes } => cmd_generate(&config, scenes),
        Command::Curate { config } => cmd_curate(&config),
        Command::Train { config, lambda_kd, no_kd } => cmd_train(&config, lambda_kd, no_kd),
        Command::Eval { config, checkpoint, tasks } => cmd_eval(&config, checkpoint, tasks),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_generate(config_path: &Path, scenes: Option<usize>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path)?;
    let n = scenes.unwrap_or(cfg.generate.scenes);
    if n == 0 {
        return Err(CliError::Usage("--scenes must be positive".into()));
    }
    let dir = cfg.dataset_dir();
    let manifest = render_dataset(&cfg.scene, n, &dir).map_err(rt)?;
    let manifest_path = dir.join("manifest.json");
    let bytes = std::fs::read(&manifest_path)
        .map_err(|e| CliError::Runtime(anyhow::Error::new(e)))?;
    println!("rendered {} scenes to {}", manifest.n_scenes, dir.display());
    println!("manifest sha256 {}", sha256_hex(&bytes));
    Ok(())
}

fn cmd_curate(config_path: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path)?;
    let manifest = load_manifest(&cfg.dataset_dir()).map_err(rt)?;
    let curated = curate_labels(
        &manifest.vocab.objects,
        &builtin_colors(),
        &NoopTagger,
        &ClusterConfig::default(),
    )
    .map_err(rt)?;
    let antonyms: BTreeMap<String, String> = builtin_antonyms()
        .entries()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let doc = serde_json::json!({
        "version": 1,
        "objects": curated,
        "predicates": manifest.vocab.relations,
        "antonyms": antonyms,
    });
    let path = cfg.curation_path();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Runtime(e.into()))?;
    }
    let body = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Runtime(e.into()))?;
    std::fs::write(&path, body + "\n").map_err(|e| CliError::Runtime(e.into()))?;
    println!(
        "curated {} object labels ({} left as noise) into {}",
        curated.mapping.len(),
        curated.noise.len(),
        path.display()
    );
    Ok(())
}

/// Parses a distillation schedule spec of the form `fixed:X` or
/// `anneal:A-B`.
fn parse_lambda(spec: &str) -> Result<LambdaSchedule, CliError> {
    let usage = || {
        CliError::Usage(format!(
            "invalid --lambda-kd spec {spec:?}; expected fixed:X or anneal:A-B"
        ))
    };
    let (kind, rest) = spec.split_once(':').ok_or_else(usage)?;
    let sched = match kind {
        "fixed" => LambdaSchedule::fixed(rest.parse::<f64>().map_err(|_| usage())?),
        "anneal" => {
            let (a, b) = rest.split_once('-').ok_or_else(usage)?;
            LambdaSchedule::anneal(
                a.parse::<f64>().map_err(|_| usage())?,
                b.parse::<f64>().map_err(|_| usage())?,
            )
        }
        _ => return Err(usage()),
    };
    sched.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(sched)
}

fn cmd_train(
    config_path: &Path,
    lambda_kd: Option<String>,
    no_kd: bool,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config_path)?;
    if no_kd {
        cfg.train.lambda_kd = LambdaSchedule::fixed(0.0);
    } else if let Some(spec) = lambda_kd {
        cfg.train.lambda_kd = parse_lambda(&spec)?;
    }
    let data_dir = cfg.dataset_dir();
    let manifest = load_manifest(&data_dir).map_err(rt)?;
    let outcome =
        scenewise_model::train(&cfg.train, &cfg.encoder, &data_dir, &manifest, &cfg.run_dir())
            .map_err(rt)?;
    println!(
        "trained {} steps, loss {:.4} -> {:.4}",
        outcome.steps, outcome.first_loss, outcome.final_loss
    );
    println!("checkpoint {}", outcome.checkpoint_path.display());
    println!("metrics {}", outcome.metrics_path.display());
    Ok(())
}

/// The class vocabulary evaluated at each alignment level.
fn level_sets(manifest: &DatasetManifest) -> [(Level, &Vec<String>); 3] {
    [
        (Level::Global, &manifest.vocab.actions),
        (Level::Object, &manifest.vocab.objects),
        (Level::Relation, &manifest.vocab.relations),
    ]
}

/// Predicate vocabulary for PredCls/SGCls: the most frequent train-split
/// predicates when a cap is configured, the full list otherwise.
fn predicate_vocab(
    cfg: &RunConfig,
    data_dir: &Path,
    manifest: &DatasetManifest,
) -> Result<Vec<String>, CliError> {
    match cfg.eval.predicate_top_n {
        Some(n) => most_frequent_predicates(data_dir, manifest, Split::Train, n).map_err(rt),
        None => Ok(manifest.vocab.relations.clone()),
    }
}

fn cmd_eval(
    config_path: &Path,
    checkpoint: Option<PathBuf>,
    tasks: Vec<String>,
) -> Result<(), CliError> {
    // Validate the task subset before touching the filesystem so a typo is
    // always a usage error.
    let requested: Vec<String> = if tasks.is_empty() { Vec::new() } else { tasks };
    for task in &requested {
        if !ALL_TASKS.contains(&task.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown task {task:?}; valid tasks: {}",
                ALL_TASKS.join(", ")
            )));
        }
    }
    let cfg = RunConfig::load(config_path)?;
    let requested = if requested.is_empty() { cfg.eval.tasks.clone() } else { requested };
    // Canonical execution order; duplicates collapse.
    let selected: Vec<&str> = ALL_TASKS
        .iter()
        .copied()
        .filter(|t| requested.iter().any(|r| r == t))
        .collect();

    let ckpt_path =
        checkpoint.unwrap_or_else(|| cfg.run_dir().join("checkpoint_final.swck"));
    let model = load_checkpoint(&ckpt_path).map_err(rt)?.model;
    let data_dir = cfg.dataset_dir();
    let manifest = load_manifest(&data_dir).map_err(rt)?;
    let reports_dir = cfg.reports_dir();
    let templates = match &cfg.eval.templates_file {
        Some(path) => PromptTemplateSet::from_file(path).map_err(rt)?,
        None => PromptTemplateSet::default_set(),
    };

    // Reports produced in this invocation, for reuse by the viz task.
    let mut produced: BTreeMap<String, MetricsReport> = BTreeMap::new();

    for task in selected {
        match task {
            "zeroshot" => {
                for (level, classes) in level_sets(&manifest) {
                    let report = zero_shot_retrieval(
                        &model, &data_dir, &manifest, Split::Test, classes, &templates, level,
                    )
                    .map_err(rt)?;
                    emit(&reports_dir, &mut produced, report)?;
                }
            }
            "probe" => {
                for (level, _) in level_sets(&manifest) {
                    let report = linear_probe(
                        &model, &data_dir, &manifest, Split::Train, Split::Test, level,
                    )
                    .map_err(rt)?;
                    emit(&reports_dir, &mut produced, report)?;
                }
            }
            "predcls" => {
                let predicates = predicate_vocab(&cfg, &data_dir, &manifest)?;
                let report = predicate_classification(
                    &model, &data_dir, &manifest, Split::Test, &predicates,
                )
                .map_err(rt)?;
                emit(&reports_dir, &mut produced, report)?;
            }
            "sgcls" => {
                let predicates = predicate_vocab(&cfg, &data_dir, &manifest)?;
                let report = scene_graph_classification(
                    &model,
                    &data_dir,
                    &manifest,
                    Split::Test,
                    &manifest.vocab.objects,
                    &predicates,
                )
                .map_err(rt)?;
                emit(&reports_dir, &mut produced, report)?;
            }
            "localize" => {
                let loc = &cfg.eval.localization;
                for frozen in [true, false] {
                    let dec_cfg = LocalizationDecoderConfig {
                        channels: (loc.channels[0], loc.channels[1], loc.channels[2]),
                        frozen_encoder: frozen,
                        learning_rate: loc.learning_rate,
                        train_epochs: loc.train_epochs,
                        seed: cfg.seed,
                    };
                    let report = relation_localization(
                        &model, &data_dir, &manifest, Split::Train, Split::Test, &dec_cfg,
                    )
                    .map_err(rt)?;
                    emit(&reports_dir, &mut produced, report)?;
                }
            }
            "dump" => {
                let stem = cfg.dump_dir().join("objects_test");
                let (data_path, labels_path) =
                    dump_embeddings(&model, &data_dir, &manifest, Split::Test, &stem)
                        .map_err(rt)?;
                println!("wrote {}", data_path.display());
                println!("wrote {}", labels_path.display());
            }
            "viz" => {
                run_viz(&cfg, &model, &data_dir, &manifest, &templates, &produced)?;
            }
            _ => unreachable!("task list validated above"),
        }
    }
    Ok(())
}

/// Writes one report, prints its path, and remembers it for reuse within
/// the same invocation.
fn emit(
    reports_dir: &Path,
    produced: &mut BTreeMap<String, MetricsReport>,
    report: MetricsReport,
) -> Result<(), CliError> {
    let path = report.write(reports_dir).map_err(rt)?;
    println!("wrote {}", path.display());
    produced.insert(report.task.clone(), report);
    Ok(())
}

/// Relevance heatmap overlays for a few test scenes plus one retrieval
/// accuracy curve per level. Zero-shot numbers come from reports produced
/// earlier in the same invocation, or from disk, before recomputing.
fn run_viz(
    cfg: &RunConfig,
    model: &ScenarioModel,
    data_dir: &Path,
    manifest: &DatasetManifest,
    templates: &PromptTemplateSet,
    produced: &BTreeMap<String, MetricsReport>,
) -> Result<(), CliError> {
    let viz_dir = cfg.viz_dir();
    let ids: Vec<usize> = manifest
        .split_ids(Split::Test)
        .iter()
        .copied()
        .take(cfg.eval.viz_scenes)
        .collect();
    for id in ids {
        let record = load_scene(data_dir, id).map_err(rt)?;
        let map = relevance_map(model, &record.image).map_err(rt)?;
        let overlay = viz::heatmap_overlay(&record.image, &map)?;
        let path = viz_dir.join(format!("relevance_{id:05}.png"));
        viz::save_image(&path, &overlay)?;
        println!("wrote {}", path.display());
    }

    for (level, classes) in level_sets(manifest) {
        let report = cached_zero_shot(
            cfg, model, data_dir, manifest, templates, produced, level, classes,
        )?;
        let points: Vec<(usize, f64)> = [
            (1, report.top1),
            (5, report.top5),
            (10, report.top10),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|acc| (k, acc)))
        .collect();
        let path = viz_dir.join(format!("retrieval_{}.png", report.task));
        viz::retrieval_curve(&path, &points)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cached_zero_shot(
    cfg: &RunConfig,
    model: &ScenarioModel,
    data_dir: &Path,
    manifest: &DatasetManifest,
    templates: &PromptTemplateSet,
    produced: &BTreeMap<String, MetricsReport>,
    level: Level,
    classes: &[String],
) -> Result<MetricsReport, CliError> {
    let task = match level {
        Level::Global => "zeroshot_actions",
        Level::Object => "zeroshot_objects",
        Level::Relation => "zeroshot_relations",
    };
    if let Some(report) = produced.get(task) {
        return Ok(report.clone());
    }
    let on_disk = cfg.reports_dir().join(format!("{task}.json"));
    if on_disk.is_file() {
        let text = std::fs::read_to_string(&on_disk).map_err(|e| CliError::Runtime(e.into()))?;
        if let Ok(report) = serde_json::from_str::<MetricsReport>(&text) {
            if report.validate().is_ok() {
                return Ok(report);
            }
        }
    }
    zero_shot_retrieval(model, data_dir, manifest, Split::Test, classes, templates, level)
        .map_err(rt)
}
