//! The single TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use scenewise_data::SceneConfig;
use scenewise_model::train::TrainConfig;
use scenewise_model::EncoderConfig;

/// Environment variable that overrides `output_root` when set.
pub const OUTPUT_ROOT_ENV: &str = "SCENEWISE_OUTPUT_ROOT";

/// Every evaluation task the `eval` subcommand knows.
pub const ALL_TASKS: [&str; 7] =
    ["zeroshot", "probe", "predcls", "sgcls", "localize", "dump", "viz"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateSection {
    /// Number of scenes to render.
    pub scenes: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection { scenes: 2000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizationSection {
    /// Channel widths of the three decoder convolutions.
    pub channels: [usize; 3],
    pub learning_rate: f64,
    pub train_epochs: usize,
}

impl Default for LocalizationSection {
    fn default() -> Self {
        LocalizationSection { channels: [256, 64, 1], learning_rate: 1e-4, train_epochs: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Task subset run when `--tasks` is not given.
    pub tasks: Vec<String>,
    /// Optional prompt template file, one template per line.
    pub templates_file: Option<PathBuf>,
    /// Restrict PredCls/SGCls to the N most frequent train predicates;
    /// the full relation vocabulary when absent.
    pub predicate_top_n: Option<usize>,
    /// Scenes visualized by the `viz` task.
    pub viz_scenes: usize,
    pub localization: LocalizationSection,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            tasks: ALL_TASKS.iter().map(|t| t.to_string()).collect(),
            templates_file: None,
            predicate_top_n: None,
            viz_scenes: 4,
            localization: LocalizationSection::default(),
        }
    }
}

/// Root configuration: one file drives generate, curate, train, and eval.
/// The top-level seed propagates into the scene and train sections.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// All outputs (dataset, run, reports, viz, dump) live under here.
    pub output_root: PathBuf,
    pub scene: SceneConfig,
    pub generate: GenerateSection,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_root: PathBuf::from("runs/scenewise"),
            scene: SceneConfig::default(),
            generate: GenerateSection::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file, propagating the top-level seed
    /// and applying the output-root environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&body)
            .with_context(|| format!("cannot parse config file {}", path.display()))?;
        cfg.scene.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            if !root.is_empty() {
                cfg.output_root = PathBuf::from(root);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate().context("scene section")?;
        self.encoder.validate(self.scene.image_size).context("encoder section")?;
        self.train.validate().context("train section")?;
        if self.generate.scenes == 0 {
            anyhow::bail!("generate.scenes must be positive");
        }
        for task in &self.eval.tasks {
            if !ALL_TASKS.contains(&task.as_str()) {
                anyhow::bail!(
                    "unknown eval task {task:?}; valid tasks: {}",
                    ALL_TASKS.join(", ")
                );
            }
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.output_root.join("dataset")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root.join("run")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.output_root.join("reports")
    }

    pub fn viz_dir(&self) -> PathBuf {
        self.output_root.join("viz")
    }

    pub fn dump_dir(&self) -> PathBuf {
        self.output_root.join("dump")
    }

    pub fn curation_path(&self) -> PathBuf {
        self.output_root.join("curation.json")
    }
}
