//! Experiment configuration and the four commands behind the binary:
//! `generate`, `train`, `evaluate` and `ablate`, plus `baselines`.
//!
//! Every command reads one TOML file, validates it completely, and writes a
//! resolved snapshot of it next to its outputs so the run can be repeated
//! from the output directory alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_dataset, split, write_records, Dataset, DatasetManifest, FeatureStats,
    GeneratorInfo, Splits, SyntheticConfig, DEFAULT_RATIOS,
};
use crate::error::{Error, Result};
use crate::eval::{
    alpha_rows, evaluate_model, internal_baselines, relative_difference, run_ablations,
    shared_projection, train_or_resume, write_ablation_csv, write_alpha_csv, write_csv, write_json,
    write_report_csv, AblationRow, BaselineRow, EvalConfig, ExperimentData, MetricReport,
};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::training::{load_checkpoint, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const SNAPSHOT_FILE: &str = "config.resolved.toml";

/// Where the records come from: a manifest on disk, or a synthetic
/// configuration generated in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Manifest path, relative to the config file unless absolute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Named synthetic preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Explicit synthetic configuration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    /// Split seed for in-memory data; manifests carry their own split.
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
}

fn default_ratios() -> [f64; 3] {
    DEFAULT_RATIOS
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            manifest: None,
            preset: None,
            synthetic: Some(SyntheticConfig::default()),
            split_seed: 0,
            ratios: DEFAULT_RATIOS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default = "default_kind")]
    pub kind: ModelKind,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_kind() -> ModelKind {
    ModelKind::DrFuse
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection::default(),
            kind: ModelKind::DrFuse,
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config file. Relative manifest paths are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(m) = &cfg.dataset.manifest {
            if m.is_relative() {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                cfg.dataset.manifest = Some(base.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let sources = [
            d.manifest.is_some(),
            d.preset.is_some(),
            d.synthetic.is_some(),
        ];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return Err(Error::InvalidConfig(
                "dataset needs exactly one of `manifest`, `preset` or `synthetic`".into(),
            ));
        }
        if let Some(s) = self.synthetic()? {
            s.validate()?;
        }
        let sum: f64 = d.ratios.iter().sum();
        if d.ratios.iter().any(|r| !(*r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split ratios must be positive and sum to 1, got {:?}",
                d.ratios
            )));
        }
        self.model.validate()?;
        self.training.validate()?;
        if self.eval.bootstrap_iters == 0 || !(self.eval.level > 0.0 && self.eval.level < 1.0) {
            return Err(Error::InvalidConfig(
                "eval needs bootstrap_iters > 0 and 0 < level < 1".into(),
            ));
        }
        Ok(())
    }

    /// Checks that a generated dataset matches the model's class and
    /// feature counts. Manifests are checked when loaded.
    pub fn check_model_fits_data(&self) -> Result<()> {
        self.validate()?;
        if let Some(s) = self.synthetic()? {
            if (s.n_classes, s.n_features) != (self.model.n_classes, self.model.n_features) {
                return Err(Error::InvalidConfig(format!(
                    "model expects {} classes and {} features, the dataset has {} and {}",
                    self.model.n_classes, self.model.n_features, s.n_classes, s.n_features
                )));
            }
        }
        Ok(())
    }

    /// The synthetic configuration, when the dataset is generated.
    pub fn synthetic(&self) -> Result<Option<SyntheticConfig>> {
        match (&self.dataset.preset, &self.dataset.synthetic) {
            (Some(p), _) => SyntheticConfig::preset(p).map(Some),
            (None, Some(s)) => Ok(Some(s.clone())),
            (None, None) => Ok(None),
        }
    }

    /// Applies a `--seed` override to the training seed.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.training.seed = s;
        }
        self
    }
}

/// A dataset ready for training: normalized with training-split statistics.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: Dataset,
    pub splits: Splits,
    pub split_seed: u64,
    pub stats: FeatureStats,
}

impl PreparedData {
    pub fn view(&self) -> ExperimentData<'_> {
        ExperimentData {
            dataset: &self.dataset,
            splits: &self.splits,
            split_seed: self.split_seed,
            stats: &self.stats,
        }
    }

    pub fn part(&self, idx: &[usize]) -> Dataset {
        self.dataset.subset(idx)
    }
}

/// Loads or generates the raw dataset and its split.
pub fn raw_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Splits, u64)> {
    if let Some(path) = &cfg.dataset.manifest {
        if !path.exists() {
            return Err(Error::InvalidInput(format!(
                "dataset manifest {} does not exist",
                path.display()
            )));
        }
        let loaded = load_dataset(path)?;
        if (loaded.dataset.n_classes, loaded.dataset.n_features)
            != (cfg.model.n_classes, cfg.model.n_features)
        {
            return Err(Error::InvalidConfig(format!(
                "model expects {} classes and {} features, {} has {} and {}",
                cfg.model.n_classes,
                cfg.model.n_features,
                path.display(),
                loaded.dataset.n_classes,
                loaded.dataset.n_features
            )));
        }
        let seed = loaded.manifest.split.seed;
        return Ok((loaded.dataset, loaded.splits, seed));
    }
    let syn = cfg.synthetic()?.expect("validated dataset source");
    let (dataset, _) = generate_synthetic(&syn)?;
    let splits = split(&dataset, cfg.dataset.ratios, cfg.dataset.split_seed)?;
    Ok((dataset, splits, cfg.dataset.split_seed))
}

/// Normalizes every record with statistics of the training split.
pub fn prepare(dataset: Dataset, splits: Splits, split_seed: u64) -> PreparedData {
    let train_records: Vec<_> = splits
        .train
        .iter()
        .map(|&i| dataset.records[i].clone())
        .collect();
    let stats = FeatureStats::fit(&train_records, dataset.n_features);
    let mut dataset = dataset;
    stats.apply(&mut dataset);
    PreparedData {
        dataset,
        splits,
        split_seed,
        stats,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_snapshot(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let path = dir.join(SNAPSHOT_FILE);
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))
}

/// Files written by [`cmd_generate`].
#[derive(Debug, Clone)]
pub struct GenerateOutput {
    pub records: PathBuf,
    pub manifest: PathBuf,
    pub decoders: PathBuf,
}

#[derive(Serialize)]
struct GenerationLog<'a> {
    seed: u64,
    decoder_digest: &'a str,
    n_samples: usize,
    cxr_coverage: f64,
    prevalence: Vec<f64>,
}

/// Generates a synthetic dataset into `out_dir`: `records.jsonl`,
/// `manifest.json`, `decoders.json` and `generation.json`. Nothing is
/// written when the configuration is invalid.
pub fn cmd_generate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<GenerateOutput> {
    let syn = cfg.synthetic()?.ok_or_else(|| {
        Error::InvalidConfig("generate needs a `preset` or `synthetic` dataset section".into())
    })?;
    syn.validate()?;
    let (dataset, spec) = generate_synthetic(&syn)?;
    let splits = split(&dataset, cfg.dataset.ratios, cfg.dataset.split_seed)?;
    let digest = spec.digest()?;

    create_dir(out_dir)?;
    let records = out_dir.join("records.jsonl");
    let manifest_path = out_dir.join("manifest.json");
    let decoders = out_dir.join("decoders.json");
    write_records(&records, &dataset.records)?;
    write_json(&decoders, &spec)?;
    let manifest = DatasetManifest {
        records: PathBuf::from("records.jsonl"),
        n_classes: dataset.n_classes,
        n_features: dataset.n_features,
        seq_len: Some(syn.seq_len),
        class_drivers: dataset.class_drivers.clone(),
        split: splits.to_assignment(&dataset, cfg.dataset.ratios, cfg.dataset.split_seed),
        generator: Some(GeneratorInfo {
            seed: syn.seed,
            digest: digest.clone(),
            decoders: PathBuf::from("decoders.json"),
        }),
    };
    manifest.write(&manifest_path)?;
    write_json(
        &out_dir.join("generation.json"),
        &GenerationLog {
            seed: syn.seed,
            decoder_digest: &digest,
            n_samples: dataset.len(),
            cxr_coverage: dataset.cxr_coverage(),
            prevalence: dataset.prevalence(),
        },
    )?;
    let mut snapshot = cfg.clone();
    snapshot.dataset.preset = None;
    snapshot.dataset.synthetic = Some(syn);
    write_snapshot(out_dir, &snapshot)?;
    Ok(GenerateOutput {
        records,
        manifest: manifest_path,
        decoders,
    })
}

/// Trains the configured model into `out_dir`: checkpoint, JSONL training
/// log and the resolved configuration.
pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.check_model_fits_data()?;
    let (dataset, splits, split_seed) = raw_dataset(cfg)?;
    let data = prepare(dataset, splits, split_seed);
    let model = Model::new(cfg.kind, cfg.model.clone())?;
    let (mut train, mut val) = (data.part(&data.splits.train), data.part(&data.splits.val));
    if cfg.kind == ModelKind::CxrOnly {
        train = train.matched();
        val = val.matched();
    }
    create_dir(out_dir)?;
    write_snapshot(out_dir, cfg)?;
    // Always retrain: remove a previous checkpoint so nothing is resumed.
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    if ckpt.exists() {
        std::fs::remove_file(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    }
    train_or_resume(
        &model,
        &cfg.training,
        &train,
        &val,
        &data.stats,
        Some(out_dir),
    )?;
    Ok(ckpt)
}

/// Files and reports produced by [`cmd_evaluate`].
#[derive(Debug, Clone)]
pub struct EvaluateOutput {
    pub report: MetricReport,
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub alpha: Option<PathBuf>,
}

/// Evaluates a checkpoint on the test split of the configured dataset,
/// or on its image-bearing subset with `matched_only`.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out_dir: &Path,
    matched_only: bool,
) -> Result<EvaluateOutput> {
    cfg.validate()?;
    let (store, meta) = load_checkpoint(checkpoint)?;
    let (mut dataset, splits, _) = raw_dataset(cfg)?;
    let m = &meta.model.config;
    if dataset.n_classes != m.n_classes {
        return Err(Error::InvalidInput(format!(
            "checkpoint predicts {} classes, the dataset has {}",
            m.n_classes, dataset.n_classes
        )));
    }
    if dataset.n_features != m.n_features {
        return Err(Error::InvalidInput(format!(
            "checkpoint expects {} EHR features, the dataset has {}",
            m.n_features, dataset.n_features
        )));
    }
    meta.feature_stats.apply(&mut dataset);
    let mut test = dataset.subset(&splits.test);
    let label = if matched_only {
        test = test.matched();
        "matched"
    } else {
        "full"
    };
    let (report, preds) = evaluate_model(&meta.model, &store, &test, label, &cfg.eval)?;

    create_dir(out_dir)?;
    write_snapshot(out_dir, cfg)?;
    let csv = out_dir.join(format!("report_{label}.csv"));
    let summary = out_dir.join(format!("summary_{label}.json"));
    write_report_csv(&csv, &[&report])?;
    write_json(&summary, &report)?;
    let alpha = if meta.model.kind == ModelKind::DrFuse {
        let path = out_dir.join(format!("alpha_{label}.csv"));
        write_alpha_csv(&path, &alpha_rows(&test, &preds))?;
        write_csv(
            &out_dir.join(format!("projection_{label}.csv")),
            &shared_projection(&test, &preds),
        )?;
        Some(path)
    } else {
        None
    };
    Ok(EvaluateOutput {
        report,
        csv,
        summary,
        alpha,
    })
}

/// Runs the four ablation variants, resuming finished ones from
/// `out_dir`, and writes `ablation.csv` and `ablation.json`.
pub fn cmd_ablate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<AblationRow>> {
    cfg.check_model_fits_data()?;
    let (dataset, splits, split_seed) = raw_dataset(cfg)?;
    let data = prepare(dataset, splits, split_seed);
    create_dir(out_dir)?;
    write_snapshot(out_dir, cfg)?;
    let rows = run_ablations(
        &cfg.model,
        &cfg.training,
        data.view(),
        &cfg.eval,
        Some(out_dir),
    )?;
    write_ablation_csv(&out_dir.join("ablation.csv"), &rows)?;
    write_json(&out_dir.join("ablation.json"), &rows)?;
    Ok(rows)
}

/// Trains the internal baselines and DrFuse, writing their reports and the
/// per-class relative difference against the best unimodal model.
pub fn cmd_baselines(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<BaselineRow>> {
    cfg.check_model_fits_data()?;
    let (dataset, splits, split_seed) = raw_dataset(cfg)?;
    let data = prepare(dataset, splits, split_seed);
    create_dir(out_dir)?;
    write_snapshot(out_dir, cfg)?;
    let rows = internal_baselines(
        &cfg.model,
        &cfg.training,
        data.view(),
        &cfg.eval,
        Some(out_dir),
    )?;

    let drfuse = Model::new(ModelKind::DrFuse, cfg.model.clone())?;
    let test = data.part(&data.splits.test);
    let trained = train_or_resume(
        &drfuse,
        &cfg.training,
        &data.part(&data.splits.train),
        &data.part(&data.splits.val),
        &data.stats,
        Some(&out_dir.join(ModelKind::DrFuse.name())),
    )?;
    let (drfuse_report, _) = evaluate_model(&drfuse, &trained.params, &test, "full", &cfg.eval)?;

    let find = |k: ModelKind| rows.iter().find(|r| r.kind == k).map(|r| &r.full);
    let unimodal: Vec<&MetricReport> = [ModelKind::EhrOnly, ModelKind::CxrOnly]
        .into_iter()
        .filter_map(find)
        .collect();
    let mut candidates = vec![("drfuse", &drfuse_report)];
    if let Some(c) = find(ModelKind::Concat) {
        candidates.push(("concat", c));
    }
    write_csv(
        &out_dir.join("relative_difference.csv"),
        &relative_difference(&candidates, &unimodal),
    )?;
    let mut reports: Vec<MetricReport> = Vec::new();
    for r in &rows {
        for mut rep in [r.full.clone(), r.matched.clone()] {
            rep.label = format!("{}/{}", r.kind.name(), rep.label);
            reports.push(rep);
        }
    }
    let mut d = drfuse_report;
    d.label = "drfuse/full".into();
    reports.push(d);
    write_report_csv(
        &out_dir.join("baselines.csv"),
        &reports.iter().collect::<Vec<_>>(),
    )?;
    write_json(&out_dir.join("baselines.json"), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[training]\nlamda1 = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml("colour = 1\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let bad = "[dataset.synthetic]\nmissing_rate = 1.5\n";
        assert!(matches!(
            ExperimentConfig::from_toml(bad),
            Err(Error::InvalidConfig(_))
        ));
        let two_sources = "[dataset]\npreset = \"smoke\"\n[dataset.synthetic]\nn_samples = 10\n";
        assert!(ExperimentConfig::from_toml(two_sources).is_err());
        let mismatch = ExperimentConfig::from_toml("[model]\nn_classes = 3\n").unwrap();
        assert!(mismatch.check_model_fits_data().is_err());
    }

    #[test]
    fn seed_override() {
        let cfg = ExperimentConfig::default().with_seed(Some(9));
        assert_eq!(cfg.training.seed, 9);
    }
}
