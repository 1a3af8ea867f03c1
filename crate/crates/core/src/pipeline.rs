//! Config-driven pipeline stages behind the `fairconf` binary.
//!
//! One top-level seed feeds every stage through named streams (see
//! [`crate::seed`]), so an identical config reproduces an identical output
//! tree. Every file written is read back with the library's own reader.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conformal::{self, CalibrationResult, PredictionSet};
use crate::data_model::{self, Axis, Dataset, DatasetSplit, SplitFractions};
use crate::error::{Error, Result};
use crate::fairness::{self, FairnessReport, Grouping};
use crate::mlp::{self, Activation, MlpArchitecture, MlpParams, TrainConfig, TrainHistory};
use crate::sampler::SamplerConfig;
use crate::seed;
use crate::synth::{self, SynthConfig};

pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const LABELS_FILE: &str = "labels.csv";
pub const METADATA_FILE: &str = "metadata.csv";
pub const SYNTH_MANIFEST_FILE: &str = "synth_manifest.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.json";
pub const SPLIT_FILE: &str = "split.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const SETS_FILE: &str = "prediction_sets.jsonl";
pub const AUDIT_SUMMARY_FILE: &str = "audit_summary.json";
pub const REPORT_DIR: &str = "report";

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub embeddings: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub metadata: Option<PathBuf>,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
}

/// Synthetic-data parameters; without `seed` the synth stream of the
/// top-level seed is used.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct SynthSection {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub params: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub n_blocks: usize,
    pub dropout_rate: f64,
    pub activation: Activation,
}

impl Default for ArchSection {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            dropout_rate: 0.3,
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub bn_momentum: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            bn_momentum: t.bn_momentum,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unsampled {
    Unsampled,
}

/// Either the string `"unsampled"` or a sampler table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SamplerSetting {
    Unsampled(Unsampled),
    Dynamic(#[serde(with = "sampler_table")] SamplerConfig),
}

impl Default for SamplerSetting {
    fn default() -> Self {
        SamplerSetting::Dynamic(SamplerConfig::default())
    }
}

impl SamplerSetting {
    pub fn config(&self) -> Option<&SamplerConfig> {
        match self {
            SamplerSetting::Unsampled(_) => None,
            SamplerSetting::Dynamic(c) => Some(c),
        }
    }
}

/// Sampler tables may omit keys; missing ones take the defaults.
mod sampler_table {
    use super::*;
    use crate::sampler::ThresholdPolicy;

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Partial {
        lambda_policy: Option<ThresholdPolicy>,
        beta_policy: Option<ThresholdPolicy>,
        update_period: Option<usize>,
        cv_folds: Option<usize>,
        f1_epsilon: Option<f64>,
        freeze_policies: Option<bool>,
    }

    pub fn serialize<S: serde::Serializer>(c: &SamplerConfig, s: S) -> std::result::Result<S::Ok, S::Error> {
        c.serialize(s)
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<SamplerConfig, D::Error> {
        let p = Partial::deserialize(d)?;
        let def = SamplerConfig::default();
        Ok(SamplerConfig {
            lambda_policy: p.lambda_policy.unwrap_or(def.lambda_policy),
            beta_policy: p.beta_policy.unwrap_or(def.beta_policy),
            update_period: p.update_period.unwrap_or(def.update_period),
            cv_folds: p.cv_folds.unwrap_or(def.cv_folds),
            f1_epsilon: p.f1_epsilon.unwrap_or(def.f1_epsilon),
            freeze_policies: p.freeze_policies.unwrap_or(def.freeze_policies),
        })
    }
}

fn default_split() -> SplitFractions {
    SplitFractions {
        train: 0.6,
        validation: 0.1,
        test: 0.15,
        calibration: 0.15,
    }
}

fn default_axes() -> Vec<Grouping> {
    [Axis::All, Axis::Sex, Axis::AgeBand, Axis::AnatomicalSite, Axis::Cohort]
        .into_iter()
        .map(Grouping::single)
        .collect()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Whole-pipeline configuration, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: Option<DataPaths>,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default = "default_split")]
    pub split: SplitFractions,
    #[serde(default)]
    pub arch: ArchSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sampler: SamplerSetting,
    pub alpha: f64,
    #[serde(default = "default_axes")]
    pub report_axes: Vec<Grouping>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.output_dir);
        if let Some(d) = cfg.data.as_mut() {
            rebase(&mut d.embeddings);
            rebase(&mut d.labels);
            if let Some(m) = d.metadata.as_mut() {
                rebase(m);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data, &self.synth) {
            (Some(_), Some(_)) => return Err(Error::config("give either [data] or [synth], not both")),
            (None, None) => return Err(Error::config("one of [data] or [synth] is required")),
            (None, Some(s)) => s.params.validate()?,
            (Some(_), None) => {}
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        self.split.validate()?;
        if self.report_axes.is_empty() {
            return Err(Error::config("report_axes must not be empty"));
        }
        self.train_config().validate()
    }

    pub fn synth_config(&self) -> Option<SynthConfig> {
        self.synth.as_ref().map(|s| SynthConfig {
            seed: s.seed.unwrap_or_else(|| seed::stream_seed(self.seed, seed::SYNTH)),
            ..s.params.clone()
        })
    }

    pub fn split_seed(&self) -> u64 {
        seed::stream_seed(self.seed, seed::SPLIT)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed: self.seed,
            bn_momentum: self.train.bn_momentum,
            sampler: self.sampler.config().cloned(),
        }
    }

    pub fn architecture(&self, dataset: &Dataset) -> MlpArchitecture {
        MlpArchitecture {
            input_dim: dataset.embedding_dim(),
            n_blocks: self.arch.n_blocks,
            dropout_rate: self.arch.dropout_rate,
            activation: self.arch.activation,
            n_classes: dataset.n_classes(),
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::data(e.to_string()))?;
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn check_reread<T: PartialEq>(path: &Path, written: &T, reread: &T) -> Result<()> {
    if written != reread {
        return Err(Error::data(format!("{} does not read back as written", path.display())));
    }
    Ok(())
}

/// The dataset named by the config: loaded from disk, or generated in memory
/// from the synth section (identical to what [`run_synth`] writes).
pub fn dataset(config: &PipelineConfig) -> Result<Dataset> {
    match (&config.data, config.synth_config()) {
        (Some(d), _) => data_model::load_dataset(
            &d.embeddings,
            &d.labels,
            d.metadata.as_deref(),
            d.class_names.as_deref(),
        ),
        (None, Some(s)) => synth::generate_synthetic(&s),
        (None, None) => Err(Error::config("one of [data] or [synth] is required")),
    }
}

pub fn split(config: &PipelineConfig, dataset: &Dataset) -> Result<DatasetSplit> {
    data_model::split_dataset(dataset, config.split, config.split_seed())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub top_level_seed: u64,
    pub synth_seed: u64,
    pub n_samples: usize,
    pub config: SynthConfig,
    pub files: Vec<String>,
}

/// Writes the synthetic dataset's three files and a manifest into the
/// output directory.
pub fn run_synth(config: &PipelineConfig) -> Result<SynthManifest> {
    let synth_cfg = config
        .synth_config()
        .ok_or_else(|| Error::config("synth needs a [synth] section"))?;
    let ds = synth::generate_synthetic(&synth_cfg)?;
    let out = &config.output_dir;
    ensure_dir(out)?;
    let (emb, lab, meta) = (out.join(EMBEDDINGS_FILE), out.join(LABELS_FILE), out.join(METADATA_FILE));
    data_model::write_dataset(&ds, &emb, &lab, &meta)?;
    let reread = data_model::load_dataset(&emb, &lab, Some(&meta), Some(ds.class_names()))?;
    check_reread(&emb, &ds, &reread)?;

    let manifest = SynthManifest {
        top_level_seed: config.seed,
        synth_seed: synth_cfg.seed,
        n_samples: ds.len(),
        config: synth_cfg,
        files: vec![EMBEDDINGS_FILE.into(), LABELS_FILE.into(), METADATA_FILE.into()],
    };
    let path = out.join(SYNTH_MANIFEST_FILE);
    write_json(&path, &manifest)?;
    check_reread(&path, &manifest, &read_json(&path)?)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub history: TrainHistory,
    pub split: DatasetSplit,
}

/// Trains the head and writes the checkpoint, training history and split.
pub fn run_train(config: &PipelineConfig) -> Result<TrainOutcome> {
    let ds = dataset(config)?;
    let split = split(config, &ds)?;
    let arch = config.architecture(&ds);
    let (params, history) = mlp::train(&ds, &split, &arch, &config.train_config())?;

    let out = &config.output_dir;
    ensure_dir(out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    mlp::save_checkpoint(&params, &ckpt)?;
    check_reread(&ckpt, &params, &mlp::load_checkpoint(&ckpt)?)?;
    let hist = out.join(HISTORY_FILE);
    write_json(&hist, &history)?;
    check_reread(&hist, &history, &read_json(&hist)?)?;
    let split_path = out.join(SPLIT_FILE);
    write_json(&split_path, &split)?;
    check_reread(&split_path, &split, &read_json(&split_path)?)?;
    Ok(TrainOutcome { params, history, split })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub alpha: f64,
    pub n_calibration: usize,
    pub n_test: usize,
    pub empirical_coverage: f64,
    /// `[1 - alpha, 1 - alpha + 1/(n_calibration + 1)]`.
    pub coverage_band: (f64, f64),
    pub mean_set_size: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditOutcome {
    pub calibration: CalibrationResult,
    pub sets: Vec<PredictionSet>,
    pub report: FairnessReport,
    pub summary: AuditSummary,
}

/// Calibrates on the calibration split, builds prediction sets for the test
/// split and writes them with the fairness report. `checkpoint` defaults to
/// the one in the output directory.
pub fn run_audit(config: &PipelineConfig, checkpoint: Option<&Path>) -> Result<AuditOutcome> {
    let out = &config.output_dir;
    let ckpt = checkpoint.map_or_else(|| out.join(CHECKPOINT_FILE), Path::to_path_buf);
    let params = mlp::load_checkpoint(&ckpt)?;
    let ds = dataset(config)?;
    let split = split(config, &ds)?;
    if split.calibration.is_empty() {
        return Err(Error::data("calibration split is empty"));
    }
    if split.test.is_empty() {
        return Err(Error::data("test split is empty"));
    }
    if params.arch != config.architecture(&ds) {
        return Err(Error::config("checkpoint architecture does not match the config and dataset"));
    }

    let x = mlp::embedding_matrix(&ds);
    let labels = ds.labels();
    let ids: Vec<String> = ds.samples().iter().map(|s| s.id.clone()).collect();
    let pick = |idx: &[usize]| -> (Vec<String>, Vec<usize>) {
        (idx.iter().map(|&i| ids[i].clone()).collect(), idx.iter().map(|&i| labels[i]).collect())
    };

    let cal_probs = mlp::predict_proba(&params, &x.select_rows(&split.calibration))?;
    let (_, cal_truth) = pick(&split.calibration);
    let scores = conformal::nonconformity_scores(&cal_probs, &cal_truth)?;
    let calibration = conformal::calibrate(&scores, config.alpha)?;

    let test_probs = mlp::predict_proba(&params, &x.select_rows(&split.test))?;
    let (test_ids, test_truth) = pick(&split.test);
    let sets = conformal::predict_sets(&test_probs, &test_ids, Some(&test_truth), &calibration)?;
    let coverage = conformal::empirical_coverage(&sets)?;

    ensure_dir(out)?;
    let cal_path = out.join(CALIBRATION_FILE);
    write_json(&cal_path, &calibration)?;
    check_reread(&cal_path, &calibration, &read_json(&cal_path)?)?;
    let sets_path = out.join(SETS_FILE);
    conformal::write_prediction_sets(&sets, &sets_path)?;
    let reread = conformal::read_prediction_sets(&sets_path)?;
    if reread.len() != sets.len() || reread.iter().zip(&sets).any(|(a, b)| a.sample_id != b.sample_id || a.size() != b.size()) {
        return Err(Error::data(format!("{} does not read back as written", sets_path.display())));
    }

    // Built from the sets as stored (6-decimal confidences) so that `report`
    // reproduces it exactly from the file.
    let report = write_report(config, &ds, &reread)?;
    let summary = AuditSummary {
        alpha: config.alpha,
        n_calibration: calibration.n_calibration,
        n_test: sets.len(),
        empirical_coverage: coverage,
        coverage_band: calibration.coverage_band(),
        mean_set_size: sets.iter().map(|s| s.size()).sum::<usize>() as f64 / sets.len() as f64,
    };
    let summary_path = out.join(AUDIT_SUMMARY_FILE);
    write_json(&summary_path, &summary)?;
    check_reread(&summary_path, &summary, &read_json(&summary_path)?)?;
    Ok(AuditOutcome {
        calibration,
        sets,
        report,
        summary,
    })
}

fn write_report(config: &PipelineConfig, ds: &Dataset, sets: &[PredictionSet]) -> Result<FairnessReport> {
    let report = fairness::build_fairness_report(sets, &ds.metadata_by_id(), ds.class_names(), &config.report_axes)?;
    let dir = config.output_dir.join(REPORT_DIR);
    ensure_dir(&dir)?;
    fairness::write_report(&report, &dir)?;
    let path = dir.join(fairness::REPORT_FILE);
    check_reread(&path, &report, &fairness::read_report(&path)?)?;
    Ok(report)
}

/// Rebuilds the fairness report from an existing prediction-set file
/// (default: the one in the output directory).
pub fn run_report(config: &PipelineConfig, sets_path: Option<&Path>) -> Result<FairnessReport> {
    let path = sets_path.map_or_else(|| config.output_dir.join(SETS_FILE), Path::to_path_buf);
    let sets = conformal::read_prediction_sets(&path)?;
    let ds = dataset(config)?;
    write_report(config, &ds, &sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::ThresholdPolicy;

    const MINIMAL: &str = r#"
seed = 3
alpha = 0.2

[synth]
n_classes = 2
embedding_dim = 4
class_counts = [20, 20]
class_separation = 3.0
noise_sigma = 0.5
"#;

    #[test]
    fn minimal_config_defaults() {
        let cfg = PipelineConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.sampler, SamplerSetting::default());
        assert_eq!(cfg.report_axes.len(), 5);
        assert_eq!(cfg.synth_config().unwrap().seed, seed::stream_seed(3, seed::SYNTH));
        assert_eq!(cfg.train_config().seed, 3);
    }

    #[test]
    fn explicit_synth_seed_wins() {
        let cfg = PipelineConfig::from_toml_str(&MINIMAL.replace("[synth]", "[synth]\nseed = 99")).unwrap();
        assert_eq!(cfg.synth_config().unwrap().seed, 99);
    }

    #[test]
    fn sampler_settings() {
        let cfg = PipelineConfig::from_toml_str(&format!("sampler = \"unsampled\"\n{MINIMAL}")).unwrap();
        assert!(cfg.train_config().sampler.is_none());

        let text = MINIMAL.replace(
            "alpha = 0.2",
            "alpha = 0.2\nreport_axes = [\"sex+age_band\"]\n\n[sampler]\nupdate_period = 2\nlambda_policy = { fixed = 0.3 }",
        );
        let cfg = PipelineConfig::from_toml_str(&text).unwrap();
        let s = cfg.train_config().sampler.unwrap();
        assert_eq!(s.update_period, 2);
        assert_eq!(s.lambda_policy, ThresholdPolicy::Fixed(0.3));
        assert_eq!(s.cv_folds, 10);
        assert_eq!(cfg.report_axes, vec![Grouping(vec![Axis::Sex, Axis::AgeBand])]);
    }

    #[test]
    fn rejects_bad_configs() {
        let no_source = "seed = 1\nalpha = 0.2\n";
        assert_eq!(PipelineConfig::from_toml_str(no_source).unwrap_err().exit_code(), 2);

        let both = format!("{MINIMAL}\n[data]\nembeddings = \"e\"\nlabels = \"l\"\n");
        assert!(PipelineConfig::from_toml_str(&both).is_err());

        for alpha in ["0.0", "1.0", "1.5"] {
            let t = MINIMAL.replace("alpha = 0.2", &format!("alpha = {alpha}"));
            assert!(PipelineConfig::from_toml_str(&t).is_err(), "alpha {alpha}");
        }
        assert!(PipelineConfig::from_toml_str(&format!("bogus = 1\n{MINIMAL}")).is_err());
    }
}
