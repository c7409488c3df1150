use crate::error::{CliError, CliResult};
use dsui_core::data::DatasetSpec;
use dsui_core::nn::TrainConfig;
use dsui_core::uq::ScoreSource;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Rank test samples so that mispredicted ones score higher.
    Misclassification,
    /// Test set against the configured `data.ood` set.
    Ood,
    /// Test set against uniform `[0, 1]` noise of matching dimension.
    NoiseOod,
    /// Test set against its FGSM perturbation, for every ε.
    FgsmSweep,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Misclassification => "misclassification",
            Task::Ood => "ood",
            Task::NoiseOod => "noise-ood",
            Task::FgsmSweep => "fgsm-sweep",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DatasetSpec,
    pub test: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood: Option<DatasetSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackLoss {
    /// The training objective with the run's loss weights.
    Total,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FgsmSettings {
    pub epsilons: Vec<f64>,
    pub loss: AttackLoss,
    /// `[lo, hi]` box for perturbed inputs; omit to disable clamping.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clamp: Option<[f64; 2]>,
}

impl Default for FgsmSettings {
    fn default() -> Self {
        Self {
            epsilons: (1..=10).map(|n| n as f64 / 10.0).collect(),
            loss: AttackLoss::Total,
            clamp: Some([0.0, 1.0]),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_outdir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_source() -> ScoreSource {
    ScoreSource::Softmax
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_outdir")]
    pub outdir: PathBuf,
    /// Probability source for predictions and plots; metrics are reported
    /// for both sources.
    #[serde(default = "default_source")]
    pub score_source: ScoreSource,
    /// Number of classes; inferred from the training labels when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    /// Add the run seed to every synthetic dataset seed.
    #[serde(default = "yes")]
    pub vary_data: bool,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub fgsm: FgsmSettings,
    pub data: DataConfig,
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Checks everything that can be checked before training starts.
    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(CliError::Validation("seed list is empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(CliError::Validation("seed list has duplicates".into()));
        }
        if self.classes == Some(0) || self.classes == Some(1) {
            return Err(CliError::Validation("need at least two classes".into()));
        }
        for (name, spec) in [("train", &self.data.train), ("test", &self.data.test)] {
            if matches!(spec, DatasetSpec::FgsmDerived { .. } | DatasetSpec::UniformNoise { .. }) {
                return Err(CliError::Validation(format!("{} set must be labeled data", name)));
            }
        }
        let mut specs = vec![&self.data.train, &self.data.test];
        specs.extend(self.data.ood.as_ref());
        for spec in specs {
            for p in spec.paths() {
                if !p.exists() {
                    return Err(CliError::Validation(format!("{} does not exist", p.display())));
                }
            }
        }
        match self.task {
            Task::Ood if self.data.ood.is_none() => {
                return Err(CliError::Validation("task ood needs data.ood".into()))
            }
            Task::FgsmSweep => {
                if self.fgsm.epsilons.is_empty()
                    || self.fgsm.epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite()))
                {
                    return Err(CliError::Validation("FGSM epsilons must be finite and >= 0".into()));
                }
            }
            _ => {}
        }
        if let Some(DatasetSpec::FgsmDerived { epsilon }) = &self.data.ood {
            if !(*epsilon >= 0.0 && epsilon.is_finite()) {
                return Err(CliError::Validation("fgsm-derived epsilon must be >= 0".into()));
            }
        }
        if let Some([lo, hi]) = self.fgsm.clamp {
            if !(lo < hi) {
                return Err(CliError::Validation("FGSM clamp needs lo < hi".into()));
            }
        }
        Ok(())
    }

    /// Content hash of everything that affects a single seed's results.
    /// Seeds and the output directory are excluded so that adding seeds or
    /// moving the output reuses completed work.
    pub fn hash(&self) -> CliResult<String> {
        let mut canon = self.clone();
        canon.seeds.clear();
        canon.outdir = PathBuf::new();
        let digest = Sha256::digest(canon.to_toml()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{:02x}", b)).collect())
    }

    /// Directory holding every seed of this configuration.
    pub fn run_dir(&self) -> CliResult<PathBuf> {
        Ok(self.outdir.join(self.hash()?))
    }

    /// A dataset spec with its seed shifted by the run seed when enabled.
    pub fn dataset_for_seed(&self, spec: &DatasetSpec, run_seed: u64) -> DatasetSpec {
        if !self.vary_data {
            return spec.clone();
        }
        let mut spec = spec.clone();
        match &mut spec {
            DatasetSpec::Blobs { seed, .. } | DatasetSpec::UniformNoise { seed, .. } => {
                *seed = seed.wrapping_add(run_seed)
            }
            _ => {}
        }
        spec
    }
}
