use crate::config::{AttackLoss, ExperimentConfig, Task};
use crate::error::{CliError, CliResult};
use crate::report::RunReport;
use dsui_core::data::{fgsm_perturb, gen_uniform_noise, Batch, DatasetSpec, FgsmConfig, FgsmLoss};
use dsui_core::model::Model;
use dsui_core::nn::{argmax_rows, train, write_history_csv};
use dsui_core::uq::{aupr, auroc, read_scores_csv, uncertainty_scores, write_scores_csv, Measure, ScoreSource};
use dsui_core::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const SCORES_DIR: &str = "scores";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

/// Written last in a seed directory; its presence marks the seed complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub config_hash: String,
    pub task: Task,
    pub metrics: BTreeMap<String, f64>,
}

fn mkdir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(seed.to_string())
}

/// Runs every seed that has no summary yet, then aggregates all seeds from
/// their persisted CSVs. Completed seeds survive a failure in a later one.
pub fn run(cfg: &ExperimentConfig) -> CliResult<RunReport> {
    cfg.validate()?;
    let run_dir = cfg.run_dir()?;
    let hash = cfg.hash()?;
    mkdir(&run_dir)?;
    let cfg_path = run_dir.join(CONFIG_FILE);
    if !cfg_path.exists() {
        let mut canon = cfg.clone();
        canon.seeds.clear();
        write(&cfg_path, canon.to_toml()?.as_bytes())?;
    }
    for &seed in &cfg.seeds {
        let dir = seed_dir(&run_dir, seed);
        if dir.join(SUMMARY_FILE).exists() {
            log::info!("seed {} already complete in {}", seed, dir.display());
            continue;
        }
        log::info!("seed {}: training", seed);
        run_seed(cfg, seed, &dir)?;
        let summary = SeedSummary {
            seed,
            config_hash: hash.clone(),
            task: cfg.task,
            metrics: seed_metrics(&dir)?,
        };
        write(&dir.join(SUMMARY_FILE), json_bytes(&summary)?.as_slice())?;
    }
    let report = RunReport::from_run_dir(&run_dir, &hash, cfg.task, &cfg.seeds)?;
    report.save(&run_dir)?;
    Ok(report)
}

pub(crate) fn json_bytes<T: Serialize>(v: &T) -> CliResult<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn infer_classes(cfg: &ExperimentConfig, train: &Batch) -> CliResult<usize> {
    let labels = train
        .labels
        .as_ref()
        .ok_or_else(|| CliError::Validation("training set has no labels".into()))?;
    let seen = labels.iter().max().map_or(0, |m| m + 1);
    match cfg.classes {
        Some(c) if c < seen => Err(CliError::Validation(format!(
            "label {} out of range for {} classes",
            seen - 1,
            c
        ))),
        Some(c) => Ok(c),
        None if seen < 2 => Err(CliError::Validation("training labels cover fewer than two classes".into())),
        None => Ok(seen),
    }
}

fn probs(model: &Model, x: &Tensor) -> CliResult<[(ScoreSource, Tensor); 2]> {
    let p = model.predict(x)?;
    Ok([(ScoreSource::Softmax, p.softmax), (ScoreSource::Posterior, p.posterior)])
}

fn scores_name(prefix: &str, measure: Measure, source: ScoreSource) -> String {
    format!("{}{}-{}.csv", prefix, measure.name(), source.name())
}

/// Writes one scores file per (measure, source) for an in/out comparison.
fn write_ood_scores(dir: &Path, prefix: &str, model: &Model, inside: &Tensor, outside: &Tensor) -> CliResult<()> {
    let a = probs(model, inside)?;
    let b = probs(model, outside)?;
    for ((source, pa), (_, pb)) in a.iter().zip(&b) {
        for measure in Measure::ALL {
            let mut values = uncertainty_scores(pa, measure, *source)?.values;
            values.extend(uncertainty_scores(pb, measure, *source)?.values);
            let mut labels = vec![false; pa.dims2()?.0];
            labels.resize(values.len(), true);
            write_scores_csv(&dir.join(scores_name(prefix, measure, *source)), &values, &labels)?;
        }
    }
    Ok(())
}

fn attack(cfg: &ExperimentConfig, epsilon: f64) -> FgsmConfig {
    FgsmConfig {
        epsilon,
        loss: match cfg.fgsm.loss {
            AttackLoss::Total => FgsmLoss::Total(cfg.train.loss.clone()),
            AttackLoss::CrossEntropy => FgsmLoss::CrossEntropy,
        },
        clamp: cfg.fgsm.clamp.map(|[lo, hi]| (lo, hi)),
    }
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> CliResult<()> {
    let train_set = cfg.dataset_for_seed(&cfg.data.train, seed).materialize()?;
    let test = cfg.dataset_for_seed(&cfg.data.test, seed).materialize()?;
    let classes = infer_classes(cfg, &train_set)?;
    test.check_labels(classes)?;
    if test.dim() != train_set.dim() {
        return Err(CliError::Validation(format!(
            "test dimension {} differs from train dimension {}",
            test.dim(),
            train_set.dim()
        )));
    }
    let outcome = train(&cfg.train, &train_set, classes, seed)?;
    let model = outcome.model;

    mkdir(&dir.join(SCORES_DIR))?;
    model.save(&dir.join(CHECKPOINT_FILE))?;
    write_history_csv(&outcome.history, &dir.join(HISTORY_FILE))?;

    let labels = test.labels.as_ref().expect("checked labeled");
    let test_probs = probs(&model, &test.features)?;
    write_predictions(&dir.join(PREDICTIONS_FILE), labels, &test_probs)?;

    let scores = dir.join(SCORES_DIR);
    match cfg.task {
        Task::Misclassification => {
            for (source, p) in &test_probs {
                let wrong: Vec<bool> = argmax_rows(p)?.iter().zip(labels).map(|(a, b)| a != b).collect();
                for measure in Measure::ALL {
                    let s = uncertainty_scores(p, measure, *source)?;
                    write_scores_csv(&scores.join(scores_name("", measure, *source)), &s.values, &wrong)?;
                }
            }
        }
        Task::Ood => {
            let spec = cfg.data.ood.as_ref().expect("validated");
            let out = match spec {
                DatasetSpec::FgsmDerived { epsilon } => fgsm_perturb(&model, &test, &attack(cfg, *epsilon))?,
                other => cfg.dataset_for_seed(other, seed).materialize()?,
            };
            if out.dim() != test.dim() {
                return Err(CliError::Validation("OOD set dimension differs from test set".into()));
            }
            write_ood_scores(&scores, "", &model, &test.features, &out.features)?;
        }
        Task::NoiseOod => {
            let noise = gen_uniform_noise(test.len(), test.dim(), seed)?;
            write_ood_scores(&scores, "", &model, &test.features, &noise.features)?;
        }
        Task::FgsmSweep => {
            for &eps in &cfg.fgsm.epsilons {
                let adv = fgsm_perturb(&model, &test, &attack(cfg, eps))?;
                write_ood_scores(&scores, &format!("eps{}-", eps), &model, &test.features, &adv.features)?;
            }
        }
    }
    Ok(())
}

fn write_predictions(path: &Path, labels: &[usize], probs: &[(ScoreSource, Tensor); 2]) -> CliResult<()> {
    let soft = argmax_rows(&probs[0].1)?;
    let post = argmax_rows(&probs[1].1)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "softmax", "posterior"])?;
    for i in 0..labels.len() {
        w.write_record([labels[i].to_string(), soft[i].to_string(), post[i].to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// Recomputes every metric of one seed from its CSV files.
pub fn seed_metrics(dir: &Path) -> CliResult<BTreeMap<String, f64>> {
    let mut metrics = BTreeMap::new();
    let mut r = csv::Reader::from_path(dir.join(PREDICTIONS_FILE))?;
    let (mut n, mut soft, mut post) = (0usize, 0usize, 0usize);
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| -> CliResult<usize> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::Validation(format!("malformed predictions row {:?}", rec)))
        };
        let y = field(0)?;
        soft += (field(1)? == y) as usize;
        post += (field(2)? == y) as usize;
        n += 1;
    }
    if n > 0 {
        metrics.insert("accuracy/softmax".to_string(), soft as f64 / n as f64);
        metrics.insert("accuracy/posterior".to_string(), post as f64 / n as f64);
    }
    let scores_dir = dir.join(SCORES_DIR);
    let mut files: Vec<PathBuf> = fs::read_dir(&scores_dir)
        .map_err(|e| CliError::io(&scores_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    for f in files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let (values, labels) = read_scores_csv(&f)?;
        metrics.insert(format!("auroc/{}", stem), auroc(&values, &labels)?);
        metrics.insert(format!("aupr/{}", stem), aupr(&values, &labels)?);
    }
    Ok(metrics)
}
