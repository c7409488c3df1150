use crate::config::Task;
use crate::error::{CliError, CliResult};
use crate::runner::{json_bytes, seed_dir, seed_metrics, write, REPORT_CSV, REPORT_JSON};
use dsui_core::uq::ttest_unpaired;
use dsui_core::Error;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

/// p-values of every metric against a named baseline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineTest {
    pub baseline: String,
    pub p_values: BTreeMap<String, f64>,
}

/// Per-seed metrics of one configuration with their aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub task: Task,
    pub rows: Vec<SeedRow>,
    pub mean: BTreeMap<String, f64>,
    /// Sample standard deviation (n − 1); zero for a single seed.
    pub std: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineTest>,
}

impl RunReport {
    /// Aggregates per-seed rows. Every row must report the same metrics.
    pub fn aggregate(config_hash: &str, task: Task, rows: Vec<SeedRow>) -> CliResult<Self> {
        let first = rows
            .first()
            .ok_or_else(|| CliError::Core(Error::Contract("report needs at least one seed".into())))?;
        let keys: Vec<&String> = first.metrics.keys().collect();
        for r in &rows {
            if r.metrics.keys().collect::<Vec<_>>() != keys {
                return Err(Error::Contract(format!("seed {} reports a different metric set", r.seed)).into());
            }
        }
        let mut mean = BTreeMap::new();
        let mut std = BTreeMap::new();
        for k in keys {
            let v: Vec<f64> = rows.iter().map(|r| r.metrics[k]).collect();
            let (m, s) = mean_std(&v);
            mean.insert(k.clone(), m);
            std.insert(k.clone(), s);
        }
        Ok(Self {
            config_hash: config_hash.to_string(),
            task,
            rows,
            mean,
            std,
            baseline: None,
        })
    }

    /// Rebuilds the report of `seeds` from their persisted CSVs.
    pub fn from_run_dir(run_dir: &Path, config_hash: &str, task: Task, seeds: &[u64]) -> CliResult<Self> {
        let mut rows = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            rows.push(SeedRow {
                seed,
                metrics: seed_metrics(&seed_dir(run_dir, seed))?,
            });
        }
        Self::aggregate(config_hash, task, rows)
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.rows.iter().map(|r| r.seed).collect()
    }

    pub fn values(&self, metric: &str) -> Option<Vec<f64>> {
        self.rows.iter().map(|r| r.metrics.get(metric).copied()).collect()
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> CliResult<()> {
        write(&dir.join(REPORT_JSON), &json_bytes(self)?)?;
        self.write_csv(&dir.join(REPORT_CSV))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// One row per seed followed by `mean` and `std` rows.
    pub fn write_csv(&self, path: &Path) -> CliResult<()> {
        let mut w = csv::Writer::from_path(path)?;
        let keys: Vec<&String> = self.mean.keys().collect();
        let mut header = vec!["seed".to_string()];
        header.extend(keys.iter().map(|k| k.to_string()));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.seed.to_string()];
            rec.extend(keys.iter().map(|k| format!("{:e}", r.metrics[*k])));
            w.write_record(&rec)?;
        }
        for (name, map) in [("mean", &self.mean), ("std", &self.std)] {
            let mut rec = vec![name.to_string()];
            rec.extend(keys.iter().map(|k| format!("{:e}", map[*k])));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| CliError::io(path, e))?;
        Ok(())
    }

    /// Attaches per-metric p-values against `baseline`.
    pub fn attach_baseline(&mut self, name: &str, baseline: &RunReport) -> CliResult<()> {
        let table = compare(self, baseline)?;
        self.baseline = Some(BaselineTest {
            baseline: name.to_string(),
            p_values: table.into_iter().map(|c| (c.metric, c.p_value)).collect(),
        });
        Ok(())
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// Welch t-test of every metric across the seeds of two reports.
pub fn compare(a: &RunReport, b: &RunReport) -> CliResult<Vec<Comparison>> {
    let ka: Vec<&String> = a.mean.keys().collect();
    let kb: Vec<&String> = b.mean.keys().collect();
    if ka != kb {
        return Err(Error::Contract("reports have different metric sets".into()).into());
    }
    let mut out = Vec::with_capacity(ka.len());
    for k in ka {
        let va = a.values(k).expect("aggregated");
        let vb = b.values(k).expect("aggregated");
        let p = ttest_unpaired(&va, &vb)?;
        out.push(Comparison {
            metric: k.clone(),
            mean_a: a.mean[k],
            mean_b: b.mean[k],
            p_value: p,
            significant: p < SIGNIFICANCE_LEVEL,
        });
    }
    Ok(out)
}

pub fn write_comparison_csv(table: &[Comparison], path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "mean_a", "mean_b", "p_value", "significant"])?;
    for c in table {
        w.write_record([
            c.metric.clone(),
            format!("{:e}", c.mean_a),
            format!("{:e}", c.mean_b),
            format!("{:e}", c.p_value),
            c.significant.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}
