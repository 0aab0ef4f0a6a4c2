use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{DataPaths, ExperimentConfig, Strategy};
use super::data::Dataset;
use super::evaluate::evaluate_model;
use super::train::train;
use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU};
use crate::scalar::Scalar;

fn default_conf() -> f64 {
    DEFAULT_CONF_THRESHOLD
}
fn default_nms() -> f64 {
    DEFAULT_NMS_IOU
}

/// One config per strategy over a shared corpus, run for every seed and
/// scored on a held-out degraded split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub experiments: Vec<ExperimentConfig>,
    pub seeds: Vec<u64>,
    /// Held-out split; labels sit next to `degraded` images.
    pub test: DataPaths,
    #[serde(default = "default_conf")]
    pub conf_threshold: f64,
    #[serde(default = "default_nms")]
    pub nms_iou: f64,
}

impl CompareConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut unknown = Vec::new();
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: CompareConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::config(format!("malformed compare config: {e}")))?;
        if !unknown.is_empty() {
            return Err(Error::config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        for e in &cfg.experiments {
            e.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn test_data<T: Scalar>(&self) -> Result<Dataset<T>> {
        let dir = self.test.degraded.as_deref().ok_or_else(|| Error::config("compare needs test.degraded"))?;
        Dataset::load_dir(dir)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub strategy: Strategy,
    pub seed: u64,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map75: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyMean {
    pub strategy: Strategy,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map75: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub means: Vec<StrategyMean>,
}

impl CompareReport {
    pub fn from_rows(rows: Vec<CompareRow>) -> Self {
        let mut groups: BTreeMap<Strategy, Vec<&CompareRow>> = BTreeMap::new();
        for r in &rows {
            groups.entry(r.strategy).or_default().push(r);
        }
        let means = groups
            .into_iter()
            .map(|(strategy, rs)| {
                let m = |f: fn(&CompareRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
                StrategyMean {
                    strategy,
                    precision: m(|r| r.precision),
                    recall: m(|r| r.recall),
                    map50: m(|r| r.map50),
                    map75: m(|r| r.map75),
                }
            })
            .collect();
        CompareReport { rows, means }
    }

    pub fn mean(&self, strategy: Strategy) -> Option<&StrategyMean> {
        self.means.iter().find(|m| m.strategy == strategy)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Aligned plain-text table: one line per run, then one per mean.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12} {:>6} {:>9} {:>7} {:>7} {:>7}\n", "strategy", "seed", "precision", "recall", "map50", "map75");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>9.4} {:>7.4} {:>7.4} {:>7.4}",
                r.strategy.name(),
                r.seed,
                r.precision,
                r.recall,
                r.map50,
                r.map75
            );
        }
        for m in &self.means {
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>9.4} {:>7.4} {:>7.4} {:>7.4}",
                m.strategy.name(),
                "mean",
                m.precision,
                m.recall,
                m.map50,
                m.map75
            );
        }
        out
    }
}

/// Checks that the configs name distinct strategies over one corpus.
pub fn check_experiments(experiments: &[ExperimentConfig]) -> Result<()> {
    let first = experiments.first().ok_or_else(|| Error::config("compare needs at least one experiment"))?;
    let mut seen = Vec::new();
    for e in experiments {
        if e.data != first.data {
            return Err(Error::config(format!(
                "experiment {} uses corpus {:?}, but {} uses {:?}",
                e.strategy, e.data, first.strategy, first.data
            )));
        }
        if e.precision != first.precision {
            return Err(Error::config("experiments disagree on precision"));
        }
        if seen.contains(&e.strategy) {
            return Err(Error::config(format!("strategy {} listed twice", e.strategy)));
        }
        seen.push(e.strategy);
    }
    Ok(())
}

/// Trains every experiment once per seed on `train_data` (which must be
/// paired when any strategy restores) and scores each on `test_data`.
pub fn compare_strategies<T: Scalar>(
    experiments: &[ExperimentConfig],
    seeds: &[u64],
    train_data: &Dataset<T>,
    test_data: &Dataset<T>,
    conf_threshold: f64,
    nms_iou: f64,
    progress: &mut dyn FnMut(&CompareRow),
) -> Result<CompareReport> {
    check_experiments(experiments)?;
    if seeds.is_empty() {
        return Err(Error::config("compare needs at least one seed"));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        for e in experiments {
            let mut cfg = e.clone();
            cfg.seed = Some(seed);
            let ckpt = train(&cfg, train_data, &mut |_| {})?;
            let r = evaluate_model(&ckpt.model, test_data, conf_threshold, nms_iou)?;
            let row = CompareRow { strategy: e.strategy, seed, precision: r.precision, recall: r.recall, map50: r.map50, map75: r.map75 };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(CompareReport::from_rows(rows))
}
