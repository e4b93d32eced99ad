//! Aggregation of persisted artifacts into the comparison report.
//!
//! Every figure is recomputed from files on disk: prediction errors from
//! the checkpoint and test set, symbol counts from the checkpoint and
//! dataset, primitives from the library, success rates from the plan log.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{atomic_write, dataset_hash};
use crate::error::{Error, Result};
use crate::explorer::Strategy;
use crate::harness::config::ExperimentConfig;
use crate::harness::experiment::{
    evaluate_prediction_error, file_digest, load_dataset, load_library, load_model, load_test_set, read_jsonl,
    training_rows, Layout, PlanRecord,
};
use crate::scalar::Scalar;
use crate::symbols::{enumerate_action_symbols, enumerate_object_symbols, PrimitiveLabel, SymbolCode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PlanStats {
    pub tasks: usize,
    pub found: usize,
    pub succeeded: usize,
}

impl PlanStats {
    fn from_records<'a>(records: impl Iterator<Item = &'a PlanRecord>) -> Self {
        let mut s = Self::default();
        for r in records {
            s.tasks += 1;
            s.found += usize::from(r.found);
            s.succeeded += usize::from(r.success);
        }
        s
    }

    /// Execution success in percent.
    pub fn success_rate(&self) -> f64 {
        percent(self.succeeded, self.tasks)
    }

    pub fn found_rate(&self) -> f64 {
        percent(self.found, self.tasks)
    }
}

fn percent(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolCount {
    pub code: SymbolCode,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSummary {
    pub code: SymbolCode,
    pub label: Option<PrimitiveLabel>,
    pub residual: f64,
}

/// One strategy × seed row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub strategy: Strategy,
    pub seed: u64,
    pub config_hash: String,
    pub mae: [f64; 3],
    pub interactions: usize,
    pub training_rows: usize,
    pub action_symbols: Vec<SymbolCount>,
    pub object_symbols: Vec<SymbolCount>,
    pub primitives: Vec<PrimitiveSummary>,
    pub rejected: Vec<SymbolCode>,
    /// Distinct non-null labels.
    pub labels: Vec<PrimitiveLabel>,
    pub single: PlanStats,
    pub double: PlanStats,
    /// SHA-256 of each input artifact, plus the dataset content hash.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub cells: Vec<CellSummary>,
}

fn counts(v: Vec<(SymbolCode, usize)>) -> Vec<SymbolCount> {
    v.into_iter().map(|(code, count)| SymbolCount { code, count }).collect()
}

fn summarize_cell<T: Scalar>(config: &ExperimentConfig, seed: u64, strategy: Strategy, layout: &Layout) -> Result<CellSummary> {
    let model = load_model::<T>(config, seed, strategy, layout)?;
    let dataset = load_dataset(config, seed, strategy, layout)?;
    let test = load_test_set(config, seed, layout)?;
    let library = load_library(config, seed, strategy, layout)?;
    let plans: Vec<PlanRecord> = read_jsonl(&layout.plans(seed, strategy))?;

    let mut artifacts = BTreeMap::new();
    for (name, path) in [
        ("dataset.csv", layout.dataset(seed, strategy)),
        ("model.ckpt", layout.checkpoint(seed, strategy)),
        ("library.json", layout.library(seed, strategy)),
        ("plans.jsonl", layout.plans(seed, strategy)),
        ("test.csv", layout.test_set(seed)),
        ("tasks.json", layout.tasks(seed)),
    ] {
        artifacts.insert(name.to_string(), file_digest(&path)?);
    }
    artifacts.insert("dataset.rows".to_string(), dataset_hash(&dataset));

    Ok(CellSummary {
        strategy,
        seed,
        config_hash: config.config_hash(strategy),
        mae: evaluate_prediction_error(&model, &test)?,
        interactions: dataset.len(),
        training_rows: training_rows(config, strategy, &dataset).len(),
        action_symbols: counts(enumerate_action_symbols(&model, &dataset)),
        object_symbols: counts(enumerate_object_symbols(&model, &dataset)),
        primitives: library
            .primitives
            .iter()
            .map(|p| PrimitiveSummary {
                code: p.code.clone(),
                label: p.label,
                residual: p.residual,
            })
            .collect(),
        rejected: library.rejected.iter().map(|r| r.code.clone()).collect(),
        labels: library.distinct_labels(),
        single: PlanStats::from_records(plans.iter().filter(|r| r.objects == 1)),
        double: PlanStats::from_records(plans.iter().filter(|r| r.objects == 2)),
        artifacts,
    })
}

/// Rebuild the report from the artifacts under `layout`.
pub fn build_report(config: &ExperimentConfig, layout: &Layout) -> Result<Report> {
    let mut cells = Vec::new();
    for &seed in &config.seeds {
        for &strategy in &config.strategies {
            cells.push(crate::with_precision!(
                config.model.precision,
                summarize_cell(config, seed, strategy, layout)
            )?);
        }
    }
    Ok(Report {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: config.seeds.clone(),
        strategies: config.strategies.clone(),
        cells,
    })
}

impl Report {
    pub fn cell(&self, seed: u64, strategy: Strategy) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.seed == seed && c.strategy == strategy)
    }

    /// One JSON object per cell, preceded by a header line.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Header<'a> {
            version: &'a str,
            seeds: &'a [u64],
            strategies: &'a [Strategy],
        }
        let mut out = serde_json::to_string(&Header {
            version: &self.version,
            seeds: &self.seeds,
            strategies: &self.strategies,
        })
        .expect("serializes");
        out.push('\n');
        for c in &self.cells {
            out.push_str(&serde_json::to_string(c).expect("serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            version: String,
            seeds: Vec<u64>,
            strategies: Vec<Strategy>,
        }
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Header = serde_json::from_str(lines.next().ok_or_else(|| Error::format("report", "empty"))?)
            .map_err(|e| Error::format("report", e))?;
        let cells = lines
            .map(|l| serde_json::from_str(l).map_err(|e| Error::format("report", e)))
            .collect::<Result<_>>()?;
        Ok(Self {
            version: header.version,
            seeds: header.seeds,
            strategies: header.strategies,
            cells,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "curiosym report v{}", self.version);
        let _ = writeln!(s);
        let _ = writeln!(s, "Prediction error (mean absolute, m)");
        let _ = writeln!(s, "{:<10} {:>5} {:>10} {:>10} {:>10}", "strategy", "seed", "x", "y", "z");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:<10} {:>5} {:>10.6} {:>10.6} {:>10.6}",
                c.strategy.name(),
                c.seed,
                c.mae[0],
                c.mae[1],
                c.mae[2]
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Action primitives");
        let _ = writeln!(s, "{:<10} {:>5} {:>7} {:>7}  labels", "strategy", "seed", "codes", "labels");
        for c in &self.cells {
            let names: Vec<&str> = c.labels.iter().map(|l| l.name()).collect();
            let _ = writeln!(
                s,
                "{:<10} {:>5} {:>7} {:>7}  {}",
                c.strategy.name(),
                c.seed,
                c.action_symbols.len(),
                c.labels.len(),
                if names.is_empty() { "-".to_string() } else { names.join(", ") }
            );
            for p in &c.primitives {
                let _ = writeln!(
                    s,
                    "{:>18} {} {:<15} residual {:.4}",
                    "",
                    p.code,
                    p.label.map_or("-", |l| l.name()),
                    p.residual
                );
            }
            for r in &c.rejected {
                let _ = writeln!(s, "{:>18} {} {:<15}", "", r, "(not realized)");
            }
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Planning (execution success %, plan found %)");
        let _ = writeln!(
            s,
            "{:<10} {:>5} {:>9} {:>9} {:>9} {:>9}",
            "strategy", "seed", "single", "found", "double", "found"
        );
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:<10} {:>5} {:>9.1} {:>9.1} {:>9.1} {:>9.1}",
                c.strategy.name(),
                c.seed,
                c.single.success_rate(),
                c.single.found_rate(),
                c.double.success_rate(),
                c.double.found_rate()
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Provenance");
        for c in &self.cells {
            let _ = writeln!(s, "{}/seed-{} config {}", c.strategy.name(), c.seed, c.config_hash);
            for (k, v) in &c.artifacts {
                let _ = writeln!(s, "  {k:<13} {v}");
            }
        }
        s
    }

    pub fn save(&self, layout: &Layout) -> Result<()> {
        atomic_write(&layout.report_text(), self.to_text().as_bytes())?;
        atomic_write(&layout.report_jsonl(), self.to_jsonl().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(strategy: Strategy) -> CellSummary {
        CellSummary {
            strategy,
            seed: 1,
            config_hash: "h".into(),
            mae: [0.01, 0.02, 0.003],
            interactions: 10,
            training_rows: 10,
            action_symbols: vec![SymbolCount {
                code: "101".parse().unwrap(),
                count: 10,
            }],
            object_symbols: vec![],
            primitives: vec![PrimitiveSummary {
                code: "101".parse().unwrap(),
                label: Some(PrimitiveLabel::Pull),
                residual: 0.01,
            }],
            rejected: vec![],
            labels: vec![PrimitiveLabel::Pull],
            single: PlanStats {
                tasks: 4,
                found: 3,
                succeeded: 1,
            },
            double: PlanStats::default(),
            artifacts: BTreeMap::new(),
        }
    }

    #[test]
    fn jsonl_roundtrip_and_text() {
        let r = Report {
            version: "0.1.0".into(),
            seeds: vec![1],
            strategies: vec![Strategy::Curiosity, Strategy::Random],
            cells: vec![cell(Strategy::Curiosity), cell(Strategy::Random)],
        };
        assert_eq!(Report::from_jsonl(&r.to_jsonl()).unwrap(), r);
        let text = r.to_text();
        assert!(text.contains("curiosity"));
        assert!(text.contains("pull"));
        assert_eq!(r.cell(1, Strategy::Random).unwrap().single.success_rate(), 25.0);
        assert_eq!(PlanStats::default().success_rate(), 0.0);
    }
}
