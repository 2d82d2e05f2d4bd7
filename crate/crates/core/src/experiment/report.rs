use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, Method};
use crate::error::{Error, Result};
use crate::federation::{CommLedger, Direction, LedgerRow, Stage, Traffic};
use crate::injection::InjectionCoefficients;
use crate::nn::PretrainReport;
use crate::task::Metrics;

/// Bumped on any incompatible change to [`ExperimentReport`].
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub metrics: Metrics,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientScore {
    pub client: u16,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// One federated calibration round: the global coefficients on the test
/// set and, when the local-only baseline ran, every client's locally
/// calibrated coefficients after the same number of rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    /// Absent when the federated method was not run.
    pub global: Option<Metrics>,
    pub local: Vec<ClientScore>,
    pub reported: Vec<u16>,
    pub excluded: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client: u16,
    pub shard_size: usize,
    pub demonstrations: usize,
    pub class_counts: Vec<usize>,
    pub calibration_steps: usize,
}

/// The ledger, flattened. Every number here is read off the bus ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommSummary {
    pub rows: Vec<LedgerRow>,
    pub uplink: Traffic,
    pub downlink: Traffic,
    pub per_stage: Vec<StageTraffic>,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTraffic {
    pub stage: Stage,
    pub uplink: Traffic,
    pub downlink: Traffic,
}

impl CommSummary {
    pub fn from_ledger(ledger: &CommLedger) -> Self {
        let per_stage = [Stage::ContextVectors, Stage::Calibration, Stage::Deployment]
            .into_iter()
            .map(|stage| StageTraffic {
                stage,
                uplink: ledger.stage_total(stage, Direction::Uplink),
                downlink: ledger.stage_total(stage, Direction::Downlink),
            })
            .collect();
        Self {
            rows: ledger.rows(),
            uplink: ledger.total(Direction::Uplink),
            downlink: ledger.total(Direction::Downlink),
            per_stage,
            total_bytes: ledger.total_bytes(),
        }
    }
}

/// One JSON document per run. See the README for the field reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub run_id: String,
    pub seed: u64,
    pub threads: usize,
    pub model_fingerprint: String,
    pub manifest: Manifest,
    pub methods: BTreeMap<Method, MethodResult>,
    pub rounds: Vec<RoundRecord>,
    pub final_coefficients: InjectionCoefficients,
    pub clients: Vec<ClientSummary>,
    pub communication: CommSummary,
    /// Wall-clock seconds per phase; machine-local.
    pub timings: BTreeMap<String, f64>,
}

impl ExperimentReport {
    pub fn metrics(&self, method: Method) -> Result<Metrics> {
        self.methods
            .get(&method)
            .map(|r| r.metrics)
            .ok_or_else(|| Error::Manifest(format!("report has no {} result", method.name())))
    }

    /// Every method the manifest names has a result, all scores are
    /// probabilities, and the round series is complete.
    pub fn check(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Manifest(format!(
                "report schema {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for &m in &self.manifest.methods {
            self.metrics(m)?;
        }
        let mut scores: Vec<f64> = self.methods.values().flat_map(|r| [r.metrics.accuracy, r.metrics.macro_f1]).collect();
        for r in &self.rounds {
            scores.extend(r.global.iter().flat_map(|g| [g.accuracy, g.macro_f1]));
            scores.extend(r.local.iter().flat_map(|c| [c.accuracy, c.macro_f1]));
        }
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Manifest(format!("score {bad} outside [0, 1]")));
        }
        let federated = self.manifest.wants(Method::IfedIcl) || self.manifest.wants(Method::LocalOnlyInjection);
        if federated && self.rounds.len() != self.manifest.rounds {
            return Err(Error::Manifest(format!(
                "{} round records for {} rounds",
                self.rounds.len(),
                self.manifest.rounds
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        report.check()?;
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        crate::nn::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Summary written next to a pretrained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub model_fingerprint: String,
    pub n_params: usize,
    pub corpus_docs: usize,
    pub seconds: f64,
    pub report: PretrainReport,
}

/// One row of the global-versus-local comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub round: u32,
    pub global_accuracy: f64,
    pub mean_local_accuracy: f64,
    pub local_accuracies: Vec<f64>,
}

/// Per-round global accuracy against the locally calibrated clients.
pub fn compare_local_global(report: &ExperimentReport) -> Result<Vec<CompareRow>> {
    if report.rounds.len() != report.manifest.rounds {
        return Err(Error::Manifest(format!(
            "report holds {} of {} rounds",
            report.rounds.len(),
            report.manifest.rounds
        )));
    }
    report
        .rounds
        .iter()
        .map(|r| {
            let global = r
                .global
                .ok_or_else(|| Error::Manifest(format!("round {} has no global score", r.round)))?;
            if r.local.is_empty() {
                return Err(Error::Manifest(format!("round {} has no per-client series", r.round)));
            }
            let local: Vec<f64> = r.local.iter().map(|c| c.accuracy).collect();
            Ok(CompareRow {
                round: r.round,
                global_accuracy: global.accuracy,
                mean_local_accuracy: local.iter().sum::<f64>() / local.len() as f64,
                local_accuracies: local,
            })
        })
        .collect()
}

/// Tab-separated rendering of [`compare_local_global`] with a header line.
pub fn compare_table(rows: &[CompareRow]) -> String {
    let width = rows.first().map_or(0, |r| r.local_accuracies.len());
    let mut out = String::from("round\tglobal\tmean_local");
    for k in 0..width {
        out.push_str(&format!("\tclient{k}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{}\t{:.4}\t{:.4}", r.round, r.global_accuracy, r.mean_local_accuracy));
        for a in &r.local_accuracies {
            out.push_str(&format!("\t{a:.4}"));
        }
        out.push('\n');
    }
    out
}
