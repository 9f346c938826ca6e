//! Report schema: measured constants with two-depth stability verdicts,
//! boolean certificates, and stage provenance. Reports serialize to JSON
//! with a CSV side table of the constants; merging collapses several runs
//! into worst-case values per verifier id.

use crate::config::RunConfig;
use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How a constant should be aggregated and judged.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Worst case is the maximum (testing constants, ratios).
    Upper,
    /// Worst case is the minimum (nondegeneracy floors).
    Lower,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstantRecord {
    pub id: String,
    pub description: String,
    /// Value at the run depth.
    pub coarse: f64,
    /// Value at the refined depth, when the verifier ran at both.
    pub fine: Option<f64>,
    /// `fine / coarse`; 1 for stable zeros.
    pub stability_ratio: Option<f64>,
    pub band: f64,
    pub direction: Direction,
    /// Depth-stability verdict; `None` for record-only constants.
    pub pass: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckRecord {
    pub id: String,
    pub description: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageProvenance {
    pub stage: String,
    pub consumes: Vec<String>,
    pub produces: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerificationReport {
    pub config: RunConfig,
    pub constants: Vec<ConstantRecord>,
    pub checks: Vec<CheckRecord>,
    pub provenance: Vec<StageProvenance>,
    pub passed: bool,
}

/// Ratio of two measured constants, treating a pair of numerical zeros as
/// perfectly stable.
pub fn stability_ratio(coarse: f64, fine: f64) -> f64 {
    let tiny = 1e-12;
    if coarse.abs() < tiny && fine.abs() < tiny {
        return 1.0;
    }
    if coarse.abs() < tiny {
        return f64::INFINITY;
    }
    fine / coarse
}

impl VerificationReport {
    pub fn new(config: RunConfig) -> Self {
        VerificationReport {
            config,
            constants: Vec::new(),
            checks: Vec::new(),
            provenance: Vec::new(),
            passed: true,
        }
    }

    /// Record a constant with a two-depth stability verdict.
    pub fn push_stable(
        &mut self,
        id: &str,
        description: &str,
        coarse: f64,
        fine: f64,
        band: f64,
        direction: Direction,
    ) {
        let ratio = stability_ratio(coarse, fine);
        let pass = ratio.is_finite() && (ratio - 1.0).abs() <= band;
        self.passed &= pass;
        self.constants.push(ConstantRecord {
            id: id.to_string(),
            description: description.to_string(),
            coarse,
            fine: Some(fine),
            stability_ratio: Some(ratio),
            band,
            direction,
            pass: Some(pass),
        });
    }

    /// Record a constant without asserting anything.
    pub fn push_recorded(&mut self, id: &str, description: &str, coarse: f64, fine: Option<f64>) {
        let ratio = fine.map(|f| stability_ratio(coarse, f));
        self.constants.push(ConstantRecord {
            id: id.to_string(),
            description: description.to_string(),
            coarse,
            fine,
            stability_ratio: ratio,
            band: 0.0,
            direction: Direction::Upper,
            pass: None,
        });
    }

    pub fn push_check(&mut self, id: &str, description: &str, pass: bool, detail: String) {
        self.passed &= pass;
        self.checks.push(CheckRecord {
            id: id.to_string(),
            description: description.to_string(),
            pass,
            detail,
        });
    }

    pub fn push_stage(&mut self, stage: &str, consumes: &[&str], produces: &[&str]) {
        self.provenance.push(StageProvenance {
            stage: stage.to_string(),
            consumes: consumes.iter().map(|s| s.to_string()).collect(),
            produces: produces.iter().map(|s| s.to_string()).collect(),
        });
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// CSV side table of the constants.
    pub fn write_constants_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "coarse", "fine", "stability_ratio", "band", "pass"])?;
        for c in &self.constants {
            w.write_record([
                c.id.clone(),
                format!("{}", c.coarse),
                c.fine.map(|v| format!("{v}")).unwrap_or_default(),
                c.stability_ratio.map(|v| format!("{v}")).unwrap_or_default(),
                format!("{}", c.band),
                c.pass.map(|p| p.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One pass/fail line per record, for terminal output.
    pub fn summary_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.constants {
            let verdict = match c.pass {
                Some(true) => "pass",
                Some(false) => "FAIL",
                None => "info",
            };
            let ratio = c
                .stability_ratio
                .map(|r| format!(" ratio={r:.4}"))
                .unwrap_or_default();
            out.push(format!("[{verdict}] {} = {:.6e}{ratio}", c.id, c.coarse));
        }
        for c in &self.checks {
            let verdict = if c.pass { "pass" } else { "FAIL" };
            out.push(format!("[{verdict}] {} ({})", c.id, c.detail));
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MergedSummary {
    pub runs: usize,
    pub all_passed: bool,
    /// Worst value per constant id across the runs.
    pub worst_constants: Vec<(String, f64)>,
    pub failed_checks: Vec<String>,
}

/// Merge several run reports into a worst-case summary.
pub fn merge_reports(reports: &[VerificationReport]) -> MergedSummary {
    use std::collections::BTreeMap;
    let mut worst: BTreeMap<String, (Direction, f64)> = BTreeMap::new();
    let mut failed_checks = Vec::new();
    let mut all_passed = true;
    for r in reports {
        all_passed &= r.passed;
        for c in &r.constants {
            let entry = worst.entry(c.id.clone()).or_insert((c.direction, c.coarse));
            match c.direction {
                Direction::Upper => entry.1 = entry.1.max(c.coarse),
                Direction::Lower => entry.1 = entry.1.min(c.coarse),
            }
        }
        for c in &r.checks {
            if !c.pass {
                failed_checks.push(c.id.clone());
            }
        }
    }
    failed_checks.sort();
    failed_checks.dedup();
    MergedSummary {
        runs: reports.len(),
        all_passed,
        worst_constants: worst.into_iter().map(|(k, (_, v))| (k, v)).collect(),
        failed_checks,
    }
}
