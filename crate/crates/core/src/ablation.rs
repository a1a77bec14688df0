//! Component ablation: the same data, seed and budget for every variant.

use std::path::Path;

use serde::Serialize;

use crate::afia::AfiaBranches;
use crate::config::ExperimentConfig;
use crate::error::{config_err, Result};
use crate::metrics::MetricsReport;
use crate::train::{train, write_run_dir};

/// Which components a variant enables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Variant {
    pub cs: bool,
    pub dsa: bool,
    pub ssa: bool,
    pub saci: bool,
}

impl Variant {
    pub const fn new(cs: bool, dsa: bool, ssa: bool, saci: bool) -> Self {
        Self { cs, dsa, ssa, saci }
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> =
            [(self.cs, "CS"), (self.dsa, "DSA"), (self.ssa, "SSA"), (self.saci, "SACI")].iter().filter(|p| p.0).map(|p| p.1).collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }

    /// `base` with AFIA and SACI switched per the flags. With no AFIA flag
    /// set, AFIA is removed from the block entirely.
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.model.branches = AfiaBranches { cs: self.cs, dsa: self.dsa, ssa: self.ssa };
        cfg.model.afia = cfg.model.branches.any();
        cfg.model.saci = self.saci;
        cfg
    }
}

/// The eight rows, baseline through full model.
pub const TABLE_ROWS: [Variant; 8] = [
    Variant::new(false, false, false, false),
    Variant::new(true, false, false, false),
    Variant::new(false, true, false, false),
    Variant::new(false, false, true, false),
    Variant::new(false, true, true, false),
    Variant::new(true, true, true, false),
    Variant::new(false, false, false, true),
    Variant::new(true, true, true, true),
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub report: MetricsReport,
}

/// Trains every variant from `base`. When `out` is set, each variant's run
/// directory goes to `out/<row>-<label>` and the table to `out/ablation.txt`
/// and `out/ablation.jsonl`.
pub fn ablate(base: &ExperimentConfig, variants: &[Variant], out: Option<&Path>) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return config_err("no ablation variants given");
    }
    base.validate()?;
    let mut rows = Vec::with_capacity(variants.len());
    for (i, v) in variants.iter().enumerate() {
        let cfg = v.apply(base);
        let rec = train(&cfg, None, None)?;
        if let Some(dir) = out {
            write_run_dir(&dir.join(format!("{i}-{}", v.label())), &rec)?;
        }
        rows.push(AblationRow {
            variant: *v,
            label: v.label(),
            epochs_run: rec.history.len(),
            best_epoch: rec.best_epoch,
            report: rec.evaluation.overall,
        });
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.txt"), render_table(&rows))?;
        let lines: String = rows.iter().map(|r| serde_json::to_string(r).expect("plain data") + "\n").collect();
        std::fs::write(dir.join("ablation.jsonl"), lines)?;
    }
    Ok(rows)
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Table layout: AFIA columns CS/DSA/SSA, then SACI, then AP, precision,
/// recall and F1 in percent, F1 annotated with its change from the first row.
pub fn render_table(rows: &[AblationRow]) -> String {
    let tick = |b: bool| if b { "✓" } else { " " };
    let mut s = String::new();
    s.push_str("|       AFIA      | SACI |   AP  | Precision | Recall |   F1-Score   |\n");
    s.push_str("|  CS | DSA | SSA |      |       |           |        |              |\n");
    s.push_str("|-----|-----|-----|------|-------|-----------|--------|--------------|\n");
    let base_f1 = rows.first().map(|r| r.report.f1);
    for (i, r) in rows.iter().enumerate() {
        let v = r.variant;
        let ap = r.report.ap.map_or_else(|| "n/a".into(), pct);
        let mut f1 = pct(r.report.f1);
        if let (Some(b), true) = (base_f1, i > 0) {
            let d = 100.0 * (r.report.f1 - b);
            f1.push_str(&format!(" ({d:+.1})"));
        }
        s.push_str(&format!(
            "|  {}  |  {}  |  {}  |  {}   | {:>5} | {:>9} | {:>6} | {:>12} |\n",
            tick(v.cs),
            tick(v.dsa),
            tick(v.ssa),
            tick(v.saci),
            ap,
            pct(r.report.precision),
            pct(r.report.recall),
            f1
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_map_to_configs() {
        let base = ExperimentConfig::default();
        let c = TABLE_ROWS[0].apply(&base);
        assert!(!c.model.afia && !c.model.saci);
        c.validate().unwrap();
        let c = TABLE_ROWS[1].apply(&base);
        assert!(c.model.afia && !c.model.branches.attention());
        c.validate().unwrap();
        let full = TABLE_ROWS[7].apply(&base);
        assert_eq!(full.model, base.model);
        assert_eq!(TABLE_ROWS.iter().map(|v| v.label()).collect::<Vec<_>>()[7], "CS+DSA+SSA+SACI");
    }

    #[test]
    fn afia_without_paths_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.branches = AfiaBranches { cs: false, dsa: false, ssa: false };
        assert!(matches!(cfg.validate(), Err(crate::Error::Config(_))));
    }
}
