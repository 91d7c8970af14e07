//! The six-row ablation table over the three transform variants.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use farmamba_core::msfm::Variant;
use log::info;
use serde::Serialize;

use crate::config::{AblationFlags, RunConfig};
use crate::data::Dataset;
use crate::trainer::{train_on, write_csv, TrainOutcome};
use crate::{HarnessError, Result};

/// Row labels and their flag settings, in table order.
pub const ROWS: [(&str, AblationFlags); 6] = [
    ("Base", AblationFlags::new(false, false, false)),
    ("Base+MSFM", AblationFlags::new(true, false, false)),
    ("Base+SSRAE", AblationFlags::new(false, true, true)),
    ("Base+SSRAE w/o MSFM", AblationFlags::new(false, true, false)),
    ("Base+MSFM+SSRAE w/o MSFM", AblationFlags::new(true, true, false)),
    ("Full", AblationFlags::new(true, true, true)),
];

pub fn row_flags(name: &str) -> Option<AblationFlags> {
    ROWS.iter().find(|(n, _)| n.eq_ignore_ascii_case(name)).map(|(_, f)| *f)
}

/// Final validation scores of one run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRun {
    pub row: String,
    pub variant: String,
    pub seed: u64,
    #[serde(rename = "DSC")]
    pub dsc: f64,
    #[serde(rename = "MIoU")]
    pub miou: f64,
}

#[derive(Clone, Debug, Default)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    pub fn select(&self, row: &str, variant: Variant) -> Vec<&AblationRun> {
        let v = variant.to_string();
        self.runs.iter().filter(|r| r.row == row && r.variant == v).collect()
    }

    /// Mean `(DSC, MIoU)` of one cell across seeds.
    pub fn mean(&self, row: &str, variant: Variant) -> Option<(f64, f64)> {
        let sel = self.select(row, variant);
        if sel.is_empty() {
            return None;
        }
        let n = sel.len() as f64;
        Some((sel.iter().map(|r| r.dsc).sum::<f64>() / n, sel.iter().map(|r| r.miou).sum::<f64>() / n))
    }

    /// Plain-text table: one line per row, `DSC / MIoU` (percent) per variant.
    pub fn render(&self, variants: &[Variant]) -> String {
        let mut s = format!("{:<26}", "row");
        for v in variants {
            let _ = write!(s, " | {:^17}", v.to_string().to_uppercase());
        }
        s.push('\n');
        for (row, _) in ROWS {
            if !self.runs.iter().any(|r| r.row == row) {
                continue;
            }
            let _ = write!(s, "{row:<26}");
            for &v in variants {
                match self.mean(row, v) {
                    Some((d, m)) => {
                        let _ = write!(s, " | {:>7.2} / {:>7.2}", 100.0 * d, 100.0 * m);
                    }
                    None => {
                        let _ = write!(s, " | {:^17}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.runs)
    }
}

/// Configuration of one cell: `base` with the row's flags, the variant and a
/// seed applied.
pub fn cell_config(base: &RunConfig, flags: AblationFlags, variant: Variant, seed: u64) -> RunConfig {
    let mut c = base.clone();
    c.ablation = flags;
    c.msfm.variant = variant;
    c.seed = seed;
    c
}

fn uses_msfm(f: AblationFlags) -> bool {
    f.msfm_main || (f.ssrae && f.msfm_recon)
}

/// Trains every requested `(row, variant, seed)` cell on one shared dataset.
/// Rows without any MSFM do not depend on the variant and are trained once
/// per seed, then reported under every variant.
pub fn ablation_suite(
    base: &RunConfig,
    rows: &[&str],
    variants: &[Variant],
    seeds: &[u64],
    train: &Dataset,
    val: &Dataset,
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    let mut shared: BTreeMap<(String, u64), TrainOutcome> = BTreeMap::new();
    for &row in rows {
        let flags = row_flags(row).ok_or_else(|| HarnessError::Config(format!("unknown ablation row `{row}`")))?;
        let row = ROWS.iter().find(|(n, _)| n.eq_ignore_ascii_case(row)).expect("checked").0;
        for &variant in variants {
            for &seed in seeds {
                let mut c = cell_config(base, flags, variant, seed);
                let key = (row.to_string(), seed);
                let outcome = if !uses_msfm(flags) && shared.contains_key(&key) {
                    shared[&key].clone()
                } else {
                    let tag = if uses_msfm(flags) { variant.to_string() } else { "none".into() };
                    c.output_dir = base.output_dir.as_ref().map(|d| {
                        d.join("ablation").join(format!("{}_{tag}_s{seed}", row.replace(['+', ' ', '/'], "_")))
                    });
                    info!("ablation: {row} / {tag} / seed {seed}");
                    let o = train_on(&c, train, val, false)?;
                    if !uses_msfm(flags) {
                        shared.insert(key, o.clone());
                    }
                    o
                };
                let last = outcome
                    .final_val
                    .as_ref()
                    .ok_or_else(|| HarnessError::Data("ablation needs a non-empty validation set".into()))?;
                table.runs.push(AblationRun {
                    row: row.to_string(),
                    variant: variant.to_string(),
                    seed,
                    dsc: last.dsc,
                    miou: last.miou,
                });
            }
        }
    }
    Ok(table)
}
