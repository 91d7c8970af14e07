//! End-to-end acceptance run: one PASS/FAIL line per criterion.

use std::io::Write;

use farmamba::trainer::load_data;
use farmamba::verify::{self, Check};

fn report(c: &Check) {
    // written to the raw handle so the line survives output capture
    let _ = writeln!(std::io::stderr(), "{c}");
}

#[test]
fn acceptance_criteria() {
    let mut checks = verify::fast_checks();
    let cfg = verify::ablation_config();
    let (train, val) = load_data(&cfg).expect("synthetic data");
    let (trend, table) = verify::ablation_trend(&cfg, &[0, 1, 2], &train, &val);
    let _ = write!(std::io::stderr(), "{}", table.render(&[cfg.msfm.variant]));
    checks.insert(6, trend);
    for c in &checks {
        report(c);
    }
    let failed: Vec<u8> = checks.iter().filter(|c| !c.passed).map(|c| c.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
