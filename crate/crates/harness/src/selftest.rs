//! Self-test: a small fixed pipeline run twice, byte-compared, plus basic
//! sanity checks on the outputs. Exit code 4 on any failure.

use std::path::Path;

use crate::config::{Config, RawConfig};
use crate::error::Result;
use crate::pipeline::run_pipeline;
use crate::report::emit_report;

/// Small but complete: both models, all four rows, smoothing enabled.
pub const SELFTEST_CONFIG: &str = "\
seed = 7

[model]
hidden = 8
activation = tanh

[train]
data_kind = gauss2
data_dim = 4
data_per_class = 60
mode = preempt_robust
epochs = 8
batch_size = 16
k_steps = 5

[perturb]
p = 2
eps = 0.25

[robustify]
max_iter = 10
t_steps = 10

[attack]
restarts = 2
t_steps = 10
eval_count = 16

[smooth]
sigma = 0.08
n_pred = 10
n_cert = 200
eval_count = 6

[output]
dir = out
";

/// Outcome plus human-readable findings.
pub struct SelftestOutcome {
    pub passed: bool,
    pub findings: Vec<String>,
}

pub fn run_selftest(out_dir: &Path, seed: Option<u64>) -> Result<SelftestOutcome> {
    let mut raw = RawConfig::parse(SELFTEST_CONFIG)?;
    if let Some(s) = seed {
        raw.apply_override(&format!("seed={s}"))?;
    }
    let cfg = Config::from_raw(&raw)?;

    let mut findings = Vec::new();

    let report_a = run_pipeline(&cfg)?;
    let files_a = emit_report(&report_a, &out_dir.join("run_a"))?;
    let report_b = run_pipeline(&cfg)?;
    let files_b = emit_report(&report_b, &out_dir.join("run_b"))?;

    // Determinism: identical bytes across the two runs.
    if files_a.len() != files_b.len() {
        findings.push("artifact lists differ between runs".into());
    }
    for (a, b) in files_a.iter().zip(&files_b) {
        let bytes_a = std::fs::read(a)?;
        let bytes_b = std::fs::read(b)?;
        if bytes_a != bytes_b {
            findings.push(format!(
                "non-deterministic artifact: {} differs between identical runs",
                a.file_name().unwrap_or_default().to_string_lossy()
            ));
        }
    }

    // Schema: four table rows, accuracies in range.
    if report_a.rows.len() != 4 {
        findings.push(format!("expected 4 table rows, got {}", report_a.rows.len()));
    }
    for row in &report_a.rows {
        for (name, v) in [
            ("clean", row.clean),
            ("grey_pgd", row.grey_pgd),
            ("grey_pgd_restarts", row.grey_pgd_restarts),
            ("white_pgd", row.white_pgd),
        ] {
            if !(0.0..=1.0).contains(&v) {
                findings.push(format!("{name} accuracy out of range: {v}"));
            }
        }
        if row.grey_pgd > row.clean + 1e-12 {
            findings.push("attack increased accuracy over clean".into());
        }
        if !row.preemption && (row.white_pgd - row.grey_pgd_restarts).abs() > 0.0 {
            findings.push("none-row white-box must equal grey-box".into());
        }
    }

    // The certificate check must never be violated.
    for r in &report_a.lemma1 {
        if r.satisfied && !r.pred_preserved {
            findings.push(format!(
                "certificate violated at example {}: h_tilde={} but prediction changed",
                r.example_id, r.h_tilde
            ));
        }
    }

    Ok(SelftestOutcome {
        passed: findings.is_empty(),
        findings,
    })
}
