//! Acceptance gate. Runs every criterion in order and prints one PASS/FAIL
//! line each; exits non-zero when any criterion fails.
//!
//! `cargo test --test acceptance -- 4 10` runs only the listed criteria.

mod common;
mod formats;
mod learning;
mod numeric;

use std::process::ExitCode;
use std::time::Instant;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "gradient suite", numeric::gradients),
    (2, "attention normalization", numeric::attention_normalization),
    (3, "coverage replay", numeric::coverage_replay),
    (4, "edit-distance oracle", numeric::edit_distance_oracle),
    (5, "overfit smoke test", learning::overfit),
    (6, "desk-scale learnability", learning::learnability),
    (7, "coverage ablation direction", learning::coverage_ablation),
    (8, "regularization ablation direction", learning::regularization_ablation),
    (9, "warm-start direction", learning::warm_start),
    (10, "format round trips", formats::round_trips),
];

fn main() -> ExitCode {
    // libtest flags such as --nocapture may be forwarded; only bare numbers select.
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let out = std::panic::catch_unwind(run)
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Outcome::new(false, format!("panicked: {msg}"))
            });
        failed += usize::from(!out.pass);
        println!(
            "criterion {id:>2} {:<34} {}  {} ({:.1} s)",
            name,
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
