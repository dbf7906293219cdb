//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if any
//! fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::criteria::{self, Outcome};

type Check = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let checks: [Check; 10] = [
        ("gradient suite vs central differences", criteria::gradients),
        (
            "segment partition, n ≤ 10 exhaustive",
            criteria::segment_partition,
        ),
        (
            "relation representation vs brute force",
            criteria::representation_vs_brute_force,
        ),
        (
            "ner_f1 / re_f1 vs brute-force matcher",
            criteria::metrics_vs_brute_force,
        ),
        (
            "codec round trip, 100 documents",
            criteria::codec_round_trip,
        ),
        (
            "negative downsampling, 1000 resamples",
            criteria::downsampling,
        ),
        ("single-batch overfit", criteria::overfit),
        (
            "synthetic run, 500 documents, desk scale",
            criteria::synthetic_run,
        ),
        ("shared-encoder gradient wiring", criteria::mtl_wiring),
        ("early stopping with patience 10", criteria::early_stopping),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let t = Instant::now();
        let (status, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{status} [{:>2}] {name}: {detail} ({:.1?})",
            i + 1,
            t.elapsed()
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        checks.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
