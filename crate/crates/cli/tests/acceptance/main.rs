//! Acceptance suite. Each criterion runs on its own thread and reports one
//! PASS/FAIL line; the process exits non-zero if any criterion fails.

#[macro_use]
mod support;

mod cli;
mod deep;
mod flat;
mod monotone;
mod recovery;
mod sequential;
mod topics;

use std::io::Write;
use std::panic;
use std::process::ExitCode;
use std::time::Instant;

use support::Outcome;

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 12] = [
    ("em-monotonicity", monotone::criterion),
    ("ppca-exactness", flat::ppca_exactness),
    ("sequential-oracles", sequential::criterion),
    ("flat-oracles", flat::flat_oracles),
    ("lda-bound", topics::criterion),
    ("vae-bound", deep::vae_bound),
    ("flow-exactness", deep::flow_exactness),
    ("diffusion-consistency", deep::diffusion_consistency),
    ("autoregressive-normalization", deep::autoregressive),
    ("gradients", deep::gradients),
    ("recovery", recovery::criterion),
    ("cli-determinism", cli::criterion),
];

fn main() -> ExitCode {
    // failures are reported on the summary line, not as raw panic dumps
    panic::set_hook(Box::new(|_| {}));
    let start = Instant::now();
    let results: Vec<(Outcome, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = CRITERIA
            .iter()
            .map(|&(_, run)| {
                s.spawn(move || {
                    let t = Instant::now();
                    let out = panic::catch_unwind(run).unwrap_or_else(|e| {
                        let msg = e
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "panicked".into());
                        Err(format!("panic: {msg}"))
                    });
                    (out, t.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("criterion thread")).collect()
    });

    let mut stdout = std::io::stdout().lock();
    let mut failed = 0;
    for (i, ((name, _), (out, secs))) in CRITERIA.iter().zip(&results).enumerate() {
        let line = match out {
            Ok(detail) => format!("criterion {:2} {name}: PASS ({secs:.1}s) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                format!("criterion {:2} {name}: FAIL ({secs:.1}s) {why}", i + 1)
            }
        };
        let _ = writeln!(stdout, "{line}");
    }
    let _ = writeln!(
        stdout,
        "acceptance: {} passed, {failed} failed in {:.1}s",
        CRITERIA.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
