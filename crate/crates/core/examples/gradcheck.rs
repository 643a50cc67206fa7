//! Verifies every backward rule against finite differences.
//!
//! cargo run --release --example gradcheck -- [seed]

use weakcount::verify::{gradcheck_suite, GRADCHECK_TOLERANCE};

fn main() -> weakcount::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let outcome = gradcheck_suite(seed)?;
    for case in &outcome.cases {
        let mark = if case.max_error <= GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
        println!("{mark:4} {:40} seed {:5} error {:.3e}", case.name, case.seed, case.max_error);
    }
    println!("{} cases, max error {:.3e}", outcome.cases.len(), outcome.max_error());
    println!("injected fault error {:.3e} (detected: {})", outcome.control_error, outcome.control_detected());
    if !outcome.passed() {
        std::process::exit(2);
    }
    Ok(())
}
