//! Runs every acceptance check and prints one line per check.

use std::process::ExitCode;

fn main() -> ExitCode {
    let outcomes = autorank_validation::run_all();
    for o in &outcomes {
        println!("{}", o.line());
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("{passed}/{} acceptance checks passed", outcomes.len());
    if passed == outcomes.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
