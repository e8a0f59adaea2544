//! Runs every oracle and gradient check; exits 1 if any fails.
//!
//! cargo run --release --example verify

use borderdet::verify::suite::run_all;

fn main() -> borderdet::Result<()> {
    let r = run_all(7)?;
    for c in &r.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    for g in &r.gradients {
        println!("{} grad {}: max rel {:.2e}", if g.passed { "PASS" } else { "FAIL" }, g.name, g.max_rel_err);
    }
    std::process::exit(if r.passed { 0 } else { 1 });
}
