//! Finite-difference check of every hand-written backward pass.
//!
//! cargo run --release --example grad_check -- [seed]

use borderdet::verify::suite::gradient_suite;

fn main() -> borderdet::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let mut ok = true;
    for r in gradient_suite(seed)? {
        println!(
            "{:<24} {:>5} coords  max rel {:.2e}  max abs {:.2e}  {}",
            r.name,
            r.checked,
            r.max_rel_err,
            r.max_abs_err,
            if r.passed { "ok" } else { "FAILED" }
        );
        ok &= r.passed;
    }
    std::process::exit(if ok { 0 } else { 1 });
}
