//! Finite-difference check of every hand-written gradient.
//!
//! Usage: `cargo run --release --example gradcheck_all [seed]`

use dacm::gradcheck::{run_gradcheck, TARGETS};

fn main() -> dacm::Result<()> {
    let seed = std::env::args().nth(1).map_or(Ok(0), |s| s.parse()).expect("seed must be an integer");
    let mut ok = true;
    for target in TARGETS {
        let report = run_gradcheck(target, seed)?;
        print!("{}", report.to_text());
        ok &= report.passed();
    }
    if !ok {
        std::process::exit(1);
    }
    Ok(())
}
