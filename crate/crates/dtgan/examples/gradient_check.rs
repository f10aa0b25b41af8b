//! Run the finite-difference verification suites: every primitive, every
//! attention/normalization mechanism, every loss (including the
//! second-order gradient-penalty path), and the end-to-end generator.
//!
//! Run with: cargo run --release --example gradient_check

use dtgan::verify::{run_scope, Scope};
use dtgan::Result;

fn main() -> Result<()> {
    for scope in [Scope::Primitives, Scope::Modules, Scope::Losses, Scope::E2e] {
        println!("── {scope:?} ──");
        let report = run_scope(scope)?;
        for (name, err, tol, ok) in &report.lines {
            println!(
                "  {} {name}: max rel err {err:.3e} (tol {tol:.1e})",
                if *ok { "PASS" } else { "FAIL" }
            );
        }
        assert!(report.all_passed(), "gradient checks failed in {scope:?}");
    }
    println!("all gradient checks passed");
    Ok(())
}
