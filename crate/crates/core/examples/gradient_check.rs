//! Finite-difference check of every hand-written backward pass.

use nodemoe::diagnostics::gradient_suite;

fn main() -> nodemoe::Result<()> {
    for seed in 0..3 {
        for c in gradient_suite(seed)? {
            println!("seed {seed} {:<26} max rel err {:.2e} over {} entries", c.component, c.max_rel_error, c.entries_checked);
        }
    }
    Ok(())
}
