//! Checks the two CSBM test-loss lower bounds by simulation: a classifier
//! fitted to one homophily regime, evaluated on graphs from another.
//!
//!     cargo run --release --example csbm_bounds -- 10

use nodemoe::csbm::{
    degree_shift_check, degree_shift_grid, optimal_classifier, opposing_homophily_check, opposing_homophily_grid,
    sample_csbm, sgc_embed, class_conditional_means, CsbmParams,
};

fn main() -> nodemoe::Result<()> {
    let trials = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);

    let p = CsbmParams::new(2000, 0.05, 0.01, vec![0.5, 0.0, 0.0, 0.0], vec![-0.5, 0.0, 0.0, 0.0], 0.3);
    let s = sample_csbm(&p, 1)?;
    let [m0, m1] = class_conditional_means(&s.graph, &sgc_embed(&s.graph, &s.features)?, &s.labels);
    let (e0, e1) = p.expected_embedding_means()?;
    println!("embedding means  class0 {:.3?} (expected {:.3?})", &m0[..2], &e0[..2]);
    println!("                 class1 {:.3?} (expected {:.3?})", &m1[..2], &e1[..2]);
    println!("closed-form classifier w = {:.3?}\n", optimal_classifier(&p, 1.0)?.w);

    println!("{:<20} {:>7} {:>7} {:>9} {:>9} {:>6}", "regime", "p'", "q'", "loss", "bound", "ok");
    let opposing = opposing_homophily_grid()
        .into_iter()
        .enumerate()
        .map(|(i, (a, b))| opposing_homophily_check(&a, &b, 1.0, trials, i as u64));
    let shifted = degree_shift_grid()
        .into_iter()
        .enumerate()
        .map(|(i, (a, b))| degree_shift_check(&a, &b, 1.0, trials, 100 + i as u64));
    for r in opposing.chain(shifted) {
        let r = r?;
        println!(
            "{:<20} {:>7.4} {:>7.4} {:>9.4} {:>9.4} {:>6}",
            format!("{:?}", r.regime),
            r.test.p,
            r.test.q,
            r.measured_loss,
            r.theoretical_bound,
            r.satisfied
        );
    }
    Ok(())
}
