//! Bootstrap intervals, sign-flip permutation tests, paired t, Spearman
//! and Cohen's kappa.
//!
//! cargo run --example statistics

use groundcheck::audit::AuditLabel;
use groundcheck::stats::{
    bootstrap_ci, cohens_kappa, paired_t_test, permutation_test, spearman_rho, PermutationMode,
};

fn main() -> anyhow::Result<()> {
    // Per-example VRS contributions: 1 if right on the real image only,
    // -1 if right on the shuffled image only.
    let diffs: Vec<f64> = [1, 0, 0, -1, 1, 1, 0, 1, 0, 0, 1, -1, 1, 0, 0]
        .iter()
        .map(|&d| d as f64)
        .collect();
    let ci = bootstrap_ci(&diffs, 0.95, 2000, 7)?;
    println!(
        "VRS {:.3}, 95% CI [{:.3}, {:.3}], excludes zero: {}",
        ci.point, ci.lo, ci.hi, ci.excludes_zero()
    );
    let exact = permutation_test(&diffs, PermutationMode::Exact, 0, 0)?;
    let mc = permutation_test(&diffs, PermutationMode::MonteCarlo, 50_000, 1)?;
    println!("sign-flip p: exact {:.4}, Monte Carlo {:.4}", exact.p_value, mc.p_value);

    let a = [0.62, 0.50, 0.60, 0.54, 0.58, 0.49];
    let b = [0.56, 0.44, 0.62, 0.63, 0.51, 0.47];
    let t = paired_t_test(&a, &b)?;
    println!("paired t = {:.3}, p = {:.4}", t.statistic, t.p_value);

    let rho = spearman_rho(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0])?;
    println!("spearman rho = {rho:?}");

    use AuditLabel::*;
    let first = [GroundedButWrong, UngroundedHallucination, UngroundedHallucination, Ambiguous, UngroundedHallucination];
    let second = [GroundedButWrong, UngroundedHallucination, GroundedButWrong, Ambiguous, UngroundedHallucination];
    let k = cohens_kappa(&first, &second)?;
    println!(
        "kappa {:?} (observed {:.2}, chance {:.2})",
        k.kappa, k.observed_agreement, k.expected_agreement
    );
    Ok(())
}
