//! Verifies analytic gradients against central finite differences.

use sticker_core::gradcheck::{check_clip, check_combined, check_info_nce, check_lm, DEFAULT_EPS};

fn main() -> sticker_core::Result<()> {
    let eps = std::env::args().nth(1).map_or(DEFAULT_EPS, |s| s.parse().expect("eps"));
    let mut reports = check_info_nce(3, 16, 0.07, 1, eps)?;
    reports.push(check_clip(2, eps)?);
    reports.push(check_lm(3, eps)?);
    reports.push(check_combined(4, 1.0, eps)?);
    for r in reports {
        println!(
            "{:<14} max relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e}; {} elements)",
            r.component, r.max_rel_error, r.worst, r.worst_pair.0, r.worst_pair.1, r.n_checked
        );
    }
    Ok(())
}
