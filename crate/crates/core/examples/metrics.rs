//! AUC, UAUC, log loss and the thresholded scores on a toy prediction set.

use sasrecllm::metrics::{compute_uauc, relative_improvement, MetricReport, ScoredExample};

fn main() -> Result<(), sasrecllm::Error> {
    // (user, label, score)
    let rows = [
        (1, 1.0, 0.91),
        (1, 0.0, 0.35),
        (1, 1.0, 0.62),
        (2, 0.0, 0.70),
        (2, 1.0, 0.55),
        (3, 1.0, 0.80), // single-class user: skipped by UAUC
    ];
    let xs: Vec<ScoredExample> = rows.iter().map(|&(u, y, s)| ScoredExample::new(u, y, s)).collect();
    let r = MetricReport::evaluate(&xs)?;
    println!("auc      {:?}", r.auc);
    println!("uauc     {:?} (skipped users: {})", r.uauc, compute_uauc(&xs).skipped_users);
    println!("log loss {:.4}", r.logloss);
    println!("p/r/f1/acc {:.3} {:.3} {:.3} {:.3}", r.precision, r.recall, r.f1, r.accuracy);

    let ri = relative_improvement(0.696, 0.685, 0.648, 0.641);
    println!("rel. imp. of 0.696/0.685 over 0.648/0.641: {:.2}%", 100.0 * ri);
    Ok(())
}
