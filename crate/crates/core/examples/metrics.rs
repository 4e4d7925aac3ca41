//! Average precision, its macro average and a bootstrap interval.

use drfuse::eval::{bootstrap_macro_prauc, macro_prauc, prauc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> drfuse::Result<()> {
    println!(
        "AP of (0.9, 0.8, 0.3) / (1, 0, 1) = {:.4}",
        prauc(&[0.9, 0.8, 0.3], &[1, 0, 1])?
    );

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let labels: Vec<Vec<u8>> = (0..400)
        .map(|_| (0..3).map(|_| u8::from(rng.random_bool(0.25))).collect())
        .collect();
    let preds: Vec<Vec<f64>> = labels
        .iter()
        .map(|row| {
            row.iter()
                .map(|&y| 0.3 * f64::from(y) + 0.7 * rng.random::<f64>())
                .collect()
        })
        .collect();
    let m = macro_prauc(&preds, &labels)?;
    let ci = bootstrap_macro_prauc(&preds, &labels, 1000, 0.95, 0)?;
    println!("per class {:.4?}", m.per_class);
    println!(
        "macro {:.4}, 95% CI [{:.4}, {:.4}] from {} resamples",
        m.value, ci.lo, ci.hi, ci.valid_iters
    );
    Ok(())
}
