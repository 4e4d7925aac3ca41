//! Trains the four ablation variants on one split and compares them.

use drfuse::cli::prepare;
use drfuse::data::{generate_synthetic, split, SyntheticConfig, DEFAULT_RATIOS};
use drfuse::eval::{run_ablations, EvalConfig};
use drfuse::{ModelConfig, TrainConfig};

fn main() -> drfuse::Result<()> {
    let syn = SyntheticConfig {
        n_samples: 600,
        ..SyntheticConfig::default()
    };
    let (dataset, _) = generate_synthetic(&syn)?;
    let splits = split(&dataset, DEFAULT_RATIOS, 0)?;
    let data = prepare(dataset, splits, 0);
    let model = ModelConfig {
        d_model: 16,
        heads: 2,
        ffn_width: 32,
        conv_channels: vec![4, 8],
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        lr: 1e-3,
        max_epochs: 6,
        ..TrainConfig::default()
    };
    let eval = EvalConfig {
        bootstrap_iters: 200,
        ..EvalConfig::default()
    };
    let rows = run_ablations(&model, &train, data.view(), &eval, None)?;
    println!(
        "{:<20} {:>8} {:>8} {:>10}",
        "variant", "matched", "full", "agreement"
    );
    for r in &rows {
        println!(
            "{:<20} {:>8.4} {:>8.4} {:>10}",
            r.name,
            r.matched.macro_prauc,
            r.full.macro_prauc,
            r.attention_agreement
                .map_or("-".into(), |a| format!("{a:.3}"))
        );
    }
    Ok(())
}
