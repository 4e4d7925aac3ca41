//! Trains the unimodal and concatenation baselines at 60% missingness and
//! prints the relative difference of concatenation against the best
//! unimodal model.

use drfuse::cli::prepare;
use drfuse::data::{generate_synthetic, split, SyntheticConfig, DEFAULT_RATIOS};
use drfuse::eval::{internal_baselines, relative_difference, EvalConfig};
use drfuse::{ModelConfig, ModelKind, TrainConfig};

fn main() -> drfuse::Result<()> {
    let syn = SyntheticConfig {
        n_samples: 600,
        missing_rate: 0.6,
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
    let rows = internal_baselines(&model, &train, data.view(), &eval, None)?;
    for r in &rows {
        println!(
            "{:<8} full {:.4}  matched {:.4}",
            r.kind.name(),
            r.full.macro_prauc,
            r.matched.macro_prauc
        );
    }
    let unimodal: Vec<_> = rows
        .iter()
        .filter(|r| r.kind != ModelKind::Concat)
        .map(|r| &r.full)
        .collect();
    let concat = rows
        .iter()
        .find(|r| r.kind == ModelKind::Concat)
        .map(|r| &r.full);
    if let Some(concat) = concat {
        for row in relative_difference(&[("concat", concat)], &unimodal) {
            if let (Some(p), Some(rel)) = (row.prauc, row.relative_pct) {
                println!("class {:<6} {p:.4} ({rel:+.1}%)", row.class);
            }
        }
    }
    Ok(())
}
