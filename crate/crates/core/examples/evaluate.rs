//! Trains through the command layer, then evaluates on the full and the
//! image-bearing test sets and writes the report files.

use std::path::PathBuf;

use drfuse::cli::{cmd_evaluate, cmd_train, DatasetSection, ExperimentConfig};
use drfuse::eval::EvalConfig;
use drfuse::{ModelConfig, TrainConfig};

fn main() -> drfuse::Result<()> {
    let out = std::env::args().nth(1).map_or_else(
        || std::env::temp_dir().join("drfuse-evaluate"),
        PathBuf::from,
    );
    let cfg = ExperimentConfig {
        dataset: DatasetSection {
            preset: Some("smoke".into()),
            synthetic: None,
            ..DatasetSection::default()
        },
        model: ModelConfig {
            d_model: 16,
            heads: 2,
            ffn_width: 32,
            conv_channels: vec![4, 8],
            ..ModelConfig::default()
        },
        training: TrainConfig {
            lr: 1e-3,
            max_epochs: 5,
            ..TrainConfig::default()
        },
        eval: EvalConfig {
            bootstrap_iters: 500,
            ..EvalConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let checkpoint = cmd_train(&cfg, &out)?;
    for matched_only in [false, true] {
        let res = cmd_evaluate(&cfg, &checkpoint, &out, matched_only)?;
        let r = &res.report;
        println!(
            "{:<8} n={:<4} macro PRAUC {:.4}  95% CI [{:.4}, {:.4}]",
            r.label, r.n_samples, r.macro_prauc, r.ci_lo, r.ci_hi
        );
        if let Some(p) = &r.probe {
            println!("         mean shared JSD {:.4}", p.mean_shared_jsd);
        }
    }
    println!("reports in {}", out.display());
    Ok(())
}
