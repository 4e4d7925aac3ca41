//! Trains DrFuse on a small synthetic task and prints the per-epoch losses.

use drfuse::cli::prepare;
use drfuse::data::{generate_synthetic, split, SyntheticConfig, DEFAULT_RATIOS};
use drfuse::training::fit;
use drfuse::{Model, ModelConfig, ModelKind, TrainConfig};

fn main() -> drfuse::Result<()> {
    let syn = SyntheticConfig {
        n_samples: 600,
        ..SyntheticConfig::default()
    };
    let (dataset, _) = generate_synthetic(&syn)?;
    let splits = split(&dataset, DEFAULT_RATIOS, 0)?;
    let data = prepare(dataset, splits, 0);

    let model = Model::new(
        ModelKind::DrFuse,
        ModelConfig {
            d_model: 16,
            heads: 2,
            ffn_width: 32,
            conv_channels: vec![4, 8],
            ..ModelConfig::default()
        },
    )?;
    let cfg = TrainConfig {
        lr: 1e-3,
        max_epochs: 8,
        ..TrainConfig::default()
    };
    let out = fit(
        &model,
        model.init_params(cfg.seed),
        &data.part(&data.splits.train),
        &data.part(&data.splits.val),
        &cfg,
        None,
    )?;
    println!("epoch split  total   pred    jsd     orth_e  orth_c  attn    aux     prauc");
    for r in &out.log {
        let l = &r.losses;
        println!(
            "{:>5} {:<5} {:.4}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}  {}",
            r.epoch,
            r.split,
            l.total,
            l.pred,
            l.jsd,
            l.orth_ehr,
            l.orth_cxr,
            l.attn,
            l.aux,
            r.macro_prauc.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    println!("best epoch {} of {}", out.best_epoch, out.epochs_run);
    Ok(())
}
