//! Generates a synthetic dataset, splits it and writes records plus
//! manifest to a directory (first argument, default a temp dir).

use std::path::PathBuf;

use drfuse::cli::{cmd_generate, ExperimentConfig};
use drfuse::data::{load_dataset, SyntheticConfig};

fn main() -> drfuse::Result<()> {
    let out = std::env::args().nth(1).map_or_else(
        || std::env::temp_dir().join("drfuse-synthetic"),
        PathBuf::from,
    );
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.synthetic = Some(SyntheticConfig {
        n_samples: 500,
        ..SyntheticConfig::default()
    });
    let written = cmd_generate(&cfg, &out)?;

    let loaded = load_dataset(&written.manifest)?;
    let ds = &loaded.dataset;
    println!("{} records in {}", ds.len(), written.records.display());
    println!("image coverage {:.1}%", 100.0 * ds.cxr_coverage());
    let drivers = ds.class_drivers.clone().unwrap_or_default();
    for (c, p) in ds.prevalence().iter().enumerate() {
        let driver = drivers.get(c).map_or("unknown", |d| d.name());
        println!("class {c}: prevalence {p:.3}, driven by {driver}");
    }
    println!(
        "split sizes: train {}, val {}, test {}",
        loaded.splits.train.len(),
        loaded.splits.val.len(),
        loaded.splits.test.len()
    );
    Ok(())
}
