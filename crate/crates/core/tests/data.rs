use drfuse::cli::cmd_generate;
use drfuse::cli::ExperimentConfig;
use drfuse::data::{generate_synthetic, load_dataset, split, SyntheticConfig, DEFAULT_RATIOS};

#[test]
fn default_prevalence_is_moderate() {
    let cfg = SyntheticConfig {
        n_samples: 10_000,
        ..SyntheticConfig::default()
    };
    let (ds, _) = generate_synthetic(&cfg).unwrap();
    for (c, p) in ds.prevalence().iter().enumerate() {
        assert!((0.05..=0.6).contains(p), "class {c}: prevalence {p}");
    }
    let coverage = ds.cxr_coverage();
    assert!((coverage - 0.6).abs() < 0.02, "{coverage}");
}

#[test]
fn manifest_roundtrip_keeps_records_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let syn = SyntheticConfig {
        n_samples: 120,
        ..SyntheticConfig::default()
    };
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.synthetic = Some(syn.clone());
    cfg.dataset.split_seed = 4;
    let out = cmd_generate(&cfg, dir.path()).unwrap();

    let (ds, _) = generate_synthetic(&syn).unwrap();
    let loaded = load_dataset(&out.manifest).unwrap();
    assert_eq!(loaded.dataset, ds);
    assert_eq!(loaded.splits, split(&ds, DEFAULT_RATIOS, 4).unwrap());
}

#[test]
fn matched_splits_nest_at_forty_percent_coverage() {
    let cfg = SyntheticConfig {
        n_samples: 400,
        missing_rate: 0.6,
        ..SyntheticConfig::default()
    };
    let (ds, _) = generate_synthetic(&cfg).unwrap();
    let full = split(&ds, DEFAULT_RATIOS, 1).unwrap();
    let matched = full.matched(&ds);
    for (m, f) in [
        (&matched.train, &full.train),
        (&matched.val, &full.val),
        (&matched.test, &full.test),
    ] {
        assert!(m.iter().all(|i| f.contains(i) && ds.records[*i].has_cxr()));
        assert_eq!(
            m.len(),
            f.iter().filter(|&&i| ds.records[i].has_cxr()).count()
        );
    }
}
