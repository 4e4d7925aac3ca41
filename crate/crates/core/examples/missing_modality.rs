//! What happens to a sample without an image: zero attention on the image
//! slot, predictions unaffected by the filler row, and the auxiliary image
//! head switched off.

use drfuse::autograd::Graph;
use drfuse::data::{generate_synthetic, SyntheticConfig};
use drfuse::{Matrix, Model, ModelConfig, ModelKind};

fn main() -> drfuse::Result<()> {
    let cfg = ModelConfig {
        d_model: 16,
        heads: 2,
        ffn_width: 32,
        conv_channels: vec![4, 8],
        n_classes: 3,
        ..ModelConfig::default()
    };
    let model = Model::new(ModelKind::DrFuse, cfg.clone())?;
    let store = model.init_params(0);
    let syn = SyntheticConfig {
        n_samples: 1,
        n_classes: 3,
        missing_rate: 0.0,
        ..SyntheticConfig::default()
    };
    let (ds, _) = generate_synthetic(&syn)?;
    let paired = &ds.records[0];
    let mut partial = paired.clone();
    partial.cxr = None;

    for (name, sample) in [("paired", paired), ("absent", &partial)] {
        let p = model.predict(&store, sample)?;
        let f = p.fusion.expect("DrFuse output");
        println!("{name}: y_hat {:.4?}", p.y_hat);
        for c in 0..f.alpha.rows() {
            println!(
                "  class {c} alpha (ehr, shared, cxr) = {:.4?}",
                f.alpha.row(c)
            );
        }
        println!("  auxiliary heads available: {:?}", f.aux_available);
    }

    let base = model.predict(&store, &partial)?.y_hat;
    let mut g = Graph::new();
    let fill = Matrix::filled(1, cfg.d_model, 123.0);
    let out = model.forward_with_fill(&mut g, &store, &partial, Some(&fill))?;
    println!(
        "prediction unchanged with a filler row of 123.0: {}",
        g.value(out.y_hat).data() == base.as_slice()
    );
    Ok(())
}
