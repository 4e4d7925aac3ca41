//! Disease-aware masked attention over the three disentangled representations.
//!
//! For every class `c` the stack `H = [h_distinct_ehr; h_shared; h_distinct_cxr]`
//! is scored against a patient query with a class-specific key projection.
//! The resulting weights `α_c` mix `H·W_V` into a per-class vector that a
//! per-class logistic head turns into a prediction. When the image is
//! absent its row is zero-filled and masked with `-inf`, so it receives a
//! weight of exactly zero.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::encoders::linear;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Pooling};
use crate::params::ParamStore;
use crate::tensor::Matrix;

/// Index of each representation in the attention stack.
pub const DISTINCT_EHR: usize = 0;
pub const SHARED: usize = 1;
pub const DISTINCT_CXR: usize = 2;

/// Graph handles of one sample's encoder outputs.
#[derive(Debug, Clone, Copy)]
pub struct BundleVars {
    pub shared_ehr: Var,
    pub distinct_ehr: Var,
    /// `(shared, distinct)` image representations when the image is present.
    pub cxr: Option<(Var, Var)>,
}

/// Encoder outputs as plain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationBundle {
    pub shared_ehr: Vec<f64>,
    pub distinct_ehr: Vec<f64>,
    pub shared_cxr: Option<Vec<f64>>,
    pub distinct_cxr: Option<Vec<f64>>,
}

impl RepresentationBundle {
    pub fn has_cxr(&self) -> bool {
        self.shared_cxr.is_some()
    }

    fn validate(&self) -> Result<()> {
        if self.shared_cxr.is_some() != self.distinct_cxr.is_some() {
            return Err(Error::InvalidInput(
                "image representations must be both present or both absent".into(),
            ));
        }
        let d = self.shared_ehr.len();
        let widths = [
            Some(self.distinct_ehr.len()),
            self.shared_cxr.as_ref().map(Vec::len),
            self.distinct_cxr.as_ref().map(Vec::len),
        ];
        if widths.iter().flatten().any(|&w| w != d) {
            return Err(Error::Shape("representations differ in width".into()));
        }
        Ok(())
    }

    fn to_graph(&self, g: &mut Graph) -> Result<BundleVars> {
        self.validate()?;
        let row = |g: &mut Graph, v: &[f64]| g.constant(Matrix::row_vector(v.to_vec()));
        let shared_ehr = row(g, &self.shared_ehr);
        let distinct_ehr = row(g, &self.distinct_ehr);
        let cxr = match (&self.shared_cxr, &self.distinct_cxr) {
            (Some(s), Some(d)) => Some((row(g, s), row(g, d))),
            _ => None,
        };
        Ok(BundleVars {
            shared_ehr,
            distinct_ehr,
            cxr,
        })
    }
}

/// Graph handles of the fusion outputs.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub h_shared: Var,
    /// `3 × d` stack.
    pub stack: Var,
    /// `|C| × 3` attention weights.
    pub alpha: Var,
    /// `|C| × d` fused vectors.
    pub h_tilde: Var,
    /// `1 × |C|` final probabilities.
    pub y_hat: Var,
    /// `1 × |C|` auxiliary probabilities per representation; the image one
    /// is `None` when the image is absent.
    pub y_aux: [Option<Var>; 3],
}

pub fn init_fusion(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
    let (d, c) = (cfg.d_model, cfg.n_classes);
    store.init_weight(rng, "fusion.wq", d, d);
    // Row block `c` holds the key projection of class `c`.
    let mut wk = Matrix::zeros(c * d, d);
    for k in 0..c {
        let mut block = ParamStore::default();
        block.init_weight(rng, "k", d, d);
        let src = block.get("k").expect("just inserted");
        wk.data_mut()[k * d * d..(k + 1) * d * d].copy_from_slice(src.data());
    }
    store.insert("fusion.wk", wk);
    store.init_weight(rng, "fusion.wv", d, d);
    store.init_weight(rng, "fusion.psi.w", c, d);
    store.init_zeros("fusion.psi.b", 1, c);
    let hidden = cfg.aux_hidden();
    for i in 1..=3 {
        store.init_weight(rng, &format!("aux.g{i}.w1"), d, hidden);
        store.init_zeros(&format!("aux.g{i}.b1"), 1, hidden);
        store.init_weight(rng, &format!("aux.g{i}.w2"), hidden, c);
        store.init_zeros(&format!("aux.g{i}.b2"), 1, c);
    }
}

/// Pooled shared representation: logit pooling when the image is present,
/// otherwise the EHR shared representation itself.
pub fn pool_shared_vars(g: &mut Graph, bundle: &BundleVars, pooling: Pooling) -> Result<Var> {
    match bundle.cxr {
        None => Ok(bundle.shared_ehr),
        Some((shared_cxr, _)) => match pooling {
            Pooling::Logit => g.logit_pool(bundle.shared_ehr, shared_cxr),
            Pooling::Mean => {
                let sum = g.add(bundle.shared_ehr, shared_cxr);
                Ok(g.scale(sum, 0.5))
            }
        },
    }
}

/// Patient query: mean of the available representations, projected by `W_Q`.
pub fn build_query_vars(
    g: &mut Graph,
    store: &ParamStore,
    bundle: &BundleVars,
    h_shared: Var,
) -> Result<Var> {
    let wq = g.param(store, "fusion.wq")?;
    let sum = g.add(bundle.distinct_ehr, h_shared);
    let mean = match bundle.cxr {
        Some((_, distinct_cxr)) => {
            let s = g.add(sum, distinct_cxr);
            g.scale(s, 1.0 / 3.0)
        }
        None => g.scale(sum, 0.5),
    };
    Ok(g.matmul(mean, wq))
}

fn aux_head(g: &mut Graph, store: &ParamStore, x: Var, i: usize) -> Result<Var> {
    let h = linear(
        g,
        store,
        x,
        &format!("aux.g{i}.w1"),
        &format!("aux.g{i}.b1"),
    )?;
    let h = g.gelu(h);
    let logits = linear(
        g,
        store,
        h,
        &format!("aux.g{i}.w2"),
        &format!("aux.g{i}.b2"),
    )?;
    g.sigmoid(logits)
}

/// Full fusion forward pass. `absent_fill` replaces the zero row used for a
/// missing image; it exists to test that the mask makes it irrelevant.
pub fn fuse_vars(
    g: &mut Graph,
    store: &ParamStore,
    bundle: &BundleVars,
    cfg: &ModelConfig,
    absent_fill: Option<&Matrix>,
) -> Result<FusionVars> {
    let (d, c) = (cfg.d_model, cfg.n_classes);
    let h_shared = pool_shared_vars(g, bundle, cfg.pooling)?;
    let query = build_query_vars(g, store, bundle, h_shared)?;

    let (third, mask) = match bundle.cxr {
        Some((_, distinct_cxr)) => (distinct_cxr, [0.0, 0.0, 0.0]),
        None => {
            let fill = absent_fill.cloned().unwrap_or_else(|| Matrix::zeros(1, d));
            (g.constant(fill), [0.0, 0.0, f64::NEG_INFINITY])
        }
    };
    let stack = g.concat_rows(&[bundle.distinct_ehr, h_shared, third]);

    // scores[c] = q·K_cᵀ = q·W_K[c]ᵀ·Hᵀ; all classes at once via the stacked keys.
    let wk = g.param(store, "fusion.wk")?;
    let q_col = g.transpose(query);
    let keyed = g.matmul(wk, q_col);
    let keyed = g.reshape(keyed, c, d)?;
    let scores = g.matmul_nt(keyed, stack);
    let alpha = g.masked_attention(scores, &mask, d)?;

    let wv = g.param(store, "fusion.wv")?;
    let values = g.matmul(stack, wv);
    let h_tilde = g.matmul(alpha, values);

    let psi_w = g.param(store, "fusion.psi.w")?;
    let psi_b = g.param(store, "fusion.psi.b")?;
    let per_class = g.mul(h_tilde, psi_w);
    let logits = g.sum_cols(per_class);
    let logits = g.transpose(logits);
    let logits = g.add(logits, psi_b);
    let y_hat = g.sigmoid(logits)?;

    let y_aux = [
        Some(aux_head(g, store, bundle.distinct_ehr, 1)?),
        Some(aux_head(g, store, h_shared, 2)?),
        match bundle.cxr {
            Some((_, distinct_cxr)) => Some(aux_head(g, store, distinct_cxr, 3)?),
            None => None,
        },
    ];

    Ok(FusionVars {
        h_shared,
        stack,
        alpha,
        h_tilde,
        y_hat,
        y_aux,
    })
}

/// Fusion outputs as plain matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub h_shared: Vec<f64>,
    pub stack: Matrix,
    pub alpha: Matrix,
    pub h_tilde: Matrix,
    pub y_hat: Vec<f64>,
    /// `3 × |C|`; the image row holds 0.5 placeholders when absent.
    pub y_aux: Matrix,
    /// Which auxiliary rows are real predictions.
    pub aux_available: [bool; 3],
}

impl FusionOutput {
    pub(crate) fn from_graph(g: &Graph, v: &FusionVars) -> Self {
        let c = g.value(v.y_hat).cols();
        let mut y_aux = Matrix::filled(3, c, 0.5);
        let mut aux_available = [false; 3];
        for (i, a) in v.y_aux.iter().enumerate() {
            if let Some(a) = a {
                y_aux.row_mut(i).copy_from_slice(g.value(*a).data());
                aux_available[i] = true;
            }
        }
        Self {
            h_shared: g.value(v.h_shared).data().to_vec(),
            stack: g.value(v.stack).clone(),
            alpha: g.value(v.alpha).clone(),
            h_tilde: g.value(v.h_tilde).clone(),
            y_hat: g.value(v.y_hat).data().to_vec(),
            y_aux,
            aux_available,
        }
    }
}

pub fn pool_shared(bundle: &RepresentationBundle, pooling: Pooling) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars = bundle.to_graph(&mut g)?;
    let h = pool_shared_vars(&mut g, &vars, pooling)?;
    Ok(g.value(h).data().to_vec())
}

pub fn build_query(
    bundle: &RepresentationBundle,
    h_shared: &[f64],
    store: &ParamStore,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars = bundle.to_graph(&mut g)?;
    let hs = g.constant(Matrix::row_vector(h_shared.to_vec()));
    let q = build_query_vars(&mut g, store, &vars, hs)?;
    Ok(g.value(q).data().to_vec())
}

pub fn fuse(
    bundle: &RepresentationBundle,
    store: &ParamStore,
    cfg: &ModelConfig,
) -> Result<FusionOutput> {
    fuse_with_fill(bundle, store, cfg, None)
}

/// [`fuse`] with a custom fill row for an absent image.
pub fn fuse_with_fill(
    bundle: &RepresentationBundle,
    store: &ParamStore,
    cfg: &ModelConfig,
    absent_fill: Option<&Matrix>,
) -> Result<FusionOutput> {
    let mut g = Graph::new();
    let vars = bundle.to_graph(&mut g)?;
    let out = fuse_vars(&mut g, store, &vars, cfg, absent_fill)?;
    Ok(FusionOutput::from_graph(&g, &out))
}

/// Auxiliary predictions `3 × |C|` and which rows are real.
pub fn aux_predict(
    bundle: &RepresentationBundle,
    h_shared: &[f64],
    store: &ParamStore,
) -> Result<(Matrix, [bool; 3])> {
    let mut g = Graph::new();
    let vars = bundle.to_graph(&mut g)?;
    let hs = g.constant(Matrix::row_vector(h_shared.to_vec()));
    let mut rows = Vec::new();
    let mut available = [true, true, vars.cxr.is_some()];
    for (i, input) in [Some(vars.distinct_ehr), Some(hs), vars.cxr.map(|c| c.1)]
        .into_iter()
        .enumerate()
    {
        match input {
            Some(x) => {
                let y = aux_head(&mut g, store, x, i + 1)?;
                rows.push(g.value(y).data().to_vec());
            }
            None => {
                available[i] = false;
                let c = rows.first().map_or(0, Vec::len);
                rows.push(vec![0.5; c]);
            }
        }
    }
    Ok((Matrix::from_rows(&rows)?, available))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn cfg(classes: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_classes: classes,
            ..ModelConfig::default()
        }
    }

    fn store(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::default();
        init_fusion(&mut s, &mut rng, cfg);
        s
    }

    fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    fn bundle(rng: &mut ChaCha8Rng, d: usize, has_cxr: bool) -> RepresentationBundle {
        RepresentationBundle {
            shared_ehr: rand_vec(rng, d),
            distinct_ehr: rand_vec(rng, d),
            shared_cxr: has_cxr.then(|| rand_vec(rng, d)),
            distinct_cxr: has_cxr.then(|| rand_vec(rng, d)),
        }
    }

    #[test]
    fn pool_shared_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = bundle(&mut rng, 4, false);
        assert_eq!(pool_shared(&b, Pooling::Logit).unwrap(), b.shared_ehr);

        let v = vec![0.3, -1.0, 2.0];
        let same = RepresentationBundle {
            shared_ehr: v.clone(),
            distinct_ehr: v.clone(),
            shared_cxr: Some(v.clone()),
            distinct_cxr: Some(v.clone()),
        };
        for (a, b) in pool_shared(&same, Pooling::Logit).unwrap().iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }

        let scalar = RepresentationBundle {
            shared_ehr: vec![4f64.ln()],
            distinct_ehr: vec![0.0],
            shared_cxr: Some(vec![(2.0f64 / 3.0).ln()]),
            distinct_cxr: Some(vec![0.0]),
        };
        let pooled = pool_shared(&scalar, Pooling::Logit).unwrap();
        assert!((pooled[0] - 1.5f64.ln()).abs() < 1e-12);
        let mean = pool_shared(&scalar, Pooling::Mean).unwrap();
        assert!((mean[0] - 0.5 * (4f64.ln() + (2.0f64 / 3.0).ln())).abs() < 1e-12);
    }

    #[test]
    fn query_cases() {
        let cfg = cfg(1);
        let mut s = store(&cfg, 2);
        s.insert("fusion.wq", Matrix::identity(cfg.d_model));
        let zero = vec![0.0; cfg.d_model];
        let zeros = RepresentationBundle {
            shared_ehr: zero.clone(),
            distinct_ehr: zero.clone(),
            shared_cxr: Some(zero.clone()),
            distinct_cxr: Some(zero.clone()),
        };
        assert_eq!(build_query(&zeros, &zero, &s).unwrap(), zero);

        let v: Vec<f64> = (0..cfg.d_model).map(|i| i as f64 - 2.5).collect();
        let partial = RepresentationBundle {
            shared_ehr: v.clone(),
            distinct_ehr: v.clone(),
            shared_cxr: None,
            distinct_cxr: None,
        };
        assert_eq!(build_query(&partial, &v, &s).unwrap(), v);

        let e = |i: usize| {
            let mut x = vec![0.0; cfg.d_model];
            x[i] = 1.0;
            x
        };
        let basis = RepresentationBundle {
            shared_ehr: e(1),
            distinct_ehr: e(0),
            shared_cxr: Some(e(1)),
            distinct_cxr: Some(e(2)),
        };
        let q = build_query(&basis, &e(1), &s).unwrap();
        for (i, x) in q.iter().enumerate() {
            let expected = if i < 3 { 1.0 / 3.0 } else { 0.0 };
            assert!((x - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn absent_image_gets_zero_weight_and_fill_is_irrelevant() {
        let cfg = cfg(5);
        let s = store(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let b = bundle(&mut rng, cfg.d_model, false);
            let out = fuse(&b, &s, &cfg).unwrap();
            for c in 0..cfg.n_classes {
                assert_eq!(out.alpha.get(c, DISTINCT_CXR), 0.0);
                assert!((out.alpha.row(c).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert_eq!(out.aux_available, [true, true, false]);
            assert!(out.y_aux.row(2).iter().all(|&p| p == 0.5));
            let junk = Matrix::row_vector(rand_vec(&mut rng, cfg.d_model));
            let other = fuse_with_fill(&b, &s, &cfg, Some(&junk)).unwrap();
            assert_eq!(out.alpha, other.alpha);
            assert_eq!(out.h_tilde, other.h_tilde);
            assert_eq!(out.y_hat, other.y_hat);
        }
    }

    #[test]
    fn equal_rows_make_weights_irrelevant() {
        let cfg = cfg(3);
        let mut s = store(&cfg, 5);
        let d = cfg.d_model;
        s.insert("fusion.wq", Matrix::identity(d));
        s.insert("fusion.wv", Matrix::identity(d));
        let mut wk = Matrix::zeros(3 * d, d);
        for c in 0..3 {
            for i in 0..d {
                wk.set(c * d + i, i, 1.0);
            }
        }
        s.insert("fusion.wk", wk);
        let v: Vec<f64> = (0..d).map(|i| 0.1 * i as f64).collect();
        let b = RepresentationBundle {
            shared_ehr: v.clone(),
            distinct_ehr: v.clone(),
            shared_cxr: Some(v.clone()),
            distinct_cxr: Some(v.clone()),
        };
        let out = fuse(&b, &s, &cfg).unwrap();
        for c in 0..3 {
            for (x, y) in out.h_tilde.row(c).iter().zip(&v) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn per_class_keys_give_per_class_weights() {
        let cfg = cfg(2);
        let s = store(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = bundle(&mut rng, cfg.d_model, true);
        let out = fuse(&b, &s, &cfg).unwrap();
        assert_ne!(out.alpha.row(0), out.alpha.row(1));

        // Same α as the literal per-class K_c = H·W_K[c], scores = q·K_cᵀ.
        let h_shared = pool_shared(&b, Pooling::Logit).unwrap();
        let q = Matrix::row_vector(build_query(&b, &h_shared, &s).unwrap());
        let d = cfg.d_model;
        let wk = s.get("fusion.wk").unwrap();
        for c in 0..2 {
            let block =
                Matrix::from_vec(d, d, wk.data()[c * d * d..(c + 1) * d * d].to_vec()).unwrap();
            let keys = out.stack.matmul(&block);
            let scores = q.matmul_nt(&keys);
            let alpha =
                crate::kernels::masked_scaled_attention(scores.data(), &[0.0; 3], d).unwrap();
            for (a, b) in alpha.iter().zip(out.alpha.row(c)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn swapping_rows_permutes_weights_with_identity_projections() {
        let cfg = cfg(1);
        let d = cfg.d_model;
        let mut s = store(&cfg, 8);
        s.insert("fusion.wk", Matrix::identity(d));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = bundle(&mut rng, d, true);
        let swapped = RepresentationBundle {
            distinct_ehr: b.distinct_cxr.clone().unwrap(),
            distinct_cxr: Some(b.distinct_ehr.clone()),
            ..b.clone()
        };
        let a1 = fuse(&b, &s, &cfg).unwrap().alpha;
        let a2 = fuse(&swapped, &s, &cfg).unwrap().alpha;
        assert!((a1.get(0, 0) - a2.get(0, 2)).abs() < 1e-12);
        assert!((a1.get(0, 2) - a2.get(0, 0)).abs() < 1e-12);
        assert!((a1.get(0, 1) - a2.get(0, 1)).abs() < 1e-12);
    }

    #[test]
    fn shapes_for_many_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for classes in [1, 5, 25] {
            let cfg = cfg(classes);
            let s = store(&cfg, 11);
            for has_cxr in [true, false] {
                let b = bundle(&mut rng, cfg.d_model, has_cxr);
                let out = fuse(&b, &s, &cfg).unwrap();
                assert_eq!(out.alpha.shape(), (classes, 3));
                assert_eq!(out.h_tilde.shape(), (classes, cfg.d_model));
                assert_eq!(out.y_hat.len(), classes);
                assert!(out.y_hat.iter().all(|p| *p > 0.0 && *p < 1.0));
                let (aux, avail) = aux_predict(&b, &out.h_shared, &s).unwrap();
                assert_eq!(aux, out.y_aux);
                assert_eq!(avail[2], has_cxr);
                assert!(aux.data().iter().all(|p| *p > 0.0 && *p < 1.0));
            }
        }
    }

    #[test]
    fn mismatched_bundle_is_rejected() {
        let cfg = cfg(1);
        let s = store(&cfg, 1);
        let b = RepresentationBundle {
            shared_ehr: vec![0.0; 8],
            distinct_ehr: vec![0.0; 8],
            shared_cxr: Some(vec![0.0; 8]),
            distinct_cxr: None,
        };
        assert!(fuse(&b, &s, &cfg).is_err());
    }
}
