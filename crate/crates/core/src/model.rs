//! Model configurations and the per-sample forward pass for DrFuse and the
//! internal baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::SampleRecord;
use crate::encoders::{
    ehr_forward, ehr_single_forward, image_forward, image_trunk_forward, init_ehr_encoder,
    init_ehr_single, init_image_encoder, init_image_trunk, linear,
};
use crate::error::{Error, Result};
use crate::fusion::{
    fuse_vars, init_fusion, BundleVars, FusionOutput, FusionVars, RepresentationBundle,
};
use crate::params::ParamStore;
use crate::tensor::Matrix;

/// How the two shared representations are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Average in probability space, mapped back to logits.
    Logit,
    /// Arithmetic mean of the logits.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_width: usize,
    /// Layers shared by the two EHR branches.
    pub shared_layers: usize,
    /// Layers private to each EHR branch.
    pub branch_layers: usize,
    pub max_seq_len: usize,
    pub positional_encoding: bool,
    /// Output channels of each stride-2 convolution.
    pub conv_channels: Vec<usize>,
    pub image_channels: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            ffn_width: 128,
            shared_layers: 1,
            branch_layers: 1,
            max_seq_len: 256,
            positional_encoding: true,
            conv_channels: vec![8, 16, 32],
            image_channels: 1,
            n_features: 10,
            n_classes: 8,
            pooling: Pooling::Logit,
        }
    }
}

impl ModelConfig {
    /// Channels after the last convolution.
    pub fn trunk_width(&self) -> usize {
        self.conv_channels
            .last()
            .copied()
            .unwrap_or(self.image_channels)
    }

    /// Hidden width of the auxiliary heads.
    pub fn aux_hidden(&self) -> usize {
        (self.d_model / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d_model < 2 || !self.d_model.is_multiple_of(2) {
            return bad(format!(
                "d_model must be even and >= 2, got {}",
                self.d_model
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.shared_layers == 0 {
            return bad("at least one shared EHR layer is required".into());
        }
        for (name, v) in [
            ("ffn_width", self.ffn_width),
            ("max_seq_len", self.max_seq_len),
            ("image_channels", self.image_channels),
            ("n_features", self.n_features),
            ("n_classes", self.n_classes),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.conv_channels.contains(&0) {
            return bad("conv_channels must be positive".into());
        }
        Ok(())
    }
}

/// Architectures trained by the toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[serde(rename = "drfuse")]
    DrFuse,
    /// EHR transformer with a linear head; never reads the image.
    EhrOnly,
    /// Image trunk with a linear head; an absent image reads as a zero feature vector.
    CxrOnly,
    /// Concatenated EHR and image features with zero-fill for absent images.
    Concat,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::DrFuse => "drfuse",
            ModelKind::EhrOnly => "ehr_only",
            ModelKind::CxrOnly => "cxr_only",
            ModelKind::Concat => "concat",
        }
    }
}

/// Whether a parameter belongs to the image encoder.
pub fn is_image_param(name: &str) -> bool {
    name.starts_with("cxr.")
}

/// Graph handles of one sample's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `1 × |C|` probabilities.
    pub y_hat: Var,
    /// Intermediate values, present for [`ModelKind::DrFuse`].
    pub drfuse: Option<DrFuseVars>,
}

#[derive(Debug, Clone, Copy)]
pub struct DrFuseVars {
    pub bundle: BundleVars,
    pub fusion: FusionVars,
}

/// Numeric result of [`Model::predict`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub y_hat: Vec<f64>,
    pub bundle: Option<RepresentationBundle>,
    pub fusion: Option<FusionOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    pub config: ModelConfig,
}

impl Model {
    pub fn new(kind: ModelKind, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { kind, config })
    }

    /// Freshly initialized parameters; identical for identical seeds.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        match self.kind {
            ModelKind::DrFuse => {
                init_ehr_encoder(&mut store, &mut rng, cfg);
                init_image_encoder(&mut store, &mut rng, cfg);
                init_fusion(&mut store, &mut rng, cfg);
            }
            ModelKind::EhrOnly => {
                init_ehr_single(&mut store, &mut rng, cfg);
                store.init_weight(&mut rng, "head.w", cfg.d_model, cfg.n_classes);
            }
            ModelKind::CxrOnly => {
                init_image_trunk(&mut store, &mut rng, cfg);
                store.init_weight(&mut rng, "head.w", cfg.trunk_width(), cfg.n_classes);
            }
            ModelKind::Concat => {
                init_ehr_single(&mut store, &mut rng, cfg);
                init_image_trunk(&mut store, &mut rng, cfg);
                let width = cfg.d_model + cfg.trunk_width();
                store.init_weight(&mut rng, "head.w", width, cfg.n_classes);
            }
        }
        if self.kind != ModelKind::DrFuse {
            store.init_zeros("head.b", 1, cfg.n_classes);
        }
        store
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sample: &SampleRecord,
    ) -> Result<ForwardVars> {
        self.forward_with_fill(g, store, sample, None)
    }

    /// [`Model::forward`] with a custom fill row for an absent image in the
    /// attention stack. Only meaningful for DrFuse.
    pub fn forward_with_fill(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sample: &SampleRecord,
        absent_fill: Option<&Matrix>,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        if sample.labels.len() != cfg.n_classes {
            return Err(Error::InvalidInput(format!(
                "sample `{}` has {} labels, the model predicts {} classes",
                sample.id,
                sample.labels.len(),
                cfg.n_classes
            )));
        }
        let zero_image = |g: &mut Graph| g.constant(Matrix::zeros(1, cfg.trunk_width()));
        let head = |g: &mut Graph, x: Var| -> Result<Var> {
            let logits = linear(g, store, x, "head.w", "head.b")?;
            g.sigmoid(logits)
        };
        match self.kind {
            ModelKind::DrFuse => {
                let (shared_ehr, distinct_ehr) = ehr_forward(g, store, &sample.ehr, cfg)?;
                let cxr = match &sample.cxr {
                    Some(img) => Some(image_forward(g, store, img, cfg)?),
                    None => None,
                };
                let bundle = BundleVars {
                    shared_ehr,
                    distinct_ehr,
                    cxr,
                };
                let fusion = fuse_vars(g, store, &bundle, cfg, absent_fill)?;
                Ok(ForwardVars {
                    y_hat: fusion.y_hat,
                    drfuse: Some(DrFuseVars { bundle, fusion }),
                })
            }
            ModelKind::EhrOnly => {
                let h = ehr_single_forward(g, store, &sample.ehr, cfg)?;
                Ok(ForwardVars {
                    y_hat: head(g, h)?,
                    drfuse: None,
                })
            }
            ModelKind::CxrOnly => {
                let h = match &sample.cxr {
                    Some(img) => image_trunk_forward(g, store, img, cfg)?,
                    None => zero_image(g),
                };
                Ok(ForwardVars {
                    y_hat: head(g, h)?,
                    drfuse: None,
                })
            }
            ModelKind::Concat => {
                let e = ehr_single_forward(g, store, &sample.ehr, cfg)?;
                let c = match &sample.cxr {
                    Some(img) => image_trunk_forward(g, store, img, cfg)?,
                    None => zero_image(g),
                };
                let h = g.concat_cols(&[e, c]);
                Ok(ForwardVars {
                    y_hat: head(g, h)?,
                    drfuse: None,
                })
            }
        }
    }

    pub fn predict(&self, store: &ParamStore, sample: &SampleRecord) -> Result<Prediction> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, sample)?;
        Ok(prediction_from_graph(&g, &out))
    }
}

pub(crate) fn prediction_from_graph(g: &Graph, out: &ForwardVars) -> Prediction {
    let row = |v: Var| g.value(v).data().to_vec();
    let (bundle, fusion) = match &out.drfuse {
        Some(dv) => {
            let b = &dv.bundle;
            let bundle = RepresentationBundle {
                shared_ehr: row(b.shared_ehr),
                distinct_ehr: row(b.distinct_ehr),
                shared_cxr: b.cxr.map(|c| row(c.0)),
                distinct_cxr: b.cxr.map(|c| row(c.1)),
            };
            (Some(bundle), Some(FusionOutput::from_graph(g, &dv.fusion)))
        }
        None => (None, None),
    };
    Prediction {
        y_hat: row(out.y_hat),
        bundle,
        fusion,
    }
}
