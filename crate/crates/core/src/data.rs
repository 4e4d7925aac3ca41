//! Samples, the synthetic generator, record files and dataset splits.
//!
//! The synthetic generator draws three independent latent factors per
//! patient: one shared by both modalities and one private to each. The
//! time series sees `[z_shared, z_ehr]`, the image sees `[z_shared, z_cxr]`
//! and every label class is driven by exactly one of the three factors, so
//! the benefit of the image and the quality of the learned representations
//! can be measured against known ground truth.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::logistic;
use crate::tensor::Matrix;

/// A `T × J` clinical time series.
#[derive(Debug, Clone, PartialEq)]
pub struct EhrSequence(Matrix);

impl EhrSequence {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 {
            return Err(Error::InvalidInput("EHR sequence has no time steps".into()));
        }
        if values.cols() == 0 {
            return Err(Error::InvalidInput("EHR sequence has no features".into()));
        }
        if !values.is_finite() {
            return Err(Error::InvalidInput(
                "EHR sequence has non-finite entries".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn n_features(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub(crate) fn values_mut(&mut self) -> &mut Matrix {
        &mut self.0
    }
}

impl Serialize for EhrSequence {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.to_rows().serialize(s)
    }
}

/// A present image: `height × width × channels` intensities in `[0, 1]`,
/// stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidInput("image has an empty dimension".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidInput(format!(
                "image of shape {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "image intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            shape: [height, width, channels],
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.shape[0]
    }

    pub fn width(&self) -> usize {
        self.shape[1]
    }

    pub fn channels(&self) -> usize {
        self.shape[2]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Channels-last `(H·W) × C` matrix.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.height() * self.width(),
            self.channels(),
            self.data.clone(),
        )
        .expect("validated shape")
    }
}

/// Which latent factor drives a label class (or a block of latent dims).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Shared,
    Ehr,
    Cxr,
}

impl FactorKind {
    pub const ALL: [FactorKind; 3] = [FactorKind::Shared, FactorKind::Ehr, FactorKind::Cxr];

    pub fn name(self) -> &'static str {
        match self {
            FactorKind::Shared => "z_shared",
            FactorKind::Ehr => "z_ehr",
            FactorKind::Cxr => "z_cxr",
        }
    }
}

/// Ground-truth latent factors of a synthetic sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    pub shared: Vec<f64>,
    pub ehr: Vec<f64>,
    pub cxr: Vec<f64>,
}

impl Factors {
    pub fn get(&self, kind: FactorKind) -> &[f64] {
        match kind {
            FactorKind::Shared => &self.shared,
            FactorKind::Ehr => &self.ehr,
            FactorKind::Cxr => &self.cxr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRecord {
    pub id: String,
    pub ehr: EhrSequence,
    /// `None` encodes an absent image.
    pub cxr: Option<Image>,
    pub labels: Vec<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub factors: Option<Factors>,
}

impl SampleRecord {
    pub fn has_cxr(&self) -> bool {
        self.cxr.is_some()
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| f64::from(l)).collect()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    ehr: Vec<Vec<f64>>,
    cxr: Option<Image>,
    labels: Vec<u8>,
    #[serde(default)]
    factors: Option<Factors>,
}

impl RawRecord {
    fn validate(self, n_classes: usize, n_features: usize) -> Result<SampleRecord> {
        let id = self.id;
        let schema = |field: &str, reason: String| Error::Schema {
            id: id.clone(),
            field: field.to_string(),
            reason,
        };
        if self.labels.len() != n_classes {
            return Err(schema(
                "labels",
                format!("expected {n_classes} labels, found {}", self.labels.len()),
            ));
        }
        if self.labels.iter().any(|&l| l > 1) {
            return Err(schema("labels", "labels must be 0 or 1".into()));
        }
        if let Some(row) = self.ehr.iter().find(|r| r.len() != n_features) {
            return Err(schema(
                "ehr",
                format!(
                    "expected {n_features} features per step, found {}",
                    row.len()
                ),
            ));
        }
        let ehr = EhrSequence::from_rows(&self.ehr).map_err(|e| schema("ehr", e.to_string()))?;
        let cxr = match self.cxr {
            Some(img) => Some(
                Image::new(img.shape[0], img.shape[1], img.shape[2], img.data)
                    .map_err(|e| schema("cxr", e.to_string()))?,
            ),
            None => None,
        };
        Ok(SampleRecord {
            id,
            ehr,
            cxr,
            labels: self.labels,
            factors: self.factors,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub n_features: usize,
    pub records: Vec<SampleRecord>,
    /// Driving factor of each class, known for synthetic data.
    pub class_drivers: Option<Vec<FactorKind>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// A dataset holding the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            n_classes: self.n_classes,
            n_features: self.n_features,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            class_drivers: self.class_drivers.clone(),
        }
    }

    /// Only the records that carry an image.
    pub fn matched(&self) -> Dataset {
        Dataset {
            records: self
                .records
                .iter()
                .filter(|r| r.has_cxr())
                .cloned()
                .collect(),
            ..self.clone_header()
        }
    }

    /// Same records with every image removed.
    pub fn without_cxr(&self) -> Dataset {
        let mut out = self.clone();
        for r in &mut out.records {
            r.cxr = None;
        }
        out
    }

    pub fn cxr_coverage(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.has_cxr()).count() as f64 / self.records.len() as f64
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            n_classes: self.n_classes,
            n_features: self.n_features,
            records: Vec::new(),
            class_drivers: self.class_drivers.clone(),
        }
    }

    /// Fraction of positives per class.
    pub fn prevalence(&self) -> Vec<f64> {
        let n = self.records.len().max(1) as f64;
        (0..self.n_classes)
            .map(|c| self.records.iter().filter(|r| r.labels[c] == 1).count() as f64 / n)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MissingMechanism {
    /// Images dropped independently of everything else.
    Mcar,
    /// Drop probability grows with `‖z_ehr‖`.
    Mnar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub n_classes: usize,
    pub d_shared: usize,
    pub d_ehr_distinct: usize,
    pub d_cxr_distinct: usize,
    pub seq_len: usize,
    pub n_features: usize,
    pub image_size: usize,
    pub missing_rate: f64,
    pub missing_mechanism: MissingMechanism,
    pub label_noise: f64,
    /// Standard deviation of the additive noise on EHR values.
    pub ehr_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_samples: 5000,
            n_classes: 8,
            d_shared: 4,
            d_ehr_distinct: 4,
            d_cxr_distinct: 4,
            seq_len: 12,
            n_features: 10,
            image_size: 16,
            missing_rate: 0.4,
            missing_mechanism: MissingMechanism::Mcar,
            label_noise: 0.02,
            ehr_noise: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Scale cues of the ICU cohort: 25 phenotypes, 17 variables, 48 hourly steps.
    pub fn mimic_like() -> Self {
        Self {
            n_classes: 25,
            n_features: 17,
            seq_len: 48,
            ..Self::default()
        }
    }

    /// Small and quick, for smoke runs.
    pub fn smoke() -> Self {
        Self {
            n_samples: 200,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "mimic-like" => Ok(Self::mimic_like()),
            "smoke" => Ok(Self::smoke()),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset `{other}` (expected default, mimic-like or smoke)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_samples", self.n_samples),
            ("n_classes", self.n_classes),
            ("d_shared", self.d_shared),
            ("d_ehr_distinct", self.d_ehr_distinct),
            ("d_cxr_distinct", self.d_cxr_distinct),
            ("seq_len", self.seq_len),
            ("n_features", self.n_features),
            ("image_size", self.image_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        for (name, rate) in [
            ("missing_rate", self.missing_rate),
            ("label_noise", self.label_noise),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {rate}"
                )));
            }
        }
        if !(self.ehr_noise >= 0.0 && self.ehr_noise.is_finite()) {
            return Err(Error::InvalidConfig(
                "ehr_noise must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Class `c` is driven by shared, EHR and image factors in rotation.
    pub fn class_drivers(&self) -> Vec<FactorKind> {
        (0..self.n_classes)
            .map(|c| FactorKind::ALL[c % 3])
            .collect()
    }
}

/// The fixed random decoders of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub config: SyntheticConfig,
    pub class_drivers: Vec<FactorKind>,
    /// `J × (d_shared + d_ehr)` static loadings.
    pub ehr_loading: Matrix,
    pub ehr_bias: Vec<f64>,
    /// `J × (d_shared + d_ehr)` loadings of the oscillating component.
    pub ehr_modulation: Matrix,
    pub ehr_frequency: Vec<f64>,
    pub ehr_phase: Vec<f64>,
    /// `K × (H·W)` spatial blobs.
    pub image_basis: Matrix,
    /// `K × (d_shared + d_cxr)` blob amplitude loadings.
    pub image_loading: Matrix,
    /// `C × (d_shared + d_ehr + d_cxr)`; non-zero only on the driving block.
    pub label_weights: Matrix,
    pub label_bias: Vec<f64>,
    pub missing_offset: f64,
}

const LABEL_SCALE: f64 = 3.0;
const LABEL_BIAS: f64 = -1.0;
const IMAGE_GAIN: f64 = 2.5;
const IMAGE_NOISE: f64 = 0.1;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * normal(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl GeneratorSpec {
    pub fn new(config: &SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let (ds, de, dc) = (
            config.d_shared,
            config.d_ehr_distinct,
            config.d_cxr_distinct,
        );
        let j = config.n_features;
        let ehr_in = ds + de;
        let s = config.image_size;
        let n_blobs = 2 * (ds + dc);

        let ehr_loading = normal_matrix(&mut rng, j, ehr_in, 1.0 / (ehr_in as f64).sqrt());
        let ehr_bias = (0..j).map(|_| 0.3 * normal(&mut rng)).collect();
        let ehr_modulation = normal_matrix(&mut rng, j, ehr_in, 1.0 / (ehr_in as f64).sqrt());
        let ehr_frequency = (0..j).map(|_| rng.random_range(0.5..2.0)).collect();
        let ehr_phase = (0..j)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();

        let mut image_basis = Matrix::zeros(n_blobs, s * s);
        for k in 0..n_blobs {
            let cy = rng.random_range(0.0..s as f64);
            let cx = rng.random_range(0.0..s as f64);
            let width = rng.random_range(0.08..0.2) * s as f64;
            for y in 0..s {
                for x in 0..s {
                    let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    image_basis.set(k, y * s + x, (-r2 / (2.0 * width * width)).exp());
                }
            }
        }
        let image_loading =
            normal_matrix(&mut rng, n_blobs, ds + dc, 1.0 / ((ds + dc) as f64).sqrt());

        let class_drivers = config.class_drivers();
        let total = ds + de + dc;
        let mut label_weights = Matrix::zeros(config.n_classes, total);
        for (c, kind) in class_drivers.iter().enumerate() {
            let (start, len) = match kind {
                FactorKind::Shared => (0, ds),
                FactorKind::Ehr => (ds, de),
                FactorKind::Cxr => (ds + de, dc),
            };
            let w = normal_vec(&mut rng, len);
            let norm = dot(&w, &w).sqrt().max(1e-12);
            for (i, v) in w.iter().enumerate() {
                label_weights.set(c, start + i, LABEL_SCALE * v / norm);
            }
        }
        let label_bias = vec![LABEL_BIAS; config.n_classes];

        Ok(Self {
            config: config.clone(),
            class_drivers,
            ehr_loading,
            ehr_bias,
            ehr_modulation,
            ehr_frequency,
            ehr_phase,
            image_basis,
            image_loading,
            label_weights,
            label_bias,
            missing_offset: de as f64,
        })
    }

    /// SHA-256 of the serialized decoders.
    pub fn digest(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        let hash = Sha256::digest(&bytes);
        Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
    }

    fn ehr(&self, z_se: &[f64], rng: &mut ChaCha8Rng) -> Matrix {
        let cfg = &self.config;
        let t_len = cfg.seq_len;
        let j = cfg.n_features;
        let mut out = Matrix::zeros(t_len, j);
        let level: Vec<f64> = (0..j)
            .map(|f| (dot(self.ehr_loading.row(f), z_se) + self.ehr_bias[f]).tanh())
            .collect();
        let swing: Vec<f64> = (0..j)
            .map(|f| dot(self.ehr_modulation.row(f), z_se).tanh())
            .collect();
        for t in 0..t_len {
            let phase = std::f64::consts::TAU * t as f64 / t_len as f64;
            for f in 0..j {
                let wave = (self.ehr_frequency[f] * phase + self.ehr_phase[f]).sin();
                out.set(
                    t,
                    f,
                    level[f] + 0.5 * swing[f] * wave + cfg.ehr_noise * normal(rng),
                );
            }
        }
        out
    }

    fn image(&self, z_sc: &[f64], rng: &mut ChaCha8Rng) -> Image {
        let s = self.config.image_size;
        let amplitudes: Vec<f64> = (0..self.image_basis.rows())
            .map(|k| dot(self.image_loading.row(k), z_sc).tanh())
            .collect();
        let data = (0..s * s)
            .map(|p| {
                let signal: f64 = amplitudes
                    .iter()
                    .enumerate()
                    .map(|(k, a)| a * self.image_basis.get(k, p))
                    .sum();
                logistic(IMAGE_GAIN * signal + IMAGE_NOISE * normal(rng))
            })
            .collect();
        Image::new(s, s, 1, data).expect("generated image is valid")
    }

    fn drop_probability(&self, z_ehr: &[f64]) -> f64 {
        let cfg = &self.config;
        match cfg.missing_mechanism {
            MissingMechanism::Mcar => cfg.missing_rate,
            MissingMechanism::Mnar => {
                let sq = dot(z_ehr, z_ehr);
                let spread = (2.0 * cfg.d_ehr_distinct as f64).sqrt();
                let tilt = logistic(2.0 * (sq - self.missing_offset) / spread);
                (2.0 * cfg.missing_rate * tilt).min(1.0)
            }
        }
    }
}

/// Draws a dataset from `config`, returning it with its decoders.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(Dataset, GeneratorSpec)> {
    let spec = GeneratorSpec::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut records = Vec::with_capacity(config.n_samples);
    for n in 0..config.n_samples {
        let shared = normal_vec(&mut rng, config.d_shared);
        let ehr_z = normal_vec(&mut rng, config.d_ehr_distinct);
        let cxr_z = normal_vec(&mut rng, config.d_cxr_distinct);
        let z_se: Vec<f64> = shared.iter().chain(&ehr_z).copied().collect();
        let z_sc: Vec<f64> = shared.iter().chain(&cxr_z).copied().collect();
        let z_all: Vec<f64> = shared.iter().chain(&ehr_z).chain(&cxr_z).copied().collect();

        let ehr = EhrSequence::new(spec.ehr(&z_se, &mut rng))?;
        let image = spec.image(&z_sc, &mut rng);
        let labels = (0..config.n_classes)
            .map(|c| {
                let p = logistic(dot(spec.label_weights.row(c), &z_all) + spec.label_bias[c]);
                let mut y = rng.random::<f64>() < p;
                if rng.random::<f64>() < config.label_noise {
                    y = !y;
                }
                u8::from(y)
            })
            .collect();
        let keep = rng.random::<f64>() >= spec.drop_probability(&ehr_z);
        records.push(SampleRecord {
            id: format!("s{n:06}"),
            ehr,
            cxr: keep.then_some(image),
            labels,
            factors: Some(Factors {
                shared,
                ehr: ehr_z,
                cxr: cxr_z,
            }),
        });
    }
    let dataset = Dataset {
        n_classes: config.n_classes,
        n_features: config.n_features,
        records,
        class_drivers: Some(spec.class_drivers.clone()),
    };
    Ok((dataset, spec))
}

/// Writes one JSON record per line.
pub fn write_records(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Streams and validates a record file. Blank lines are skipped.
pub fn read_records(path: &Path, n_classes: usize, n_features: usize) -> Result<Vec<SampleRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
            id: format!("line {}", lineno + 1),
            field: "record".into(),
            reason: e.to_string(),
        })?;
        out.push(raw.validate(n_classes, n_features)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub digest: String,
    /// Decoder file, relative to the manifest.
    pub decoders: PathBuf,
}

/// Describes a record file: its width, class count and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Record file, relative to the manifest unless absolute.
    pub records: PathBuf,
    pub n_classes: usize,
    pub n_features: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_drivers: Option<Vec<FactorKind>>,
    pub split: SplitAssignment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorInfo>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let sum: f64 = manifest.split.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split ratios sum to {sum}, expected 1"
            )));
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn records_path(&self, manifest_path: &Path) -> PathBuf {
        if self.records.is_absolute() {
            self.records.clone()
        } else {
            manifest_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(&self.records)
        }
    }
}

/// A dataset loaded from a manifest together with its split.
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub dataset: Dataset,
    pub splits: Splits,
}

/// Reads the manifest, its record file, and resolves the split ids.
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let records = read_records(
        &manifest.records_path(manifest_path),
        manifest.n_classes,
        manifest.n_features,
    )?;
    let dataset = Dataset {
        n_classes: manifest.n_classes,
        n_features: manifest.n_features,
        records,
        class_drivers: manifest.class_drivers.clone(),
    };
    let splits = Splits::from_assignment(&dataset, &manifest.split)?;
    Ok(LoadedDataset {
        manifest,
        dataset,
        splits,
    })
}

/// Index sets of a train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// The 7:1:2 partition.
pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];

/// Shuffles with `seed` and cuts into train/val/test by `ratios`.
///
/// Validation gets `round(n·r_val)` records, training `round(n·r_train)`,
/// and the test split takes the rest.
pub fn split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::InvalidConfig("split ratios must be positive".into()));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split ratios sum to {sum}, expected 1"
        )));
    }
    let n = dataset.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!(
            "cannot split {n} records into three parts"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    Ok(Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

impl Splits {
    /// Restricts every part to image-bearing records. Matched val/test are
    /// therefore subsets of the full val/test.
    pub fn matched(&self, dataset: &Dataset) -> Splits {
        let keep = |idx: &[usize]| -> Vec<usize> {
            idx.iter()
                .copied()
                .filter(|&i| dataset.records[i].has_cxr())
                .collect()
        };
        Splits {
            train: keep(&self.train),
            val: keep(&self.val),
            test: keep(&self.test),
        }
    }

    pub fn to_assignment(&self, dataset: &Dataset, ratios: [f64; 3], seed: u64) -> SplitAssignment {
        let ids = |idx: &[usize]| idx.iter().map(|&i| dataset.records[i].id.clone()).collect();
        SplitAssignment {
            seed,
            ratios,
            train: ids(&self.train),
            val: ids(&self.val),
            test: ids(&self.test),
        }
    }

    pub fn from_assignment(dataset: &Dataset, assignment: &SplitAssignment) -> Result<Self> {
        let lookup: std::collections::HashMap<&str, usize> = dataset
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect();
        let resolve = |ids: &[String], part: &str| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| {
                    lookup
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| Error::Schema {
                            id: id.clone(),
                            field: format!("split.{part}"),
                            reason: "id not present in the record file".into(),
                        })
                })
                .collect()
        };
        Ok(Splits {
            train: resolve(&assignment.train, "train")?,
            val: resolve(&assignment.val, "val")?,
            test: resolve(&assignment.test, "test")?,
        })
    }
}

/// Per-feature mean and standard deviation for z-scoring EHR values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Statistics over every time step of `records`.
    pub fn fit(records: &[SampleRecord], n_features: usize) -> Self {
        let mut sum = vec![0.0; n_features];
        let mut sq = vec![0.0; n_features];
        let mut count = 0usize;
        for r in records {
            let v = r.ehr.values();
            for t in 0..v.rows() {
                for (f, x) in v.row(t).iter().enumerate() {
                    sum[f] += x;
                    sq[f] += x * x;
                }
            }
            count += v.rows();
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var.sqrt() < 1e-8 {
                    1.0
                } else {
                    var.sqrt()
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(n_features: usize) -> Self {
        Self {
            mean: vec![0.0; n_features],
            std: vec![1.0; n_features],
        }
    }

    pub fn apply(&self, dataset: &mut Dataset) {
        for r in &mut dataset.records {
            let v = r.ehr.values_mut();
            for t in 0..v.rows() {
                for (f, x) in v.row_mut(t).iter_mut().enumerate() {
                    *x = (*x - self.mean[f]) / self.std[f];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_samples: 300,
            seed,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn no_missingness_keeps_every_image() {
        let cfg = SyntheticConfig {
            missing_rate: 0.0,
            ..small(1)
        };
        let (ds, _) = generate_synthetic(&cfg).unwrap();
        assert!(ds.records.iter().all(SampleRecord::has_cxr));
        let cfg = SyntheticConfig {
            missing_rate: 1.0,
            ..small(1)
        };
        let (ds, _) = generate_synthetic(&cfg).unwrap();
        assert!(ds.records.iter().all(|r| !r.has_cxr()));
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, sa) = generate_synthetic(&small(9)).unwrap();
        let (b, sb) = generate_synthetic(&small(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa.digest().unwrap(), sb.digest().unwrap());
        let (c, _) = generate_synthetic(&small(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = SyntheticConfig {
            missing_rate: 1.5,
            ..small(0)
        };
        assert!(matches!(
            generate_synthetic(&bad),
            Err(Error::InvalidConfig(_))
        ));
        let bad = SyntheticConfig {
            n_classes: 0,
            ..small(0)
        };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn presets() {
        let m = SyntheticConfig::preset("mimic-like").unwrap();
        assert_eq!((m.n_classes, m.n_features, m.seq_len), (25, 17, 48));
        assert!(SyntheticConfig::preset("nope").is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let cfg = SyntheticConfig {
            n_samples: 10,
            ..small(0)
        };
        let (ds, _) = generate_synthetic(&cfg).unwrap();
        let s = split(&ds, DEFAULT_RATIOS, 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        assert_eq!(s, split(&ds, DEFAULT_RATIOS, 4).unwrap());
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let tiny = ds.subset(&[0, 1]);
        assert!(split(&tiny, DEFAULT_RATIOS, 0).is_err());
        assert!(split(&ds, [0.5, 0.5, 0.5], 0).is_err());
    }

    #[test]
    fn matched_split_nests_inside_full_split() {
        let cfg = SyntheticConfig {
            missing_rate: 0.6,
            ..small(3)
        };
        let (ds, _) = generate_synthetic(&cfg).unwrap();
        let full = split(&ds, DEFAULT_RATIOS, 11).unwrap();
        let matched = full.matched(&ds);
        assert!(matched.val.iter().all(|i| full.val.contains(i)));
        assert!(matched.test.iter().all(|i| full.test.contains(i)));
        assert!(matched
            .test
            .iter()
            .chain(&matched.val)
            .all(|&i| ds.records[i].has_cxr()));
    }

    #[test]
    fn record_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, _) = generate_synthetic(&small(5)).unwrap();
        let path = dir.path().join("records.jsonl");
        write_records(&path, &ds.records).unwrap();
        let back = read_records(&path, ds.n_classes, ds.n_features).unwrap();
        assert_eq!(back, ds.records);
    }

    #[test]
    fn empty_file_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_records(&path, 3, 2).unwrap().is_empty());
    }

    #[test]
    fn schema_errors_name_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            r#"{"id":"p42","ehr":[[0.0,1.0]],"cxr":null,"labels":[1,0]}"#,
        )
        .unwrap();
        match read_records(&path, 3, 2) {
            Err(Error::Schema { id, field, .. }) => {
                assert_eq!(id, "p42");
                assert_eq!(field, "labels");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
        std::fs::write(
            &path,
            r#"{"id":"p7","ehr":[[0.0]],"cxr":{"shape":[2,2,1],"data":[0.1,0.2,0.3]},"labels":[1,0,0]}"#,
        )
        .unwrap();
        match read_records(&path, 3, 1) {
            Err(Error::Schema { id, field, .. }) => {
                assert_eq!((id.as_str(), field.as_str()), ("p7", "cxr"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn feature_stats_standardize_training_data() {
        let (mut ds, _) = generate_synthetic(&small(2)).unwrap();
        let stats = FeatureStats::fit(&ds.records, ds.n_features);
        stats.apply(&mut ds);
        let again = FeatureStats::fit(&ds.records, ds.n_features);
        for (m, s) in again.mean.iter().zip(&again.std) {
            assert!(m.abs() < 1e-9);
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
