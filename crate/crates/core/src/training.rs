//! The composite objective, modality-dropout augmentation, the optimizer and
//! the training loop with early stopping.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{Dataset, FeatureStats, SampleRecord};
use crate::error::{Error, Result};
use crate::eval::macro_prauc;
use crate::model::{prediction_from_graph, ForwardVars, Model};
use crate::params::ParamStore;
use crate::tensor::Matrix;

/// Loss used to align the two shared representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    Jsd,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the shared-representation alignment loss.
    pub lambda1: f64,
    /// Weight of the orthogonality losses.
    pub lambda2: f64,
    /// Weight of the attention-ranking and auxiliary losses.
    pub lambda3: f64,
    /// Ranking margin.
    pub epsilon: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Probability of hiding the image of each image-bearing training sample.
    pub modality_dropout: f64,
    pub seed: u64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub alignment: Alignment,
    /// When false the ranking loss is dropped and `lambda3` weighs the
    /// auxiliary loss alone.
    pub attn_ranking: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.5,
            epsilon: 0.1,
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            modality_dropout: 0.3,
            seed: 0,
            grad_clip: 5.0,
            alignment: Alignment::Jsd,
            attn_ranking: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("epsilon", self.epsilon),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.modality_dropout) {
            return bad(format!(
                "modality_dropout must lie in [0, 1], got {}",
                self.modality_dropout
            ));
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!(
                "grad_clip must be positive, got {}",
                self.grad_clip
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        Ok(())
    }
}

/// Every term of the objective, unweighted, plus the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pred: f64,
    /// Alignment loss (JSD, or MSE in the ablation).
    pub jsd: f64,
    pub orth_ehr: f64,
    pub orth_cxr: f64,
    pub attn: f64,
    pub aux: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Fills `total` from the other terms.
    pub fn combine(mut self, cfg: &TrainConfig) -> Self {
        self.total = self.pred
            + cfg.lambda1 * self.jsd
            + cfg.lambda2 * (self.orth_ehr + self.orth_cxr)
            + cfg.lambda3 * (self.attn + self.aux);
        self
    }

    fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("pred", self.pred),
            ("jsd", self.jsd),
            ("orth_ehr", self.orth_ehr),
            ("orth_cxr", self.orth_cxr),
            ("attn", self.attn),
            ("aux", self.aux),
            ("total", self.total),
        ]
    }

    fn check_finite(&self, epoch: usize) -> Result<()> {
        match self.terms().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((term, _)) => Err(Error::Divergence {
                term: term.to_string(),
                epoch,
            }),
            None => Ok(()),
        }
    }

    fn add_scaled(&mut self, other: &LossBreakdown, k: f64) {
        self.pred += k * other.pred;
        self.jsd += k * other.jsd;
        self.orth_ehr += k * other.orth_ehr;
        self.orth_cxr += k * other.orth_cxr;
        self.attn += k * other.attn;
        self.aux += k * other.aux;
        self.total += k * other.total;
    }
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).get(0, 0)
}

/// Loss of one sample: the full objective when the image is present, the
/// prediction and EHR orthogonality terms otherwise.
fn sample_loss(
    g: &mut Graph,
    out: &ForwardVars,
    labels: &[f64],
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let bce = g.bce(out.y_hat, labels)?;
    let pred = g.sum_all(bce);
    let mut parts = LossBreakdown {
        pred: scalar(g, pred),
        ..LossBreakdown::default()
    };
    let Some(dv) = out.drfuse else {
        parts.total = parts.pred;
        return Ok((pred, parts));
    };
    let b = dv.bundle;
    let orth_ehr = g.orthogonality(b.shared_ehr, b.distinct_ehr)?;
    parts.orth_ehr = scalar(g, orth_ehr);
    let w_orth = g.scale(orth_ehr, cfg.lambda2);
    let mut total = g.add(pred, w_orth);

    if let Some((shared_cxr, distinct_cxr)) = b.cxr {
        let align = match cfg.alignment {
            Alignment::Jsd => g.jsd(b.shared_ehr, shared_cxr)?,
            Alignment::Mse => g.mse(b.shared_ehr, shared_cxr)?,
        };
        let orth_cxr = g.orthogonality(shared_cxr, distinct_cxr)?;
        parts.jsd = scalar(g, align);
        parts.orth_cxr = scalar(g, orth_cxr);

        let n_classes = labels.len();
        let mut aux_losses = Matrix::zeros(n_classes, 3);
        let mut aux_total: Option<Var> = None;
        for (i, y_aux) in dv.fusion.y_aux.iter().enumerate() {
            let y_aux = y_aux.expect("all auxiliary heads run for paired samples");
            let per_class = g.bce(y_aux, labels)?;
            for (c, l) in g.value(per_class).data().iter().enumerate() {
                aux_losses.set(c, i, *l);
            }
            let s = g.sum_all(per_class);
            aux_total = Some(match aux_total {
                Some(acc) => g.add(acc, s),
                None => s,
            });
        }
        let aux = aux_total.expect("three heads");
        parts.aux = scalar(g, aux);
        let mut weighted = aux;
        if cfg.attn_ranking {
            let attn = g.margin_rank(dv.fusion.alpha, aux_losses, cfg.epsilon)?;
            parts.attn = scalar(g, attn);
            weighted = g.add(weighted, attn);
        }

        let w_align = g.scale(align, cfg.lambda1);
        let w_orth_cxr = g.scale(orth_cxr, cfg.lambda2);
        let w_aux = g.scale(weighted, cfg.lambda3);
        total = g.add(total, w_align);
        total = g.add(total, w_orth_cxr);
        total = g.add(total, w_aux);
    }
    parts.total = scalar(g, total);
    Ok((total, parts))
}

/// Batch objective: the per-sample loss averaged over the whole batch.
/// Returns the scalar graph node and the averaged breakdown.
pub fn compute_loss(
    g: &mut Graph,
    outputs: &[ForwardVars],
    labels: &[Vec<f64>],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(Var, LossBreakdown)> {
    if outputs.is_empty() || outputs.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} outputs for {} label rows",
            outputs.len(),
            labels.len()
        )));
    }
    let k = 1.0 / outputs.len() as f64;
    let mut mean = LossBreakdown::default();
    let mut sum: Option<Var> = None;
    for (out, y) in outputs.iter().zip(labels) {
        let (loss, parts) = sample_loss(g, out, y, cfg)?;
        parts.check_finite(epoch)?;
        mean.add_scaled(&parts, k);
        sum = Some(match sum {
            Some(acc) => g.add(acc, loss),
            None => loss,
        });
    }
    let total = g.scale(sum.expect("non-empty batch"), k);
    Ok((total, mean))
}

/// Hides the image of each image-bearing sample with probability `rate`.
/// Returns how many images were hidden.
pub fn apply_modality_dropout(
    batch: &mut [SampleRecord],
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    let mut dropped = 0;
    for s in batch.iter_mut().filter(|s| s.has_cxr()) {
        if rng.random::<f64>() < rate {
            s.cxr = None;
            dropped += 1;
        }
    }
    dropped
}

/// Adam with per-parameter step counts, so parameters that receive no
/// gradient in a step are left untouched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, (Matrix, Matrix, i32)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Matrix>) -> Result<()> {
        for (name, grad) in grads {
            let param = store
                .get_mut(name)
                .ok_or_else(|| Error::InvalidInput(format!("gradient for unknown `{name}`")))?;
            let (m, v, t) = self.state.entry(name.clone()).or_insert_with(|| {
                (
                    Matrix::zeros(grad.rows(), grad.cols()),
                    Matrix::zeros(grad.rows(), grad.cols()),
                    0,
                )
            });
            *t += 1;
            let c1 = 1.0 - self.beta1.powi(*t);
            let c2 = 1.0 - self.beta2.powi(*t);
            let p = param.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, &gi) in grad.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Matrix>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Matrix::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_assign(k);
        }
    }
    norm
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    /// `None` when no class has a positive label.
    pub macro_prauc: Option<f64>,
    pub n_samples: usize,
    pub n_paired: usize,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters of the best validation epoch, or of the last epoch
    /// without validation data.
    pub params: ParamStore,
    pub log: Vec<LogRecord>,
    pub best_epoch: usize,
    pub best_val_prauc: Option<f64>,
    pub epochs_run: usize,
}

struct PassResult {
    losses: LossBreakdown,
    predictions: Vec<Vec<f64>>,
    n_paired: usize,
}

fn labels_of(batch: &[SampleRecord]) -> Vec<Vec<f64>> {
    batch.iter().map(SampleRecord::labels_f64).collect()
}

/// Forward pass and loss over `dataset` without parameter updates.
fn evaluate_pass(
    model: &Model,
    store: &ParamStore,
    dataset: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<PassResult> {
    let mut losses = LossBreakdown::default();
    let mut predictions = Vec::with_capacity(dataset.len());
    for chunk in dataset.records.chunks(cfg.batch_size) {
        let mut g = Graph::new();
        let outputs = chunk
            .iter()
            .map(|s| model.forward(&mut g, store, s))
            .collect::<Result<Vec<_>>>()?;
        let (_, parts) = compute_loss(&mut g, &outputs, &labels_of(chunk), cfg, epoch)?;
        losses.add_scaled(&parts, chunk.len() as f64 / dataset.len() as f64);
        predictions.extend(outputs.iter().map(|o| g.value(o.y_hat).data().to_vec()));
    }
    Ok(PassResult {
        losses,
        predictions,
        n_paired: dataset.records.iter().filter(|r| r.has_cxr()).count(),
    })
}

fn log_record(epoch: usize, split: &str, pass: &PassResult, dataset: &Dataset) -> LogRecord {
    let labels: Vec<Vec<u8>> = dataset.records.iter().map(|r| r.labels.clone()).collect();
    LogRecord {
        epoch,
        split: split.to_string(),
        losses: pass.losses,
        macro_prauc: macro_prauc(&pass.predictions, &labels)
            .ok()
            .map(|m| m.value),
        n_samples: dataset.len(),
        n_paired: pass.n_paired,
    }
}

struct LogSink(Option<(BufWriter<File>, std::path::PathBuf)>);

impl LogSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        Ok(Self(match path {
            Some(p) => Some((
                BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?),
                p.to_path_buf(),
            )),
            None => None,
        }))
    }

    fn write(&mut self, rec: &LogRecord) -> Result<()> {
        if let Some((w, path)) = &mut self.0 {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")
                .map_err(|e| Error::io(path.as_path(), e))?;
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }
}

/// Trains `model` from `init`, keeping the parameters of the best
/// validation macro PRAUC. When `log_path` is given every log record is
/// appended there as it is produced, so a diverged run leaves its log.
pub fn fit(
    model: &Model,
    init: ParamStore,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    log_path: Option<&Path>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mut sink = LogSink::open(log_path)?;
    let mut store = init;
    let mut adam = Adam::new(cfg.lr);
    // Separate streams keep the batch order independent of how many
    // samples carry an image.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(8);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        let mut losses = LossBreakdown::default();
        let mut predictions = vec![Vec::new(); train.len()];
        let mut n_paired = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch: Vec<SampleRecord> =
                chunk.iter().map(|&i| train.records[i].clone()).collect();
            apply_modality_dropout(&mut batch, cfg.modality_dropout, &mut dropout_rng);
            n_paired += batch.iter().filter(|s| s.has_cxr()).count();
            let mut g = Graph::new();
            let outputs = batch
                .iter()
                .map(|s| model.forward(&mut g, &store, s))
                .collect::<Result<Vec<_>>>()?;
            let (loss, parts) = compute_loss(&mut g, &outputs, &labels_of(&batch), cfg, epoch)?;
            losses.add_scaled(&parts, batch.len() as f64 / train.len() as f64);
            for (&i, out) in chunk.iter().zip(&outputs) {
                predictions[i] = prediction_from_graph(&g, out).y_hat;
            }
            let mut grads = g.backward(loss)?.into_param_grads(&g);
            if grads.values().any(|m| !m.is_finite()) {
                return Err(Error::Divergence {
                    term: "gradient".into(),
                    epoch,
                });
            }
            clip_global_norm(&mut grads, cfg.grad_clip);
            adam.step(&mut store, &grads)?;
        }
        let train_pass = PassResult {
            losses,
            predictions,
            n_paired,
        };
        let rec = log_record(epoch, "train", &train_pass, train);
        log::info!(
            "epoch {epoch}: train total {:.4} macro PRAUC {:?}",
            rec.losses.total,
            rec.macro_prauc
        );
        sink.write(&rec)?;
        log.push(rec);

        if val.is_empty() {
            continue;
        }
        let val_pass = evaluate_pass(model, &store, val, cfg, epoch)?;
        let rec = log_record(epoch, "val", &val_pass, val);
        sink.write(&rec)?;
        let score = rec.macro_prauc;
        log.push(rec);
        match (score, &best) {
            (Some(s), Some((b, _, _))) if s <= *b => since_best += 1,
            (Some(s), _) => {
                best = Some((s, store.clone(), epoch));
                since_best = 0;
            }
            (None, _) => since_best += 1,
        }
        if best.is_some() && since_best >= cfg.patience {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }

    Ok(match best {
        Some((score, params, epoch)) => FitOutcome {
            params,
            log,
            best_epoch: epoch,
            best_val_prauc: Some(score),
            epochs_run,
        },
        None => FitOutcome {
            params: store,
            log,
            best_epoch: epochs_run,
            best_val_prauc: None,
            epochs_run,
        },
    })
}

/// Writes a log as line-delimited JSON.
pub fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut sink = LogSink::open(Some(path))?;
    log.iter().try_for_each(|r| sink.write(r))
}

/// Everything besides the tensors that a checkpoint needs to be reloaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: Model,
    pub train: TrainConfig,
    pub feature_stats: FeatureStats,
    pub best_epoch: usize,
}

const META_KEY: &str = "drfuse";

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let metadata = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    store.save(path, &metadata)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let (store, metadata) = ParamStore::load(path)?;
    let text = metadata
        .get(META_KEY)
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata", path.display())))?;
    Ok((store, serde_json::from_str(text)?))
}
