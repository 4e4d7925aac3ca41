//! Metrics, bootstrap intervals, reports, linear probes, ablations and
//! internal baselines.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FactorKind, FeatureStats, SampleRecord, Splits};
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{Model, ModelConfig, ModelKind, Pooling, Prediction};
use crate::params::ParamStore;
use crate::training::{
    fit, load_checkpoint, save_checkpoint, Alignment, CheckpointMeta, TrainConfig,
};

/// Average precision: the mean, over positives in descending-score order,
/// of the precision at each positive's rank. Ties keep their input order.
pub fn prauc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("no positive labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

/// Macro average over classes that have at least one positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroPrauc {
    pub value: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes without positives, left out of the average.
    pub skipped: usize,
}

/// Macro PRAUC of per-sample probability rows.
pub fn macro_prauc(predictions: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<MacroPrauc> {
    let idx: Vec<usize> = (0..predictions.len()).collect();
    macro_prauc_at(predictions, labels, &idx)
}

fn macro_prauc_at(
    predictions: &[Vec<f64>],
    labels: &[Vec<u8>],
    idx: &[usize],
) -> Result<MacroPrauc> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} prediction rows for {} label rows",
            predictions.len(),
            labels.len()
        )));
    }
    let Some(first) = idx.first() else {
        return Err(Error::UndefinedMetric("no samples".into()));
    };
    let n_classes = labels[*first].len();
    let mut scores = Vec::with_capacity(idx.len());
    let mut ys = Vec::with_capacity(idx.len());
    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        scores.clear();
        ys.clear();
        for &i in idx {
            scores.push(predictions[i][c]);
            ys.push(labels[i][c]);
        }
        per_class.push(match prauc(&scores, &ys) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        });
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric(
            "no class has a positive label".into(),
        ));
    }
    Ok(MacroPrauc {
        value: defined.iter().sum::<f64>() / defined.len() as f64,
        skipped: n_classes - defined.len(),
        per_class,
    })
}

/// A two-sided percentile interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    /// Iterations whose resample gave a defined metric.
    pub valid_iters: usize,
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over `n` samples. `metric` receives the resampled
/// indices; iterations where it reports an undefined metric are skipped.
/// Iteration `i` draws from its own stream of `seed`, so the result does
/// not depend on evaluation order.
pub fn bootstrap_ci(
    n: usize,
    n_iter: usize,
    level: f64,
    seed: u64,
    metric: impl Fn(&[usize]) -> Result<f64>,
) -> Result<Interval> {
    if n == 0 {
        return Err(Error::InvalidInput("cannot bootstrap an empty set".into()));
    }
    if !(level > 0.0 && level < 1.0) || n_iter == 0 {
        return Err(Error::InvalidConfig(format!(
            "bootstrap needs 0 < level < 1 and iterations > 0, got {level} and {n_iter}"
        )));
    }
    let mut values = Vec::with_capacity(n_iter);
    let mut idx = vec![0; n];
    for it in 0..n_iter {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(it as u64);
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        match metric(&idx) {
            Ok(v) => values.push(v),
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(Error::UndefinedMetric(
            "every bootstrap resample was undefined".into(),
        ));
    }
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(Interval {
        lo: quantile(&values, tail),
        hi: quantile(&values, 1.0 - tail),
        valid_iters: values.len(),
    })
}

/// Bootstrap interval of the macro PRAUC.
pub fn bootstrap_macro_prauc(
    predictions: &[Vec<f64>],
    labels: &[Vec<u8>],
    n_iter: usize,
    level: f64,
    seed: u64,
) -> Result<Interval> {
    bootstrap_ci(predictions.len(), n_iter, level, seed, |idx| {
        macro_prauc_at(predictions, labels, idx).map(|m| m.value)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub bootstrap_iters: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bootstrap_iters: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub class: usize,
    pub prauc: Option<f64>,
    pub prevalence: f64,
    pub n_positive: usize,
}

/// R² of ridge probes from each representation to each latent factor. The
/// pooled shared representation is probed next to the four encoder outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeScores {
    /// Row order of `r2` and `control_r2`.
    pub representations: Vec<String>,
    /// Column order of `r2` and `control_r2`.
    pub factors: Vec<String>,
    pub r2: Vec<Vec<f64>>,
    /// Same probes fitted against row-shuffled factors.
    pub control_r2: Vec<Vec<f64>>,
    /// Mean JSD between the two shared representations over paired samples.
    pub mean_shared_jsd: f64,
    pub n_samples: usize,
}

impl ProbeScores {
    pub fn get(&self, representation: &str, factor: FactorKind) -> Option<f64> {
        let r = self
            .representations
            .iter()
            .position(|n| n == representation)?;
        let f = self.factors.iter().position(|n| n == factor.name())?;
        Some(self.r2[r][f])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Free-form tag such as `full` or `matched`.
    pub label: String,
    pub n_samples: usize,
    pub n_paired: usize,
    pub classes: Vec<ClassMetric>,
    pub macro_prauc: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub ci_level: f64,
    pub bootstrap_iters: usize,
    pub skipped_classes: usize,
    pub probe: Option<ProbeScores>,
}

/// Scores `predictions` against `dataset` labels.
pub fn metric_report(
    label: &str,
    dataset: &Dataset,
    predictions: &[Vec<f64>],
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    let labels: Vec<Vec<u8>> = dataset.records.iter().map(|r| r.labels.clone()).collect();
    let point = macro_prauc(predictions, &labels)?;
    if point.skipped > 0 {
        log::warn!(
            "{label}: {} classes without positives left out",
            point.skipped
        );
    }
    let ci = bootstrap_macro_prauc(
        predictions,
        &labels,
        cfg.bootstrap_iters,
        cfg.level,
        cfg.seed,
    )?;
    let prevalence = dataset.prevalence();
    let classes = point
        .per_class
        .iter()
        .enumerate()
        .map(|(c, p)| ClassMetric {
            class: c,
            prauc: *p,
            prevalence: prevalence[c],
            n_positive: labels.iter().filter(|l| l[c] == 1).count(),
        })
        .collect();
    Ok(MetricReport {
        label: label.to_string(),
        n_samples: dataset.len(),
        n_paired: dataset.records.iter().filter(|r| r.has_cxr()).count(),
        classes,
        macro_prauc: point.value,
        ci_lo: ci.lo,
        ci_hi: ci.hi,
        ci_level: cfg.level,
        bootstrap_iters: cfg.bootstrap_iters,
        skipped_classes: point.skipped,
        probe: None,
    })
}

pub fn predict_dataset(
    model: &Model,
    store: &ParamStore,
    dataset: &Dataset,
) -> Result<Vec<Prediction>> {
    dataset
        .records
        .iter()
        .map(|r| model.predict(store, r))
        .collect()
}

fn probabilities(preds: &[Prediction]) -> Vec<Vec<f64>> {
    preds.iter().map(|p| p.y_hat.clone()).collect()
}

/// Predicts and scores a dataset; DrFuse reports carry probe scores when
/// the records have latent factors.
pub fn evaluate_model(
    model: &Model,
    store: &ParamStore,
    dataset: &Dataset,
    label: &str,
    cfg: &EvalConfig,
) -> Result<(MetricReport, Vec<Prediction>)> {
    let preds = predict_dataset(model, store, dataset)?;
    let mut report = metric_report(label, dataset, &probabilities(&preds), cfg)?;
    if model.kind == ModelKind::DrFuse {
        report.probe = probe_from_predictions(dataset, &preds, cfg.seed)?;
    }
    Ok((report, preds))
}

#[derive(Serialize)]
struct ReportRow<'a> {
    report: &'a str,
    class: String,
    prauc: Option<f64>,
    prevalence: Option<f64>,
    n_positive: Option<usize>,
    ci_lo: Option<f64>,
    ci_hi: Option<f64>,
    n_samples: usize,
}

/// One row per class and a `macro` summary row for each report.
pub fn write_report_csv(path: &Path, reports: &[&MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        for c in &r.classes {
            w.serialize(ReportRow {
                report: &r.label,
                class: c.class.to_string(),
                prauc: c.prauc,
                prevalence: Some(c.prevalence),
                n_positive: Some(c.n_positive),
                ci_lo: None,
                ci_hi: None,
                n_samples: r.n_samples,
            })?;
        }
        w.serialize(ReportRow {
            report: &r.label,
            class: "macro".into(),
            prauc: Some(r.macro_prauc),
            prevalence: None,
            n_positive: None,
            ci_lo: Some(r.ci_lo),
            ci_hi: Some(r.ci_hi),
            n_samples: r.n_samples,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub id: String,
    pub class: usize,
    pub has_cxr: bool,
    pub distinct_ehr: f64,
    pub shared: f64,
    pub distinct_cxr: f64,
}

/// Per-sample, per-class attention weights of DrFuse predictions.
pub fn alpha_rows(dataset: &Dataset, preds: &[Prediction]) -> Vec<AlphaRow> {
    let mut rows = Vec::new();
    for (r, p) in dataset.records.iter().zip(preds) {
        let Some(f) = &p.fusion else { continue };
        for c in 0..f.alpha.rows() {
            let a = f.alpha.row(c);
            rows.push(AlphaRow {
                id: r.id.clone(),
                class: c,
                has_cxr: r.has_cxr(),
                distinct_ehr: a[0],
                shared: a[1],
                distinct_cxr: a[2],
            });
        }
    }
    rows
}

pub fn write_alpha_csv(path: &Path, rows: &[AlphaRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fraction of (paired sample, class) pairs whose largest attention weight
/// falls on the representation with the smallest auxiliary loss.
pub fn attention_agreement(dataset: &Dataset, preds: &[Prediction]) -> Result<Option<f64>> {
    let (mut hits, mut total) = (0usize, 0usize);
    for (r, p) in dataset.records.iter().zip(preds) {
        let Some(f) = &p.fusion else { continue };
        if !r.has_cxr() {
            continue;
        }
        let y = r.labels_f64();
        let losses: Vec<Vec<f64>> = (0..3)
            .map(|i| kernels::binary_cross_entropy(&y, f.y_aux.row(i)))
            .collect::<Result<_>>()?;
        for c in 0..y.len() {
            let best_attn = argmax((0..3).map(|i| f.alpha.get(c, i)));
            let best_aux = argmax((0..3).map(|i| -losses[i][c]));
            hits += usize::from(best_attn == best_aux);
            total += 1;
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

const PROBE_REPS: [&str; 5] = [
    "shared",
    "shared_ehr",
    "shared_cxr",
    "distinct_ehr",
    "distinct_cxr",
];
const RIDGE_ALPHA: f64 = 1.0;

/// Held-out R² of a ridge regression from `x` to `y`, fitted on the first
/// half of the rows and scored on the second.
pub fn ridge_r2(x: &DMatrix<f64>, y: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    let n = x.nrows();
    if n < 4 || y.nrows() != n {
        return Err(Error::InvalidInput(format!(
            "ridge probe needs at least 4 rows, got {n}"
        )));
    }
    let n_fit = n / 2;
    let (xf, xt) = (x.rows(0, n_fit), x.rows(n_fit, n - n_fit));
    let (yf, yt) = (y.rows(0, n_fit), y.rows(n_fit, n - n_fit));
    let x_mean = xf.row_mean();
    let y_mean = yf.row_mean();
    let x_std = xf
        .row_variance()
        .map(|v| if v.sqrt() < 1e-12 { 1.0 } else { v.sqrt() });
    let standardize = |m: nalgebra::DMatrixView<f64>| {
        let mut out = m.clone_owned();
        for mut row in out.row_iter_mut() {
            row -= &x_mean;
            row.component_div_assign(&x_std);
        }
        out
    };
    let (xs, xts) = (standardize(xf), standardize(xt));
    let mut yc = yf.clone_owned();
    for mut row in yc.row_iter_mut() {
        row -= &y_mean;
    }
    let d = xs.ncols();
    let gram = xs.transpose() * &xs + DMatrix::identity(d, d) * alpha;
    let beta = gram
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("ridge system is not positive definite".into()))?
        .solve(&(xs.transpose() * yc));
    let mut pred = xts * beta;
    for mut row in pred.row_iter_mut() {
        row += &y_mean;
    }
    let sse = (&pred - yt).norm_squared();
    let test_mean = yt.row_mean();
    let mut sst = 0.0;
    for row in yt.row_iter() {
        sst += (row - &test_mean).norm_squared();
    }
    if sst <= 0.0 {
        return Err(Error::UndefinedMetric("constant probe target".into()));
    }
    Ok(1.0 - sse / sst)
}

fn probe_from_predictions(
    dataset: &Dataset,
    preds: &[Prediction],
    seed: u64,
) -> Result<Option<ProbeScores>> {
    let mut rows: Vec<[&[f64]; 5]> = Vec::new();
    let mut factors = Vec::new();
    let mut jsd_sum = 0.0;
    for (r, p) in dataset.records.iter().zip(preds) {
        let (Some(b), Some(fused), Some(f)) = (&p.bundle, &p.fusion, &r.factors) else {
            continue;
        };
        let (Some(sc), Some(dc)) = (&b.shared_cxr, &b.distinct_cxr) else {
            continue;
        };
        jsd_sum += kernels::jsd_from_logits(&b.shared_ehr, sc)?;
        rows.push([&fused.h_shared, &b.shared_ehr, sc, &b.distinct_ehr, dc]);
        factors.push(f);
    }
    let n = rows.len();
    if n < 4 {
        return Ok(None);
    }
    let mut shuffled: Vec<usize> = (0..n).collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut r2 = Vec::new();
    let mut control = Vec::new();
    for rep in 0..PROBE_REPS.len() {
        let d = rows[0][rep].len();
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][rep][j]);
        let (mut line, mut ctrl) = (Vec::new(), Vec::new());
        for kind in FactorKind::ALL {
            let k = factors[0].get(kind).len();
            let y = DMatrix::from_fn(n, k, |i, j| factors[i].get(kind)[j]);
            let y_shuf = DMatrix::from_fn(n, k, |i, j| factors[shuffled[i]].get(kind)[j]);
            line.push(ridge_r2(&x, &y, RIDGE_ALPHA)?);
            ctrl.push(ridge_r2(&x, &y_shuf, RIDGE_ALPHA)?);
        }
        r2.push(line);
        control.push(ctrl);
    }
    Ok(Some(ProbeScores {
        representations: PROBE_REPS.iter().map(|s| s.to_string()).collect(),
        factors: FactorKind::ALL
            .iter()
            .map(|k| k.name().to_string())
            .collect(),
        r2,
        control_r2: control,
        mean_shared_jsd: jsd_sum / n as f64,
        n_samples: n,
    }))
}

/// Ridge probes from the representations to the three latent factors,
/// over the image-bearing records of `dataset`. `None` when fewer than four
/// such records carry factors.
pub fn disentanglement_probe(
    model: &Model,
    store: &ParamStore,
    dataset: &Dataset,
    seed: u64,
) -> Result<Option<ProbeScores>> {
    if model.kind != ModelKind::DrFuse {
        return Err(Error::InvalidInput("probes need a DrFuse model".into()));
    }
    let paired = dataset.matched();
    let preds = predict_dataset(model, store, &paired)?;
    probe_from_predictions(&paired, &preds, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub id: String,
    pub representation: String,
    pub x: f64,
    pub y: f64,
}

/// Two-dimensional PCA of the shared representations of paired samples,
/// for plotting.
pub fn shared_projection(dataset: &Dataset, preds: &[Prediction]) -> Vec<ProjectionRow> {
    let mut ids = Vec::new();
    let mut vecs: Vec<&[f64]> = Vec::new();
    for (r, p) in dataset.records.iter().zip(preds) {
        let Some(b) = &p.bundle else { continue };
        let Some(sc) = &b.shared_cxr else { continue };
        ids.push((r.id.clone(), "shared_ehr"));
        vecs.push(&b.shared_ehr);
        ids.push((r.id.clone(), "shared_cxr"));
        vecs.push(sc);
    }
    if vecs.len() < 2 {
        return Vec::new();
    }
    let d = vecs[0].len();
    let mut x = DMatrix::from_fn(vecs.len(), d, |i, j| vecs[i][j]);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let cov = x.transpose() * &x / (vecs.len() - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes = [order[0], order.get(1).copied().unwrap_or(order[0])];
    let proj = |i: usize, k: usize| x.row(i).dot(&eig.eigenvectors.column(axes[k]).transpose());
    ids.into_iter()
        .enumerate()
        .map(|(i, (id, rep))| ProjectionRow {
            id,
            representation: rep.to_string(),
            x: proj(i, 0),
            y: proj(i, 1),
        })
        .collect()
}

/// The ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Alignment and orthogonality weights set to zero.
    WithoutDisentangled,
    /// MSE alignment and arithmetic-mean pooling of the shared representations.
    MseAlignment,
    /// Ranking loss removed; `lambda3` keeps weighing the auxiliary loss.
    WithoutAttnRanking,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::WithoutDisentangled,
        Variant::MseAlignment,
        Variant::WithoutAttnRanking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutDisentangled => "w/o disentangled",
            Variant::MseAlignment => "MSE alignment",
            Variant::WithoutAttnRanking => "w/o attn ranking",
        }
    }

    /// Directory-safe name.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutDisentangled => "wo_disentangled",
            Variant::MseAlignment => "mse_alignment",
            Variant::WithoutAttnRanking => "wo_attn_ranking",
        }
    }

    pub fn apply(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let (mut m, mut t) = (model.clone(), train.clone());
        match self {
            Variant::Full => {}
            Variant::WithoutDisentangled => {
                t.lambda1 = 0.0;
                t.lambda2 = 0.0;
            }
            Variant::MseAlignment => {
                t.alignment = Alignment::Mse;
                m.pooling = Pooling::Mean;
            }
            Variant::WithoutAttnRanking => t.attn_ranking = false,
        }
        (m, t)
    }
}

/// Data shared by every trained model of an experiment. The records are
/// expected to be normalized with `stats` already.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentData<'a> {
    pub dataset: &'a Dataset,
    pub splits: &'a Splits,
    pub split_seed: u64,
    pub stats: &'a FeatureStats,
}

impl ExperimentData<'_> {
    fn part(&self, idx: &[usize]) -> Dataset {
        self.dataset.subset(idx)
    }
}

/// A trained model and where it came from.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub params: ParamStore,
    pub best_epoch: usize,
    /// True when the parameters were loaded from an earlier run.
    pub resumed: bool,
}

/// Trains `model`, or reloads it from `dir` when a checkpoint with the same
/// configuration is already there.
pub fn train_or_resume(
    model: &Model,
    train_cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    stats: &FeatureStats,
    dir: Option<&Path>,
) -> Result<Trained> {
    let ckpt = dir.map(|d| d.join("checkpoint.safetensors"));
    if let Some(path) = ckpt.as_deref().filter(|p| p.exists()) {
        let (params, meta) = load_checkpoint(path)?;
        if meta.model == *model && meta.train == *train_cfg && meta.feature_stats == *stats {
            log::info!("resuming {} from {}", model.kind.name(), path.display());
            return Ok(Trained {
                model: model.clone(),
                params,
                best_epoch: meta.best_epoch,
                resumed: true,
            });
        }
    }
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let log_path = dir.map(|d| d.join("train_log.jsonl"));
    let outcome = fit(
        model,
        model.init_params(train_cfg.seed),
        train,
        val,
        train_cfg,
        log_path.as_deref(),
    )?;
    if let Some(path) = &ckpt {
        let meta = CheckpointMeta {
            model: model.clone(),
            train: train_cfg.clone(),
            feature_stats: stats.clone(),
            best_epoch: outcome.best_epoch,
        };
        save_checkpoint(path, &outcome.params, &meta)?;
    }
    Ok(Trained {
        model: model.clone(),
        params: outcome.params,
        best_epoch: outcome.best_epoch,
        resumed: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub name: String,
    pub split_seed: u64,
    pub best_epoch: usize,
    pub matched: MetricReport,
    pub full: MetricReport,
    /// Share of attention argmax matching the auxiliary-loss argmin.
    pub attention_agreement: Option<f64>,
}

/// Trains and evaluates the four ablation variants on identical splits.
/// With `work_dir`, each variant checkpoints into its own subdirectory and
/// finished variants are reloaded instead of retrained.
pub fn run_ablations(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: ExperimentData<'_>,
    eval_cfg: &EvalConfig,
    work_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let (train, val, test) = (
        data.part(&data.splits.train),
        data.part(&data.splits.val),
        data.part(&data.splits.test),
    );
    let matched = test.matched();
    Variant::ALL
        .iter()
        .map(|&variant| {
            let (m, t) = variant.apply(model_cfg, train_cfg);
            let model = Model::new(ModelKind::DrFuse, m)?;
            let dir = work_dir.map(|d| d.join(variant.slug()));
            let trained = train_or_resume(&model, &t, &train, &val, data.stats, dir.as_deref())?;
            let (full, preds) = evaluate_model(&model, &trained.params, &test, "full", eval_cfg)?;
            let (matched_report, _) =
                evaluate_model(&model, &trained.params, &matched, "matched", eval_cfg)?;
            Ok(AblationRow {
                variant,
                name: variant.name().to_string(),
                split_seed: data.split_seed,
                best_epoch: trained.best_epoch,
                matched: matched_report,
                full,
                attention_agreement: attention_agreement(&test, &preds)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct AblationCsvRow<'a> {
    variant: &'a str,
    split_seed: u64,
    matched_prauc: f64,
    matched_ci_lo: f64,
    matched_ci_hi: f64,
    full_prauc: f64,
    full_ci_lo: f64,
    full_ci_hi: f64,
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(AblationCsvRow {
            variant: &r.name,
            split_seed: r.split_seed,
            matched_prauc: r.matched.macro_prauc,
            matched_ci_lo: r.matched.ci_lo,
            matched_ci_hi: r.matched.ci_hi,
            full_prauc: r.full.macro_prauc,
            full_ci_lo: r.full.ci_lo,
            full_ci_hi: r.full.ci_hi,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub kind: ModelKind,
    pub best_epoch: usize,
    pub full: MetricReport,
    pub matched: MetricReport,
}

/// Trains the EHR-only, image-only and concatenation baselines. The
/// image-only model sees only image-bearing training records.
pub fn internal_baselines(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: ExperimentData<'_>,
    eval_cfg: &EvalConfig,
    work_dir: Option<&Path>,
) -> Result<Vec<BaselineRow>> {
    let (train, val, test) = (
        data.part(&data.splits.train),
        data.part(&data.splits.val),
        data.part(&data.splits.test),
    );
    let matched = test.matched();
    [ModelKind::EhrOnly, ModelKind::CxrOnly, ModelKind::Concat]
        .iter()
        .map(|&kind| {
            let model = Model::new(kind, model_cfg.clone())?;
            let (tr, va) = if kind == ModelKind::CxrOnly {
                (train.matched(), val.matched())
            } else {
                (train.clone(), val.clone())
            };
            let dir = work_dir.map(|d| d.join(kind.name()));
            let trained = train_or_resume(&model, train_cfg, &tr, &va, data.stats, dir.as_deref())?;
            let (full, _) = evaluate_model(&model, &trained.params, &test, "full", eval_cfg)?;
            let (matched_report, _) =
                evaluate_model(&model, &trained.params, &matched, "matched", eval_cfg)?;
            Ok(BaselineRow {
                kind,
                best_epoch: trained.best_epoch,
                full,
                matched: matched_report,
            })
        })
        .collect()
}

/// Per-class PRAUC of a model next to the best unimodal PRAUC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeRow {
    pub model: String,
    pub class: String,
    pub prauc: Option<f64>,
    pub best_unimodal: Option<f64>,
    /// `100 · (prauc − best) / best`.
    pub relative_pct: Option<f64>,
}

/// Relative difference of each candidate against the best unimodal report,
/// per class and for the macro average.
pub fn relative_difference(
    candidates: &[(&str, &MetricReport)],
    unimodal: &[&MetricReport],
) -> Vec<RelativeRow> {
    let best_of = |get: &dyn Fn(&MetricReport) -> Option<f64>| {
        unimodal
            .iter()
            .filter_map(|r| get(r))
            .fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.max(v)))
            })
    };
    let rel = |p: Option<f64>, b: Option<f64>| match (p, b) {
        (Some(p), Some(b)) if b > 0.0 => Some(100.0 * (p - b) / b),
        _ => None,
    };
    let mut rows = Vec::new();
    for (name, report) in candidates {
        for c in &report.classes {
            let best = best_of(&|r: &MetricReport| r.classes.get(c.class).and_then(|x| x.prauc));
            rows.push(RelativeRow {
                model: name.to_string(),
                class: c.class.to_string(),
                prauc: c.prauc,
                best_unimodal: best,
                relative_pct: rel(c.prauc, best),
            });
        }
        let best = best_of(&|r: &MetricReport| Some(r.macro_prauc));
        rows.push(RelativeRow {
            model: name.to_string(),
            class: "macro".into(),
            prauc: Some(report.macro_prauc),
            best_unimodal: best,
            relative_pct: rel(Some(report.macro_prauc), best),
        });
    }
    rows
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Labels of `records` as rows.
pub fn label_rows(records: &[SampleRecord]) -> Vec<Vec<u8>> {
    records.iter().map(|r| r.labels.clone()).collect()
}
