//! Training protocol: Adam on cross-entropy with early stopping, five-fold
//! cross-validation over windows with leakage pruning, and accuracy
//! evaluation. Everything is a pure function of (data, seeds, config).

use crate::dataio::EegRecording;
use crate::layers::{softmax_xent, LayerError};
use crate::model::{
    accumulate_backward, forward, init_params, ModelConfig, ModelError, ParamGrads, TanetParams,
};
use crate::preprocess::{
    preprocess_recording, prune_leaky, slide_windows, PreprocConfig, PreprocError, WindowSet,
};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Tensor, TensorError};
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Preproc(#[from] PreprocError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid train config: {detail}")]
    InvalidConfig { detail: String },
    #[error("{folds}-fold split needs at least {folds} windows, got {windows}")]
    TooFewWindows { windows: usize, folds: usize },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("optimizer state misaligned with parameters: {detail}")]
    Misaligned { detail: String },
    #[error("subject {subject}{}: {source}", fold.map(|f| format!(" fold {f}")).unwrap_or_default())]
    Context {
        subject: u32,
        fold: Option<usize>,
        source: Box<TrainError>,
    },
    #[error("results io on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("results file {path} line {line}: {detail}")]
    ResultsParse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
}

fn with_context(subject: u32, fold: Option<usize>) -> impl Fn(TrainError) -> TrainError {
    move |source| TrainError::Context {
        subject,
        fold,
        source: Box::new(source),
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Protocol constants. The defaults are the training protocol verbatim:
/// lr 1e-3, 300 epochs, batch 32, patience 20, five folds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub folds: usize,
    pub val_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 300,
            batch_size: 32,
            patience: 20,
            folds: 5,
            val_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |detail: String| TrainError::InvalidConfig { detail };
        if !(self.lr > 0.0) {
            return Err(bad(format!("lr {} must be positive", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(bad("epochs and batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(bad("patience must be >= 1".into()));
        }
        if self.folds < 2 {
            return Err(bad(format!("folds {} must be >= 2", self.folds)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(bad(format!(
                "val_fraction {} must lie in (0, 0.5)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Per-parameter moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: ParamGrads,
    v: ParamGrads,
    t: u64,
}

impl AdamState {
    pub fn new(params: &TanetParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update:
/// m ← β1·m + (1−β1)·g, v ← β2·v + (1−β2)·g², p ← p − lr·m̂/(√v̂ + ε).
pub fn adam_step(
    params: &mut TanetParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let g_tensors = grads.tensors();
    let m_tensors = state.m.tensors_mut();
    if g_tensors.len() != m_tensors.len() {
        return Err(TrainError::Misaligned {
            detail: format!(
                "{} gradient tensors vs {} moment tensors",
                g_tensors.len(),
                m_tensors.len()
            ),
        });
    }
    for ((p, g), (m, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(g_tensors)
        .zip(m_tensors.into_iter().zip(state.v.tensors_mut()))
    {
        if p.shape() != g.shape() {
            return Err(TrainError::Misaligned {
                detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            });
        }
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

/// Tracks the best monitored loss; halts once `patience` epochs pass without
/// improvement. With patience 1 and no improvement after epoch 1, the run
/// stops at epoch 2.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
        }
    }

    /// Records the loss for a 1-based epoch; returns true on strict improvement.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        epoch >= self.best_epoch + self.patience
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

// ---------------------------------------------------------------------------
// Fold splitting
// ---------------------------------------------------------------------------

/// Shuffles windows by seed, partitions them into `k` near-equal test folds,
/// and pairs each with the leakage-pruned complement as its training set.
pub fn kfold_split(
    windows: &WindowSet,
    k: usize,
    seed: u64,
) -> Result<Vec<(WindowSet, WindowSet)>, TrainError> {
    let n = windows.len();
    if n < k {
        return Err(TrainError::TooFewWindows {
            windows: n,
            folds: k,
        });
    }
    if k < 2 {
        return Err(TrainError::InvalidConfig {
            detail: format!("folds {k} must be >= 2"),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut order);

    let base = n / k;
    let extra = n % k;
    let mut pairs = Vec::with_capacity(k);
    let mut cursor = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let test_idx = &order[cursor..cursor + size];
        cursor += size;
        let test_set: std::collections::HashSet<usize> = test_idx.iter().copied().collect();
        let test = WindowSet::new(test_idx.iter().map(|&i| windows.windows[i].clone()).collect());
        let train = WindowSet::new(
            (0..n)
                .filter(|i| !test_set.contains(i))
                .map(|i| windows.windows[i].clone())
                .collect(),
        );
        pairs.push((prune_leaky(&train, &test), test));
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// What a single training run produced. `stop_epoch` is the last epoch that
/// ran; the returned parameters are the best-validation snapshot.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: TanetParams,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub warning: Option<String>,
}

/// Per-fold record: accuracy plus the training history behind it.
#[derive(Debug, Clone)]
pub struct FoldReport {
    pub fold: usize,
    pub accuracy: f64,
    pub best_val_loss: f64,
    pub stop_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub warning: Option<String>,
}

/// Stratified validation split: per class, a seeded shuffle donates
/// `val_fraction` of its windows (at least one overall when possible).
fn split_validation(
    train: &WindowSet,
    val_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let n = train.len();
    if n < 2 {
        return ((0..n).collect(), Vec::new());
    }
    let mut rng = SplitMix64::new(seed);
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, w) in train.iter().enumerate() {
        by_class[w.label.class_index()].push(i);
    }
    let mut val = Vec::new();
    for class_indices in &mut by_class {
        rng.shuffle(class_indices);
        let take = ((class_indices.len() as f64) * val_fraction).round() as usize;
        let take = take.min(class_indices.len().saturating_sub(1));
        val.extend(class_indices.iter().take(take).copied());
    }
    if val.is_empty() {
        // tiny sets: donate one window from the largest class
        let largest = if by_class[0].len() >= by_class[1].len() { 0 } else { 1 };
        if let Some(&idx) = by_class[largest].first() {
            val.push(idx);
        }
    }
    val.sort_unstable();
    let val_set: std::collections::HashSet<usize> = val.iter().copied().collect();
    let train_idx: Vec<usize> = (0..n).filter(|i| !val_set.contains(i)).collect();
    (train_idx, val)
}

/// Mean cross-entropy of `params` over the given windows (forward only).
fn mean_loss(
    params: &TanetParams,
    windows: &WindowSet,
    idx: &[usize],
) -> Result<f64, TrainError> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Vec<Result<f64, TrainError>> = idx
        .par_iter()
        .map(|&i| {
            let w = &windows.windows[i];
            let (logits, _) = forward(&w.data, params)?;
            let row = Tensor::new(vec![1, logits.len()], logits.data().to_vec())?;
            let (loss, _) = softmax_xent(&row, &[w.label.class_index()])?;
            Ok(loss)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / idx.len() as f64)
}

/// One batch: forward every window, one cross-entropy over the stacked
/// logits, then per-window backward summed in window-index order.
fn batch_step(
    params: &TanetParams,
    windows: &WindowSet,
    batch: &[usize],
) -> Result<(f64, ParamGrads), TrainError> {
    let fwd: Vec<Result<_, TrainError>> = batch
        .par_iter()
        .map(|&i| {
            let w = &windows.windows[i];
            let out = forward(&w.data, params)?;
            Ok(out)
        })
        .collect();
    let mut logits_data = Vec::with_capacity(batch.len() * 2);
    let mut caches = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for (r, &i) in fwd.into_iter().zip(batch) {
        let (logits, cache) = r?;
        logits_data.extend_from_slice(logits.data());
        caches.push(cache);
        labels.push(windows.windows[i].label.class_index());
    }
    let logits = Tensor::new(vec![batch.len(), 2], logits_data)?;
    let (loss, dlogits) = softmax_xent(&logits, &labels)?;

    // per-window backward in parallel, then an ordered sum
    let grads_per_window: Vec<Result<ParamGrads, TrainError>> = caches
        .par_iter()
        .enumerate()
        .map(|(row, cache)| {
            let d = Tensor::new(vec![2], dlogits.row(row).to_vec())?;
            let mut g = params.zeros_like();
            accumulate_backward(&d, cache, params, &mut g)?;
            Ok(g)
        })
        .collect();
    let mut grads = params.zeros_like();
    for g in grads_per_window {
        grads.accumulate(&g?, 1.0);
    }
    Ok((loss, grads))
}

/// Trains on `train` with a stratified validation holdout, Adam, and
/// early stopping; returns the parameters from the best-validation epoch.
pub fn train_fold(
    train: &WindowSet,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let counts = train.class_counts();
    let warning = (counts[0] == 0 || counts[1] == 0)
        .then(|| format!("single-class training set (left {}, right {})", counts[0], counts[1]));

    let (train_idx, val_idx) =
        split_validation(train, cfg.val_fraction, derive_seed(cfg.seed, 0x5A117));
    let train_idx = if train_idx.is_empty() {
        // degenerate: all windows went to validation; train on everything
        (0..train.len()).collect()
    } else {
        train_idx
    };

    let mut params = init_params(model_cfg)?;
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng = SplitMix64::new(derive_seed(cfg.seed, 0x0EB0C));

    let mut es = EarlyStopping::new(cfg.patience);
    let mut best_params = params.clone();
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut stop_epoch = 0;

    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        shuffle_rng.shuffle(&mut order);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_step(&params, train, batch)?;
            adam_step(&mut params, &grads, &mut adam, cfg)?;
            epoch_loss += loss * batch.len() as f64;
        }
        epoch_loss /= order.len() as f64;
        train_curve.push(epoch_loss);

        let monitored = if val_idx.is_empty() {
            epoch_loss
        } else {
            mean_loss(&params, train, &val_idx)?
        };
        val_curve.push(monitored);

        if es.observe(epoch, monitored) {
            best_params = params.clone();
        }
        stop_epoch = epoch;
        if es.should_stop(epoch) {
            break;
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        best_val_loss: es.best_loss(),
        best_epoch: es.best_epoch(),
        stop_epoch,
        train_loss: train_curve,
        val_loss: val_curve,
        warning,
    })
}

/// Fraction of windows whose argmax logit matches the label; a logit tie
/// counts as class 0.
pub fn evaluate(params: &TanetParams, test: &WindowSet) -> Result<f64, TrainError> {
    if test.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    let hits: Vec<Result<u32, TrainError>> = test
        .windows
        .par_iter()
        .map(|w| {
            let (logits, _) = forward(&w.data, params)?;
            let pred = usize::from(logits.data()[1] > logits.data()[0]);
            Ok(u32::from(pred == w.label.class_index()))
        })
        .collect();
    let mut correct = 0u32;
    for h in hits {
        correct += h?;
    }
    Ok(correct as f64 / test.len() as f64)
}

// ---------------------------------------------------------------------------
// Cross-validation driver
// ---------------------------------------------------------------------------

/// Windowing and optional preprocessing for a cross-validation run.
#[derive(Debug, Clone)]
pub struct CvOptions {
    pub win_seconds: f64,
    /// None defaults to half the window.
    pub hop_seconds: Option<f64>,
    /// Some(cfg) preprocesses each trial first; None expects preprocessed input.
    pub preproc: Option<PreprocConfig>,
}

impl CvOptions {
    pub fn new(win_seconds: f64) -> Self {
        Self {
            win_seconds,
            hop_seconds: None,
            preproc: None,
        }
    }

    pub fn hop(&self) -> f64 {
        self.hop_seconds.unwrap_or(self.win_seconds / 2.0)
    }
}

#[derive(Debug, Clone)]
pub struct SubjectReport {
    pub subject_id: u32,
    pub folds: Vec<FoldReport>,
    pub mean_accuracy: f64,
}

/// Best-epoch parameters of one trained fold, for checkpointing.
#[derive(Debug, Clone)]
pub struct TrainedFold {
    pub subject_id: u32,
    pub fold: usize,
    pub model_cfg: ModelConfig,
    pub params: TanetParams,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub win_seconds: f64,
    pub subjects: Vec<SubjectReport>,
    /// Mean of the per-subject mean accuracies.
    pub grand_mean: f64,
    pub trained: Vec<TrainedFold>,
}

/// Per-subject k-fold cross-validation: window each trial, split with
/// leakage pruning, train and evaluate one model per fold. Deterministic in
/// (recordings, seeds, config).
pub fn run_cv(
    recordings: &[EegRecording],
    opts: &CvOptions,
    cfg: &TrainConfig,
    model_template: &ModelConfig,
) -> Result<CvReport, TrainError> {
    cfg.validate()?;
    let mut subject_ids: Vec<u32> = recordings.iter().map(|r| r.subject_id).collect();
    subject_ids.sort_unstable();
    subject_ids.dedup();

    let mut subjects = Vec::with_capacity(subject_ids.len());
    let mut trained = Vec::new();
    for &sid in &subject_ids {
        let ctx = with_context(sid, None);
        let mut windows = WindowSet::default();
        for rec in recordings.iter().filter(|r| r.subject_id == sid) {
            let prepared = match &opts.preproc {
                Some(p) => preprocess_recording(rec, p).map_err(TrainError::from).map_err(&ctx)?,
                None => rec.clone(),
            };
            let ws = slide_windows(&prepared, opts.win_seconds, opts.hop()).map_err(TrainError::from).map_err(&ctx)?;
            windows.windows.extend(ws.windows);
        }
        let split_seed = derive_seed(cfg.seed, 0xF01D ^ u64::from(sid) << 8);
        let folds = kfold_split(&windows, cfg.folds, split_seed).map_err(&ctx)?;

        let mut fold_reports = Vec::with_capacity(folds.len());
        for (fold_idx, (train, test)) in folds.into_iter().enumerate() {
            let fctx = with_context(sid, Some(fold_idx));
            let channels = test.windows[0].channels();
            let fold_model_cfg = ModelConfig {
                d_model: channels,
                init_seed: derive_seed(
                    cfg.seed,
                    0x1217 ^ (u64::from(sid) << 16) ^ fold_idx as u64,
                ),
                ..model_template.clone()
            };
            let fold_train_cfg = TrainConfig {
                seed: derive_seed(cfg.seed, 0x7EA1 ^ (u64::from(sid) << 16) ^ fold_idx as u64),
                ..cfg.clone()
            };
            let outcome = train_fold(&train, &fold_train_cfg, &fold_model_cfg).map_err(&fctx)?;
            let accuracy = evaluate(&outcome.params, &test).map_err(&fctx)?;
            trained.push(TrainedFold {
                subject_id: sid,
                fold: fold_idx,
                model_cfg: fold_model_cfg.clone(),
                params: outcome.params.clone(),
            });
            fold_reports.push(FoldReport {
                fold: fold_idx,
                accuracy,
                best_val_loss: outcome.best_val_loss,
                stop_epoch: outcome.stop_epoch,
                train_loss: outcome.train_loss,
                val_loss: outcome.val_loss,
                warning: outcome.warning,
            });
        }
        let mean_accuracy =
            fold_reports.iter().map(|f| f.accuracy).sum::<f64>() / fold_reports.len() as f64;
        subjects.push(SubjectReport {
            subject_id: sid,
            folds: fold_reports,
            mean_accuracy,
        });
    }
    let grand_mean = if subjects.is_empty() {
        f64::NAN
    } else {
        subjects.iter().map(|s| s.mean_accuracy).sum::<f64>() / subjects.len() as f64
    };
    Ok(CvReport {
        win_seconds: opts.win_seconds,
        subjects,
        grand_mean,
        trained,
    })
}

// ---------------------------------------------------------------------------
// Results file
// ---------------------------------------------------------------------------

/// One line of the results file:
/// `subject fold win_seconds accuracy stop_epoch best_val_loss`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub subject: u32,
    pub fold: usize,
    pub win_seconds: f64,
    pub accuracy: f64,
    pub stop_epoch: usize,
    pub best_val_loss: f64,
}

/// Flattens a cross-validation report into result records.
pub fn report_records(report: &CvReport) -> Vec<ResultRecord> {
    let mut out = Vec::new();
    for s in &report.subjects {
        for f in &s.folds {
            out.push(ResultRecord {
                subject: s.subject_id,
                fold: f.fold,
                win_seconds: report.win_seconds,
                accuracy: f.accuracy,
                stop_epoch: f.stop_epoch,
                best_val_loss: f.best_val_loss,
            });
        }
    }
    out
}

/// Serializes records as line-oriented text. Floats use shortest
/// round-trip formatting, so identical runs produce identical bytes.
pub fn results_to_string(records: &[ResultRecord]) -> String {
    let mut out = String::from("# subject fold win_seconds accuracy stop_epoch best_val_loss\n");
    for r in records {
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            r.subject, r.fold, r.win_seconds, r.accuracy, r.stop_epoch, r.best_val_loss
        ));
    }
    out
}

pub fn write_results(path: &Path, records: &[ResultRecord]) -> Result<(), TrainError> {
    std::fs::write(path, results_to_string(records)).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |detail: String| TrainError::ResultsParse {
            path: path.to_path_buf(),
            line: idx + 1,
            detail,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(parse_err(format!("expected 6 fields, got {}", fields.len())));
        }
        out.push(ResultRecord {
            subject: fields[0]
                .parse()
                .map_err(|_| parse_err(format!("bad subject {:?}", fields[0])))?,
            fold: fields[1]
                .parse()
                .map_err(|_| parse_err(format!("bad fold {:?}", fields[1])))?,
            win_seconds: fields[2]
                .parse()
                .map_err(|_| parse_err(format!("bad win_seconds {:?}", fields[2])))?,
            accuracy: fields[3]
                .parse()
                .map_err(|_| parse_err(format!("bad accuracy {:?}", fields[3])))?,
            stop_epoch: fields[4]
                .parse()
                .map_err(|_| parse_err(format!("bad stop_epoch {:?}", fields[4])))?,
            best_val_loss: fields[5]
                .parse()
                .map_err(|_| parse_err(format!("bad best_val_loss {:?}", fields[5])))?,
        });
    }
    Ok(out)
}
