//! Training, sigma tuning, evaluation and enrollment.
//!
//! The kernel training loop:
//!
//! 1. embed the training set with dropout off, store it as the centre bank,
//!    and compute every example's neighbour list (itself excluded);
//! 2. for each mini-batch, embed with dropout as configured, score each
//!    example against its stored (possibly stale) neighbours, backpropagate
//!    the kernel loss into the network and the kernel weights, and step;
//! 3. every `update_interval` epochs, repeat step 1 with the current network.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::{debug, info};
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bank::{CentreBank, CentreStore, Diagnostics};
use crate::checkpoint::Checkpoint;
use crate::config::{LossKind, RunConfig};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::kernel::{classify, nnk_loss, nnk_loss_backward, KernelConfig, Neighbourhood};
use crate::metrics;
use crate::net::{sgd_step, softmax_cross_entropy, MlpModel, ModelGradients, ModelSpec};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefreshRecord {
    /// Fractional epoch at which the refresh happened.
    pub epoch: f64,
    pub bank_version: u64,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub refreshes: Vec<RefreshRecord>,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
}

fn model_spec(config: &RunConfig, input_dim: usize, head_classes: Option<usize>) -> Result<ModelSpec> {
    if config.model.input_dim != 0 && config.model.input_dim != input_dim {
        return Err(Error::DimensionMismatch {
            expected: config.model.input_dim,
            found: input_dim,
        });
    }
    let spec = ModelSpec {
        input_dim,
        head_classes,
        ..config.model.clone()
    };
    spec.validate()?;
    Ok(spec)
}

fn initial_model(spec: &ModelSpec, seed: u64) -> Result<MlpModel> {
    let mut model = MlpModel::new(spec, seed)?;
    model.quantize_f32();
    Ok(model)
}

/// Mean kernel loss of held-out rows scored against the bank, no exclusion.
pub fn heldout_loss(
    model: &MlpModel,
    store: &CentreStore,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    kernel: &KernelConfig,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::input("held-out split is empty"));
    }
    let emb = model.embed(features)?;
    let k = store.schedule().k_train;
    let mut total = 0.0;
    for (row, &label) in emb.outer_iter().zip(labels) {
        let x = row.as_slice().expect("standard layout");
        let ids = store.query(x, k)?;
        total += nnk_loss(x, label, store.bank(), Neighbourhood::new(&ids), kernel)?;
    }
    Ok(total / labels.len() as f64)
}

fn train_split(dataset: &Dataset) -> Result<Dataset> {
    let train = dataset.split(Split::Train);
    if train.is_empty() {
        return Err(Error::input("training split is empty"));
    }
    Ok(train)
}

/// Trains with the loss selected by `config.loss`.
pub fn train(config: &RunConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    match config.loss {
        LossKind::Kernel => train_kernel(config, dataset),
        LossKind::Softmax => train_softmax(config, dataset),
    }
}

fn train_kernel(config: &RunConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let train = train_split(dataset)?;
    let val = dataset.split(Split::Val);
    let num_classes = dataset.num_classes();
    let spec = model_spec(config, dataset.dim(), None)?;
    let tc = &config.train;
    let mut config = config.clone();
    config.model = spec.clone();
    config.trained_classes = dataset.label_names.clone();

    let mut model = initial_model(&spec, tc.seed)?;
    if config.tune_sigma {
        config.kernel.sigma = tune_sigma_with(&config, &model, &train, &val, &config.sigma_grid)?;
        info!("tuned sigma = {}", config.kernel.sigma);
    }
    let kernel = config.kernel;
    let mut store = CentreStore::build(
        &model,
        train.features.view(),
        &train.labels,
        num_classes,
        config.schedule,
        config.search,
    )?;

    let mut history = TrainHistory::default();
    let log_refresh = |store: &CentreStore, epoch: f64, history: &mut TrainHistory| {
        let diagnostics = store.diagnostics(kernel.sigma);
        debug!(
            "refresh v{} at epoch {epoch:.2}: mean distance {:.4}, mean kernel {:.4}",
            store.bank().version(),
            diagnostics.mean_distance,
            diagnostics.mean_kernel_value
        );
        history.refreshes.push(RefreshRecord {
            epoch,
            bank_version: store.bank().version(),
            diagnostics,
        });
    };
    log_refresh(&store, 0.0, &mut history);

    let n = train.len();
    let batches_per_epoch = n.div_ceil(tc.batch_size);
    let refresh_every = config.schedule.interval_batches(batches_per_epoch);
    let mut shuffle_rng = stream_rng(tc.seed, Stream::Shuffle);
    let mut dropout_rng = stream_rng(tc.seed, Stream::Dropout);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;

    let mut best_score = f64::INFINITY;
    let mut best = (model.clone(), store.bank().weights().to_vec());

    for epoch in 0..tc.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(tc.batch_size).enumerate() {
            let inputs = train.features.select(Axis(0), batch);
            let (emb, cache) = model.forward(inputs.view(), tc.dropout_active, &mut dropout_rng)?;
            let scale = 1.0 / batch.len() as f64;
            let mut upstream = Array2::<f64>::zeros(emb.raw_dim());
            let mut weight_grads: BTreeMap<usize, f64> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for (r, &i) in batch.iter().enumerate() {
                let x = emb.row(r);
                let x = x.as_slice().expect("standard layout");
                let nb = Neighbourhood::new(store.neighbours_for(i)?).excluding(i);
                let out = nnk_loss_backward(x, train.labels[i], store.bank(), nb, &kernel)?;
                if !out.loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch_idx,
                        loss: out.loss,
                    });
                }
                batch_loss += out.loss;
                for (g, d) in upstream.row_mut(r).iter_mut().zip(&out.grads.d_embedding) {
                    *g = d * scale;
                }
                for (id, g) in out.grads.d_weights {
                    *weight_grads.entry(id).or_insert(0.0) += g * scale;
                }
            }
            let grads = if tc.freeze_network {
                ModelGradients::zeros_like(&model)
            } else {
                model.backward(&cache, upstream.view())?
            };
            sgd_step(&mut model, store.weights_mut(), &grads, &weight_grads, tc);
            epoch_loss += batch_loss;

            step += 1;
            if step.is_multiple_of(refresh_every) {
                store.refresh(&model, train.features.view())?;
                log_refresh(&store, step as f64 / batches_per_epoch as f64, &mut history);
            }
        }

        let train_loss = epoch_loss / n as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: batches_per_epoch,
                loss: train_loss,
            });
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(heldout_loss(&model, &store, val.features.view(), &val.labels, &kernel)?)
        };
        info!("epoch {epoch}: train loss {train_loss:.5}, val loss {val_loss:?}");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        let score = val_loss.unwrap_or(train_loss);
        if score < best_score {
            best_score = score;
            best = (model.clone(), store.bank().weights().to_vec());
            history.best_epoch = Some(epoch);
        }
    }

    // Fresh dropout-free centres for the selected network.
    let (best_model, best_weights) = best;
    let centres = best_model.embed(train.features.view())?;
    let bank = CentreBank::new(centres, train.labels.clone(), best_weights, num_classes)?
        .with_version(store.bank().version() + 1);
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(config, best_model, bank)?,
        history,
    })
}

fn train_softmax(config: &RunConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let train = train_split(dataset)?;
    let val = dataset.split(Split::Val);
    let num_classes = dataset.num_classes();
    let spec = model_spec(config, dataset.dim(), Some(num_classes))?;
    let tc = &config.train;
    let mut config = config.clone();
    config.model = spec.clone();
    config.trained_classes = dataset.label_names.clone();

    let mut model = initial_model(&spec, tc.seed)?;
    let n = train.len();
    let mut shuffle_rng = stream_rng(tc.seed, Stream::Shuffle);
    let mut dropout_rng = stream_rng(tc.seed, Stream::Dropout);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory::default();
    let mut best_score = f64::INFINITY;
    let mut best = model.clone();

    for epoch in 0..tc.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(tc.batch_size).enumerate() {
            let inputs = train.features.select(Axis(0), batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (loss, grads) = model.softmax_head_loss(inputs.view(), &labels, tc.dropout_active, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    loss,
                });
            }
            sgd_step(&mut model, &mut [], &grads, &BTreeMap::new(), tc);
            epoch_loss += loss * batch.len() as f64;
        }
        let train_loss = epoch_loss / n as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            let logits = model.logits(val.features.view())?;
            Some(softmax_cross_entropy(logits.view(), &val.labels).0)
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        let score = val_loss.unwrap_or(train_loss);
        if score < best_score {
            best_score = score;
            best = model.clone();
            history.best_epoch = Some(epoch);
        }
    }

    let centres = best.embed(train.features.view())?;
    let bank = CentreBank::with_unit_weights(centres, train.labels.clone(), num_classes)?.with_version(1);
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(config, best, bank)?,
        history,
    })
}

fn dedup_grid(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::config("sigma grid is empty"));
    }
    if let Some(bad) = grid.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::config(format!("sigma grid value {bad} is not positive")));
    }
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    Ok(g)
}

fn sigma_curve_split(
    config: &RunConfig,
    model: &MlpModel,
    train: &Dataset,
    val: &Dataset,
    grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let grid = dedup_grid(grid)?;
    if val.is_empty() {
        return Err(Error::input("sigma tuning needs a non-empty validation split"));
    }
    let store = CentreStore::build(
        model,
        train.features.view(),
        &train.labels,
        train.num_classes().max(val.num_classes()),
        config.schedule,
        config.search,
    )?;
    grid.into_iter()
        .map(|sigma| {
            let kernel = KernelConfig { sigma, ..config.kernel };
            let loss = heldout_loss(model, &store, val.features.view(), &val.labels, &kernel)?;
            debug!("sigma {sigma}: validation loss {loss:.5}");
            Ok((sigma, loss))
        })
        .collect()
}

fn argmin_sigma(curve: &[(f64, f64)]) -> f64 {
    // Curve is sorted by sigma; strict comparison keeps the smaller one on ties.
    let mut best = curve[0];
    for &point in &curve[1..] {
        if point.1 < best.1 {
            best = point;
        }
    }
    best.0
}

fn tune_sigma_with(config: &RunConfig, model: &MlpModel, train: &Dataset, val: &Dataset, grid: &[f64]) -> Result<f64> {
    Ok(argmin_sigma(&sigma_curve_split(config, model, train, val, grid)?))
}

/// Validation kernel loss for each distinct grid value, in increasing sigma
/// order, with `model` frozen.
pub fn sigma_curve(config: &RunConfig, model: &MlpModel, dataset: &Dataset, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    config.validate()?;
    let train = train_split(dataset)?;
    sigma_curve_split(config, model, &train, &dataset.split(Split::Val), grid)
}

/// Picks the grid value minimising validation kernel loss under the
/// initial (untrained) network. Ties go to the smaller sigma.
pub fn tune_sigma(config: &RunConfig, dataset: &Dataset, grid: &[f64]) -> Result<f64> {
    let spec = model_spec(config, dataset.dim(), None)?;
    let model = initial_model(&spec, config.train.seed)?;
    Ok(argmin_sigma(&sigma_curve(config, &model, dataset, grid)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Classification,
    Transfer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: EvalMode,
    pub examples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Predicted label per evaluated example (classification mode).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictions: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nmi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<BTreeMap<usize, f64>>,
}

impl Report {
    /// Column names in table order.
    pub fn metric_names(&self) -> Vec<String> {
        match self.mode {
            EvalMode::Classification => vec!["Accuracy".into()],
            EvalMode::Transfer => {
                let mut names: Vec<String> = self
                    .recall
                    .iter()
                    .flat_map(|r| r.keys())
                    .map(|k| format!("R@{k}"))
                    .collect();
                names.push("NMI".into());
                names
            }
        }
    }

    fn metric_values(&self) -> Vec<f64> {
        match self.mode {
            EvalMode::Classification => vec![self.accuracy.unwrap_or(f64::NAN)],
            EvalMode::Transfer => {
                let mut v: Vec<f64> = self.recall.iter().flat_map(|r| r.values().copied()).collect();
                v.push(self.nmi.unwrap_or(f64::NAN));
                v
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Aligned text table with scores in percent.
impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = self.metric_names();
        let values = self.metric_values();
        let width = names.iter().map(String::len).max().unwrap_or(0).max(7);
        for n in &names {
            write!(f, "{n:>width$} ")?;
        }
        writeln!(f)?;
        for v in &values {
            write!(f, "{:>width$.2} ", v * 100.0)?;
        }
        writeln!(f)
    }
}

/// Rows tagged as test, or every row when nothing is tagged.
fn eval_rows(dataset: &Dataset) -> Dataset {
    let test = dataset.split(Split::Test);
    if test.is_empty() {
        dataset.clone()
    } else {
        test
    }
}

/// Nearest-neighbour kernel predictions against a bank, no exclusion.
pub fn predict_kernel(
    model: &MlpModel,
    bank: &CentreBank,
    features: ArrayView2<'_, f64>,
    k: usize,
    config: &RunConfig,
) -> Result<Vec<usize>> {
    let emb = model.embed(features)?;
    let index = crate::ann::AnnIndex::build(bank.centres(), crate::ann::DEFAULT_MAX_DEGREE)?;
    let params = crate::ann::SearchParams {
        k: k.min(bank.len()),
        backtrack_budget: config.search.backtrack_budget.max(k),
        ..config.search
    };
    emb.outer_iter()
        .map(|row| {
            let x = row.as_slice().expect("standard layout");
            let ids = crate::ann::ids_of(&index.search(bank.centres(), x, &params, None)?);
            Ok(classify(x, bank, Neighbourhood::new(&ids), &config.kernel)?.predicted())
        })
        .collect()
}

fn check_dims(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<()> {
    if checkpoint.model.input_dim() != dataset.dim() {
        return Err(Error::DimensionMismatch {
            expected: checkpoint.model.input_dim(),
            found: dataset.dim(),
        });
    }
    Ok(())
}

/// Maps dataset classes onto the checkpoint's class ids by name.
fn class_ids(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<Vec<usize>> {
    let known = &checkpoint.config.trained_classes;
    if known.is_empty() {
        return Ok(dataset.labels.clone());
    }
    let lookup: BTreeMap<&str, usize> = known.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    dataset
        .labels
        .iter()
        .map(|&l| {
            let name = &dataset.label_names[l];
            lookup
                .get(name.as_str())
                .copied()
                .ok_or_else(|| Error::input(format!("class `{name}` is unknown to the checkpoint")))
        })
        .collect()
}

pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, mode: EvalMode) -> Result<Report> {
    check_dims(checkpoint, dataset)?;
    let rows = eval_rows(dataset);
    if rows.is_empty() {
        return Err(Error::input("nothing to evaluate"));
    }
    let config = &checkpoint.config;
    match mode {
        EvalMode::Classification => {
            let truth = class_ids(checkpoint, &rows)?;
            let predictions = match config.loss {
                LossKind::Kernel => predict_kernel(
                    &checkpoint.model,
                    &checkpoint.bank,
                    rows.features.view(),
                    config.schedule.k_train,
                    config,
                )?,
                LossKind::Softmax => checkpoint
                    .model
                    .logits(rows.features.view())?
                    .outer_iter()
                    .map(|r| {
                        let mut best = 0;
                        for (c, &v) in r.iter().enumerate() {
                            if v > r[best] {
                                best = c;
                            }
                        }
                        best
                    })
                    .collect(),
            };
            Ok(Report {
                mode,
                examples: rows.len(),
                accuracy: Some(metrics::accuracy(&predictions, &truth)?),
                predictions: Some(predictions),
                nmi: None,
                recall: None,
            })
        }
        EvalMode::Transfer => {
            let trained: BTreeSet<&str> = config.trained_classes.iter().map(String::as_str).collect();
            let present: BTreeSet<usize> = rows.labels.iter().copied().collect();
            if let Some(&c) = present
                .iter()
                .find(|&&c| trained.contains(rows.label_names[c].as_str()))
            {
                return Err(Error::input(format!(
                    "transfer evaluation on class `{}`, which the model was trained on",
                    rows.label_names[c]
                )));
            }
            let emb = checkpoint.model.embed(rows.features.view())?;
            let recall = metrics::recall_at_k(emb.view(), &rows.labels, &config.k_values)?;
            let nmi = metrics::clustering_nmi(emb.view(), &rows.labels, config.train.seed)?;
            Ok(Report {
                mode,
                examples: rows.len(),
                accuracy: None,
                predictions: None,
                nmi: Some(nmi),
                recall: Some(recall),
            })
        }
    }
}

/// Adds every row of `dataset` to the bank with unit weight, without
/// touching the network. Classes unknown to the checkpoint get new ids.
pub fn enroll(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<Checkpoint> {
    check_dims(checkpoint, dataset)?;
    let mut config = checkpoint.config.clone();
    if config.trained_classes.is_empty() {
        config.trained_classes = (0..checkpoint.bank.num_classes()).map(|c| c.to_string()).collect();
    }
    let mut labels = Vec::with_capacity(dataset.len());
    for &l in &dataset.labels {
        let name = &dataset.label_names[l];
        let id = match config.trained_classes.iter().position(|n| n == name) {
            Some(id) => id,
            None => {
                config.trained_classes.push(name.clone());
                config.trained_classes.len() - 1
            }
        };
        labels.push(id);
    }
    let emb = checkpoint.model.embed(dataset.features.view())?;
    let mut bank = checkpoint.bank.clone();
    bank.enroll(emb.view(), &labels)?;
    Checkpoint::new(config, checkpoint.model.clone(), bank)
}

/// Centre diagnostics for a checkpoint's network over a feature set.
pub fn diagnose(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<Diagnostics> {
    check_dims(checkpoint, dataset)?;
    let train = train_split(dataset)?;
    let store = CentreStore::build(
        &checkpoint.model,
        train.features.view(),
        &train.labels,
        train.num_classes(),
        checkpoint.config.schedule,
        checkpoint.config.search,
    )?;
    Ok(store.diagnostics(checkpoint.config.kernel.sigma))
}

/// Class-disjoint halves for the transfer protocol: the first
/// `ceil(fraction * C)` classes train, the rest are held out.
pub fn transfer_split(dataset: &Dataset, fraction: f64) -> Result<(Dataset, Dataset)> {
    let (train, test) = metrics::split_transfer(&dataset.labels, fraction)?;
    Ok((dataset.with_classes(&train)?, dataset.with_classes(&test)?))
}

/// Tags rows with the configured per-class validation / test shares unless
/// the dataset already carries tags.
pub fn prepare_splits(config: &RunConfig, dataset: &mut Dataset) -> Result<()> {
    if dataset.splits.iter().all(|&s| s == Split::Train) && (config.val_fraction > 0.0 || config.test_fraction > 0.0) {
        dataset.assign_splits(config.val_fraction, config.test_fraction, config.train.seed)?;
    }
    Ok(())
}
