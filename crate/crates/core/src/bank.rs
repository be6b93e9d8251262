//! Stored Gaussian centres and their periodically refreshed neighbour lists.
//!
//! Centres are snapshots of the training embeddings taken with dropout
//! disabled. Between refreshes the bank coordinates and neighbour lists are
//! frozen; only the per-centre weights move.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::ann::{all_knn, ids_of, AnnIndex, SearchParams, DEFAULT_MAX_DEGREE};
use crate::error::{Error, Result};
use crate::kernel::squared_distance;
use crate::net::MlpModel;

#[derive(Clone, Debug, PartialEq)]
pub struct CentreBank {
    centres: Array2<f64>,
    labels: Vec<usize>,
    weights: Vec<f64>,
    num_classes: usize,
    version: u64,
}

impl CentreBank {
    pub fn new(centres: Array2<f64>, labels: Vec<usize>, weights: Vec<f64>, num_classes: usize) -> Result<Self> {
        let bank = Self {
            centres: centres.as_standard_layout().into_owned(),
            labels,
            weights,
            num_classes,
            version: 0,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn with_unit_weights(centres: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let m = centres.nrows();
        Self::new(centres, labels, vec![1.0; m], num_classes)
    }

    fn validate(&self) -> Result<()> {
        let m = self.centres.nrows();
        if self.labels.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: self.labels.len(),
            });
        }
        if self.weights.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: self.weights.len(),
            });
        }
        if let Some(&w) = self.weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::input(format!("kernel weights must be positive, found {w}")));
        }
        if self.centres.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("centre coordinates"));
        }
        let mut seen = vec![false; self.num_classes];
        for &l in &self.labels {
            if l >= self.num_classes {
                return Err(Error::ClassOutOfRange {
                    class: l,
                    num_classes: self.num_classes,
                });
            }
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::input(format!("class {missing} has no centre")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centres.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn centres(&self) -> ArrayView2<'_, f64> {
        self.centres.view()
    }

    pub fn centre(&self, id: usize) -> &[f64] {
        let d = self.dim();
        &self.centres.as_slice().expect("standard layout")[id * d..(id + 1) * d]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        let old = std::mem::replace(&mut self.weights, weights);
        if let Err(e) = self.validate() {
            self.weights = old;
            return Err(e);
        }
        Ok(())
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub(crate) fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    /// Rounds coordinates and weights to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        self.centres.mapv_inplace(|v| v as f32 as f64);
        for w in &mut self.weights {
            *w = (*w as f32 as f64).max(f32::MIN_POSITIVE as f64);
        }
    }

    /// Appends new centres with unit weight. Labels may introduce new
    /// classes, which must be contiguous after the existing ones.
    pub fn enroll(&mut self, embeddings: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
        if embeddings.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: embeddings.ncols(),
            });
        }
        if embeddings.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: embeddings.nrows(),
                found: labels.len(),
            });
        }
        let num_classes = labels.iter().map(|&l| l + 1).max().unwrap_or(0).max(self.num_classes);
        let mut next = self.clone();
        next.centres
            .append(Axis(0), embeddings)
            .map_err(|e| Error::input(e.to_string()))?;
        next.labels.extend_from_slice(labels);
        next.weights.extend(std::iter::repeat_n(1.0, labels.len()));
        next.num_classes = num_classes;
        next.version += 1;
        next.validate()?;
        *self = next;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpdateSchedule {
    /// Epochs between refreshes; fractional values refresh mid-epoch.
    pub update_interval: f64,
    pub k_train: usize,
}

impl Default for UpdateSchedule {
    fn default() -> Self {
        Self {
            update_interval: 10.0,
            k_train: 100,
        }
    }
}

impl UpdateSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.update_interval.is_finite() && self.update_interval > 0.0) {
            return Err(Error::config("update_interval must be positive"));
        }
        if self.k_train == 0 {
            return Err(Error::config("k_train must be at least 1"));
        }
        Ok(())
    }

    /// Refresh period in optimisation steps, at least one.
    pub fn interval_batches(&self, batches_per_epoch: usize) -> usize {
        ((self.update_interval * batches_per_epoch as f64).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighbourTable {
    rows: Vec<Vec<usize>>,
    bank_version: u64,
}

impl NeighbourTable {
    pub fn bank_version(&self) -> u64 {
        self.bank_version
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, example: usize) -> Result<&[usize]> {
        self.rows
            .get(example)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownId(example))
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Mean Euclidean distance from each example to its listed centres.
    pub mean_distance: f64,
    pub mean_kernel_value: f64,
}

/// Averages over every (example, listed neighbour) pair. Example `i`'s
/// embedding is taken to be centre `i`.
pub fn diagnostics(bank: &CentreBank, table: &NeighbourTable, sigma: f64) -> Diagnostics {
    let mut dist_sum = 0.0;
    let mut kernel_sum = 0.0;
    let mut count = 0usize;
    for (i, row) in table.rows.iter().enumerate() {
        for &j in row {
            let sq = squared_distance(bank.centre(i), bank.centre(j));
            dist_sum += sq.sqrt();
            kernel_sum += (-sq / (2.0 * sigma * sigma)).exp();
            count += 1;
        }
    }
    if count == 0 {
        return Diagnostics {
            mean_distance: 0.0,
            mean_kernel_value: 1.0,
        };
    }
    Diagnostics {
        mean_distance: dist_sum / count as f64,
        mean_kernel_value: kernel_sum / count as f64,
    }
}

/// Owns the current centre snapshot, its index and the training neighbour
/// table. Snapshots are replaced wholesale at each refresh.
#[derive(Clone, Debug)]
pub struct CentreStore {
    bank: Arc<CentreBank>,
    table: Arc<NeighbourTable>,
    index: Arc<AnnIndex>,
    schedule: UpdateSchedule,
    search: SearchParams,
    max_degree: usize,
}

impl CentreStore {
    /// Embeds the training features (dropout off), indexes them, and
    /// computes every example's neighbour list with itself excluded.
    pub fn build(
        model: &MlpModel,
        train_features: ArrayView2<'_, f64>,
        labels: &[usize],
        num_classes: usize,
        schedule: UpdateSchedule,
        search: SearchParams,
    ) -> Result<Self> {
        schedule.validate()?;
        let m = train_features.nrows();
        let bank =
            CentreBank::with_unit_weights(Array2::zeros((m, model.embedding_dim())), labels.to_vec(), num_classes)?;
        let mut store = Self {
            bank: Arc::new(bank),
            table: Arc::new(NeighbourTable {
                rows: Vec::new(),
                bank_version: 0,
            }),
            index: Arc::new(AnnIndex::Exact),
            schedule,
            search,
            max_degree: DEFAULT_MAX_DEGREE,
        };
        store.refresh(model, train_features)?;
        Ok(store)
    }

    pub fn refresh(&mut self, model: &MlpModel, train_features: ArrayView2<'_, f64>) -> Result<()> {
        if train_features.ncols() != model.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.input_dim(),
                found: train_features.ncols(),
            });
        }
        if train_features.nrows() != self.bank.len() {
            return Err(Error::DimensionMismatch {
                expected: self.bank.len(),
                found: train_features.nrows(),
            });
        }
        let centres = model.embed(train_features)?;
        if centres.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("refreshed centres"));
        }
        let bank = CentreBank::new(
            centres,
            self.bank.labels.clone(),
            self.bank.weights.clone(),
            self.bank.num_classes,
        )?
        .with_version(self.bank.version + 1);
        let index = AnnIndex::build(bank.centres(), self.max_degree)?;
        let table = compute_table(&bank, &index, self.schedule.k_train, &self.search)?;
        self.bank = Arc::new(bank);
        self.index = Arc::new(index);
        self.table = Arc::new(table);
        Ok(())
    }

    pub fn bank(&self) -> &CentreBank {
        &self.bank
    }

    pub fn table(&self) -> &NeighbourTable {
        &self.table
    }

    pub fn index(&self) -> &AnnIndex {
        &self.index
    }

    pub fn schedule(&self) -> UpdateSchedule {
        self.schedule
    }

    /// Consistent (bank, table) pair for concurrent readers.
    pub fn snapshot(&self) -> (Arc<CentreBank>, Arc<NeighbourTable>) {
        (Arc::clone(&self.bank), Arc::clone(&self.table))
    }

    /// Stored neighbour list for a training example, possibly stale.
    pub fn neighbours_for(&self, example: usize) -> Result<&[usize]> {
        self.table.row(example)
    }

    /// Neighbours of an arbitrary embedding, no exclusion.
    pub fn query(&self, embedding: &[f64], k: usize) -> Result<Vec<usize>> {
        let params = SearchParams {
            k,
            backtrack_budget: self.search.backtrack_budget.max(k),
            ..self.search
        };
        Ok(ids_of(&self.index.search(
            self.bank.centres(),
            embedding,
            &params,
            None,
        )?))
    }

    pub fn diagnostics(&self, sigma: f64) -> Diagnostics {
        diagnostics(&self.bank, &self.table, sigma)
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.bank).weights_mut()
    }

    pub fn into_bank(self) -> CentreBank {
        Arc::unwrap_or_clone(self.bank)
    }
}

fn compute_table(bank: &CentreBank, index: &AnnIndex, k_train: usize, search: &SearchParams) -> Result<NeighbourTable> {
    let m = bank.len();
    let k = k_train.min(m.saturating_sub(1));
    let rows = if k == 0 {
        vec![Vec::new(); m]
    } else {
        match index {
            AnnIndex::Exact => all_knn(bank.centres(), k)?.iter().map(|r| ids_of(r)).collect(),
            AnnIndex::Graph(g) => {
                let params = SearchParams {
                    k,
                    backtrack_budget: search.backtrack_budget.max(k),
                    ..*search
                };
                (0..m)
                    .map(|i| Ok(ids_of(&g.search(bank.centres(), bank.centre(i), &params, Some(i))?)))
                    .collect::<Result<_>>()?
            }
        }
    };
    Ok(NeighbourTable {
        rows,
        bank_version: bank.version,
    })
}
