//! Gaussian kernel classifier over a bank of stored centres.
//!
//! Every sum is taken in shifted log-space: squared distances are offset by
//! their minimum before exponentiation, so arbitrarily distant queries still
//! produce finite log-sums and probabilities.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bank::CentreBank;
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    /// Kernel width, in embedding distance units.
    pub sigma: f64,
    /// Lower clamp on the true-class probability inside the loss.
    pub epsilon_floor: f64,
    /// Drop the query's own centre from every sum when it is known.
    pub self_exclude: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
            self_exclude: true,
        }
    }
}

impl KernelConfig {
    pub fn with_sigma(sigma: f64) -> Result<Self> {
        let cfg = Self {
            sigma,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.epsilon_floor > 0.0 && self.epsilon_floor < 1e-6) {
            return Err(Error::config(format!(
                "epsilon_floor must lie in (0, 1e-6), got {}",
                self.epsilon_floor
            )));
        }
        Ok(())
    }

    fn inv_two_sigma_sq(&self) -> f64 {
        1.0 / (2.0 * self.sigma * self.sigma)
    }
}

/// A candidate neighbour list plus the id of the query's own centre, if the
/// query is itself a training example.
#[derive(Clone, Copy, Debug)]
pub struct Neighbourhood<'a> {
    pub ids: &'a [usize],
    pub own_id: Option<usize>,
}

impl<'a> Neighbourhood<'a> {
    pub fn new(ids: &'a [usize]) -> Self {
        Self { ids, own_id: None }
    }

    pub fn excluding(mut self, own_id: usize) -> Self {
        self.own_id = Some(own_id);
        self
    }

    fn active(&self, cfg: &KernelConfig) -> impl Iterator<Item = usize> + '_ {
        let skip = if cfg.self_exclude { self.own_id } else { None };
        self.ids.iter().copied().filter(move |&id| Some(id) != skip)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    pub probs: Vec<f64>,
}

impl ClassDistribution {
    /// Most probable class; ties go to the lowest class id.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (class, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = class;
            }
        }
        best
    }
}

/// Log of the total and per-class weighted kernel sums.
#[derive(Clone, Debug, PartialEq)]
pub struct LogKernelSums {
    pub log_total: f64,
    /// `-inf` for classes with no centre in the neighbourhood.
    pub log_per_class: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossGradients {
    pub d_embedding: Vec<f64>,
    /// Keyed by centre id; only ids from the neighbourhood appear.
    pub d_weights: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWithGradients {
    pub loss: f64,
    pub grads: LossGradients,
    /// True when the probability clamp fired; gradients are then zero.
    pub clamped: bool,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

pub fn kernel_value(x: &[f64], c: &[f64], sigma: f64) -> Result<f64> {
    if x.len() != c.len() {
        return Err(Error::DimensionMismatch {
            expected: c.len(),
            found: x.len(),
        });
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::config(format!("sigma must be positive, got {sigma}")));
    }
    if x.iter().chain(c).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel input"));
    }
    Ok((-squared_distance(x, c) / (2.0 * sigma * sigma)).exp())
}

/// Per-neighbour terms shared by the forward and backward passes.
struct Terms {
    ids: Vec<usize>,
    sq_dists: Vec<f64>,
    /// log(w_j) - d_j / (2 sigma^2)
    log_terms: Vec<f64>,
}

fn gather_terms(x: &[f64], bank: &CentreBank, nb: Neighbourhood<'_>, cfg: &KernelConfig) -> Result<Terms> {
    cfg.validate()?;
    if x.len() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            found: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("query embedding"));
    }
    let scale = cfg.inv_two_sigma_sq();
    let mut terms = Terms {
        ids: Vec::with_capacity(nb.ids.len()),
        sq_dists: Vec::with_capacity(nb.ids.len()),
        log_terms: Vec::with_capacity(nb.ids.len()),
    };
    for id in nb.active(cfg) {
        if id >= bank.len() {
            return Err(Error::UnknownId(id));
        }
        let d = squared_distance(x, bank.centre(id));
        terms.ids.push(id);
        terms.sq_dists.push(d);
        terms.log_terms.push(bank.weights()[id].ln() - d * scale);
    }
    if terms.ids.is_empty() {
        return Err(Error::EmptyNeighbourhood);
    }
    Ok(terms)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn sums_from_terms(terms: &Terms, bank: &CentreBank) -> LogKernelSums {
    let log_total = log_sum_exp(terms.log_terms.iter().copied());
    let log_per_class = (0..bank.num_classes())
        .map(|class| {
            log_sum_exp(
                terms
                    .ids
                    .iter()
                    .zip(&terms.log_terms)
                    .filter(move |(&id, _)| bank.labels()[id] == class)
                    .map(|(_, &t)| t),
            )
        })
        .collect();
    LogKernelSums {
        log_total,
        log_per_class,
    }
}

pub fn log_kernel_sums(
    x: &[f64],
    bank: &CentreBank,
    nb: Neighbourhood<'_>,
    cfg: &KernelConfig,
) -> Result<LogKernelSums> {
    let terms = gather_terms(x, bank, nb, cfg)?;
    Ok(sums_from_terms(&terms, bank))
}

pub fn classify(x: &[f64], bank: &CentreBank, nb: Neighbourhood<'_>, cfg: &KernelConfig) -> Result<ClassDistribution> {
    let sums = log_kernel_sums(x, bank, nb, cfg)?;
    let probs = sums
        .log_per_class
        .iter()
        .map(|&lq| {
            if lq == f64::NEG_INFINITY {
                0.0
            } else {
                (lq - sums.log_total).exp()
            }
        })
        .collect();
    Ok(ClassDistribution { probs })
}

fn check_class(true_class: usize, bank: &CentreBank) -> Result<()> {
    if true_class >= bank.num_classes() {
        return Err(Error::ClassOutOfRange {
            class: true_class,
            num_classes: bank.num_classes(),
        });
    }
    Ok(())
}

/// Negative log-probability of the true class, clamped at `epsilon_floor`.
pub fn nnk_loss(
    x: &[f64],
    true_class: usize,
    bank: &CentreBank,
    nb: Neighbourhood<'_>,
    cfg: &KernelConfig,
) -> Result<f64> {
    check_class(true_class, bank)?;
    let sums = log_kernel_sums(x, bank, nb, cfg)?;
    let log_p = sums.log_per_class[true_class] - sums.log_total;
    Ok(-log_p.max(cfg.epsilon_floor.ln()))
}

pub fn nnk_loss_backward(
    x: &[f64],
    true_class: usize,
    bank: &CentreBank,
    nb: Neighbourhood<'_>,
    cfg: &KernelConfig,
) -> Result<LossWithGradients> {
    check_class(true_class, bank)?;
    let terms = gather_terms(x, bank, nb, cfg)?;
    let sums = sums_from_terms(&terms, bank);
    let log_total = sums.log_total;
    let log_true = sums.log_per_class[true_class];
    let log_p = log_true - log_total;

    if log_p <= cfg.epsilon_floor.ln() {
        return Ok(LossWithGradients {
            loss: -cfg.epsilon_floor.ln(),
            grads: LossGradients {
                d_embedding: vec![0.0; x.len()],
                d_weights: terms.ids.iter().map(|&id| (id, 0.0)).collect(),
            },
            clamped: true,
        });
    }

    let inv_sigma_sq = 1.0 / (cfg.sigma * cfg.sigma);
    let mut d_embedding = vec![0.0; x.len()];
    let mut d_weights = BTreeMap::new();
    for (&id, &log_term) in terms.ids.iter().zip(&terms.log_terms) {
        let p = (log_term - log_total).exp();
        let q = if bank.labels()[id] == true_class {
            (log_term - log_true).exp()
        } else {
            0.0
        };
        let coeff = p - q;
        // d log f_j / dx = -(x - c_j) / sigma^2
        if coeff != 0.0 {
            for ((g, &xv), &cv) in d_embedding.iter_mut().zip(x).zip(bank.centre(id)) {
                *g -= coeff * (xv - cv) * inv_sigma_sq;
            }
        }
        *d_weights.entry(id).or_insert(0.0) += coeff / bank.weights()[id];
    }

    Ok(LossWithGradients {
        loss: -log_p,
        grads: LossGradients { d_embedding, d_weights },
        clamped: false,
    })
}
