//! The black-box classifier boundary.
//!
//! A [`Predictor`] maps a batch of matrices to one probability row per
//! matrix. Implementations must be frozen: the output for an input may not
//! depend on earlier calls or on which other inputs share its batch.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectra::{self, Spectrogram};

mod subprocess;

pub use subprocess::{connect_subprocess, SubprocessPredictor};

/// Maximum absolute deviation of a probability row's sum from 1.
pub const SUM_TOLERANCE: f64 = 1e-6;
/// Rows deviating up to this much are renormalized instead of rejected.
pub const REPAIR_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_BATCH_LIMIT: usize = 64;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("failed to spawn model process {command:?}: {source}")]
    Spawn {
        command: Vec<String>,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed handshake: {detail}; payload: {payload}")]
    Handshake { detail: String, payload: String },
    #[error("malformed response: {detail}; payload: {payload}")]
    Protocol { detail: String, payload: String },
    #[error("response id {found} does not match request id {expected}; payload: {payload}")]
    IdMismatch {
        expected: u64,
        found: i64,
        payload: String,
    },
    #[error("probability row {row} invalid: {detail}; payload: {payload}")]
    InvalidProbabilities {
        row: usize,
        detail: String,
        payload: String,
    },
    #[error("model returned {found} rows for {expected} inputs")]
    BatchLength { expected: usize, found: usize },
    #[error("model reported an error for request {id}: {message}")]
    Remote { id: i64, message: String },
    #[error("no response within {seconds} s for request {id}")]
    Timeout { id: u64, seconds: f64 },
    #[error("model process io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("model process is no longer usable: {0}")]
    Closed(String),
    #[error("input shape mismatch: {0}")]
    Shape(String),
    #[error("invalid predictor configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, PredictorError>;

fn preview(payload: &str) -> String {
    const LIMIT: usize = 240;
    if payload.len() <= LIMIT {
        payload.to_string()
    } else {
        let mut end = LIMIT;
        while !payload.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}...", &payload[..end])
    }
}

/// A distribution over `C >= 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Strict constructor: entries in [0, 1], sum within `SUM_TOLERANCE` of 1.
    pub fn new(probs: Vec<f64>) -> std::result::Result<Self, String> {
        Self::check_entries(&probs)?;
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(format!("sums to {sum}"));
        }
        Ok(Self(probs))
    }

    /// Accepts rows within `REPAIR_TOLERANCE` of unit sum, renormalizing
    /// those beyond `SUM_TOLERANCE`. The flag reports whether a repair
    /// happened.
    pub fn repaired(probs: Vec<f64>) -> std::result::Result<(Self, bool), String> {
        Self::check_entries(&probs)?;
        let sum: f64 = probs.iter().sum();
        let drift = (sum - 1.0).abs();
        if drift <= SUM_TOLERANCE {
            Ok((Self(probs), false))
        } else if drift <= REPAIR_TOLERANCE {
            Ok((Self(probs.into_iter().map(|p| p / sum).collect()), true))
        } else {
            Err(format!("sums to {sum}"))
        }
    }

    fn check_entries(probs: &[f64]) -> std::result::Result<(), String> {
        if probs.len() < 2 {
            return Err(format!("{} classes, need at least 2", probs.len()));
        }
        if let Some((k, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.is_finite() && (0.0..=1.0).contains(*p)))
        {
            return Err(format!("entry {k} = {p} outside [0, 1]"));
        }
        Ok(())
    }

    pub fn one_hot(classes: usize, label: usize) -> Self {
        assert!(classes >= 2 && label < classes);
        let mut v = vec![0.0; classes];
        v[label] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorInfo {
    pub class_count: usize,
    pub class_names: Option<Vec<String>>,
    pub batch_limit: usize,
}

impl PredictorInfo {
    pub fn new(class_count: usize) -> Self {
        Self {
            class_count,
            class_names: None,
            batch_limit: DEFAULT_BATCH_LIMIT,
        }
    }
}

pub trait Predictor: Send + Sync {
    fn info(&self) -> &PredictorInfo;

    /// One probability row per input, in input order.
    fn predict(&self, batch: &[Spectrogram]) -> Result<Vec<ProbabilityVector>>;
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn info(&self) -> &PredictorInfo {
        (**self).info()
    }

    fn predict(&self, batch: &[Spectrogram]) -> Result<Vec<ProbabilityVector>> {
        (**self).predict(batch)
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary predictor that looks only at a fixed set of rows:
/// `p(class 1) = logistic(k * (mean |x| over those rows - b))`.
#[derive(Debug, Clone)]
pub struct PlantedRowsPredictor {
    rows: BTreeSet<usize>,
    steepness: f64,
    bias: f64,
    info: PredictorInfo,
}

pub fn planted_rows_predictor(
    salient_rows: impl IntoIterator<Item = usize>,
    steepness: f64,
    bias: f64,
) -> Result<PlantedRowsPredictor> {
    let rows: BTreeSet<usize> = salient_rows.into_iter().collect();
    if rows.is_empty() {
        return Err(PredictorError::Config("salient row set is empty".into()));
    }
    if !(steepness > 0.0 && steepness.is_finite()) {
        return Err(PredictorError::Config(format!(
            "steepness must be positive, got {steepness}"
        )));
    }
    if !bias.is_finite() {
        return Err(PredictorError::Config("bias must be finite".into()));
    }
    Ok(PlantedRowsPredictor {
        rows,
        steepness,
        bias,
        info: PredictorInfo::new(2),
    })
}

impl PlantedRowsPredictor {
    pub fn salient_rows(&self) -> &BTreeSet<usize> {
        &self.rows
    }

    pub fn probability_of_positive(&self, input: &Spectrogram) -> Result<f64> {
        let top = *self.rows.iter().next_back().expect("non-empty");
        if top >= input.rows() {
            return Err(PredictorError::Shape(format!(
                "salient row {top} outside a {}-row input",
                input.rows()
            )));
        }
        let total: f64 = self
            .rows
            .iter()
            .map(|&r| input.row(r).iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        let mean = total / (self.rows.len() * input.cols()) as f64;
        Ok(logistic(self.steepness * (mean - self.bias)))
    }
}

impl Predictor for PlantedRowsPredictor {
    fn info(&self) -> &PredictorInfo {
        &self.info
    }

    fn predict(&self, batch: &[Spectrogram]) -> Result<Vec<ProbabilityVector>> {
        batch
            .iter()
            .map(|x| {
                let p = self.probability_of_positive(x)?;
                Ok(ProbabilityVector(vec![1.0 - p, p]))
            })
            .collect()
    }
}

/// Max-stabilized softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `softmax(W x + b)` over the row-major flattened input.
#[derive(Debug, Clone)]
pub struct LinearSoftmaxPredictor {
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
    info: PredictorInfo,
}

pub fn linear_softmax_predictor(
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
) -> Result<LinearSoftmaxPredictor> {
    let classes = weights.len();
    if classes < 2 {
        return Err(PredictorError::Config(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if biases.len() != classes {
        return Err(PredictorError::Config(format!(
            "{} biases for {classes} classes",
            biases.len()
        )));
    }
    let width = weights[0].len();
    if width == 0 || weights.iter().any(|w| w.len() != width) {
        return Err(PredictorError::Config(
            "weight rows must share a positive length".into(),
        ));
    }
    if weights
        .iter()
        .flatten()
        .chain(&biases)
        .any(|v| !v.is_finite())
    {
        return Err(PredictorError::Config("weights must be finite".into()));
    }
    Ok(LinearSoftmaxPredictor {
        weights,
        biases,
        info: PredictorInfo::new(classes),
    })
}

impl LinearSoftmaxPredictor {
    /// Loads a `C x (l*d + 1)` CSV whose last column holds the biases.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let table = spectra::parse_spectrogram_csv(&text, &path.display().to_string())
            .map_err(|e| PredictorError::Config(e.to_string()))?;
        if table.cols() < 2 {
            return Err(PredictorError::Config(
                "weights file needs at least one weight column and a bias column".into(),
            ));
        }
        let width = table.cols() - 1;
        let weights = (0..table.rows())
            .map(|c| table.row(c)[..width].to_vec())
            .collect();
        let biases = (0..table.rows()).map(|c| table.row(c)[width]).collect();
        linear_softmax_predictor(weights, biases)
    }

    pub fn logits(&self, input: &Spectrogram) -> Result<Vec<f64>> {
        let x = input.values();
        if x.len() != self.weights[0].len() {
            return Err(PredictorError::Shape(format!(
                "input has {} entries, weights expect {}",
                x.len(),
                self.weights[0].len()
            )));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
            .collect())
    }
}

impl Predictor for LinearSoftmaxPredictor {
    fn info(&self) -> &PredictorInfo {
        &self.info
    }

    fn predict(&self, batch: &[Spectrogram]) -> Result<Vec<ProbabilityVector>> {
        batch
            .iter()
            .map(|x| Ok(ProbabilityVector(softmax(&self.logits(x)?))))
            .collect()
    }
}

/// Ignores its input and answers the uniform distribution.
#[derive(Debug, Clone)]
pub struct UniformPredictor {
    info: PredictorInfo,
}

pub fn uniform_predictor(classes: usize) -> Result<UniformPredictor> {
    if classes < 2 {
        return Err(PredictorError::Config(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    Ok(UniformPredictor {
        info: PredictorInfo::new(classes),
    })
}

impl Predictor for UniformPredictor {
    fn info(&self) -> &PredictorInfo {
        &self.info
    }

    fn predict(&self, batch: &[Spectrogram]) -> Result<Vec<ProbabilityVector>> {
        let c = self.info.class_count;
        Ok(batch
            .iter()
            .map(|_| ProbabilityVector(vec![1.0 / c as f64; c]))
            .collect())
    }
}

/// Wraps a per-input closure. Its rows go through the strict validator.
pub struct FnPredictor<F> {
    f: F,
    info: PredictorInfo,
}

impl<F> FnPredictor<F>
where
    F: Fn(&Spectrogram) -> Vec<f64> + Send + Sync,
{
    pub fn new(classes: usize, f: F) -> Self {
        Self {
            f,
            info: PredictorInfo::new(classes),
        }
    }
}

impl<F> Predictor for FnPredictor<F>
where
    F: Fn(&Spectrogram) -> Vec<f64> + Send + Sync,
{
    fn info(&self) -> &PredictorInfo {
        &self.info
    }

    fn predict(&self, batch: &[Spectrogram]) -> Result<Vec<ProbabilityVector>> {
        batch
            .iter()
            .enumerate()
            .map(|(row, x)| {
                let raw = (self.f)(x);
                if raw.len() != self.info.class_count {
                    return Err(PredictorError::InvalidProbabilities {
                        row,
                        detail: format!(
                            "{} entries for {} classes",
                            raw.len(),
                            self.info.class_count
                        ),
                        payload: format!("{raw:?}"),
                    });
                }
                ProbabilityVector::new(raw.clone()).map_err(|detail| {
                    PredictorError::InvalidProbabilities {
                        row,
                        detail,
                        payload: format!("{raw:?}"),
                    }
                })
            })
            .collect()
    }
}
