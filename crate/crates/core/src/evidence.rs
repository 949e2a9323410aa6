//! Scoring of masked variants, survivor selection, the chi estimator, the
//! row filter and chunk importance counts.
//!
//! A run draws `K` chunk masks, blanks the unselected row chunks of the
//! input, asks the predictor for class probabilities and scores every
//! variant with the cross-entropy against the known label. The
//! best-scoring variants ("survivors") are averaged; because a masked entry
//! is either the original value or zero, the average collapses to a
//! per-chunk factor times the input:
//!
//! ```text
//! chi[i][j] = (1/n) * sum_{c in survivors, chunk(i) in c} w_c * M[i][j]
//! ```
//!
//! With unit weights the factor is the fraction of survivors that keep the
//! chunk. Rows whose chi row-sum falls below the mean row-sum are zeroed to
//! form the filtered output.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::{
    self, enumerate_masks, expand_mask, make_grid, sample_mask, ChunkGrid, ChunkMask, MaskError,
    DEFAULT_ENUMERATION_BUDGET,
};
use crate::predictor::{Predictor, PredictorError, ProbabilityVector};
use crate::spectra::{self, SpectraError, Spectrogram};

#[derive(Debug, Error)]
pub enum EvidenceError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("length mismatch: expected {expected}, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("ground truth is not one-hot: {0:?}")]
    NotOneHot(Vec<f64>),
    #[error("empty input")]
    Empty,
    #[error("NaN at position {0}")]
    NaN(usize),
    #[error("entropy must be non-negative, got {0}")]
    NegativeEntropy(f64),
    #[error("absolute threshold must be non-negative, got {0}")]
    NegativeThreshold(f64),
    #[error("no variant scored within the selection threshold")]
    NoSurvivors,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Output(#[from] SpectraError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvidenceError>;

/// How survivors are picked from the scored variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum Selection {
    /// Every variant whose raw cross-entropy is at most `W`.
    AbsoluteThreshold(f64),
    /// The best `max(1, floor(K * t))` variants by normalized entropy.
    TopFraction(f64),
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selection::AbsoluteThreshold(w) => write!(f, "abs:{w}"),
            Selection::TopFraction(t) => write!(f, "top:{t}"),
        }
    }
}

impl FromStr for Selection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| format!("expected top:<t> or abs:<W>, got {s:?}"))?;
        let value: f64 = value
            .parse()
            .map_err(|_| format!("bad number {value:?} in {s:?}"))?;
        match kind {
            "top" => Ok(Selection::TopFraction(value)),
            "abs" => Ok(Selection::AbsoluteThreshold(value)),
            _ => Err(format!(
                "unknown selection {kind:?}; use top:<t> or abs:<W>"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Survivor mean modulated by each survivor's weight.
    Weighted,
    /// Plain survivor mean.
    Unweighted,
}

impl FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "weighted" => Ok(Estimator::Weighted),
            "unweighted" => Ok(Estimator::Unweighted),
            _ => Err(format!(
                "unknown estimator {s:?}; use weighted or unweighted"
            )),
        }
    }
}

/// Which entropy feeds `weight = 1 / (h + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    RawEntropy,
    NormalizedEntropy,
}

impl FromStr for WeightSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "raw" | "raw_entropy" => Ok(WeightSource::RawEntropy),
            "normalized" | "normalized_entropy" => Ok(WeightSource::NormalizedEntropy),
            _ => Err(format!(
                "unknown weight source {s:?}; use raw or normalized"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceConfig {
    pub num_chunks: usize,
    pub features: usize,
    pub iterations: usize,
    pub selection: Selection,
    pub estimator: Estimator,
    pub weight_source: WeightSource,
    pub seed: u64,
    pub epsilon: f64,
    /// Score every one of the `2^m` masks instead of sampling `iterations`.
    pub exhaustive: bool,
}

impl Default for EvidenceConfig {
    fn default() -> Self {
        Self {
            num_chunks: 22,
            features: 2,
            iterations: 500,
            selection: Selection::TopFraction(0.25),
            estimator: Estimator::Unweighted,
            weight_source: WeightSource::NormalizedEntropy,
            seed: 0,
            epsilon: 1e-12,
            exhaustive: false,
        }
    }
}

impl EvidenceConfig {
    pub fn validate(&self, rows: usize) -> Result<()> {
        let bad = |m: String| Err(EvidenceError::Config(m));
        if self.num_chunks < 1 || self.num_chunks > rows {
            return bad(format!(
                "num_chunks must be in 1..={rows}, got {}",
                self.num_chunks
            ));
        }
        if self.features < 1 || self.features > self.num_chunks {
            return bad(format!(
                "features must be in 1..={}, got {}",
                self.num_chunks, self.features
            ));
        }
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        match self.selection {
            Selection::TopFraction(t) if !(t > 0.0 && t <= 1.0) => {
                return bad(format!("top fraction must be in (0, 1], got {t}"))
            }
            Selection::AbsoluteThreshold(w) if !(w >= 0.0 && w.is_finite()) => {
                return bad(format!("absolute threshold must be >= 0, got {w}"))
            }
            _ => {}
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return bad(format!(
                "epsilon must be in (0, 1e-3], got {}",
                self.epsilon
            ));
        }
        Ok(())
    }
}

/// One scored variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub iteration_index: u64,
    pub mask: ChunkMask,
    pub entropy: f64,
    pub normalized_entropy: f64,
    pub weight: f64,
}

/// `-sum truth[x] * ln(clamp(predicted[x], eps, 1))` for one-hot `truth`.
pub fn cross_entropy(
    truth: &ProbabilityVector,
    predicted: &ProbabilityVector,
    epsilon: f64,
) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(EvidenceError::LengthMismatch {
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    let ones = truth.as_slice().iter().filter(|&&p| p == 1.0).count();
    let zeros = truth.as_slice().iter().filter(|&&p| p == 0.0).count();
    if ones != 1 || ones + zeros != truth.len() {
        return Err(EvidenceError::NotOneHot(truth.as_slice().to_vec()));
    }
    let h: f64 = truth
        .as_slice()
        .iter()
        .zip(predicted.as_slice())
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, q)| -t * q.clamp(epsilon, 1.0).ln())
        .sum();
    Ok(h.max(0.0))
}

/// Cross-entropy against the one-hot distribution of `label`.
pub fn label_entropy(predicted: &ProbabilityVector, label: usize, epsilon: f64) -> Result<f64> {
    if label >= predicted.len() {
        return Err(EvidenceError::LabelOutOfRange {
            label,
            classes: predicted.len(),
        });
    }
    Ok((-predicted.get(label).clamp(epsilon, 1.0).ln()).max(0.0))
}

/// `(x - min) / (max - min)`; a constant input maps to zeros.
pub fn minmax_normalize(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(EvidenceError::Empty);
    }
    if let Some(k) = values.iter().position(|v| v.is_nan()) {
        return Err(EvidenceError::NaN(k));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span == 0.0 {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - lo) / span).collect())
}

/// `1 / (entropy + 1)`.
pub fn weight_of(entropy: f64) -> Result<f64> {
    if entropy.is_nan() || entropy < 0.0 {
        return Err(EvidenceError::NegativeEntropy(entropy));
    }
    Ok(1.0 / (entropy + 1.0))
}

/// Number of survivors kept by a top fraction `t` of `k` variants.
pub fn top_fraction_count(k: usize, t: f64) -> usize {
    ((k as f64 * t).floor() as usize).max(1)
}

pub fn select_survivors(records: &[ScoreRecord], selection: Selection) -> Result<Vec<ScoreRecord>> {
    if records.is_empty() {
        return Err(EvidenceError::Empty);
    }
    match selection {
        Selection::AbsoluteThreshold(w) => {
            if w.is_nan() || w < 0.0 {
                return Err(EvidenceError::NegativeThreshold(w));
            }
            Ok(records.iter().filter(|r| r.entropy <= w).cloned().collect())
        }
        Selection::TopFraction(t) => {
            if !(t > 0.0 && t <= 1.0) {
                return Err(EvidenceError::Config(format!(
                    "top fraction must be in (0, 1], got {t}"
                )));
            }
            let mut order: Vec<&ScoreRecord> = records.iter().collect();
            order.sort_by(|a, b| {
                a.normalized_entropy
                    .total_cmp(&b.normalized_entropy)
                    .then(a.iteration_index.cmp(&b.iteration_index))
            });
            let n = top_fraction_count(records.len(), t).min(records.len());
            Ok(order.into_iter().take(n).cloned().collect())
        }
    }
}

/// The chi map plus its per-row and per-chunk summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct ChiMap {
    pub values: Spectrogram,
    pub row_scores: Vec<f64>,
    /// Fraction of survivors keeping each chunk.
    pub chunk_inclusion: Vec<f64>,
    /// Per-chunk factor `kappa` with `chi[i][j] = kappa[chunk(i)] * M[i][j]`.
    pub chunk_factors: Vec<f64>,
}

pub fn chi_estimate(
    input: &Spectrogram,
    survivors: &[ScoreRecord],
    grid: &ChunkGrid,
    estimator: Estimator,
) -> Result<ChiMap> {
    if survivors.is_empty() {
        return Err(EvidenceError::NoSurvivors);
    }
    if grid.rows() != input.rows() {
        return Err(EvidenceError::Shape(format!(
            "grid covers {} rows, input has {}",
            grid.rows(),
            input.rows()
        )));
    }
    let m = grid.chunks();
    if let Some(r) = survivors.iter().find(|r| r.mask.len() != m) {
        return Err(EvidenceError::LengthMismatch {
            expected: m,
            found: r.mask.len(),
        });
    }
    let n = survivors.len() as f64;
    let mut counts = vec![0u64; m];
    let mut weight_sums = vec![0.0f64; m];
    for record in survivors {
        let w = match estimator {
            Estimator::Weighted => record.weight,
            Estimator::Unweighted => 1.0,
        };
        for (z, &on) in record.mask.bits.iter().enumerate() {
            if on {
                counts[z] += 1;
                weight_sums[z] += w;
            }
        }
    }
    let chunk_inclusion: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let chunk_factors: Vec<f64> = weight_sums.iter().map(|s| s / n).collect();

    let cols = input.cols();
    let owner = grid.row_to_chunk();
    let mut values = Vec::with_capacity(input.values().len());
    let mut row_scores = Vec::with_capacity(input.rows());
    for (i, &z) in owner.iter().enumerate() {
        let k = chunk_factors[z];
        let start = values.len();
        values.extend(input.row(i).iter().map(|v| k * v));
        row_scores.push(values[start..].iter().sum());
    }
    let values = Spectrogram::from_trusted(
        input.rows(),
        cols,
        values,
        input.row_frequencies().map(<[f64]>::to_vec),
    );
    Ok(ChiMap {
        values,
        row_scores,
        chunk_inclusion,
        chunk_factors,
    })
}

/// Zeroes every row of `input` whose chi row-sum is below the mean row-sum.
pub fn appendix_filter(input: &Spectrogram, chi: &ChiMap) -> Result<Spectrogram> {
    if chi.values.shape() != input.shape() || chi.row_scores.len() != input.rows() {
        return Err(EvidenceError::Shape(format!(
            "chi is {:?}, input is {:?}",
            chi.values.shape(),
            input.shape()
        )));
    }
    let arr = &chi.row_scores;
    let mean = arr.iter().sum::<f64>() / arr.len() as f64;
    let top = arr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Rounding can push the mean of equal values above their maximum.
    let cut = mean.min(top);
    let mut out = input.clone();
    for (i, &score) in arr.iter().enumerate() {
        if score < cut {
            out.row_mut(i).fill(0.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceHistogram {
    pub counts: Vec<u64>,
    #[serde(rename = "mean")]
    pub mean_count: f64,
    pub important: Vec<bool>,
    /// `[lowest, highest]` row frequency of each chunk in Hz.
    pub chunk_frequencies: Option<Vec<[f64; 2]>>,
}

pub fn importance_histogram(
    survivors: &[ScoreRecord],
    grid: &ChunkGrid,
    row_frequencies: Option<&[f64]>,
) -> Result<ImportanceHistogram> {
    if survivors.is_empty() {
        return Err(EvidenceError::NoSurvivors);
    }
    let m = grid.chunks();
    let mut counts = vec![0u64; m];
    for record in survivors {
        if record.mask.len() != m {
            return Err(EvidenceError::LengthMismatch {
                expected: m,
                found: record.mask.len(),
            });
        }
        for (z, &on) in record.mask.bits.iter().enumerate() {
            counts[z] += u64::from(on);
        }
    }
    let mean_count = counts.iter().sum::<u64>() as f64 / m as f64;
    let important = counts.iter().map(|&c| c as f64 > mean_count).collect();
    let chunk_frequencies = match row_frequencies {
        Some(freqs) => {
            if freqs.len() != grid.rows() {
                return Err(EvidenceError::LengthMismatch {
                    expected: grid.rows(),
                    found: freqs.len(),
                });
            }
            Some(
                grid.boundaries()
                    .iter()
                    .map(|r| {
                        let band = &freqs[r.clone()];
                        let lo = band.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = band.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        [lo, hi]
                    })
                    .collect(),
            )
        }
        None => None,
    };
    Ok(ImportanceHistogram {
        counts,
        mean_count,
        important,
        chunk_frequencies,
    })
}

#[derive(Debug, Clone)]
pub struct EvidenceResult {
    pub chi: ChiMap,
    pub filtered: Spectrogram,
    pub histogram: ImportanceHistogram,
    pub n_survivors: usize,
    pub n_variants: usize,
    pub label: usize,
    pub config: EvidenceConfig,
    pub wall_time: Duration,
}

/// The JSON document written as `result.json`. Wall time is left out so
/// that identical runs produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub config: EvidenceConfig,
    pub label: usize,
    pub n_variants: usize,
    pub n_survivors: usize,
    pub chunk_inclusion: Vec<f64>,
    pub histogram: ImportanceHistogram,
}

impl EvidenceResult {
    pub fn document(&self) -> ResultDocument {
        ResultDocument {
            config: self.config.clone(),
            label: self.label,
            n_variants: self.n_variants,
            n_survivors: self.n_survivors,
            chunk_inclusion: self.chi.chunk_inclusion.clone(),
            histogram: self.histogram.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.document()).expect("result serializes")
    }

    /// `chunk,count,hz_lo,hz_hi,important` with empty Hz cells when the
    /// input carried no row frequencies.
    pub fn histogram_csv(&self) -> String {
        let h = &self.histogram;
        let mut out = String::from("chunk,count,hz_lo,hz_hi,important\n");
        for (z, count) in h.counts.iter().enumerate() {
            let (lo, hi) = match &h.chunk_frequencies {
                Some(f) => (f[z][0].to_string(), f[z][1].to_string()),
                None => (String::new(), String::new()),
            };
            out.push_str(&format!("{z},{count},{lo},{hi},{}\n", h.important[z]));
        }
        out
    }

    /// Writes `chi.csv`, `filtered.csv`, `result.json` and `histogram.csv`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let io = |path: &Path, source| EvidenceError::Io {
            path: path.display().to_string(),
            source,
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        spectra::write_spectrogram_csv(&self.chi.values, dir.join("chi.csv"))?;
        spectra::write_spectrogram_csv(&self.filtered, dir.join("filtered.csv"))?;
        let result = dir.join("result.json");
        fs::write(&result, self.to_json() + "\n").map_err(|e| io(&result, e))?;
        let hist = dir.join("histogram.csv");
        fs::write(&hist, self.histogram_csv()).map_err(|e| io(&hist, e))?;
        Ok(())
    }
}

/// The masks a run will score, in iteration order.
pub fn generate_masks(grid: &ChunkGrid, config: &EvidenceConfig) -> Result<Vec<ChunkMask>> {
    if config.exhaustive {
        return Ok(enumerate_masks(grid, None, DEFAULT_ENUMERATION_BUDGET)?);
    }
    (0..config.iterations as u64)
        .into_par_iter()
        .map(|i| sample_mask(config.seed, i, grid, config.features).map_err(EvidenceError::from))
        .collect()
}

/// Masks, predicts and scores each variant. Records come back in mask order
/// with raw entropies, normalized entropies and weights filled in.
pub fn score_masks(
    input: &Spectrogram,
    label: usize,
    predictor: &dyn Predictor,
    grid: &ChunkGrid,
    masks: Vec<ChunkMask>,
    config: &EvidenceConfig,
) -> Result<Vec<ScoreRecord>> {
    let batch_limit = predictor.info().batch_limit.max(1);
    let mut entropies = Vec::with_capacity(masks.len());
    for group in masks.chunks(batch_limit) {
        let batch: Vec<Spectrogram> = group
            .par_iter()
            .map(|mask| {
                let rows = expand_mask(mask, grid)?;
                masking::apply_mask(input, &rows, 0.0)
            })
            .collect::<std::result::Result<_, MaskError>>()?;
        let probs = predictor.predict(&batch)?;
        if probs.len() != batch.len() {
            return Err(PredictorError::BatchLength {
                expected: batch.len(),
                found: probs.len(),
            }
            .into());
        }
        for p in &probs {
            entropies.push(label_entropy(p, label, config.epsilon)?);
        }
    }
    let normalized = minmax_normalize(&entropies)?;
    masks
        .into_iter()
        .zip(entropies.into_iter().zip(normalized))
        .map(|(mask, (entropy, normalized_entropy))| {
            let weight = match config.weight_source {
                WeightSource::RawEntropy => weight_of(entropy)?,
                WeightSource::NormalizedEntropy => weight_of(normalized_entropy)?,
            };
            Ok(ScoreRecord {
                iteration_index: mask.iteration_index,
                mask,
                entropy,
                normalized_entropy,
                weight,
            })
        })
        .collect()
}

/// Runs the full explanation pipeline for one input and its true label.
pub fn run_evidence(
    input: &Spectrogram,
    label: usize,
    predictor: &dyn Predictor,
    config: &EvidenceConfig,
) -> Result<EvidenceResult> {
    let started = Instant::now();
    let classes = predictor.info().class_count;
    if label >= classes {
        return Err(EvidenceError::LabelOutOfRange { label, classes });
    }
    config.validate(input.rows())?;
    let grid = make_grid(input.rows(), config.num_chunks)?;
    let masks = generate_masks(&grid, config)?;
    let n_variants = masks.len();
    let records = score_masks(input, label, predictor, &grid, masks, config)?;
    let survivors = select_survivors(&records, config.selection)?;
    let chi = chi_estimate(input, &survivors, &grid, config.estimator)?;
    let filtered = appendix_filter(input, &chi)?;
    let histogram = importance_histogram(&survivors, &grid, input.row_frequencies())?;
    Ok(EvidenceResult {
        chi,
        filtered,
        histogram,
        n_survivors: survivors.len(),
        n_variants,
        label,
        config: config.clone(),
        wall_time: started.elapsed(),
    })
}
