//! Dataset evaluation: classify original and filtered inputs and report
//! per-class precision, sensitivity, F1, support and a macro AUC.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::{run_evidence, EvidenceConfig, EvidenceError};
use crate::predictor::{Predictor, PredictorError, ProbabilityVector};
use crate::spectra::{self, MelParams, SpectraError, Spectrogram};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("length mismatch: {predicted} predictions for {truth} labels")]
    LengthMismatch { predicted: usize, truth: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("AUC undefined: truth contains a single class")]
    SingleClass,
    #[error("every manifest item failed to load")]
    NoUsableItems,
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub items: Vec<ManifestItem>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(HarnessError::Manifest(format!(
                "need at least 2 classes, got {}",
                self.classes.len()
            )));
        }
        if self.items.is_empty() {
            return Err(HarnessError::Manifest("no items".into()));
        }
        let mut seen = HashSet::new();
        for item in &self.items {
            if item.label >= self.classes.len() {
                return Err(HarnessError::Manifest(format!(
                    "{} has label {} but only {} classes",
                    item.path.display(),
                    item.label,
                    self.classes.len()
                )));
            }
            if !seen.insert(&item.path) {
                return Err(HarnessError::Manifest(format!(
                    "duplicate path {}",
                    item.path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(text).map_err(|e| HarnessError::Manifest(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Reads a manifest; relative item paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut manifest = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for item in &mut manifest.items {
            if item.path.is_relative() {
                item.path = base.join(&item.path);
            }
        }
        Ok(manifest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub sensitivity: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub sensitivity: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionSummary {
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
    /// Metrics that hit a zero denominator and were reported as 0.
    pub zero_division: Vec<String>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn confusion_metrics(
    predicted: &[usize],
    truth: &[usize],
    classes: usize,
) -> Result<ConfusionSummary> {
    if predicted.len() != truth.len() {
        return Err(HarnessError::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    if let Some(&label) = predicted.iter().chain(truth).find(|&&l| l >= classes) {
        return Err(HarnessError::LabelOutOfRange { label, classes });
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let mut zero_division = Vec::new();
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let precision = ratio(tp[c], tp[c] + fp[c]).unwrap_or_else(|| {
                zero_division.push(format!("precision[{c}]"));
                0.0
            });
            let sensitivity = ratio(tp[c], tp[c] + fn_[c]).unwrap_or_else(|| {
                zero_division.push(format!("sensitivity[{c}]"));
                0.0
            });
            let f1 = if precision + sensitivity > 0.0 {
                2.0 * precision * sensitivity / (precision + sensitivity)
            } else {
                zero_division.push(format!("f1[{c}]"));
                0.0
            };
            ClassMetrics {
                precision,
                sensitivity,
                f1,
                support: tp[c] + fn_[c],
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / classes as f64;
    let macro_avg = MacroMetrics {
        precision: mean(|m| m.precision),
        sensitivity: mean(|m| m.sensitivity),
        f1: mean(|m| m.f1),
    };
    Ok(ConfusionSummary {
        per_class,
        macro_avg,
        zero_division,
    })
}

/// Rank-statistic (Mann-Whitney) AUC with average ranks for ties.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(HarnessError::LengthMismatch {
            predicted: scores.len(),
            truth: truth.len(),
        });
    }
    let positives = truth.iter().filter(|t| **t).count();
    let negatives = truth.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(HarnessError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share their average.
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        rank_sum += avg_rank * order[start..end].iter().filter(|&&i| truth[i]).count() as f64;
        start = end;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean one-vs-rest AUC over classes that have both positives and negatives.
pub fn macro_auc(probs: &[ProbabilityVector], truth: &[usize], classes: usize) -> Result<f64> {
    if probs.len() != truth.len() {
        return Err(HarnessError::LengthMismatch {
            predicted: probs.len(),
            truth: truth.len(),
        });
    }
    let mut aucs = Vec::new();
    for c in 0..classes {
        let binary: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        let scores: Vec<f64> = probs.iter().map(|p| p.get(c)).collect();
        match roc_auc(&scores, &binary) {
            Ok(a) => aucs.push(a),
            Err(HarnessError::SingleClass) => continue,
            Err(e) => return Err(e),
        }
    }
    if aucs.is_empty() {
        return Err(HarnessError::SingleClass);
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Baseline,
    Evidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub condition: Condition,
    pub class_names: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
    /// `None` when every evaluated item belongs to a single class.
    pub auc: Option<f64>,
    pub zero_division: Vec<String>,
}

impl MetricsReport {
    pub fn build(
        condition: Condition,
        class_names: &[String],
        probs: &[ProbabilityVector],
        truth: &[usize],
    ) -> Result<Self> {
        let classes = class_names.len();
        let predicted: Vec<usize> = probs.iter().map(ProbabilityVector::argmax).collect();
        let summary = confusion_metrics(&predicted, truth, classes)?;
        let auc = match macro_auc(probs, truth, classes) {
            Ok(a) => Some(a),
            Err(HarnessError::SingleClass) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            condition,
            class_names: class_names.to_vec(),
            per_class: summary.per_class,
            macro_avg: summary.macro_avg,
            auc,
            zero_division: summary.zero_division,
        })
    }

    pub fn total_support(&self) -> usize {
        self.per_class.iter().map(|m| m.support).sum()
    }

    /// `category,precision,sensitivity,f1,support` rows, a macro row and an
    /// `AUC` footer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,precision,sensitivity,f1,support\n");
        for (name, m) in self.class_names.iter().zip(&self.per_class) {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                csv_cell(name),
                m.precision,
                m.sensitivity,
                m.f1,
                m.support
            );
        }
        let mac = &self.macro_avg;
        let _ = writeln!(
            out,
            "Macro Average,{},{},{},{}",
            mac.precision,
            mac.sensitivity,
            mac.f1,
            self.total_support()
        );
        match self.auc {
            Some(a) => {
                let _ = writeln!(out, "AUC,{a},,,");
            }
            None => out.push_str("AUC,,,,\n"),
        }
        out
    }
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Loads a manifest item: `.wav` files go through the Mel pipeline,
/// everything else is read as spectrogram CSV.
pub fn load_item(
    path: &Path,
    options: &ExperimentOptions,
) -> std::result::Result<Spectrogram, SpectraError> {
    let is_wav = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        let params = options.mel.as_ref().ok_or_else(|| {
            SpectraError::InvalidParams(format!(
                "{} is audio but no Mel parameters were given",
                path.display()
            ))
        })?;
        let spec = spectra::spectrogram_from_wav(path, params, options.pad_seconds)?;
        Ok(if options.shift_nonnegative {
            spec.shifted(params.top_db)
        } else {
            spec
        })
    } else {
        spectra::read_spectrogram_csv(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemLog {
    pub path: String,
    pub label: usize,
    pub baseline_probs: Vec<f64>,
    pub filtered_probs: Vec<f64>,
    pub n_survivors: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOptions {
    /// Required when the manifest lists WAV files.
    pub mel: Option<MelParams>,
    pub pad_seconds: Option<f64>,
    /// Shift dB spectrograms by `top_db` so that silence maps to 0.
    pub shift_nonnegative: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub baseline: MetricsReport,
    pub evidence: MetricsReport,
    pub items: Vec<ItemLog>,
    pub skipped: Vec<(String, String)>,
}

/// Scores every manifest item before and after filtering and writes
/// `baseline.{csv,json}`, `evidence.{csv,json}` and `items.jsonl` to
/// `out_dir`.
pub fn run_experiment(
    manifest: &Manifest,
    predictor: &dyn Predictor,
    config: &EvidenceConfig,
    options: &ExperimentOptions,
    out_dir: &Path,
) -> Result<ExperimentOutcome> {
    manifest.validate()?;
    let classes = predictor.info().class_count;
    if classes != manifest.classes.len() {
        return Err(HarnessError::Manifest(format!(
            "manifest lists {} classes, model reports {classes}",
            manifest.classes.len()
        )));
    }
    let mut truth = Vec::new();
    let mut baseline_probs = Vec::new();
    let mut filtered_probs = Vec::new();
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for item in &manifest.items {
        let shown = item.path.display().to_string();
        let input = match load_item(&item.path, options) {
            Ok(x) => x,
            Err(e) => {
                warn!("skipping {shown}: {e}");
                skipped.push((shown, e.to_string()));
                continue;
            }
        };
        let base = single_prediction(predictor, &input)?;
        let result = run_evidence(&input, item.label, predictor, config)?;
        let filtered = single_prediction(predictor, &result.filtered)?;
        info!(
            "{shown}: label {} baseline {} filtered {} ({} survivors)",
            item.label,
            base.argmax(),
            filtered.argmax(),
            result.n_survivors
        );
        items.push(ItemLog {
            path: shown,
            label: item.label,
            baseline_probs: base.as_slice().to_vec(),
            filtered_probs: filtered.as_slice().to_vec(),
            n_survivors: result.n_survivors,
        });
        truth.push(item.label);
        baseline_probs.push(base);
        filtered_probs.push(filtered);
    }
    if items.is_empty() {
        return Err(HarnessError::NoUsableItems);
    }
    let baseline = MetricsReport::build(
        Condition::Baseline,
        &manifest.classes,
        &baseline_probs,
        &truth,
    )?;
    let evidence = MetricsReport::build(
        Condition::Evidence,
        &manifest.classes,
        &filtered_probs,
        &truth,
    )?;

    let io = |path: &Path, source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    for (name, report) in [("baseline", &baseline), ("evidence", &evidence)] {
        let csv = out_dir.join(format!("{name}.csv"));
        fs::write(&csv, report.to_csv()).map_err(|e| io(&csv, e))?;
        let json = out_dir.join(format!("{name}.json"));
        let text = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
        fs::write(&json, text).map_err(|e| io(&json, e))?;
    }
    let log_path = out_dir.join("items.jsonl");
    let mut log = String::new();
    for item in &items {
        log.push_str(&serde_json::to_string(item).expect("item serializes"));
        log.push('\n');
    }
    fs::write(&log_path, log).map_err(|e| io(&log_path, e))?;

    Ok(ExperimentOutcome {
        baseline,
        evidence,
        items,
        skipped,
    })
}

fn single_prediction(predictor: &dyn Predictor, input: &Spectrogram) -> Result<ProbabilityVector> {
    let mut out = predictor.predict(std::slice::from_ref(input))?;
    if out.len() != 1 {
        return Err(PredictorError::BatchLength {
            expected: 1,
            found: out.len(),
        }
        .into());
    }
    Ok(out.remove(0))
}
