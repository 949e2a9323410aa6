//! Audio ingestion, Mel spectrograms and spectrogram file formats.
//!
//! The Mel pipeline follows the conventions of librosa's defaults: a
//! periodic Hann window, centered frames with reflect padding, a power
//! spectrum, a Slaney-style area-normalized filterbank and dB conversion
//! referenced to the global maximum.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpectraError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported audio in {path}: {reason}")]
    UnsupportedCodec { path: String, reason: String },
    #[error("{path} contains no audio samples")]
    EmptyAudio { path: String },
    #[error("invalid Mel parameters: {0}")]
    InvalidParams(String),
    #[error("clip of {samples} samples is shorter than one hop ({hop})")]
    ClipTooShort { samples: usize, hop: usize },
    #[error("invalid spectrogram: {0}")]
    InvalidMatrix(String),
    #[error("ragged CSV: line {line} has {found} values, expected {expected}")]
    RaggedRow {
        line: usize,
        found: usize,
        expected: usize,
    },
    #[error("non-numeric cell {cell:?} on line {line}")]
    NonNumeric { line: usize, cell: String },
    #[error("spectrogram file {0} is empty")]
    EmptyFile(String),
    #[error("cannot write {path}: {reason}")]
    Write { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, SpectraError>;

/// Mono audio signal.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Zero-pads or truncates to exactly `seconds` of audio.
    pub fn fit_to_duration(&mut self, seconds: f64) {
        let target = (seconds * f64::from(self.sample_rate)).round() as usize;
        self.samples.resize(target, 0.0);
    }

    /// Scales so that the largest magnitude is 1. Silence is left untouched.
    pub fn peak_normalize(&mut self) {
        let peak = self.samples.iter().fold(0.0f64, |acc, s| acc.max(s.abs()));
        if peak > 0.0 {
            for s in &mut self.samples {
                *s /= peak;
            }
        }
    }

    /// Linear-interpolation resampling. The output holds
    /// `floor(n * target / source)` samples (at least one).
    pub fn resample_linear(&self, target_rate: u32) -> AudioClip {
        if target_rate == self.sample_rate || self.samples.is_empty() {
            return AudioClip::new(self.samples.clone(), target_rate);
        }
        let n_in = self.samples.len();
        let n_out = ((n_in as u128 * u128::from(target_rate)) / u128::from(self.sample_rate)).max(1)
            as usize;
        let step = f64::from(self.sample_rate) / f64::from(target_rate);
        let last = n_in - 1;
        let samples = (0..n_out)
            .map(|k| {
                let pos = k as f64 * step;
                let left = (pos.floor() as usize).min(last);
                let right = (left + 1).min(last);
                let frac = pos - left as f64;
                self.samples[left] * (1.0 - frac) + self.samples[right] * frac
            })
            .collect();
        AudioClip::new(samples, target_rate)
    }
}

/// Parameters of the Mel spectrogram transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelParams {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub fmin: f64,
    pub fmax: f64,
    pub top_db: f64,
}

impl Default for MelParams {
    fn default() -> Self {
        Self::for_rate(22_050)
    }
}

impl MelParams {
    /// 2048-sample window, 344-sample hop, 150 bands, full band up to Nyquist.
    pub fn for_rate(sample_rate: u32) -> Self {
        Self {
            n_fft: 2048,
            hop: 344,
            n_mels: 150,
            sample_rate,
            fmin: 0.0,
            fmax: f64::from(sample_rate) / 2.0,
            top_db: 80.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SpectraError::InvalidParams(msg));
        if self.hop == 0 || self.n_fft < self.hop {
            return bad(format!(
                "need n_fft >= hop > 0, got n_fft={} hop={}",
                self.n_fft, self.hop
            ));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive".into());
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        let nyquist = f64::from(self.sample_rate) / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return bad(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got fmin={} fmax={}",
                self.fmin, self.fmax
            ));
        }
        if self.top_db.is_nan() || self.top_db <= 0.0 {
            return bad(format!("top_db must be positive, got {}", self.top_db));
        }
        Ok(())
    }
}

/// An `rows x cols` real matrix, row-major. Rows are frequency bins
/// (row 0 = lowest), columns are time frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    row_frequencies: Option<Vec<f64>>,
}

impl Spectrogram {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(SpectraError::InvalidMatrix(format!(
                "shape {rows}x{cols} has an empty dimension"
            )));
        }
        if values.len() != rows * cols {
            return Err(SpectraError::InvalidMatrix(format!(
                "{} values for shape {rows}x{cols}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(SpectraError::InvalidMatrix(format!(
                "non-finite value at row {} col {}",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self {
            rows,
            cols,
            values,
            row_frequencies: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
            return Err(SpectraError::RaggedRow {
                line: i + 1,
                found: r.len(),
                expected: cols,
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Builds a matrix whose values are known finite and correctly sized.
    pub(crate) fn from_trusted(
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        row_frequencies: Option<Vec<f64>>,
    ) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        Self {
            rows,
            cols,
            values,
            row_frequencies,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn with_row_frequencies(mut self, freqs: Vec<f64>) -> Result<Self> {
        if freqs.len() != self.rows {
            return Err(SpectraError::InvalidMatrix(format!(
                "{} row frequencies for {} rows",
                freqs.len(),
                self.rows
            )));
        }
        self.row_frequencies = Some(freqs);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row_frequencies(&self) -> Option<&[f64]> {
        self.row_frequencies.as_deref()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Adds `offset` to every entry.
    pub fn shifted(&self, offset: f64) -> Spectrogram {
        let mut out = self.clone();
        for v in &mut out.values {
            *v += offset;
        }
        out
    }
}

/// Reads a RIFF/WAVE file, averages channels to mono, resamples to
/// `target_rate` and peak-normalizes.
pub fn load_wav(path: impl AsRef<Path>, target_rate: u32) -> Result<AudioClip> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| SpectraError::Unreadable {
        path: shown.clone(),
        source,
    })?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file)).map_err(|e| match e {
        hound::Error::IoError(source) => SpectraError::Unreadable {
            path: shown.clone(),
            source,
        },
        other => SpectraError::UnsupportedCodec {
            path: shown.clone(),
            reason: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels.max(1));
    let codec_err = |e: hound::Error| SpectraError::UnsupportedCodec {
        path: shown.clone(),
        reason: e.to_string(),
    };
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(codec_err)?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(codec_err)?
        }
        (format, bits) => {
            return Err(SpectraError::UnsupportedCodec {
                path: shown,
                reason: format!("{format:?} samples with {bits} bits"),
            })
        }
    };
    if interleaved.len() < channels {
        return Err(SpectraError::EmptyAudio { path: shown });
    }
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    let mut clip = AudioClip::new(mono, spec.sample_rate).resample_linear(target_rate);
    clip.peak_normalize();
    Ok(clip)
}

/// Writes a 16-bit PCM mono WAV. Samples are clipped to [-1, 1].
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let werr = |e: hound::Error| SpectraError::Write {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(werr)?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(werr)?;
    }
    writer.finalize().map_err(werr)
}

const SLANEY_F_SP: f64 = 200.0 / 3.0;
const SLANEY_MIN_LOG_HZ: f64 = 1000.0;
const SLANEY_MIN_LOG_MEL: f64 = SLANEY_MIN_LOG_HZ / SLANEY_F_SP;

fn slaney_logstep() -> f64 {
    6.4f64.ln() / 27.0
}

/// Hz to Mel, Slaney scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= SLANEY_MIN_LOG_HZ {
        SLANEY_MIN_LOG_MEL + (hz / SLANEY_MIN_LOG_HZ).ln() / slaney_logstep()
    } else {
        hz / SLANEY_F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel >= SLANEY_MIN_LOG_MEL {
        SLANEY_MIN_LOG_HZ * (slaney_logstep() * (mel - SLANEY_MIN_LOG_MEL)).exp()
    } else {
        SLANEY_F_SP * mel
    }
}

/// Triangular Mel filterbank with area normalization.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_bins: usize,
    weights: Vec<f64>,
    centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(params: &MelParams) -> Result<Self> {
        params.validate()?;
        let n_bins = params.n_fft / 2 + 1;
        let n_mels = params.n_mels;
        let (mel_lo, mel_hi) = (hz_to_mel(params.fmin), hz_to_mel(params.fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|k| mel_to_hz(mel_lo + (mel_hi - mel_lo) * k as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = f64::from(params.sample_rate) / params.n_fft as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (hi - lo);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            for (b, w) in row.iter_mut().enumerate() {
                let f = b as f64 * bin_hz;
                let rising = (f - lo) / (mid - lo);
                let falling = (hi - f) / (hi - mid);
                *w = rising.min(falling).max(0.0) * norm;
            }
        }
        Ok(Self {
            n_bins,
            weights,
            centers: edges[1..=n_mels].to_vec(),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.centers.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn filter(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Maps one power spectrum (length `n_fft/2 + 1`) to Mel energies.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        debug_assert_eq!(power.len(), self.n_bins);
        (0..self.n_mels())
            .map(|m| self.filter(m).iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

/// numpy-style "reflect" index for positions outside `[0, n)`.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Power STFT with centered, reflect-padded frames. Returns
/// `(frames, bins)` with bins-major rows: `out[frame][bin]`.
pub fn power_stft(samples: &[f64], n_fft: usize, hop: usize) -> Vec<Vec<f64>> {
    let n = samples.len();
    let n_frames = 1 + n / hop;
    let pad = (n_fft / 2) as isize;
    let window = hann_periodic(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    (0..n_frames)
        .map(|t| {
            let start = (t * hop) as isize - pad;
            for (k, slot) in buf.iter_mut().enumerate() {
                let x = samples[reflect_index(start + k as isize, n)];
                *slot = Complex::new(x * window[k], 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            buf[..n_bins].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect()
}

/// dB conversion referenced to the global maximum, clamped to `top_db`
/// below the peak.
pub fn power_to_db(power: &mut [f64], top_db: f64) {
    const AMIN: f64 = 1e-10;
    let peak = power.iter().copied().fold(0.0f64, f64::max);
    let ref_db = 10.0 * peak.max(AMIN).log10();
    for p in power.iter_mut() {
        *p = 10.0 * p.max(AMIN).log10() - ref_db;
    }
    let max_db = power.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = max_db - top_db;
    for p in power.iter_mut() {
        if *p < floor {
            *p = floor;
        }
    }
}

/// dB-scaled Mel spectrogram of a clip, rows = Mel bands (lowest first).
pub fn mel_spectrogram(clip: &AudioClip, params: &MelParams) -> Result<Spectrogram> {
    params.validate()?;
    if clip.sample_rate != params.sample_rate {
        return Err(SpectraError::InvalidParams(format!(
            "clip rate {} Hz differs from parameter rate {} Hz",
            clip.sample_rate, params.sample_rate
        )));
    }
    if clip.samples.len() < params.hop {
        return Err(SpectraError::ClipTooShort {
            samples: clip.samples.len(),
            hop: params.hop,
        });
    }
    let bank = MelFilterbank::new(params)?;
    let frames = power_stft(&clip.samples, params.n_fft, params.hop);
    let cols = frames.len();
    let rows = bank.n_mels();
    let mut values = vec![0.0; rows * cols];
    for (t, spectrum) in frames.iter().enumerate() {
        for (m, e) in bank.apply(spectrum).into_iter().enumerate() {
            values[m * cols + t] = e;
        }
    }
    power_to_db(&mut values, params.top_db);
    Spectrogram::new(rows, cols, values)?.with_row_frequencies(bank.centers().to_vec())
}

/// WAV file to dB Mel spectrogram, optionally padded or cut to a fixed
/// duration first.
pub fn spectrogram_from_wav(
    path: impl AsRef<Path>,
    params: &MelParams,
    pad_seconds: Option<f64>,
) -> Result<Spectrogram> {
    let mut clip = load_wav(path, params.sample_rate)?;
    if let Some(seconds) = pad_seconds {
        clip.fit_to_duration(seconds);
    }
    mel_spectrogram(&clip, params)
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> SpectraError {
    SpectraError::Write {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Renders the matrix as CSV text: one line per row, optional
/// `# freqs:` header.
pub fn spectrogram_to_csv(spec: &Spectrogram) -> String {
    let mut out = String::with_capacity(spec.values.len() * 8);
    if let Some(freqs) = spec.row_frequencies() {
        out.push_str("# freqs: ");
        join_floats(&mut out, freqs);
        out.push('\n');
    }
    for i in 0..spec.rows {
        join_floats(&mut out, spec.row(i));
        out.push('\n');
    }
    out
}

fn join_floats(out: &mut String, values: &[f64]) {
    for (k, v) in values.iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        // Display for f64 is the shortest string that round-trips.
        let _ = write!(out, "{v}");
    }
}

pub fn write_spectrogram_csv(spec: &Spectrogram, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, spectrogram_to_csv(spec)).map_err(|e| write_err(path, e))
}

fn parse_float_cells(line: &str, line_no: usize) -> Result<Vec<f64>> {
    line.split(',')
        .map(|cell| {
            let cell = cell.trim();
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| SpectraError::NonNumeric {
                    line: line_no,
                    cell: cell.to_string(),
                })
        })
        .collect()
}

pub fn parse_spectrogram_csv(text: &str, source: &str) -> Result<Spectrogram> {
    let mut freqs = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut expected = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(list) = rest.trim().strip_prefix("freqs:") {
                freqs = Some(parse_float_cells(list.trim(), line_no)?);
            }
            continue;
        }
        let cells = parse_float_cells(line, line_no)?;
        let want = *expected.get_or_insert(cells.len());
        if cells.len() != want {
            return Err(SpectraError::RaggedRow {
                line: line_no,
                found: cells.len(),
                expected: want,
            });
        }
        rows.push(cells);
    }
    if rows.is_empty() {
        return Err(SpectraError::EmptyFile(source.to_string()));
    }
    let spec = Spectrogram::from_rows(&rows)?;
    match freqs {
        Some(f) => spec.with_row_frequencies(f),
        None => Ok(spec),
    }
}

pub fn read_spectrogram_csv(path: impl AsRef<Path>) -> Result<Spectrogram> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| SpectraError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    parse_spectrogram_csv(&text, &path.display().to_string())
}

/// 8-bit grayscale rendering, row 0 at the bottom, min -> 0 and max -> 255.
pub fn spectrogram_to_gray(spec: &Spectrogram) -> image::GrayImage {
    let (lo, hi) = (spec.min(), spec.max());
    let span = hi - lo;
    image::GrayImage::from_fn(spec.cols as u32, spec.rows as u32, |x, y| {
        let row = spec.rows - 1 - y as usize;
        let v = spec.get(row, x as usize);
        let level = if span > 0.0 {
            (v - lo) / span * 255.0
        } else {
            0.0
        };
        image::Luma([level.round().clamp(0.0, 255.0) as u8])
    })
}

pub fn write_spectrogram_png(spec: &Spectrogram, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    spectrogram_to_gray(spec)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| write_err(path, e))
}
