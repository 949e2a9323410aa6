use std::f64::consts::PI;
use std::path::Path;

use evidence_core::spectra::{
    load_wav, mel_spectrogram, spectrogram_from_wav, write_wav, AudioClip, MelParams, SpectraError,
};

fn write_float_wav(path: &Path, rate: u32, channels: &[Vec<f64>]) {
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate: rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for i in 0..channels[0].len() {
        for ch in channels {
            w.write_sample(ch[i] as f32).unwrap();
        }
    }
    w.finalize().unwrap();
}

fn tone(freq: f64, amp: f64, rate: u32, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| amp * (2.0 * PI * freq * i as f64 / f64::from(rate)).sin())
        .collect()
}

// Slaney Mel scale written out independently of the library.
fn mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    if hz < 1000.0 {
        hz / f_sp
    } else {
        1000.0 / f_sp + (hz / 1000.0).ln() / (6.4f64.ln() / 27.0)
    }
}

fn hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_mel = 1000.0 / f_sp;
    if m < min_log_mel {
        m * f_sp
    } else {
        1000.0 * ((m - min_log_mel) * (6.4f64.ln() / 27.0)).exp()
    }
}

#[test]
fn silent_16_bit_file_loads_as_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("silence.wav");
    write_wav(&AudioClip::new(vec![0.0; 22050], 22050), &path).unwrap();
    let clip = load_wav(&path, 22050).unwrap();
    assert_eq!(clip.samples.len(), 22050);
    assert!(clip.samples.iter().all(|&s| s == 0.0));
}

#[test]
fn halving_the_rate_keeps_every_other_sample() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tone44k.wav");
    let n = 44_100;
    write_float_wav(&path, 44_100, &[tone(440.0, 0.5, 44_100, n)]);
    let clip = load_wav(&path, 22_050).unwrap();
    assert_eq!(clip.sample_rate, 22_050);
    assert_eq!(clip.samples.len(), n / 2);
    // peak normalization rescales 0.5 to 1
    let expected = tone(440.0, 1.0, 22_050, n / 2);
    let peak = expected.iter().fold(0.0f64, |a, s| a.max(s.abs()));
    for (k, (&got, &want)) in clip.samples.iter().zip(&expected).enumerate() {
        assert!(
            (got - want / peak).abs() < 1e-4,
            "sample {k}: {got} vs {}",
            want / peak
        );
    }
}

#[test]
fn non_integer_ratio_tracks_the_analytic_signal() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tone48k.wav");
    let n = 48_000;
    write_float_wav(&path, 48_000, &[tone(440.0, 0.9, 48_000, n)]);
    let clip = load_wav(&path, 22_050).unwrap();
    assert_eq!(clip.samples.len(), 22_050);
    let peak = clip.samples.iter().fold(0.0f64, |a, s| a.max(s.abs()));
    assert!((peak - 1.0).abs() < 1e-12);
    // Interpolating a 440 Hz tone sampled at 48 kHz is off by at most
    // (2 pi f)^2 / (8 fs^2) ~ 4.2e-4 of the amplitude.
    let exact = tone(440.0, 1.0, 22_050, 22_050);
    let worst = clip
        .samples
        .iter()
        .zip(&exact)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "worst deviation {worst}");
}

#[test]
fn stereo_channels_are_averaged() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stereo.wav");
    write_float_wav(&path, 22_050, &[vec![0.4; 1000], vec![-0.4; 1000]]);
    let clip = load_wav(&path, 22_050).unwrap();
    assert!(clip.samples.iter().all(|&s| s.abs() < 1e-7));

    let path = dir.path().join("stereo2.wav");
    write_float_wav(&path, 22_050, &[vec![0.2; 10], vec![0.6; 10]]);
    let clip = load_wav(&path, 22_050).unwrap();
    assert!(clip.samples.iter().all(|&s| (s - 1.0).abs() < 1e-7));
}

#[test]
fn unreadable_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.wav");
    assert!(matches!(
        load_wav(&missing, 22_050),
        Err(SpectraError::Unreadable { .. })
    ));
    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"definitely not RIFF data").unwrap();
    assert!(matches!(
        load_wav(&junk, 22_050),
        Err(SpectraError::UnsupportedCodec { .. })
    ));
}

#[test]
fn tone_peaks_at_the_440_hz_band() {
    let params = MelParams::default();
    let clip = AudioClip::new(tone(440.0, 0.5, 22_050, 22_050 * 2), 22_050);
    let spec = mel_spectrogram(&clip, &params).unwrap();

    let lo = mel(0.0);
    let hi = mel(11_025.0);
    let step = (hi - lo) / (params.n_mels + 1) as f64;
    let centers: Vec<f64> = (1..=params.n_mels)
        .map(|k| hz(lo + step * k as f64))
        .collect();
    let expected = centers
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - 440.0).abs().total_cmp(&(b.1 - 440.0).abs()))
        .unwrap()
        .0;

    let energy: Vec<f64> = (0..spec.rows())
        .map(|i| spec.row(i).iter().sum::<f64>() / spec.cols() as f64)
        .collect();
    let peak = energy
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    assert!(
        peak.abs_diff(expected) <= 1,
        "peak {peak}, expected {expected}"
    );

    let freqs = spec.row_frequencies().unwrap();
    for (a, b) in freqs.iter().zip(&centers) {
        assert!((a - b).abs() < 1e-6 * b.max(1.0));
    }
    assert!(spec.max() <= 0.0 && spec.max() > -1e-9);
    assert!(spec.min() >= -80.0 - 1e-9);
}

#[test]
fn padding_fixes_the_frame_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.wav");
    write_wav(
        &AudioClip::new(tone(1000.0, 0.3, 22_050, 22_050 * 3), 22_050),
        &path,
    )
    .unwrap();
    let params = MelParams::default();
    let padded = spectrogram_from_wav(&path, &params, Some(10.0)).unwrap();
    assert_eq!(padded.cols(), 1 + 220_500 / 344);
    let cut = spectrogram_from_wav(&path, &params, Some(1.0)).unwrap();
    assert_eq!(cut.cols(), 1 + 22_050 / 344);
    let plain = spectrogram_from_wav(&path, &params, None).unwrap();
    assert_eq!(plain.cols(), 1 + 66_150 / 344);
}
