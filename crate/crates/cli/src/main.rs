//! `evidence` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

mod builtin;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use evidence_core::evidence::{run_evidence, Estimator, EvidenceConfig, Selection, WeightSource};
use evidence_core::harness::{self, ExperimentOptions, HarnessError, Manifest};
use evidence_core::predictor::{connect_subprocess, Predictor};
use evidence_core::spectra::{self, MelParams, Spectrogram};
use log::info;

#[derive(Parser, Debug)]
#[command(
    name = "evidence",
    version,
    about = "Frequency-band explanations for black-box spectrogram classifiers"
)]
struct Cli {
    /// Worker threads for mask generation and masking (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert a WAV file to a dB Mel spectrogram CSV.
    Melspec(MelspecArgs),
    /// Explain one input: write chi.csv, filtered.csv, result.json, histogram.csv.
    Explain(ExplainArgs),
    /// Score a predictor on original and filtered inputs of a manifest.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug, Clone)]
struct MelArgs {
    #[arg(long, default_value_t = 22_050)]
    sample_rate: u32,
    #[arg(long, default_value_t = 2048)]
    n_fft: usize,
    #[arg(long, default_value_t = 344)]
    hop: usize,
    #[arg(long, default_value_t = 150)]
    n_mels: usize,
    #[arg(long, default_value_t = 0.0)]
    fmin: f64,
    /// Upper filterbank edge in Hz (default: Nyquist).
    #[arg(long)]
    fmax: Option<f64>,
    #[arg(long, default_value_t = 80.0)]
    top_db: f64,
    /// Zero-pad or truncate the audio to this many seconds.
    #[arg(long)]
    pad_seconds: Option<f64>,
    /// Add top_db to the dB values so the floor sits at 0.
    #[arg(long)]
    nonnegative: bool,
}

impl MelArgs {
    fn params(&self) -> MelParams {
        let mut p = MelParams::for_rate(self.sample_rate);
        p.n_fft = self.n_fft;
        p.hop = self.hop;
        p.n_mels = self.n_mels;
        p.fmin = self.fmin;
        if let Some(f) = self.fmax {
            p.fmax = f;
        }
        p.top_db = self.top_db;
        p
    }

    fn load(&self, path: &Path) -> Result<Spectrogram, Failure> {
        let params = self.params();
        params
            .validate()
            .map_err(|e| Failure::Usage(e.to_string()))?;
        let spec = spectra::spectrogram_from_wav(path, &params, self.pad_seconds)
            .map_err(|e| Failure::Runtime(e.to_string()))?;
        Ok(if self.nonnegative {
            spec.shifted(params.top_db)
        } else {
            spec
        })
    }
}

#[derive(Args, Debug)]
struct MelspecArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write an 8-bit grayscale PNG rendering.
    #[arg(long)]
    png: Option<PathBuf>,
    #[command(flatten)]
    mel: MelArgs,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// External model process speaking the JSON-lines protocol, e.g. "python3 adapter.py".
    #[arg(long, conflicts_with = "builtin")]
    model: Option<String>,
    /// In-process predictor: planted:rows=a-b,k=..,bias=.. | linear:file=.. | uniform:classes=..
    #[arg(long)]
    builtin: Option<String>,
    /// Per-request timeout for external models, in seconds.
    #[arg(long, default_value_t = 120.0)]
    timeout: f64,
}

impl ModelArgs {
    fn connect(&self) -> Result<Box<dyn Predictor>, Failure> {
        match (&self.model, &self.builtin) {
            (Some(cmd), None) => {
                let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
                if argv.is_empty() {
                    return Err(Failure::Usage("--model needs a command".into()));
                }
                if self.timeout.is_nan() || self.timeout <= 0.0 {
                    return Err(Failure::Usage("--timeout must be positive".into()));
                }
                let p = connect_subprocess(&argv, Duration::from_secs_f64(self.timeout))
                    .map_err(|e| Failure::Runtime(e.to_string()))?;
                Ok(Box::new(p))
            }
            (None, Some(spec)) => builtin::parse_builtin(spec).map_err(Failure::Usage),
            _ => Err(Failure::Usage(
                "one of --model or --builtin is required".into(),
            )),
        }
    }
}

#[derive(Args, Debug)]
struct EvidenceArgs {
    /// Number of row chunks the input is split into.
    #[arg(long, default_value_t = 22)]
    num_chunks: usize,
    /// Chunks kept in each masked variant.
    #[arg(long, default_value_t = 2)]
    features: usize,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    /// top:<fraction> or abs:<max cross-entropy>.
    #[arg(long, default_value = "top:0.25")]
    select: Selection,
    /// weighted | unweighted
    #[arg(long, default_value = "unweighted")]
    estimator: Estimator,
    /// raw | normalized
    #[arg(long, default_value = "normalized")]
    weight_source: WeightSource,
    #[arg(long, env = "EVIDENCE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-12)]
    epsilon: f64,
    /// Score all 2^m masks instead of sampling.
    #[arg(long)]
    exhaustive: bool,
}

impl EvidenceArgs {
    fn config(&self) -> EvidenceConfig {
        EvidenceConfig {
            num_chunks: self.num_chunks,
            features: self.features,
            iterations: self.iterations,
            selection: self.select,
            estimator: self.estimator,
            weight_source: self.weight_source,
            seed: self.seed,
            epsilon: self.epsilon,
            exhaustive: self.exhaustive,
        }
    }
}

#[derive(Args, Debug)]
struct ExplainArgs {
    /// Spectrogram CSV or WAV file.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    label: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    evidence: EvidenceArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also write filtered.png.
    #[arg(long)]
    png: bool,
    #[command(flatten)]
    mel: MelArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    evidence: EvidenceArgs,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    mel: MelArgs,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

fn require_file(path: &Path, flag: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "{flag}: no such file {}",
            path.display()
        )))
    }
}

fn is_wav(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn echo_config(config: &EvidenceConfig) {
    eprintln!(
        "config: {}",
        serde_json::to_string(config).expect("config serializes")
    );
}

fn melspec(args: &MelspecArgs) -> Result<(), Failure> {
    require_file(&args.input, "--in")?;
    eprintln!(
        "config: {}",
        serde_json::to_string(&args.mel.params()).expect("params serialize")
    );
    let spec = args.mel.load(&args.input)?;
    spectra::write_spectrogram_csv(&spec, &args.out)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    if let Some(png) = &args.png {
        spectra::write_spectrogram_png(&spec, png).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    println!(
        "wrote {} ({} x {})",
        args.out.display(),
        spec.rows(),
        spec.cols()
    );
    Ok(())
}

fn explain(args: &ExplainArgs) -> Result<(), Failure> {
    require_file(&args.input, "--in")?;
    let config = args.evidence.config();
    echo_config(&config);
    let input = if is_wav(&args.input) {
        args.mel.load(&args.input)?
    } else {
        spectra::read_spectrogram_csv(&args.input).map_err(|e| Failure::Runtime(e.to_string()))?
    };
    config
        .validate(input.rows())
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let predictor = args.model.connect()?;
    let classes = predictor.info().class_count;
    if args.label >= classes {
        return Err(Failure::Usage(format!(
            "--label {} out of range for a {classes}-class model",
            args.label
        )));
    }
    let result = run_evidence(&input, args.label, predictor.as_ref(), &config)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    result
        .write_to_dir(&args.out)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    if args.png {
        spectra::write_spectrogram_png(&result.filtered, args.out.join("filtered.png"))
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    println!(
        "survivors: {} of {} variants, wall time: {} ms",
        result.n_survivors,
        result.n_variants,
        result.wall_time.as_millis()
    );
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<(), Failure> {
    require_file(&args.manifest, "--manifest")?;
    let config = args.evidence.config();
    echo_config(&config);
    let manifest = Manifest::load(&args.manifest).map_err(|e| Failure::Usage(e.to_string()))?;
    let predictor = args.model.connect()?;
    let mel = args.mel.params();
    let options = ExperimentOptions {
        mel: Some(mel),
        pad_seconds: args.mel.pad_seconds,
        shift_nonnegative: args.mel.nonnegative,
    };
    let outcome =
        harness::run_experiment(&manifest, predictor.as_ref(), &config, &options, &args.out)
            .map_err(|e| match e {
                HarnessError::Manifest(_) => Failure::Usage(e.to_string()),
                other => Failure::Runtime(other.to_string()),
            })?;
    for (path, reason) in &outcome.skipped {
        eprintln!("skipped {path}: {reason}");
    }
    for report in [&outcome.baseline, &outcome.evidence] {
        let auc = report.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        println!(
            "{:?}: macro F1 {:.4}, AUC {auc}",
            report.condition, report.macro_avg.f1
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    info!("threads: {}", rayon::current_num_threads());
    let outcome = match &cli.command {
        Command::Melspec(a) => melspec(a),
        Command::Explain(a) => explain(a),
        Command::Evaluate(a) => evaluate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run with --help for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
