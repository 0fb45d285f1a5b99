use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use glowtts::inference::{align_mel, synthesize, voice_convert, SynthesisRequest};
use glowtts::io::{
    append_log, checkpoint_precision, format_durations, format_frame_dump, format_loss_line, parse_tokens,
    read_mel, write_mel,
};
use glowtts::training::{batch_indices, make_synthetic_dataset, SyntheticSpec, Trainer};
use glowtts::verify::{self, Suite};
use glowtts::{Checkpoint, GlowError, GlowTts, Matrix, MelSpectrogram, Precision, RunConfig, Sample, Scalar};

#[derive(Parser)]
#[command(name = "glowtts", version, about = "Flow-based parallel text-to-speech core")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a data directory or a synthetic dataset.
    ///
    /// A data directory holds `manifest.txt`, one sample per line:
    /// `<mel file> <speaker id or -> <token ids...>`. The resolved config is
    /// written to `<out>/config.txt`, losses to `<out>/loss.log`.
    Train {
        /// Flat `key = value` config; the desk preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
        data: Option<PathBuf>,
        /// Generator settings as `key=value,...` (e.g. `samples=200,noise=0.1`).
        #[arg(long)]
        synthetic: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config step budget.
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a checkpoint (its config wins over --config).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Synthesize a mel spectrogram in one parallel decoder pass.
    ///
    /// If the predicted total duration is odd, the last frame is dropped,
    /// so the output has an even number of frames.
    Synthesize {
        #[arg(long)]
        ckpt: PathBuf,
        /// Whitespace-separated token ids, or a file containing them.
        #[arg(long)]
        tokens: String,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 1.0)]
        length_scale: f64,
        #[arg(long)]
        speaker: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write durations and per-frame prior means as text.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Align tokens to a mel spectrogram and write `token_index duration` lines.
    Align {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tokens: String,
        #[arg(long)]
        mel: PathBuf,
        #[arg(long)]
        speaker: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render a mel spectrogram with another speaker's decoder conditioning.
    ConvertVoice {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mel: PathBuf,
        #[arg(long)]
        source: usize,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run numerical verification suites; exits 1 if any check fails.
    Verify {
        #[arg(long, default_value = "all", value_parser = ["mas", "flows", "grads", "formats", "all"])]
        suite: String,
        /// Inject a fault into the named check (for testing the suite itself).
        #[arg(long = "break", value_name = "CHECK")]
        broken: Option<String>,
    },
    /// Time alignment search on a random instance.
    BenchMas {
        #[arg(long, default_value_t = 200)]
        ttext: usize,
        #[arg(long, default_value_t = 800)]
        tmel: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
    },
}

enum Failure {
    Verification,
    Error(GlowError),
}

impl From<GlowError> for Failure {
    fn from(e: GlowError) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

type CliResult = Result<(), Failure>;

fn exit_code(e: &GlowError) -> u8 {
    match e {
        GlowError::Io(_) | GlowError::Format(_) => 3,
        GlowError::Config(_) | GlowError::InvalidToken { .. } | GlowError::UnknownSpeaker { .. } | GlowError::TooShort(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("GLOWTTS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(1),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn chosen_seed(given: Option<u64>) -> u64 {
    given.unwrap_or_else(|| {
        let seed = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0);
        println!("seed: {seed} (none given; pass --seed {seed} to reproduce)");
        seed
    })
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Train { config, data, synthetic, out, seed, steps, resume } => {
            let resumed_precision = match &resume {
                Some(p) => Some(checkpoint_precision(p)?),
                None => None,
            };
            let mut run = match (&resume, &config) {
                (Some(p), _) => {
                    let precision = resumed_precision.unwrap();
                    match precision {
                        Precision::Single => Checkpoint::<f32>::load(p)?.config,
                        Precision::Double => Checkpoint::<f64>::load(p)?.config,
                    }
                }
                (None, Some(p)) => RunConfig::parse(&fs::read_to_string(p)?)?,
                (None, None) => RunConfig::preset(glowtts::Preset::Desk),
            };
            if let Some(s) = steps {
                run.train.max_steps = s;
            }
            let seed = chosen_seed(seed.or(run.train.seed));
            run.train.seed = Some(seed);
            let synthetic = match synthetic {
                Some(text) => {
                    let spec = SyntheticSpec::parse(&text)?;
                    run.model.vocab_size = spec.vocab;
                    run.model.mel_channels = spec.dim;
                    run.model.num_speakers = spec.num_speakers;
                    Some(spec)
                }
                None => None,
            };
            run.validate()?;
            match run.train.precision {
                Precision::Single => train::<f32>(&run, seed, data.as_deref(), synthetic.as_ref(), &out, resume.as_deref()),
                Precision::Double => train::<f64>(&run, seed, data.as_deref(), synthetic.as_ref(), &out, resume.as_deref()),
            }
        }
        Command::Synthesize { ckpt, tokens, temperature, length_scale, speaker, seed, out, dump } => {
            let seed = if temperature > 0.0 { Some(chosen_seed(seed)) } else { seed };
            let args = SynthArgs { tokens, temperature, length_scale, speaker, seed, out, dump };
            match checkpoint_precision(&ckpt)? {
                Precision::Single => synth::<f32>(&ckpt, &args),
                Precision::Double => synth::<f64>(&ckpt, &args),
            }
        }
        Command::Align { ckpt, tokens, mel, speaker, out } => match checkpoint_precision(&ckpt)? {
            Precision::Single => align::<f32>(&ckpt, &tokens, &mel, speaker, &out),
            Precision::Double => align::<f64>(&ckpt, &tokens, &mel, speaker, &out),
        },
        Command::ConvertVoice { ckpt, mel, source, target, out } => match checkpoint_precision(&ckpt)? {
            Precision::Single => convert::<f32>(&ckpt, &mel, source, target, &out),
            Precision::Double => convert::<f64>(&ckpt, &mel, source, target, &out),
        },
        Command::Verify { suite, broken } => {
            let suite = Suite::parse(&suite).expect("validated by clap");
            let results = verify::run_suite(suite, broken.as_deref())?;
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            println!("{} of {} checks passed", results.len() - failed, results.len());
            if failed > 0 {
                return Err(Failure::Verification);
            }
            Ok(())
        }
        Command::BenchMas { ttext, tmel, iters } => {
            if ttext == 0 || tmel < ttext || iters == 0 {
                return Err(GlowError::Config(format!("need 1 <= ttext <= tmel and iters >= 1 (got {ttext}, {tmel}, {iters})")).into());
            }
            let mut times: Vec<f64> = (0..iters)
                .map(|i| verify::time_mas(ttext, tmel, 1, i as u64))
                .collect::<glowtts::Result<_>>()?;
            times.sort_by(f64::total_cmp);
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            println!(
                "mas {ttext}x{tmel}: min {:.3} ms, median {:.3} ms, mean {:.3} ms over {iters} runs",
                times[0] * 1e3,
                times[times.len() / 2] * 1e3,
                mean * 1e3
            );
            Ok(())
        }
    }
}

fn load_manifest<S: Scalar>(dir: &Path, run: &RunConfig) -> glowtts::Result<Vec<Sample<S>>> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path)?;
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || GlowError::Format(format!("{}:{}: expected `<mel> <speaker|-> <ids...>`", path.display(), n + 1));
        let mut parts = line.split_whitespace();
        let mel_path = dir.join(parts.next().ok_or_else(bad)?);
        let speaker = match parts.next().ok_or_else(bad)? {
            "-" => None,
            s => Some(s.parse::<usize>().map_err(|_| bad())?),
        };
        let ids = parse_tokens(&parts.collect::<Vec<_>>().join(" "), run.model.vocab_size)?;
        let mel = read_mel::<S>(&mel_path)?;
        if mel.channels() != run.model.mel_channels {
            return Err(GlowError::Format(format!(
                "{} has {} channels, config expects {}",
                mel_path.display(),
                mel.channels(),
                run.model.mel_channels
            )));
        }
        samples.push(Sample { tokens: ids.ids().to_vec(), mel: mel.into_values(), speaker });
    }
    if samples.is_empty() {
        return Err(GlowError::Format(format!("{} lists no samples", path.display())));
    }
    Ok(samples)
}

fn train<S: Scalar>(
    run: &RunConfig,
    seed: u64,
    data: Option<&Path>,
    synthetic: Option<&SyntheticSpec>,
    out: &Path,
    resume: Option<&Path>,
) -> CliResult {
    let samples: Vec<Sample<S>> = match (data, synthetic) {
        (Some(dir), _) => load_manifest(dir, run)?,
        (None, Some(spec)) => make_synthetic_dataset(spec)?.samples.iter().map(|s| s.to_sample()).collect(),
        (None, None) => unreachable!("clap requires a data source"),
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), run.to_text())?;

    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::<S>::load(p)?;
            let model = ckpt.to_model()?;
            let adam = ckpt
                .optimizer
                .ok_or_else(|| GlowError::Format(format!("{} has no optimizer state", p.display())))?;
            Trainer::resume(model, adam, run.train.clone(), seed, ckpt.step as usize)?
        }
        None => Trainer::new(GlowTts::new(&run.model, seed)?, run.train.clone(), seed)?,
    };
    let save = |t: &Trainer<S>, name: &str| -> glowtts::Result<()> {
        Checkpoint::from_model(&t.model, run, t.step as u64, Some(&t.adam)).save(&out.join(name))
    };

    let log = out.join("loss.log");
    let mut pending = Vec::new();
    println!("training {} samples for {} steps ({} precision)", samples.len(), run.train.max_steps, S::PRECISION.name());
    while trainer.step < run.train.max_steps {
        let batch: Vec<&Sample<S>> = batch_indices(samples.len(), run.train.batch_size, trainer.step, seed)
            .into_iter()
            .map(|i| &samples[i])
            .collect();
        let report = trainer.train_step(&batch)?;
        pending.push(format_loss_line(&report));
        let done = trainer.step == run.train.max_steps;
        if trainer.step % run.train.log_every == 0 || done {
            println!(
                "step {} nll {:.4} duration {:.4} lr {:.2e}",
                report.step, report.losses.nll, report.losses.duration_loss, report.learning_rate
            );
            append_log(&log, &pending)?;
            pending.clear();
        }
        if trainer.step % run.train.checkpoint_every == 0 {
            save(&trainer, &format!("step_{:06}.ckpt", trainer.step))?;
        }
    }
    save(&trainer, "latest.ckpt")?;
    println!("wrote {}", out.join("latest.ckpt").display());
    Ok(())
}

struct SynthArgs {
    tokens: String,
    temperature: f64,
    length_scale: f64,
    speaker: Option<usize>,
    seed: Option<u64>,
    out: PathBuf,
    dump: Option<PathBuf>,
}

fn load_model<S: Scalar>(path: &Path) -> glowtts::Result<GlowTts<S>> {
    Checkpoint::<S>::load(path)?.to_model()
}

fn synth<S: Scalar>(ckpt: &Path, a: &SynthArgs) -> CliResult {
    let model = load_model::<S>(ckpt)?;
    let mut req = SynthesisRequest::new(parse_tokens(&a.tokens, model.config().vocab_size)?);
    req.temperature = a.temperature;
    req.length_scale = a.length_scale;
    req.speaker = a.speaker;
    req.seed = a.seed;
    let s = synthesize(&model, &req)?;
    write_mel(&a.out, &s.mel)?;
    if let Some(p) = &a.dump {
        fs::write(p, format!("{}{}", format_durations(&s.alignment), format_frame_dump(&s.alignment, &s.frame_means)))?;
    }
    println!("wrote {} ({} x {})", a.out.display(), s.mel.channels(), s.mel.frames());
    Ok(())
}

fn align<S: Scalar>(ckpt: &Path, tokens: &str, mel: &Path, speaker: Option<usize>, out: &Path) -> CliResult {
    let model = load_model::<S>(ckpt)?;
    let tokens = parse_tokens(tokens, model.config().vocab_size)?;
    let mel = read_mel::<S>(mel)?;
    let r = align_mel(&model, &tokens, &mel, speaker)?;
    fs::write(out, format_durations(&r.alignment))?;
    println!("max log-likelihood {:.6}", r.max_log_likelihood);
    Ok(())
}

fn convert<S: Scalar>(ckpt: &Path, mel: &Path, source: usize, target: usize, out: &Path) -> CliResult {
    let model = load_model::<S>(ckpt)?;
    let mel: MelSpectrogram<S> = read_mel(mel)?;
    let c = voice_convert(&model, &mel, source, target)?;
    let values: &Matrix<S> = c.mel.values();
    write_mel(out, &c.mel)?;
    println!("wrote {} ({} x {})", out.display(), values.rows(), values.cols());
    Ok(())
}
