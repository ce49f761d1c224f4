use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};

use twm::align::{load_pairs, loss_history_csv, train_projection, ProjectionLayer, TrainConfig};
use twm::audio::{load_waveform, mel_spectrogram, AudioEncoder};
use twm::bench::{load_scenarios, run_bench, AblationArm, ScenarioGen};
use twm::io::{indices_json, load_config, load_embeddings, load_query, EmbeddingSequence, QueryEmbedding};
use twm::pipeline::{default_encoder, neural_search, AudioFrontend, AudioInput};
use twm::visual::select_visual;
use twm::{CommitMode, TwmConfig, TwmError};

/// Query-guided frame and audio-segment selection over embedding files.
#[derive(Parser)]
#[command(name = "twm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select frames from a visual embedding sequence.
    SelectFrames(SelectFrames),
    /// Select frames, then the audio segments that match them.
    SelectAudio(SelectAudio),
    /// Train a visual→text projection with InfoNCE.
    TrainAlign(TrainAlign),
    /// Compute a log-Mel spectrogram (and optionally its segments).
    Mel(Mel),
    /// Run the planted-relevance benchmark.
    Bench(Bench),
    /// Exhaustive top-budget frames by query relevance.
    Oracle(Oracle),
}

#[derive(Args)]
struct SearchArgs {
    /// Frame embeddings (TWM1 binary or JSON).
    #[arg(long)]
    embeddings: PathBuf,
    /// Query embedding (JSON or single-item embedding file).
    #[arg(long)]
    query: PathBuf,
    /// Frame→query projection (TWMP or JSON); identity when omitted.
    #[arg(long)]
    projection: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Search configuration (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: music-avqa, msr-vtt or cmd.
    #[arg(long, default_value = "msr-vtt")]
    preset: String,
    /// Buffer update rule; overrides the configuration.
    #[arg(long, value_parser = ["commit-window", "commit-argmax"])]
    mode: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<TwmConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => TwmConfig::preset(&self.preset)?,
        };
        if let Some(m) = &self.mode {
            cfg.commit_mode = m.parse::<CommitMode>()?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SelectFrames {
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Also write the per-iteration search trace (JSON) here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Selected indices (JSON array).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AudioArgs {
    /// WAV (16-bit mono), raw f32 LE samples, TWMM spectrogram or TWMS segments.
    #[arg(long)]
    audio: PathBuf,
    /// Sample rate of raw f32 input.
    #[arg(long)]
    sample_rate: Option<u32>,
    #[arg(long, default_value_t = 512)]
    n_fft: usize,
    #[arg(long, default_value_t = 160)]
    hop: usize,
    #[arg(long, default_value_t = 64)]
    n_mels: usize,
    /// Segment length in seconds; otherwise the configured segment count.
    #[arg(long)]
    segment_seconds: Option<f64>,
}

impl AudioArgs {
    fn frontend(&self, cfg: &TwmConfig) -> AudioFrontend {
        AudioFrontend {
            raw_sample_rate: self.sample_rate,
            n_fft: self.n_fft,
            hop: self.hop,
            n_mels: self.n_mels,
            segment_seconds: self.segment_seconds,
            ..AudioFrontend::from_config(cfg)
        }
    }
}

#[derive(Args)]
struct SelectAudio {
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    audio: AudioArgs,
    /// Trained audio encoder (JSON); seeded initialization when omitted.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Seed for the default encoder; defaults to the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Selected frames and segments (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainAlign {
    /// JSON array of {"visual": [...], "text": [...]} records.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Trained projection (TWMP binary).
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_out: Option<PathBuf>,
}

#[derive(Args)]
struct Mel {
    /// WAV (16-bit mono) or raw f32 LE samples.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    sample_rate: Option<u32>,
    #[arg(long, default_value_t = 512)]
    n_fft: usize,
    #[arg(long, default_value_t = 160)]
    hop: usize,
    #[arg(long, default_value_t = 64)]
    n_mels: usize,
    /// Spectrogram (TWMM binary).
    #[arg(long)]
    out: PathBuf,
    /// Also write segmented patches (TWMS binary) here.
    #[arg(long)]
    segments_out: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    n_segments: usize,
    #[arg(long)]
    segment_seconds: Option<f64>,
    #[arg(long, default_value_t = 8)]
    patch_len: usize,
}

#[derive(Args)]
struct Bench {
    /// Scenario list (JSON).
    #[arg(long, conflicts_with = "generate", required_unless_present = "generate")]
    scenarios: Option<PathBuf>,
    /// Generate this many random scenarios instead.
    #[arg(long)]
    generate: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated arms: full, vwm_only, awm_only, none.
    #[arg(long, value_delimiter = ',', default_value = "full,vwm_only,awm_only,none")]
    ablation: Vec<String>,
    /// Base seed for generated scenarios.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Output directory for results.csv and summary.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Oracle {
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    budget: usize,
    /// Selected indices (JSON array).
    #[arg(long)]
    out: PathBuf,
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    std::fs::write(path, contents).map_err(|e| TwmError::io(path, e))?;
    Ok(())
}

fn load_search(args: &SearchArgs) -> anyhow::Result<(EmbeddingSequence<f64>, QueryEmbedding<f64>, ProjectionLayer<f64>)> {
    let seq = load_embeddings(&args.embeddings)?;
    let query = load_query(&args.query)?;
    let projection = match &args.projection {
        Some(p) => ProjectionLayer::load(p)?,
        None => {
            if seq.dim() != query.dim() {
                return Err(TwmError::InvalidInput(format!(
                    "frame dim {} differs from query dim {}; pass --projection",
                    seq.dim(),
                    query.dim()
                ))
                .into());
            }
            ProjectionLayer::identity(seq.dim())
        }
    };
    Ok((seq, query, projection))
}

fn select_frames(cmd: SelectFrames) -> anyhow::Result<()> {
    let (seq, query, projection) = load_search(&cmd.search)?;
    let cfg = cmd.config.load()?;
    let sel = select_visual(&seq, &query, &projection, &cfg)?;
    write(&cmd.out, &indices_json(&sel.buffer.indices()))?;
    if let Some(t) = &cmd.trace {
        write(t, &sel.trace.to_json())?;
    }
    log::info!("selected {} of {} frames", sel.buffer.len(), seq.n_items());
    Ok(())
}

fn select_audio(cmd: SelectAudio) -> anyhow::Result<()> {
    let (seq, query, projection) = load_search(&cmd.search)?;
    let cfg = cmd.config.load()?;
    let segments = cmd.audio.frontend(&cfg).load_segments::<f64>(&cmd.audio.audio)?;
    let encoder = match &cmd.encoder {
        Some(p) => AudioEncoder::load_json(p)?,
        None => default_encoder(seq.dim(), &segments, &cfg, cmd.seed.unwrap_or(cfg.seed))?,
    };
    let audio = AudioInput {
        segments: &segments,
        encoder: &encoder,
    };
    let result = neural_search(&seq, Some(audio), &query, &projection, &cfg)?;
    write(&cmd.out, &result.summary(Some(&segments)).to_json())
}

fn train_align(cmd: TrainAlign) -> anyhow::Result<()> {
    let pairs = load_pairs::<f64>(&cmd.pairs)?;
    let cfg = TrainConfig {
        lr: cmd.lr,
        epochs: cmd.epochs,
        batch_size: cmd.batch_size,
        seed: cmd.seed,
        tau: cmd.tau,
    };
    let outcome = train_projection(&pairs, &cfg)?;
    outcome.layer.save(&cmd.out)?;
    let loss_path = cmd.loss_out.unwrap_or_else(|| {
        let mut p = cmd.out.clone().into_os_string();
        p.push(".loss.csv");
        p.into()
    });
    write(&loss_path, &loss_history_csv(&outcome.loss_history))?;
    if let (Some(first), Some(last)) = (outcome.loss_history.first(), outcome.loss_history.last()) {
        log::info!("loss {first} -> {last}");
    }
    Ok(())
}

fn mel(cmd: Mel) -> anyhow::Result<()> {
    let wave = load_waveform::<f64>(&cmd.input, cmd.sample_rate)?;
    let spec = mel_spectrogram(&wave, cmd.n_fft, cmd.hop, cmd.n_mels)?;
    spec.save(&cmd.out)?;
    if let Some(path) = &cmd.segments_out {
        let frontend = AudioFrontend {
            segment_seconds: cmd.segment_seconds,
            n_segments: cmd.n_segments,
            patch_len: cmd.patch_len,
            ..AudioFrontend::default()
        };
        frontend.segment(&spec)?.save(path)?;
    }
    Ok(())
}

fn bench(cmd: Bench) -> anyhow::Result<()> {
    let arms: Vec<AblationArm> = cmd
        .ablation
        .iter()
        .map(|a| a.parse())
        .collect::<Result<_, _>>()?;
    let cfg = cmd.config.load()?;
    let scenarios = match (&cmd.scenarios, cmd.generate) {
        (Some(p), _) => load_scenarios(p)?,
        (None, Some(n)) => {
            let gen = ScenarioGen {
                dim: cmd.dim,
                noise_sigma: cmd.noise_sigma,
                ..ScenarioGen::default()
            };
            gen.scenarios(n, cmd.seed)
        }
        (None, None) => bail!(TwmError::InvalidInput("pass --scenarios or --generate".into())),
    };
    let report = run_bench::<f64>(&scenarios, &cfg, &arms)?;
    report.write(&cmd.out)?;
    print!("{}", report.summary_table());
    Ok(())
}

fn oracle(cmd: Oracle) -> anyhow::Result<()> {
    let (seq, query, projection) = load_search(&cmd.search)?;
    let top = twm::bench::oracle_topk(&seq, &query, &projection, cmd.budget)?;
    write(&cmd.out, &indices_json(&top))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<TwmError>() {
        Some(e) if e.is_io() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("TWM_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SelectFrames(c) => select_frames(c),
        Command::SelectAudio(c) => select_audio(c),
        Command::TrainAlign(c) => train_align(c),
        Command::Mel(c) => mel(c),
        Command::Bench(c) => bench(c),
        Command::Oracle(c) => oracle(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
