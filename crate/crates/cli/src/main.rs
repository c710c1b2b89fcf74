use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use pedalcw::model::{
    chunk_corpus, sample, Checkpoint, Model, ModelConfig, ModelError, SampleOptions, TrainConfig,
    Trainer, LOSS_LOG_HEADER,
};
use pedalcw::par::Exec;
use pedalcw::pipeline::{self, PipelineError};
use pedalcw::stats::{self, SongInput};
use pedalcw::tokenizer::{self, Field, SuperToken, TokenError, TokenFormat};

#[derive(Parser)]
#[command(
    name = "pedalcw",
    version,
    about = "Pedal-aware compound-word MIDI tokenizer and Transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// MIDI file (or directory of them) to super-token files.
    Encode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Text)]
        format: FormatArg,
    },
    /// Token file to MIDI.
    Decode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Pedal alignment report for a MIDI file or directory.
    Stats {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Also print a plain-text table to stdout.
        #[arg(long)]
        table: bool,
    },
    /// Train a model on a directory of MIDI or token files.
    Train(TrainArgs),
    /// Sample from a checkpoint and write MIDI.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Integer,
}

impl From<FormatArg> for TokenFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Text => TokenFormat::Text,
            FormatArg::Integer => TokenFormat::Integer,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Model config JSON; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    warmup: u64,
    /// CSV loss log, one row per step.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also write the checkpoint every N steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Overrides the config seed for both initialization and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Disable the thread pool.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    bars: usize,
    /// Token file to continue; defaults to a bar and its first subbeat.
    #[arg(long)]
    primer: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// `T` for every field or `FIELD=T`; repeatable.
    #[arg(long)]
    temperature: Vec<String>,
    /// Nucleus mass, `P` or `FIELD=P`; repeatable.
    #[arg(long)]
    top_p: Vec<String>,
    /// Also write the sampled tokens (text form).
    #[arg(long)]
    emit_tokens: Option<PathBuf>,
}

/// Failure classes mapped onto the exit status.
enum Failure {
    Usage(String),
    Data(String),
    Model(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Model(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Model(m) => m,
        }
    }
}

fn data(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::Model(e.to_string())
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| data(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| data(path, e))
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let io = |e: std::io::Error| data(path, e);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn is_midi(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("mid" | "midi")
    )
}

fn is_tokens(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("tokens" | "txt")
    )
}

/// Files in `dir` accepted by `keep`, sorted by file name.
fn list_dir(dir: &Path, keep: fn(&Path) -> bool) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| data(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && keep(p))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if files.is_empty() {
        return Err(Failure::Data(format!("{}: no usable files", dir.display())));
    }
    Ok(files)
}

fn pipeline_failure(path: &Path, e: PipelineError) -> Failure {
    data(path, e)
}

fn encode(input: &Path, output: &Path, format: TokenFormat) -> Result<()> {
    let encode_one = |path: &PathBuf| -> Result<String> {
        let tokens = pipeline::encode_midi(&read(path)?).map_err(|e| pipeline_failure(path, e))?;
        Ok(tokenizer::serialize(&tokens, format))
    };
    if !input.is_dir() {
        let text = encode_one(&input.to_path_buf())?;
        return write_atomic(output, text.as_bytes());
    }
    let files = list_dir(input, is_midi)?;
    fs::create_dir_all(output).map_err(|e| data(output, e))?;
    let results = Exec::default().map(&files, encode_one);
    for (path, text) in files.iter().zip(results) {
        let name =
            Path::new(path.file_stem().expect("listed files have names")).with_extension("tokens");
        write_atomic(&output.join(name), text?.as_bytes())?;
    }
    info!("encoded {} files into {}", files.len(), output.display());
    Ok(())
}

fn read_tokens(path: &Path) -> Result<Vec<SuperToken>> {
    tokenizer::parse_tokens(&read_text(path)?).map_err(|e| data(path, e))
}

fn decode(input: &Path, output: &Path) -> Result<()> {
    let tokens = read_tokens(input)?;
    let decoded = tokenizer::decode(&tokens).map_err(|e: TokenError| data(input, e))?;
    if decoded.truncated {
        warn!("{}: no EOS token; decoded what was there", input.display());
    }
    write_atomic(output, &pipeline::decoded_to_midi(&decoded))
}

fn run_stats(input: &Path, output: &Path, table: bool) -> Result<()> {
    let files = if input.is_dir() {
        list_dir(input, is_midi)?
    } else {
        vec![input.to_path_buf()]
    };
    let songs = Exec::default().map(&files, |path| -> Result<SongInput> {
        let score = pedalcw::midi_io::parse_midi(&read(path)?).map_err(|e| data(path, e))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(SongInput::from_score(name, &score))
    });
    let songs = songs.into_iter().collect::<Result<Vec<_>>>()?;
    let report =
        stats::analyze(&songs, Exec::default()).map_err(|e| Failure::Data(e.to_string()))?;
    write_atomic(output, report.to_json().as_bytes())?;
    if table {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Vec<Vec<SuperToken>>> {
    let files = list_dir(dir, |p| is_midi(p) || is_tokens(p))?;
    Exec::default()
        .map(&files, |path| {
            if is_midi(path) {
                pipeline::encode_midi(&read(path)?).map_err(|e| pipeline_failure(path, e))
            } else {
                read_tokens(path)
            }
        })
        .into_iter()
        .collect()
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => serde_json::from_str::<ModelConfig>(&read_text(path)?)
            .map_err(|e| Failure::Model(format!("{}: {e}", path.display())))?,
        None => ModelConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let corpus = load_corpus(&args.corpus)?;
    let examples = chunk_corpus(&corpus, config.context)?;
    info!(
        "{} songs, {} training windows",
        corpus.len(),
        examples.len()
    );
    let train_config = TrainConfig {
        steps: args.steps,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        warmup_steps: args.warmup,
        seed: config.seed,
        ..TrainConfig::default()
    };
    let exec = if args.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    let model = Model::new(config)?;
    info!("{} parameters", model.parameter_count());
    let mut trainer = Trainer::new(model, examples, train_config)?.with_exec(exec);

    let mut log = format!("{LOSS_LOG_HEADER}\n");
    let mut saved: Result<()> = Ok(());
    trainer.run(args.steps, |s, t| {
        log.push_str(&s.csv_row());
        log.push('\n');
        if s.step % 50 == 0 || s.step == args.steps {
            info!("step {} loss {:.4}", s.step, s.loss.total);
        }
        if args
            .checkpoint_every
            .is_some_and(|n| n > 0 && s.step % n == 0)
            && saved.is_ok()
        {
            saved = write_atomic(&args.output, &t.checkpoint().to_bytes());
        }
        Ok(())
    })?;
    saved?;
    if let Some(path) = &args.log {
        write_atomic(path, log.as_bytes())?;
    }
    write_atomic(&args.output, &trainer.checkpoint().to_bytes())
}

/// Parses repeated `VALUE` / `FIELD=VALUE` settings over a default.
fn per_field(specs: &[String], default: f64, what: &str) -> Result<[f64; 7]> {
    let mut out = [default; 7];
    for spec in specs {
        let bad = || Failure::Usage(format!("invalid --{what} value {spec:?}"));
        match spec.split_once('=') {
            None => out = [spec.parse().map_err(|_| bad())?; 7],
            Some((name, value)) => {
                let field = Field::ALL
                    .iter()
                    .find(|f| f.name() == name)
                    .ok_or_else(bad)?;
                out[field.index()] = value.parse().map_err(|_| bad())?;
            }
        }
    }
    Ok(out)
}

fn generate(args: &GenerateArgs) -> Result<()> {
    let temperature = per_field(&args.temperature, 1.0, "temperature")?;
    let top_p = per_field(&args.top_p, 1.0, "top-p")?;
    if args.bars == 0 {
        return Err(Failure::Usage("--bars must be positive".into()));
    }
    let seed = args.seed.unwrap_or_else(|| {
        let s = rand::random();
        eprintln!("pedalcw: using seed {s}");
        s
    });
    let checkpoint = Checkpoint::from_bytes(&read(&args.checkpoint)?)?;
    let primer = match &args.primer {
        Some(path) => read_tokens(path)?,
        None => SampleOptions::default_primer(),
    };
    let opts = SampleOptions {
        max_bars: args.bars,
        temperature,
        top_p,
        seed,
    };
    let tokens = sample(&checkpoint.model, &primer, &opts)?;
    if let Some(path) = &args.emit_tokens {
        write_atomic(
            path,
            tokenizer::serialize(&tokens, TokenFormat::Text).as_bytes(),
        )?;
    }
    let midi = pipeline::decode_to_midi(&tokens)
        .map_err(|e| Failure::Model(format!("sampled tokens: {e}")))?;
    write_atomic(&args.output, &midi)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Encode {
            input,
            output,
            format,
        } => encode(&input, &output, format.into()),
        Command::Decode { input, output } => decode(&input, &output),
        Command::Stats {
            input,
            output,
            table,
        } => run_stats(&input, &output, table),
        Command::Train(args) => train(&args),
        Command::Generate(args) => generate(&args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PEDALCW_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("pedalcw: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
