//! `speechaug`: batch front-end for acoustic augmentation and synthetic
//! speech-to-unit corpus construction.
//!
//! Standard output carries only machine-readable data (ids, JSON). All
//! diagnostics go to standard error. Exit codes: 0 on success, 1 on a
//! configuration or input error, 2 when some items failed.

use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use speechaug::audio::{WavEncoding, DEFAULT_SAMPLE_RATE};
use speechaug::batch::{augment_directory, ItemFailure};
use speechaug::chain::{default_paper_chain, ChainConfig};
use speechaug::effects::NoiseBank;
use speechaug::manifest::{
    augment_manifest_sources, build_manifest, corpus_stats, sample_stream, AugmentSides,
    BuildOptions, Manifest, Origin, SamplerConfig,
};
use speechaug::ports::{
    MockSynthesizer, MockTranslator, MockUnitizer, ReversingTranslator, SubprocessSynthesizer,
    SubprocessTranslator, SubprocessUnitizer, SynthesizerPort, TranslatorPort, UnitizerPort,
};
use speechaug::text::{
    read_pairs_tsv, run_text_stage, write_pairs_tsv, FilterPolicy, TextCorpus, TextStageOptions,
};

const PAIRS_FILE: &str = "pairs.tsv";
const STATS_FILE: &str = "stats.json";
const TRANSLATION_FAILURES: &str = "translation_failures.jsonl";

#[derive(Parser, Debug)]
#[command(name = "speechaug", version, about = "Speech augmentation and synthetic corpus tools")]
struct Cli {
    /// Log filter for standard error (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Apply the effect chain to every WAV below a directory.
    Augment(AugmentArgs),
    /// Clean, translate and filter a monolingual corpus into text pairs.
    Textaug(TextaugArgs),
    /// Synthesize and unitize text pairs into a speech-to-unit manifest.
    Build(BuildArgs),
    /// Augment the source audio of an existing manifest.
    AugmentManifest(AugmentManifestArgs),
    /// Print record ids drawn from manifests with per-origin weights.
    Sample(SampleArgs),
    /// Print a JSON summary of a manifest.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct ChainArgs {
    /// Chain configuration (TOML). Defaults to the standard four-effect chain.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Noise clips: a directory of WAVs or a listing file.
    #[arg(long)]
    noise_dir: Option<PathBuf>,
    /// Global seed; overrides any seed in the config file.
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct OutputArgs {
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long)]
    workers: Option<usize>,
    /// Output sample format: float32 or pcm16.
    #[arg(long, default_value_t = WavEncoding::Float32)]
    encoding: WavEncoding,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    chain: ChainArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct TextaugArgs {
    /// Corpus file, one sentence per line.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory for pairs.tsv and stats.json.
    #[arg(long)]
    out: PathBuf,
    /// Language of the corpus (the target side).
    #[arg(long, default_value = "en")]
    lang: String,
    /// Language to translate into (the source side).
    #[arg(long, default_value = "es")]
    src_lang: String,
    /// Filter policy (TOML); defaults apply when omitted.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// `mock`, `reverse`, or `cmd:<shell command>`.
    #[arg(long, default_value = "mock")]
    translator: String,
    /// Keep a uniform random subset of this many sentences.
    #[arg(long, requires = "seed")]
    take_n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum concurrent translator calls.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// Text pairs as written by `textaug`.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `mock` or `cmd:<shell command>`.
    #[arg(long, default_value = "mock")]
    tts: String,
    /// `mock` or `cmd:<shell command>`.
    #[arg(long, default_value = "mock")]
    unitizer: String,
    /// Unit vocabulary size of the unitizer.
    #[arg(long)]
    units: u32,
    #[arg(long, default_value = "es")]
    src_lang: String,
    #[arg(long, default_value = "en")]
    tgt_lang: String,
    /// Synthesis sample rate.
    #[arg(long, default_value_t = DEFAULT_SAMPLE_RATE)]
    sample_rate: u32,
    /// Skip augmentation altogether.
    #[arg(long, conflicts_with_all = ["config", "noise_dir"])]
    no_effects: bool,
    /// Also augment the target side before unitization.
    #[arg(long)]
    augment_target: bool,
    #[command(flatten)]
    chain: ChainArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct AugmentManifestArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    chain: ChainArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Manifest file; repeat for several. Records keep their own origin.
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    #[arg(long, default_value = "real=0.5,text_aug=0.5")]
    weights: String,
    /// Number of ids to draw.
    #[arg(short = 'n', long)]
    count: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
}

enum Status {
    Done,
    Partial(usize),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();

    match run(cli.command) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Partial(n)) => {
            log::warn!("{n} item(s) failed; see the failure report in the output directory");
            ExitCode::from(2)
        }
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<Status> {
    match command {
        Command::Augment(a) => cmd_augment(a),
        Command::Textaug(a) => cmd_textaug(a),
        Command::Build(a) => cmd_build(a),
        Command::AugmentManifest(a) => cmd_augment_manifest(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Stats(a) => cmd_stats(a),
    }
}

fn status(failures: &[ItemFailure]) -> Status {
    if failures.is_empty() {
        Status::Done
    } else {
        Status::Partial(failures.len())
    }
}

fn workers(requested: Option<usize>) -> usize {
    requested
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

fn load_chain(args: &ChainArgs) -> Result<ChainConfig> {
    let chain = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading chain config {}", path.display()))?;
            ChainConfig::from_toml_str(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => default_paper_chain(),
    }
    .with_seed(args.seed);
    chain.validate()?;
    Ok(chain)
}

fn load_bank(args: &ChainArgs, chain: &ChainConfig, sample_rate: u32) -> Result<NoiseBank> {
    match &args.noise_dir {
        Some(path) => {
            let bank = NoiseBank::load(path, sample_rate)
                .with_context(|| format!("loading noise from {}", path.display()))?;
            if chain.uses_noise() && bank.is_empty() {
                bail!("no noise clips found in {}", path.display());
            }
            log::info!("loaded {} noise clip(s)", bank.len());
            Ok(bank)
        }
        None if chain.uses_noise() => {
            bail!("the chain mixes noise but no --noise-dir was given")
        }
        None => Ok(NoiseBank::new(sample_rate)),
    }
}

fn cmd_augment(a: AugmentArgs) -> Result<Status> {
    let chain = load_chain(&a.chain)?;
    if !a.input.is_dir() {
        bail!("input directory {} does not exist", a.input.display());
    }
    let bank = load_bank(&a.chain, &chain, DEFAULT_SAMPLE_RATE)?;
    let report = augment_directory(
        &a.input,
        &a.out,
        &chain,
        &bank,
        workers(a.output.workers),
        a.output.encoding,
    )?;
    log::info!("augmented {} file(s)", report.processed);
    Ok(status(&report.failures))
}

fn translator(spec: &str) -> Result<Box<dyn TranslatorPort>> {
    Ok(match spec {
        "mock" => Box::new(MockTranslator),
        "reverse" => Box::new(ReversingTranslator),
        _ => match spec.strip_prefix("cmd:") {
            Some(cmd) => Box::new(SubprocessTranslator::spawn(cmd)?),
            None => bail!("unknown translator `{spec}` (expected mock, reverse or cmd:<command>)"),
        },
    })
}

fn synthesizer(spec: &str, sample_rate: u32) -> Result<Box<dyn SynthesizerPort>> {
    Ok(match spec {
        "mock" => Box::new(MockSynthesizer { sample_rate }),
        _ => match spec.strip_prefix("cmd:") {
            Some(cmd) => Box::new(SubprocessSynthesizer::spawn(cmd, sample_rate)?),
            None => bail!("unknown synthesizer `{spec}` (expected mock or cmd:<command>)"),
        },
    })
}

fn unitizer(spec: &str, k: u32) -> Result<Box<dyn UnitizerPort>> {
    Ok(match spec {
        "mock" => Box::new(MockUnitizer::new(k)?),
        _ => match spec.strip_prefix("cmd:") {
            Some(cmd) => Box::new(SubprocessUnitizer::spawn(cmd, k)?),
            None => bail!("unknown unitizer `{spec}` (expected mock or cmd:<command>)"),
        },
    })
}

fn cmd_textaug(a: TextaugArgs) -> Result<Status> {
    let policy = match &a.policy {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading policy {}", path.display()))?;
            FilterPolicy::from_toml_str(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => FilterPolicy::default(),
    };
    let mut corpus = TextCorpus::read(&a.input, &a.lang)?;
    if let (Some(n), Some(seed)) = (a.take_n, a.seed) {
        corpus = corpus.sample(n, seed);
    }
    let port = translator(&a.translator)?;
    let options = TextStageOptions {
        source_language: a.src_lang.clone(),
        max_in_flight: workers(a.workers),
    };
    let out = run_text_stage(&corpus, port.as_ref(), &policy, &options)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let pairs_path = a.out.join(PAIRS_FILE);
    let file = fs::File::create(&pairs_path)
        .with_context(|| format!("creating {}", pairs_path.display()))?;
    write_pairs_tsv(&out.pairs, BufWriter::new(file))?;
    let stats = out.stats.to_json();
    fs::write(a.out.join(STATS_FILE), format!("{stats}\n"))?;

    let failures_path = a.out.join(TRANSLATION_FAILURES);
    if out.failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path)?;
        }
    } else {
        let lines: String = out
            .failures
            .iter()
            .map(|f| serde_json::to_string(f).expect("failure serializes") + "\n")
            .collect();
        fs::write(&failures_path, lines)?;
    }
    println!("{stats}");
    log::info!(
        "{} sentence(s) in, {} pair(s) out",
        out.stats.input,
        out.stats.accepted
    );
    Ok(if out.failures.is_empty() {
        Status::Done
    } else {
        Status::Partial(out.failures.len())
    })
}

fn cmd_build(a: BuildArgs) -> Result<Status> {
    let file = fs::File::open(&a.pairs).with_context(|| format!("opening {}", a.pairs.display()))?;
    let pairs = read_pairs_tsv(BufReader::new(file))
        .with_context(|| format!("in {}", a.pairs.display()))?;
    let chain = if a.no_effects {
        None
    } else {
        Some(load_chain(&a.chain)?)
    };
    let bank = match &chain {
        Some(c) => load_bank(&a.chain, c, a.sample_rate)?,
        None => NoiseBank::new(a.sample_rate),
    };
    let synth = synthesizer(&a.tts, a.sample_rate)?;
    let units = unitizer(&a.unitizer, a.units)?;
    let opts = BuildOptions {
        chain: chain.as_ref(),
        bank: &bank,
        sides: AugmentSides {
            source: true,
            target: a.augment_target,
        },
        source_lang: a.src_lang,
        target_lang: a.tgt_lang,
        encoding: a.output.encoding,
        workers: workers(a.output.workers),
    };
    let report = build_manifest(&pairs, synth.as_ref(), units.as_ref(), &opts, &a.out)?;
    log::info!("wrote {} record(s)", report.manifest.records.len());
    Ok(status(&report.failures))
}

fn cmd_augment_manifest(a: AugmentManifestArgs) -> Result<Status> {
    let chain = load_chain(&a.chain)?;
    let manifest = Manifest::load(&a.manifest)
        .with_context(|| format!("loading {}", a.manifest.display()))?;
    let bank = load_bank(&a.chain, &chain, DEFAULT_SAMPLE_RATE)?;
    let dir = a.manifest.parent().unwrap_or(Path::new("."));
    let report = augment_manifest_sources(
        &manifest,
        dir,
        &chain,
        &bank,
        &a.out,
        workers(a.output.workers),
        a.output.encoding,
    )?;
    log::info!("augmented {} record(s)", report.manifest.records.len());
    Ok(status(&report.failures))
}

fn cmd_sample(a: SampleArgs) -> Result<Status> {
    let weights = SamplerConfig::parse_weights(&a.weights)?;
    let mut by_origin: Vec<(Origin, Manifest)> = Vec::new();
    for path in &a.manifest {
        let m = Manifest::load(path).with_context(|| format!("loading {}", path.display()))?;
        for record in m.records {
            match by_origin.iter_mut().find(|(o, _)| *o == record.origin) {
                Some((_, group)) => group.records.push(record),
                None => by_origin.push((record.origin, Manifest { records: vec![record] })),
            }
        }
    }
    let sources: Vec<(&Manifest, Origin)> = by_origin.iter().map(|(o, m)| (m, *o)).collect();
    let stream = sample_stream(&sources, &SamplerConfig { weights, seed: a.seed })?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for record in stream.take(a.count) {
        writeln!(out, "{}", record.id)?;
    }
    out.flush()?;
    Ok(Status::Done)
}

fn cmd_stats(a: StatsArgs) -> Result<Status> {
    let manifest = Manifest::load(&a.manifest)
        .with_context(|| format!("loading {}", a.manifest.display()))?;
    let stats = corpus_stats(&manifest);
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(Status::Done)
}
