//! Speech-to-unit training manifests: building them from text pairs,
//! weighted sampling across corpora, and summary statistics.
//!
//! A manifest is a JSON-lines file. The first line is a header object, every
//! following line one [`ManifestRecord`]:
//!
//! ```text
//! {"format":"speechaug-manifest","version":1}
//! {"id":"en-00000003","source_audio":"audio/en-00000003.wav","duration_s":1.25,"target_units":"3 7 2","origin":"text_aug","lang_pair":["es","en"]}
//! ```
//!
//! Audio paths are relative to the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, WavEncoding};
use crate::batch::{pool, ItemFailure, FAILURE_REPORT, TRACE_LOG};
use crate::chain::{apply_chain, AppliedTrace, ChainConfig};
use crate::effects::NoiseBank;
use crate::ports::{reduce_units, SynthesizerPort, UnitSequence, UnitizerPort};
use crate::text::TextPair;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const AUDIO_DIR: &str = "audio";
const FORMAT_NAME: &str = "speechaug-manifest";
const FORMAT_VERSION: u32 = 1;
const HISTOGRAM_BIN_WIDTH: usize = 50;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("i/o failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed manifest at line {line}: {message}")]
    MalformedManifest { line: usize, message: String },
    #[error("worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error(transparent)]
    Chain(#[from] crate::chain::ChainError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Real,
    TextAug,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Real => "real",
            Origin::TextAug => "text_aug",
        })
    }
}

impl FromStr for Origin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real" => Ok(Origin::Real),
            "text_aug" => Ok(Origin::TextAug),
            other => Err(format!("unknown origin `{other}` (expected real or text_aug)")),
        }
    }
}

mod unit_string {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    use crate::ports::UnitSequence;

    pub fn serialize<S: Serializer>(seq: &UnitSequence, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(seq)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<UnitSequence, D::Error> {
        let text = String::deserialize(d)?;
        let units = text
            .split(' ')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<u32>().map_err(|_| D::Error::custom(format!("bad unit id `{t}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        UnitSequence::reduced(units).map_err(|at| {
            D::Error::custom(format!("target_units repeat an id at position {at}"))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub source_audio: String,
    pub duration_s: f64,
    #[serde(with = "unit_string")]
    pub target_units: UnitSequence,
    pub origin: Origin,
    pub lang_pair: (String, String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// Checks record invariants; `line` numbers assume the header is line 1.
    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            let bad = |message: String| ManifestError::MalformedManifest {
                line: i + 2,
                message,
            };
            check_record(r).map_err(bad)?;
            if !seen.insert(r.id.as_str()) {
                return Err(bad(format!("duplicate id `{}`", r.id)));
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header = Header {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r)?)?;
        }
        w.flush()
    }

    pub fn parse<R: BufRead>(r: R) -> Result<Self, ManifestError> {
        let mut lines = r.lines().enumerate();
        let malformed = |line: usize, message: String| ManifestError::MalformedManifest { line, message };
        let header = match lines.next() {
            None => return Err(malformed(1, "missing header".into())),
            Some((_, l)) => l.map_err(|e| malformed(1, e.to_string()))?,
        };
        let header: Header = serde_json::from_str(&header).map_err(|e| malformed(1, e.to_string()))?;
        if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
            return Err(malformed(
                1,
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| malformed(i + 1, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord =
                serde_json::from_str(&line).map_err(|e| malformed(i + 1, e.to_string()))?;
            check_record(&record).map_err(|m| malformed(i + 1, m))?;
            records.push(record);
        }
        let manifest = Self { records };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(io_err(path))?;
        Self::parse(BufReader::new(file))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(io_err(path))?;
        self.write(io::BufWriter::new(file)).map_err(io_err(path))
    }
}

fn check_record(r: &ManifestRecord) -> Result<(), String> {
    if r.id.is_empty() {
        return Err("empty id".into());
    }
    if !(r.duration_s.is_finite() && r.duration_s > 0.0) {
        return Err(format!("duration_s must be positive, got {}", r.duration_s));
    }
    if !r.target_units.is_reduced() {
        return Err("target_units are not reduced".into());
    }
    Ok(())
}

/// Ids become file names, so keep them to a portable character set.
fn is_file_safe_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Which audio the effect chain touches during a build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentSides {
    /// Synthetic source speech (the default target of augmentation).
    pub source: bool,
    /// Synthetic target speech, augmented before unitization.
    pub target: bool,
}

impl Default for AugmentSides {
    fn default() -> Self {
        Self {
            source: true,
            target: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BuildOptions<'a> {
    pub chain: Option<&'a ChainConfig>,
    pub bank: &'a NoiseBank,
    pub sides: AugmentSides,
    pub source_lang: String,
    pub target_lang: String,
    pub encoding: WavEncoding,
    pub workers: usize,
}

#[derive(Clone, Debug, Default)]
pub struct BuildReport {
    pub manifest: Manifest,
    pub failures: Vec<ItemFailure>,
}

struct BuiltRecord {
    record: ManifestRecord,
    traces: Vec<AppliedTrace>,
}

/// Utterance id used when the chain is applied to the target side.
pub fn target_utterance_id(record_id: &str) -> String {
    format!("{record_id}#target")
}

fn build_one(
    pair: &TextPair,
    synth: &dyn SynthesizerPort,
    unitizer: &dyn UnitizerPort,
    opts: &BuildOptions<'_>,
    out_dir: &Path,
) -> Result<BuiltRecord, String> {
    let mut traces = Vec::new();
    let mut source = synth
        .synthesize(&pair.source, &opts.source_lang)
        .map_err(|e| format!("source synthesis: {e}"))?;
    let mut target = synth
        .synthesize(&pair.target, &opts.target_lang)
        .map_err(|e| format!("target synthesis: {e}"))?;

    if let Some(chain) = opts.chain {
        if opts.sides.target {
            let (aug, trace) = apply_chain(chain, &target, &target_utterance_id(&pair.id), opts.bank)
                .map_err(|e| format!("target augmentation: {e}"))?;
            target = aug;
            traces.push(trace);
        }
        if opts.sides.source {
            let (aug, trace) = apply_chain(chain, &source, &pair.id, opts.bank)
                .map_err(|e| format!("source augmentation: {e}"))?;
            source = aug;
            traces.push(trace);
        }
    }

    let units = unitizer
        .unitize(&target)
        .map_err(|e| format!("unitization: {e}"))?;
    let vocab = unitizer.vocabulary_size();
    if let Some(&bad) = units.units().iter().find(|&&u| u >= vocab) {
        return Err(format!("unitizer emitted id {bad} outside vocabulary {vocab}"));
    }
    let units = reduce_units(&units);

    let rel = format!("{AUDIO_DIR}/{}.wav", pair.id);
    audio::save_wav(&source, out_dir.join(&rel), opts.encoding).map_err(|e| e.to_string())?;
    Ok(BuiltRecord {
        record: ManifestRecord {
            id: pair.id.clone(),
            source_audio: rel,
            duration_s: source.duration_seconds(),
            target_units: units,
            origin: Origin::TextAug,
            lang_pair: (opts.source_lang.clone(), opts.target_lang.clone()),
        },
        traces,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), ManifestError> {
    let mut w = io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for item in items {
        let line = serde_json::to_string(item).expect("serializable");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn finish_outputs(
    out_dir: &Path,
    manifest: &Manifest,
    traces: &[AppliedTrace],
    failures: &[ItemFailure],
    with_traces: bool,
) -> Result<(), ManifestError> {
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    if with_traces {
        write_jsonl(&out_dir.join(TRACE_LOG), traces)?;
    }
    let failure_path = out_dir.join(FAILURE_REPORT);
    if !failures.is_empty() {
        write_jsonl(&failure_path, failures)?;
    } else if failure_path.exists() {
        fs::remove_file(&failure_path).map_err(io_err(&failure_path))?;
    }
    Ok(())
}

/// Turns filtered text pairs into speech-to-unit records.
///
/// Per pair: synthesize both sides, optionally augment (source side by
/// default, target side before unitization when enabled), unitize and reduce
/// the target, write the source WAV to `out_dir/audio/<id>.wav`, and append
/// one manifest line. Failed pairs are reported and left out of the manifest.
/// Records appear in input order; with a fixed chain seed the output is
/// byte-reproducible for any worker count.
pub fn build_manifest(
    pairs: &[TextPair],
    synth: &dyn SynthesizerPort,
    unitizer: &dyn UnitizerPort,
    opts: &BuildOptions<'_>,
    out_dir: &Path,
) -> Result<BuildReport, ManifestError> {
    if let Some(chain) = opts.chain {
        chain.validate()?;
    }
    let audio_dir = out_dir.join(AUDIO_DIR);
    fs::create_dir_all(&audio_dir).map_err(io_err(&audio_dir))?;

    let mut seen = HashSet::new();
    let admitted: Vec<Result<&TextPair, ItemFailure>> = pairs
        .iter()
        .map(|p| {
            if !is_file_safe_id(&p.id) {
                Err(format!("id `{}` is not usable as a file name", p.id))
            } else if !seen.insert(p.id.as_str()) {
                Err(format!("duplicate id `{}`", p.id))
            } else {
                Ok(p)
            }
            .map_err(|message| ItemFailure {
                id: p.id.clone(),
                message,
            })
        })
        .collect();

    let workers = opts
        .workers
        .min(synth.max_concurrency().unwrap_or(usize::MAX))
        .min(unitizer.max_concurrency().unwrap_or(usize::MAX))
        .max(1);
    let built: Vec<Result<BuiltRecord, ItemFailure>> = pool(workers)?.install(|| {
        admitted
            .par_iter()
            .map(|p| match p {
                Ok(pair) => build_one(pair, synth, unitizer, opts, out_dir).map_err(|message| {
                    ItemFailure {
                        id: pair.id.clone(),
                        message,
                    }
                }),
                Err(f) => Err(f.clone()),
            })
            .collect()
    });

    let mut report = BuildReport::default();
    let mut traces = Vec::new();
    for b in built {
        match b {
            Ok(b) => {
                report.manifest.records.push(b.record);
                traces.extend(b.traces);
            }
            Err(f) => {
                log::warn!("skipping {}: {}", f.id, f.message);
                report.failures.push(f);
            }
        }
    }
    finish_outputs(out_dir, &report.manifest, &traces, &report.failures, opts.chain.is_some())?;
    Ok(report)
}

/// Applies the chain to the source audio of existing records (for example a
/// real speech-to-speech corpus), writing new WAVs under `out_dir/audio` and
/// a manifest pointing at them. Target units are carried over unchanged.
pub fn augment_manifest_sources(
    manifest: &Manifest,
    manifest_dir: &Path,
    chain: &ChainConfig,
    bank: &NoiseBank,
    out_dir: &Path,
    workers: usize,
    encoding: WavEncoding,
) -> Result<BuildReport, ManifestError> {
    chain.validate()?;
    let audio_dir = out_dir.join(AUDIO_DIR);
    fs::create_dir_all(&audio_dir).map_err(io_err(&audio_dir))?;
    let results: Vec<Result<(ManifestRecord, AppliedTrace), ItemFailure>> = pool(workers)?.install(|| {
        manifest
            .records
            .par_iter()
            .map(|r| {
                let fail = |message: String| ItemFailure {
                    id: r.id.clone(),
                    message,
                };
                if !is_file_safe_id(&r.id) {
                    return Err(fail(format!("id `{}` is not usable as a file name", r.id)));
                }
                let input = audio::load_wav(manifest_dir.join(&r.source_audio))
                    .map_err(|e| fail(e.to_string()))?;
                let (out, trace) =
                    apply_chain(chain, &input, &r.id, bank).map_err(|e| fail(e.to_string()))?;
                let rel = format!("{AUDIO_DIR}/{}.wav", r.id);
                audio::save_wav(&out, out_dir.join(&rel), encoding).map_err(|e| fail(e.to_string()))?;
                let mut record = r.clone();
                record.source_audio = rel;
                record.duration_s = out.duration_seconds();
                Ok((record, trace))
            })
            .collect()
    });
    let mut report = BuildReport::default();
    let mut traces = Vec::new();
    for r in results {
        match r {
            Ok((record, trace)) => {
                report.manifest.records.push(record);
                traces.push(trace);
            }
            Err(f) => report.failures.push(f),
        }
    }
    finish_outputs(out_dir, &report.manifest, &traces, &report.failures, true)?;
    Ok(report)
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("origin {0} has positive weight but no records")]
    EmptyCorpus(Origin),
    #[error("invalid sampling weights: {0}")]
    InvalidWeights(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub weights: BTreeMap<Origin, f64>,
    pub seed: u64,
}

impl SamplerConfig {
    /// Parses `real=0.5,text_aug=0.5`.
    pub fn parse_weights(spec: &str) -> Result<BTreeMap<Origin, f64>, SampleError> {
        let mut weights = BTreeMap::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part
                .split_once('=')
                .ok_or_else(|| SampleError::InvalidWeights(format!("`{part}` is not origin=weight")))?;
            let origin = Origin::from_str(name.trim()).map_err(SampleError::InvalidWeights)?;
            let w: f64 = value
                .trim()
                .parse()
                .map_err(|_| SampleError::InvalidWeights(format!("`{value}` is not a number")))?;
            if weights.insert(origin, w).is_some() {
                return Err(SampleError::InvalidWeights(format!("{origin} given twice")));
            }
        }
        Ok(weights)
    }
}

/// Endless, seeded stream of records: each draw picks an origin with
/// probability proportional to its weight, then a record of that origin
/// uniformly (with replacement).
pub struct RecordStream<'a> {
    pools: Vec<(Origin, Vec<&'a ManifestRecord>)>,
    pick: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl<'a> Iterator for RecordStream<'a> {
    type Item = &'a ManifestRecord;

    fn next(&mut self) -> Option<Self::Item> {
        let (_, records) = &self.pools[self.pick.sample(&mut self.rng)];
        Some(records[self.rng.gen_range(0..records.len())])
    }
}

impl RecordStream<'_> {
    pub fn origins(&self) -> impl Iterator<Item = Origin> + '_ {
        self.pools.iter().map(|(o, _)| *o)
    }
}

pub fn sample_stream<'a>(
    sources: &[(&'a Manifest, Origin)],
    config: &SamplerConfig,
) -> Result<RecordStream<'a>, SampleError> {
    let mut pools = Vec::new();
    let mut weights = Vec::new();
    for (&origin, &w) in &config.weights {
        if !(w.is_finite() && w >= 0.0) {
            return Err(SampleError::InvalidWeights(format!("{origin}={w}")));
        }
        if w == 0.0 {
            continue;
        }
        let records: Vec<&ManifestRecord> = sources
            .iter()
            .filter(|(_, o)| *o == origin)
            .flat_map(|(m, _)| m.records.iter())
            .collect();
        if records.is_empty() {
            return Err(SampleError::EmptyCorpus(origin));
        }
        pools.push((origin, records));
        weights.push(w);
    }
    if weights.is_empty() {
        return Err(SampleError::InvalidWeights("weights sum to zero".into()));
    }
    let pick = WeightedIndex::new(&weights).map_err(|e| SampleError::InvalidWeights(e.to_string()))?;
    Ok(RecordStream {
        pools,
        pick,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OriginStats {
    pub records: usize,
    pub seconds: f64,
}

/// Record counts over unit-sequence lengths `lo..=hi`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub records: usize,
    pub total_seconds: f64,
    pub total_hours: f64,
    pub unit_length_histogram: Vec<HistogramBin>,
    pub by_origin: BTreeMap<Origin, OriginStats>,
}

pub fn corpus_stats(manifest: &Manifest) -> CorpusStats {
    let mut stats = CorpusStats::default();
    let mut bins: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &manifest.records {
        stats.records += 1;
        stats.total_seconds += r.duration_s;
        let o = stats.by_origin.entry(r.origin).or_default();
        o.records += 1;
        o.seconds += r.duration_s;
        *bins.entry(r.target_units.len() / HISTOGRAM_BIN_WIDTH).or_default() += 1;
    }
    stats.total_hours = stats.total_seconds / 3600.0;
    stats.unit_length_histogram = bins
        .into_iter()
        .map(|(b, count)| HistogramBin {
            lo: b * HISTOGRAM_BIN_WIDTH,
            hi: (b + 1) * HISTOGRAM_BIN_WIDTH - 1,
            count,
        })
        .collect();
    stats
}
