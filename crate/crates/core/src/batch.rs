//! Corpus-level augmentation of a directory of WAV files.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuildError, ThreadPoolBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioError, WavEncoding};
use crate::chain::{apply_chain, AppliedTrace, ChainConfig};
use crate::effects::NoiseBank;

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("i/o failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("worker pool: {0}")]
    Pool(#[from] ThreadPoolBuildError),
    #[error(transparent)]
    Chain(#[from] crate::chain::ChainError),
}

pub(crate) fn pool(workers: usize) -> Result<ThreadPool, ThreadPoolBuildError> {
    ThreadPoolBuilder::new().num_threads(workers.max(1)).build()
}

/// All `.wav` files below `dir`, sorted by path.
pub fn find_wavs(dir: &Path) -> Result<Vec<PathBuf>, AudioError> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else if path
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
            {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, &mut out).map_err(|source| AudioError::IoFailure {
        path: dir.to_path_buf(),
        source,
    })?;
    out.sort();
    Ok(out)
}

/// `root/a/b.wav` becomes `a/b`, with `/` separators on every platform.
pub fn relative_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path).with_extension("");
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub id: String,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct BatchReport {
    pub processed: usize,
    pub traces: Vec<AppliedTrace>,
    pub failures: Vec<ItemFailure>,
}

pub const TRACE_LOG: &str = "traces.jsonl";
pub const FAILURE_REPORT: &str = "failures.jsonl";

/// Applies the chain to every WAV under `in_dir`, mirroring the tree into
/// `out_dir` and writing one trace line per utterance to `traces.jsonl`.
///
/// Each file's utterance id is its path relative to `in_dir` without the
/// extension, so results do not depend on `workers`. Per-file failures are
/// collected in the report (and in `failures.jsonl`) rather than aborting.
pub fn augment_directory(
    in_dir: &Path,
    out_dir: &Path,
    config: &ChainConfig,
    bank: &NoiseBank,
    workers: usize,
    encoding: WavEncoding,
) -> Result<BatchReport, BatchError> {
    config.validate()?;
    let inputs = find_wavs(in_dir).map_err(|e| match e {
        AudioError::IoFailure { path, source } => BatchError::Io { path, source },
        other => BatchError::Io {
            path: in_dir.to_path_buf(),
            source: io::Error::other(other.to_string()),
        },
    })?;
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| BatchError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let results: Vec<Result<AppliedTrace, ItemFailure>> = pool(workers)?.install(|| {
        inputs
            .par_iter()
            .map(|path| {
                let id = relative_id(in_dir, path);
                let fail = |message: String| ItemFailure {
                    id: id.clone(),
                    message,
                };
                let input = audio::load_wav(path).map_err(|e| fail(e.to_string()))?;
                let (out, trace) =
                    apply_chain(config, &input, &id, bank).map_err(|e| fail(e.to_string()))?;
                let dest = out_dir.join(path.strip_prefix(in_dir).unwrap_or(path));
                if let Some(parent) = dest.parent() {
                    fs::create_dir_all(parent).map_err(|e| fail(e.to_string()))?;
                }
                audio::save_wav(&out, &dest, encoding).map_err(|e| fail(e.to_string()))?;
                Ok(trace)
            })
            .collect()
    });

    let mut report = BatchReport::default();
    for r in results {
        match r {
            Ok(trace) => {
                report.processed += 1;
                report.traces.push(trace);
            }
            Err(f) => report.failures.push(f),
        }
    }

    let trace_path = out_dir.join(TRACE_LOG);
    let mut log = io::BufWriter::new(fs::File::create(&trace_path).map_err(io_err(&trace_path))?);
    for t in &report.traces {
        writeln!(log, "{}", t.to_json_line()).map_err(io_err(&trace_path))?;
    }
    log.flush().map_err(io_err(&trace_path))?;

    let failure_path = out_dir.join(FAILURE_REPORT);
    if report.failures.is_empty() {
        if failure_path.exists() {
            fs::remove_file(&failure_path).map_err(io_err(&failure_path))?;
        }
    } else {
        let lines: String = report
            .failures
            .iter()
            .map(|f| serde_json::to_string(f).expect("failure serializes") + "\n")
            .collect();
        fs::write(&failure_path, lines).map_err(io_err(&failure_path))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::AudioBuffer;
    use crate::chain::default_paper_chain;

    #[test]
    fn ids_are_relative_without_extension() {
        let root = Path::new("/data/in");
        assert_eq!(relative_id(root, Path::new("/data/in/spk1/u01.wav")), "spk1/u01");
        assert_eq!(relative_id(root, Path::new("/data/in/x.WAV")), "x");
    }

    #[test]
    fn augments_tree_and_reports_failures() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in");
        fs::create_dir_all(input.join("sub")).unwrap();
        let clip = AudioBuffer::new(vec![0.1; 4000], 16000).unwrap();
        audio::save_wav(&clip, input.join("a.wav"), WavEncoding::Float32).unwrap();
        audio::save_wav(&clip, input.join("sub/b.wav"), WavEncoding::Pcm16).unwrap();
        fs::write(input.join("broken.wav"), b"not a wav").unwrap();

        let mut bank = NoiseBank::new(16000);
        bank.push("n", None, AudioBuffer::new(vec![0.2; 1000], 16000).unwrap())
            .unwrap();
        let out = dir.path().join("out");
        let cfg = default_paper_chain().with_seed(1);
        let report = augment_directory(&input, &out, &cfg, &bank, 2, WavEncoding::Float32).unwrap();
        assert_eq!(report.processed, 2);
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].id, "broken");
        assert!(out.join("a.wav").exists());
        assert!(out.join("sub/b.wav").exists());
        let log = fs::read_to_string(out.join(TRACE_LOG)).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(out.join(FAILURE_REPORT).exists());
    }
}
