//! Enhancement of files and directory-level SI-SNR / FwSegSNR evaluation.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::loss::si_snr;
use crate::tensor::Real;

use super::metrics::fwsegsnr;
use super::pipeline::Pipeline;
use super::wav::{read_wav, write_wav};

/// Environment variable capping worker threads; 0 or 1 runs on the caller's thread.
pub const THREADS_ENV: &str = "CCBAM_NUM_THREADS";

pub fn worker_threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) => n.clamp(1, available.max(1)),
        None => available,
    }
}

/// Maps `f` over `items` on up to [`worker_threads`] threads; output order matches input order.
pub fn par_map<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let threads = worker_threads().min(items.len()).max(1);
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<O>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Anything mapping a noisy waveform to an equal-length estimate.
pub trait Enhancer: Sync {
    fn enhance(&self, noisy: &[f64]) -> Result<Vec<f64>>;
}

impl<T: Real> Enhancer for Pipeline<T> {
    fn enhance(&self, noisy: &[f64]) -> Result<Vec<f64>> {
        Pipeline::enhance(self, noisy)
    }
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Enhancer for Identity {
    fn enhance(&self, noisy: &[f64]) -> Result<Vec<f64>> {
        Ok(noisy.to_vec())
    }
}

/// Reads `input`, enhances it and writes an equal-length file to `output`.
pub fn enhance_file(enhancer: &dyn Enhancer, input: &Path, output: &Path) -> Result<usize> {
    let x = read_wav(input)?;
    let y = enhancer.enhance(&x.samples)?;
    if y.len() != x.len() {
        return Err(Error::dim("enhance", format!("{} samples in, {} out", x.len(), y.len())));
    }
    write_wav(output, &y)?;
    Ok(y.len())
}

/// A noisy/clean file pair sharing a basename.
#[derive(Debug, Clone, PartialEq)]
pub struct FilePair {
    pub name: String,
    pub noisy: PathBuf,
    pub clean: PathBuf,
}

/// Pairs `{name}_noisy.wav` with `{name}_clean.wav`; other files are ignored.
pub fn pair_files(dir: &Path) -> Result<Vec<FilePair>> {
    let mut noisy = Vec::new();
    let mut clean = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(file) = path.file_name().and_then(|f| f.to_str()) else {
            continue;
        };
        if let Some(base) = file.strip_suffix("_noisy.wav") {
            noisy.push(base.to_string());
        } else if let Some(base) = file.strip_suffix("_clean.wav") {
            clean.push(base.to_string());
        }
    }
    noisy.sort();
    clean.sort();
    let mut unpaired: Vec<String> = noisy.iter().filter(|n| !clean.contains(n)).cloned().collect();
    unpaired.extend(clean.iter().filter(|c| !noisy.contains(c)).cloned());
    if !unpaired.is_empty() {
        unpaired.sort();
        return Err(Error::Input(format!("unpaired files in {}: {}", dir.display(), unpaired.join(", "))));
    }
    if noisy.is_empty() {
        return Err(Error::Input(format!("no *_noisy.wav / *_clean.wav pairs in {}", dir.display())));
    }
    Ok(noisy
        .into_iter()
        .map(|name| FilePair {
            noisy: dir.join(format!("{name}_noisy.wav")),
            clean: dir.join(format!("{name}_clean.wav")),
            name,
        })
        .collect())
}

/// SI-SNR and FwSegSNR of the noisy input and of the estimate, both against clean.
#[derive(Debug, Clone, PartialEq)]
pub struct FileMetrics {
    pub name: String,
    pub noisy_si_snr: f64,
    pub noisy_fwseg: f64,
    pub enhanced_si_snr: f64,
    pub enhanced_fwseg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<FileMetrics>,
    pub mean: FileMetrics,
}

impl EvalTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("file,noisy_si_snr_db,noisy_fwsegsnr_db,enhanced_si_snr_db,enhanced_fwsegsnr_db\n");
        for r in self.rows.iter().chain([&self.mean]) {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.name, r.noisy_si_snr, r.noisy_fwseg, r.enhanced_si_snr, r.enhanced_fwseg
            );
        }
        s
    }
}

impl fmt::Display for EvalTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>12} {:>12} {:>12} {:>12}", "file", "noisy SISNR", "noisy FwSeg", "enh SISNR", "enh FwSeg")?;
        for r in self.rows.iter().chain([&self.mean]) {
            writeln!(
                f,
                "{:<16} {:>12.3} {:>12.3} {:>12.3} {:>12.3}",
                r.name, r.noisy_si_snr, r.noisy_fwseg, r.enhanced_si_snr, r.enhanced_fwseg
            )?;
        }
        Ok(())
    }
}

fn score(enhancer: &dyn Enhancer, pair: &FilePair) -> Result<FileMetrics> {
    let noisy = read_wav(&pair.noisy)?.samples;
    let clean = read_wav(&pair.clean)?.samples;
    if noisy.len() != clean.len() {
        return Err(Error::Input(format!("{}: noisy and clean lengths differ", pair.name)));
    }
    let est = enhancer.enhance(&noisy)?;
    Ok(FileMetrics {
        name: pair.name.clone(),
        noisy_si_snr: si_snr(&clean, &noisy)?,
        noisy_fwseg: fwsegsnr(&clean, &noisy)?,
        enhanced_si_snr: si_snr(&clean, &est)?,
        enhanced_fwseg: fwsegsnr(&clean, &est)?,
    })
}

/// Scores every pair in `dir`, in parallel over files.
pub fn evaluate_dir(enhancer: &dyn Enhancer, dir: &Path) -> Result<EvalTable> {
    let pairs = pair_files(dir)?;
    let rows = par_map(&pairs, |p| score(enhancer, p)).into_iter().collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let avg = |f: fn(&FileMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean = FileMetrics {
        name: "mean".into(),
        noisy_si_snr: avg(|r| r.noisy_si_snr),
        noisy_fwseg: avg(|r| r.noisy_fwseg),
        enhanced_si_snr: avg(|r| r.enhanced_si_snr),
        enhanced_fwseg: avg(|r| r.enhanced_fwseg),
    };
    Ok(EvalTable { rows, mean })
}
