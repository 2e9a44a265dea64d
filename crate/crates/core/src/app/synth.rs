//! Manifest-driven mixture synthesis and the on-disk dataset layout.
//!
//! A manifest is a CSV with header `clean,noise,snr_db,split`; paths are
//! relative to the manifest's directory and an empty `snr_db` draws a value
//! from the configured range. Synthesis writes, per split directory,
//! `{id}_noisy.wav`, `{id}_clean.wav` and `{id}_noise.wav`, plus
//! `index.csv` (`id,split,snr_db`) at the top of the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::signal::{mix_at_snr, WaveSignal};

use super::corpus::{noise, speech_like, NoiseKind};
use super::wav::{read_wav, write_wav};

/// SNR range of the small recipe.
pub const SNR_RANGE: (f64, f64) = (0.0, 20.0);
/// SNR range of the large recipe.
pub const SNR_RANGE_WIDE: (f64, f64) = (-5.0, 20.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Input(format!("unknown split {s:?} (expected train, valid or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub clean: PathBuf,
    pub noise: PathBuf,
    pub snr_db: Option<f64>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub snr_range: (f64, f64),
}

const MANIFEST_HEADER: &str = "clean,noise,snr_db,split";

impl Manifest {
    pub fn parse(text: &str, base: &Path, seed: u64, snr_range: (f64, f64)) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == MANIFEST_HEADER => {}
            other => {
                return Err(Error::Input(format!("manifest header must be {MANIFEST_HEADER:?}, got {other:?}")));
            }
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 4 {
                return Err(Error::Input(format!("manifest row {}: expected 4 columns, got {line:?}", n + 1)));
            }
            let snr_db = if cols[2].is_empty() {
                None
            } else {
                let v: f64 = cols[2]
                    .parse()
                    .map_err(|_| Error::Input(format!("manifest row {}: bad snr {:?}", n + 1, cols[2])))?;
                if v < snr_range.0 || v > snr_range.1 {
                    return Err(Error::Input(format!(
                        "manifest row {}: snr {v} dB outside [{}, {}]",
                        n + 1,
                        snr_range.0,
                        snr_range.1
                    )));
                }
                Some(v)
            };
            entries.push(ManifestEntry {
                clean: base.join(cols[0]),
                noise: base.join(cols[1]),
                snr_db,
                split: Split::parse(cols[3])?,
            });
        }
        Ok(Manifest { entries, seed, snr_range })
    }

    pub fn load(path: &Path, seed: u64, snr_range: (f64, f64)) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, seed, snr_range)
    }
}

/// One synthesised mixture as listed in `index.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub split: Split,
    pub snr_db: f64,
}

pub fn utterance_path(dir: &Path, split: Split, id: &str, kind: &str) -> PathBuf {
    dir.join(split.name()).join(format!("{id}_{kind}.wav"))
}

/// Mixes every manifest entry and writes the dataset to `out_dir`.
///
/// Every entry consumes the same draws (SNR and noise offset) whether or not
/// it fixes its SNR, so outputs depend only on the seed and the manifest.
pub fn synthesize(manifest: &Manifest, out_dir: &Path) -> Result<Vec<IndexEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    let (lo, hi) = manifest.snr_range;
    let mut failures = Vec::new();
    let mut index = Vec::new();
    for split in Split::ALL {
        fs::create_dir_all(out_dir.join(split.name()))?;
    }
    for (i, e) in manifest.entries.iter().enumerate() {
        let drawn = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let offset: usize = rng.gen_range(0..usize::MAX / 2);
        let snr = e.snr_db.unwrap_or(drawn);
        let id = format!("{i:04}");
        let (clean, noise) = match (read_wav(&e.clean), read_wav(&e.noise)) {
            (Ok(c), Ok(n)) => (c, n),
            (c, n) => {
                failures.extend(c.err().map(|err| err.to_string()));
                failures.extend(n.err().map(|err| err.to_string()));
                continue;
            }
        };
        let shift = offset % noise.len().max(1);
        let rotated = WaveSignal::new(noise.samples[shift..].iter().chain(&noise.samples[..shift]).copied().collect())?;
        let mix = match mix_at_snr(&clean, &rotated, snr) {
            Ok(m) => m,
            Err(err) => {
                failures.push(format!("{} + {}: {err}", e.clean.display(), e.noise.display()));
                continue;
            }
        };
        write_wav(&utterance_path(out_dir, e.split, &id, "noisy"), &mix.noisy.samples)?;
        write_wav(&utterance_path(out_dir, e.split, &id, "clean"), &mix.clean.samples)?;
        write_wav(&utterance_path(out_dir, e.split, &id, "noise"), &mix.noise.samples)?;
        index.push(IndexEntry { id, split: e.split, snr_db: snr });
    }
    if !failures.is_empty() {
        return Err(Error::Input(format!("{} file(s) failed:\n  {}", failures.len(), failures.join("\n  "))));
    }
    let mut csv = String::from("id,split,snr_db\n");
    for e in &index {
        let _ = writeln!(csv, "{},{},{}", e.id, e.split.name(), e.snr_db);
    }
    fs::write(out_dir.join("index.csv"), csv)?;
    Ok(index)
}

/// A loaded noisy/clean pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub noisy: Vec<f64>,
    pub clean: Vec<f64>,
}

pub fn read_index(data_dir: &Path) -> Result<Vec<IndexEntry>> {
    let text = fs::read_to_string(data_dir.join("index.csv"))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::Input(format!("index row {line:?}: expected id,split,snr_db")));
        }
        out.push(IndexEntry {
            id: cols[0].to_string(),
            split: Split::parse(cols[1])?,
            snr_db: cols[2].parse().map_err(|_| Error::Input(format!("index row {line:?}: bad snr")))?,
        });
    }
    Ok(out)
}

/// All utterances of one split, in index order.
pub fn load_split(data_dir: &Path, split: Split) -> Result<Vec<Utterance>> {
    read_index(data_dir)?
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| {
            Ok(Utterance {
                noisy: read_wav(&utterance_path(data_dir, split, &e.id, "noisy"))?.samples,
                clean: read_wav(&utterance_path(data_dir, split, &e.id, "clean"))?.samples,
                id: e.id,
            })
        })
        .collect()
}

/// Sizes of a generated demo corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoCorpus {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seconds: f64,
}

impl Default for DemoCorpus {
    fn default() -> Self {
        DemoCorpus {
            train: 8,
            valid: 2,
            test: 2,
            seconds: 1.5,
        }
    }
}

/// Writes synthetic clean and noise sources plus a manifest into `dir`;
/// returns the manifest path.
pub fn write_demo_corpus(dir: &Path, sizes: DemoCorpus, seed: u64) -> Result<PathBuf> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fs::create_dir_all(dir.join("clean"))?;
    fs::create_dir_all(dir.join("noise"))?;
    let len = (sizes.seconds * crate::signal::SAMPLE_RATE as f64) as usize;
    let mut noise_files = Vec::new();
    for kind in NoiseKind::ALL {
        let name = format!("noise/{}.wav", kind.name());
        write_wav(&dir.join(&name), &noise(kind, 2 * len, &mut rng))?;
        noise_files.push(name);
    }
    let mut csv = format!("{MANIFEST_HEADER}\n");
    let splits = [(Split::Train, sizes.train), (Split::Valid, sizes.valid), (Split::Test, sizes.test)];
    let mut i = 0;
    for (split, n) in splits {
        for _ in 0..n {
            let name = format!("clean/utt{i:03}.wav");
            write_wav(&dir.join(&name), &speech_like(len, &mut rng))?;
            let _ = writeln!(csv, "{name},{},,{}", noise_files[i % noise_files.len()], split.name());
            i += 1;
        }
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, csv)?;
    Ok(path)
}
