use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use ccbam::app::checkpoint::{self, TrainState};
use ccbam::app::evaluate::{enhance_file, evaluate_dir};
use ccbam::app::gradcheck::{gradcheck, GradcheckConfig};
use ccbam::app::pipeline::Pipeline;
use ccbam::app::synth::{synthesize, write_demo_corpus, DemoCorpus, Manifest, SNR_RANGE, SNR_RANGE_WIDE};
use ccbam::app::train::{train, TrainConfig};
use ccbam::loss::LossWeights;
use ccbam::models::{Model, ModelConfig};
use ccbam::tensor::{DType, Real};

#[derive(Parser)]
#[command(name = "ccbam", version, about = "Complex-valued U-Net / CRN speech enhancement with complex attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mix clean speech and noise from a manifest into a WAV dataset.
    Synth(SynthArgs),
    /// Train a model on a synthesised dataset.
    Train(TrainArgs),
    /// Enhance one WAV file with a checkpoint.
    Enhance(EnhanceArgs),
    /// Score a directory of noisy/clean pairs.
    Evaluate(EvaluateArgs),
    /// Compare pipeline gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print parameter counts and attention overhead.
    Info(InfoArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Manifest CSV (`clean,noise,snr_db,split`).
    #[arg(long, required_unless_present = "demo")]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw missing SNRs from [-5, 20] dB instead of [0, 20] dB.
    #[arg(long)]
    wide_snr: bool,
    /// Generate synthetic sources with this many training utterances under `{out}/sources` and use their manifest.
    #[arg(long)]
    demo: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct ModelFlags {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_sisnr: Option<f64>,
    #[arg(long)]
    lambda_mask: Option<f64>,
    #[arg(long, value_parser = ["none", "skip_only", "decoder_only", "skip_and_decoder"])]
    attention: Option<String>,
    #[arg(long, value_parser = ["unet", "crn"])]
    arch: Option<String>,
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
}

impl ModelFlags {
    fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        let mut overrides = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        put("seed", self.seed.map(|v| v.to_string()));
        put("lambda_sisnr", self.lambda_sisnr.map(|v| v.to_string()));
        put("lambda_mask", self.lambda_mask.map(|v| v.to_string()));
        put("attention", self.attention.clone());
        put("arch", self.arch.clone());
        put("precision", self.precision.clone());
        Ok(TrainConfig::from_text(&text, &overrides)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints and `metrics.csv`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: ModelFlags,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory holding `{name}_noisy.wav` / `{name}_clean.wav` pairs.
    #[arg(long)]
    test_dir: PathBuf,
    /// Where to write the CSV table (default `{test_dir}/evaluation.csv`).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_parser = ["none", "skip_only", "decoder_only", "skip_and_decoder"], default_value = "skip_and_decoder")]
    attention: String,
    /// Check the toy U-Net, sampling this many scalars per parameter, instead of the tiny model.
    #[arg(long)]
    toy: Option<usize>,
}

#[derive(Args)]
struct InfoArgs {
    /// Summarise a checkpoint instead of a configuration.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    flags: ModelFlags,
}

fn run_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let range = if a.wide_snr { SNR_RANGE_WIDE } else { SNR_RANGE };
    let manifest_path = match (a.demo, &a.manifest) {
        (Some(n), _) => {
            let sizes = DemoCorpus {
                train: n,
                valid: n.div_ceil(4),
                test: n.div_ceil(4),
                ..DemoCorpus::default()
            };
            write_demo_corpus(&a.out.join("sources"), sizes, a.seed)?
        }
        (None, Some(p)) => p.clone(),
        (None, None) => bail!("--manifest or --demo is required"),
    };
    let manifest = Manifest::load(&manifest_path, a.seed, range)?;
    let index = synthesize(&manifest, &a.out)?;
    println!("wrote {} mixtures to {}", index.len(), a.out.display());
    Ok(())
}

fn run_train<T: Real>(cfg: &TrainConfig, a: &TrainArgs) -> anyhow::Result<()> {
    let report = train::<T>(cfg, &a.data, &a.out)?;
    println!("steps: {}", report.steps);
    if let Some(v) = report.valid.last() {
        println!(
            "final validation: loss {:.4}, SI-SNR {:.3} dB, FwSegSNR {:.3} dB",
            v.loss, v.si_snr, v.fwseg
        );
    }
    println!("best validation loss: {:.4}; lr {}", report.best_valid_loss, report.final_lr);
    println!("metrics: {}", report.metrics.display());
    Ok(())
}

fn load_pipeline<T: Real>(path: &Path) -> anyhow::Result<Pipeline<T>> {
    let (model, _) = checkpoint::load::<T>(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Pipeline::new(model, LossWeights::default(), Default::default())?)
}

fn checkpoint_precision(path: &Path) -> anyhow::Result<DType> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(checkpoint::peek(&bytes)?.precision)
}

fn run_enhance<T: Real>(a: &EnhanceArgs) -> anyhow::Result<()> {
    let pipe = load_pipeline::<T>(&a.checkpoint)?;
    let n = enhance_file(&pipe, &a.input, &a.output)?;
    println!("wrote {} samples to {}", n, a.output.display());
    Ok(())
}

fn run_evaluate<T: Real>(a: &EvaluateArgs) -> anyhow::Result<()> {
    let pipe = load_pipeline::<T>(&a.checkpoint)?;
    let table = evaluate_dir(&pipe, &a.test_dir)?;
    print!("{table}");
    let csv = a.csv.clone().unwrap_or_else(|| a.test_dir.join("evaluation.csv"));
    fs::write(&csv, table.to_csv())?;
    println!("table: {}", csv.display());
    Ok(())
}

fn print_summary<T: Real>(model: &Model<T>, state: Option<TrainState>) {
    let s = model.summary();
    let c = &model.config;
    println!("architecture:        {}", c.arch.name());
    println!("attention sites:     {}", c.attention.name());
    println!("stft:                {} / {}", c.stft.win_len, c.stft.hop);
    println!("parameters (real):   {}", s.total);
    println!("  attention:         {} in {} CCBAM block(s)", s.attention, s.attention_blocks);
    println!("  without attention: {}", s.base());
    println!("CCBAM overhead:      {:.2}%", s.overhead_percent());
    if let Some(st) = state {
        println!("training step:       {}", model.params.step);
        println!("epoch:               {}", st.epoch);
        println!("learning rate:       {}", st.lr);
        println!("best valid loss:     {}", st.best_valid);
    }
}

fn run_info(a: &InfoArgs) -> anyhow::Result<()> {
    if let Some(path) = &a.checkpoint {
        match checkpoint_precision(path)? {
            DType::F32 => {
                let (m, st) = checkpoint::load::<f32>(path)?;
                print_summary(&m, Some(st));
            }
            DType::F64 => {
                let (m, st) = checkpoint::load::<f64>(path)?;
                print_summary(&m, Some(st));
            }
        }
        return Ok(());
    }
    let cfg = a.flags.train_config()?;
    let model = Model::<f64>::build(cfg.model, cfg.seed)?;
    print_summary(&model, None);
    Ok(())
}

fn run() -> anyhow::Result<bool> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth(a) => run_synth(a)?,
        Command::Train(a) => {
            let cfg = a.flags.train_config()?;
            match cfg.precision {
                DType::F32 => run_train::<f32>(&cfg, a)?,
                DType::F64 => run_train::<f64>(&cfg, a)?,
            }
        }
        Command::Enhance(a) => match checkpoint_precision(&a.checkpoint)? {
            DType::F32 => run_enhance::<f32>(a)?,
            DType::F64 => run_enhance::<f64>(a)?,
        },
        Command::Evaluate(a) => match checkpoint_precision(&a.checkpoint)? {
            DType::F32 => run_evaluate::<f32>(a)?,
            DType::F64 => run_evaluate::<f64>(a)?,
        },
        Command::Gradcheck(a) => {
            let attention = ccbam::models::AttentionSites::parse(&a.attention)?;
            let cfg = match a.toy {
                Some(n) => GradcheckConfig {
                    model: ModelConfig { attention, ..ModelConfig::unet_toy() },
                    ..GradcheckConfig::toy(n)
                },
                None => GradcheckConfig::tiny(attention),
            };
            let report = gradcheck(&cfg)?;
            print!("{report}");
            let passed = report.passed();
            println!("{}", if passed { "gradcheck passed" } else { "gradcheck FAILED" });
            return Ok(passed);
        }
        Command::Info(a) => run_info(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
