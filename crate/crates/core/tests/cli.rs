use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ccbam::app::checkpoint::{self, TrainState};
use ccbam::app::corpus::speech_like;
use ccbam::app::wav::{read_wav, write_wav};
use ccbam::models::{MaskBound, Model, ModelConfig};
use ccbam::tensor::Tensor;

fn ccbam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccbam"))
        .args(args)
        .env("CCBAM_NUM_THREADS", "0")
        .output()
        .unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// A CRN whose mask head always outputs 1+0j.
fn identity_checkpoint(path: &Path) {
    let cfg = ModelConfig {
        mask_bound: MaskBound::None,
        ..ModelConfig::crn_toy()
    };
    let mut m = Model::<f32>::build(cfg, 0).unwrap();
    let last = m.config.layers() - 1;
    let wid = m.params.id_of(&format!("dec{last}.weight")).unwrap();
    for pl in &mut m.params.get_mut(wid).planes {
        pl.value = Tensor::zeros(pl.value.shape());
    }
    let bid = m.params.id_of(&format!("dec{last}.bias")).unwrap();
    let bias = &mut m.params.get_mut(bid).planes;
    bias[0].value = Tensor::full(bias[0].value.shape(), 1.0);
    bias[1].value = Tensor::zeros(bias[1].value.shape());
    checkpoint::save(path, &m, TrainState::default()).unwrap();
}

#[test]
fn identity_mask_enhance_returns_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("id.ckpt");
    identity_checkpoint(&ckpt);
    let input = dir.path().join("in.wav");
    let x = speech_like(12_345, &mut ChaCha8Rng::seed_from_u64(1));
    write_wav(&input, &x).unwrap();
    let output = dir.path().join("out.wav");
    let out = ccbam(&["enhance", "--checkpoint", &s(&ckpt), "--input", &s(&input), "--output", &s(&output)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = read_wav(&input).unwrap().samples;
    let b = read_wav(&output).unwrap().samples;
    assert_eq!(a.len(), b.len());
    let worst = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(worst <= 1.0 / 32768.0, "{worst}");
}

#[test]
fn enhance_rejects_other_sample_rates() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("id.ckpt");
    identity_checkpoint(&ckpt);
    let input = dir.path().join("8k.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 8000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&input, spec).unwrap();
    for i in 0..4000 {
        w.write_sample((i % 100) as i16).unwrap();
    }
    w.finalize().unwrap();
    let out = ccbam(&["enhance", "--checkpoint", &s(&ckpt), "--input", &s(&input), "--output", &s(&dir.path().join("o.wav"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("8000"));
}

#[test]
fn synth_train_info_evaluate_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(ccbam(&["synth", "--demo", "4", "--out", &s(&data), "--seed", "3"]).status.success());
    let cfg = dir.path().join("t.cfg");
    fs::write(&cfg, "arch = crn\nepochs = 1\nbatch = 4\ncrop = 4000\n").unwrap();
    let run = dir.path().join("run");
    let out = ccbam(&["train", "--data", &s(&data), "--out", &s(&run), "--config", &s(&cfg), "--lambda-sisnr", "1", "--lambda-mask", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,split,loss,si_snr_db,fwsegsnr_db,lr");
    assert!(metrics.lines().any(|l| l.contains(",valid,")));

    let info = ccbam(&["info", "--checkpoint", &s(&run.join("best.ckpt"))]);
    let text = String::from_utf8_lossy(&info.stdout);
    assert!(info.status.success() && text.contains("CCBAM overhead") && text.contains("training step"));

    let csv = dir.path().join("eval.csv");
    let out = ccbam(&["evaluate", "--checkpoint", &s(&run.join("last.ckpt")), "--test-dir", &s(&data.join("test")), "--csv", &s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(&csv).unwrap();
    assert!(table.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn bad_manifest_and_config_fail_with_messages() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    fs::write(&m, "clean,noise,snr_db,split\nnope.wav,nada.wav,,train\n").unwrap();
    let out = ccbam(&["synth", "--manifest", &s(&m), "--out", &s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope.wav") && err.contains("nada.wav"), "{err}");

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochz = 3\n").unwrap();
    let out = ccbam(&["info", "--config", &s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}

#[test]
fn gradcheck_subcommand_reports_every_parameter() {
    let out = ccbam(&["gradcheck", "--attention", "skip_only"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["enc0.weight", "enc1.bn.gamma_ri", "dec1.bias", "skip0.att.spatial"] {
        assert!(text.contains(name), "{name} missing");
    }
    assert!(text.contains("gradcheck passed"));
}
