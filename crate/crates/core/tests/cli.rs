use std::path::Path;
use std::process::{Command, Output};

use glowtts::io::{format_durations, read_mel, write_mel};
use glowtts::training::{make_synthetic_dataset, SyntheticSpec};
use glowtts::{Checkpoint, GlowTts, MelSpectrogram, ModelConfig, Preset, RunConfig};

fn glowtts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glowtts")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn verify_mas_suite_passes() {
    let o = glowtts(&["verify", "--suite", "mas"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("PASS mas-oracle"));
    assert!(out.contains("PASS mas-speed"));
}

#[test]
fn broken_check_fails_verification() {
    let o = glowtts(&["verify", "--suite", "flows", "--break", "mixing-groups"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8(o.stdout).unwrap().contains("FAIL mixing-groups"));
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        &["frobnicate"][..],
        &["verify", "--suite", "everything"],
        &["verify", "--break", "no-such-check"],
        &["bench-mas", "--ttext", "10", "--tmel", "5"],
        &["synthesize", "--tokens", "1 2"],
    ] {
        assert_eq!(code(&glowtts(args)), 2, "{args:?}");
    }
}

#[test]
fn unreadable_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"NOTACKPT").unwrap();
    let out = dir.path().join("o.mel");
    let o = glowtts(&["synthesize", "--ckpt", p(&bogus), "--tokens", "1 2", "--out", p(&out)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8(o.stderr).unwrap().contains("magic"));
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(code(&glowtts(&["synthesize", "--ckpt", p(&missing), "--tokens", "1", "--out", p(&out)])), 3);
}

#[test]
fn bench_mas_prints_timing() {
    let o = glowtts(&["bench-mas", "--ttext", "20", "--tmel", "80", "--iters", "3"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8(o.stdout).unwrap().contains("mas 20x80"));
}

#[test]
fn train_writes_config_log_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = glowtts(&["train", "--synthetic", "samples=16,seed=3", "--steps", "3", "--seed", "21", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let config = RunConfig::parse(&std::fs::read_to_string(out.join("config.txt")).unwrap()).unwrap();
    assert_eq!(config.train.seed, Some(21));
    assert_eq!(config.model.vocab_size, 8);
    let log = std::fs::read_to_string(out.join("loss.log")).unwrap();
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 3);
    let ckpt = Checkpoint::<f32>::load(&out.join("latest.ckpt")).unwrap();
    assert_eq!(ckpt.step, 3);
    assert!(ckpt.optimizer.is_some());

    let o = glowtts(&["train", "--synthetic", "samples=16,seed=3", "--steps", "5", "--resume", p(&out.join("latest.ckpt")), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(Checkpoint::<f32>::load(&out.join("latest.ckpt")).unwrap().step, 5);
}

#[test]
fn missing_seed_is_chosen_and_printed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = glowtts(&["train", "--synthetic", "samples=8", "--steps", "1", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8(o.stdout).unwrap();
    let line = stdout.lines().find(|l| l.starts_with("seed: ")).expect("seed printed");
    let seed: u64 = line["seed: ".len()..].split_whitespace().next().unwrap().parse().unwrap();
    let config = RunConfig::parse(&std::fs::read_to_string(out.join("config.txt")).unwrap()).unwrap();
    assert_eq!(config.train.seed, Some(seed));
}

fn save_model(model: &GlowTts<f32>, path: &Path) {
    let mut run = RunConfig::preset(Preset::Desk);
    run.model = model.config().clone();
    Checkpoint::from_model(model, &run, 0, None).save(path).unwrap();
}

#[test]
fn zero_temperature_synthesis_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let mut model = GlowTts::<f32>::new(&ModelConfig::desk(), 4).unwrap();
    model.decoder.mark_initialized();
    save_model(&model, &ckpt);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = glowtts(&[
            "synthesize", "--ckpt", p(&ckpt), "--tokens", "3 1 4 1 5 9", "--temperature", "0", "--length-scale", "2.5",
            "--out", p(&out), "--dump", p(&dir.path().join(format!("{name}.txt"))),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    let a = run("a.mel");
    assert_eq!(a, run("b.mel"));
    let dump = std::fs::read_to_string(dir.path().join("a.mel.txt")).unwrap();
    assert!(dump.starts_with("1 3\n2 3\n"));
    assert_eq!(read_mel::<f32>(&dir.path().join("a.mel")).unwrap().frames(), 18);
}

#[test]
fn align_recovers_planted_durations() {
    let data = make_synthetic_dataset(&SyntheticSpec { samples: 12, seed: 5, ..SyntheticSpec::default() }).unwrap();
    let cfg = ModelConfig { vocab_size: 8, mel_channels: 8, decoder_data_init: false, ..ModelConfig::desk() };
    let mut model = GlowTts::<f32>::new(&cfg, 0).unwrap();
    model.encoder.plant_token_means(&data.means.convert()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("planted.ckpt");
    save_model(&model, &ckpt);
    let mut odd_seen = false;
    for (k, s) in data.samples.iter().enumerate() {
        odd_seen |= s.mel.cols() % 2 == 1;
        let mel = dir.path().join(format!("{k}.mel"));
        write_mel(&mel, &MelSpectrogram::new(s.mel.clone())).unwrap();
        let ids: Vec<String> = s.tokens.iter().map(|t| t.to_string()).collect();
        let out = dir.path().join(format!("{k}.txt"));
        let o = glowtts(&["align", "--ckpt", p(&ckpt), "--tokens", &ids.join(" "), "--mel", p(&mel), "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(std::fs::read_to_string(&out).unwrap(), format_durations(&s.alignment));
    }
    assert!(odd_seen);
}

#[test]
fn convert_voice_round_trips_for_the_same_speaker() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("vc.ckpt");
    let cfg = ModelConfig { num_speakers: 2, ..ModelConfig::desk() };
    let mut model = GlowTts::<f32>::new(&cfg, 6).unwrap();
    model.decoder.mark_initialized();
    save_model(&model, &ckpt);
    let data = make_synthetic_dataset(&SyntheticSpec { samples: 1, ..SyntheticSpec::default() }).unwrap();
    let frames = data.samples[0].mel.cols() & !1;
    let mel = MelSpectrogram::new(data.samples[0].mel.truncate_cols(frames).convert::<f32>());
    let src = dir.path().join("src.mel");
    write_mel(&src, &mel).unwrap();
    let out = dir.path().join("out.mel");
    let o = glowtts(&["convert-voice", "--ckpt", p(&ckpt), "--mel", p(&src), "--source", "1", "--target", "1", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read_mel::<f32>(&out).unwrap().values().max_abs_diff(mel.values()) < 1e-4);
    let o = glowtts(&["convert-voice", "--ckpt", p(&ckpt), "--mel", p(&src), "--source", "0", "--target", "5", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
}
