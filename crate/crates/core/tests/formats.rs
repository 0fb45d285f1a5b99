use glowtts::io::{
    append_log, checkpoint_precision, decode_mel, encode_mel, format_durations, parse_durations, parse_tokens,
    read_mel, write_mel, LOSS_LOG_HEADER,
};
use glowtts::nn::Module;
use glowtts::training::AdamState;
use glowtts::{
    Alignment, Checkpoint, GlowError, GlowTts, Matrix, MelSpectrogram, ModelConfig, Precision, Preset, RunConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bits32(m: &Matrix<f32>) -> Vec<u32> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #[test]
    fn mel_bytes_round_trip(rows in 1usize..6, cols in 0usize..9, raw in proptest::collection::vec(any::<u32>(), 54)) {
        let m = Matrix::from_fn(rows, cols, |r, c| f32::from_bits(raw[r * 9 + c]));
        let back: Matrix<f32> = decode_mel(&encode_mel(&m).unwrap()).unwrap().0;
        prop_assert_eq!(back.shape(), (rows, cols));
        prop_assert_eq!(bits32(&back), bits32(&m));
    }
}

#[test]
fn mel_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.mel");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = Matrix::from_fn(80, 13, |_, _| rng.random_range(-12.0f32..2.0));
    write_mel(&path, &MelSpectrogram::new(m.clone())).unwrap();
    let back = read_mel::<f32>(&path).unwrap();
    assert_eq!(bits32(back.values()), bits32(&m));

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"GTTSMEL1");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 80);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 13);
    assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 0);
    assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()).to_bits(), m.get(0, 0).to_bits());
    assert_eq!(bytes.len(), 20 + 80 * 13 * 4);

    let wide = read_mel::<f64>(&path).unwrap();
    assert_eq!(wide.values().get(3, 4), m.get(3, 4) as f64);
}

#[test]
fn empty_mel_is_valid() {
    let bytes = encode_mel(&Matrix::<f64>::zeros(80, 0)).unwrap();
    let (m, p): (Matrix<f64>, _) = decode_mel(&bytes).unwrap();
    assert_eq!(m.shape(), (80, 0));
    assert_eq!(p, Precision::Double);
}

#[test]
fn corrupt_mels_are_format_errors() {
    let good = encode_mel(&Matrix::<f32>::filled(4, 4, 0.5)).unwrap();
    let mut magic = good.clone();
    magic[3] = b'?';
    let mut flag = good.clone();
    flag[16] = 7;
    let mut extra = good.clone();
    extra.push(0);
    for bad in [magic, flag, extra, good[..30].to_vec(), good[..10].to_vec()] {
        assert!(matches!(decode_mel::<f32>(&bad), Err(GlowError::Format(_))));
    }
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_mel::<f32>(&dir.path().join("missing.mel")), Err(GlowError::Io(_))));
}

fn trained_looking_model() -> (GlowTts<f64>, AdamState<f64>) {
    let cfg = ModelConfig { num_speakers: 3, ..ModelConfig::desk() };
    let mut model = GlowTts::<f64>::new(&cfg, 7).unwrap();
    model.decoder.mark_initialized();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (_, p) in model.named_params_mut() {
        p.value.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    let n = model.num_params();
    let adam = AdamState {
        step: 9,
        m: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        v: (0..n).map(|_| rng.random_range(0.0..1e-3)).collect(),
    };
    (model, adam)
}

#[test]
fn checkpoint_files_round_trip_bit_exactly() {
    let (model, adam) = trained_looking_model();
    let mut run = RunConfig::preset(Preset::Desk);
    run.train.seed = Some(11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::from_model(&model, &run, 9, Some(&adam)).save(&path).unwrap();

    assert_eq!(checkpoint_precision(&path).unwrap(), Precision::Double);
    let ckpt = Checkpoint::<f64>::load(&path).unwrap();
    let loaded = ckpt.to_model().unwrap();
    let b = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(b(&loaded.flat_values()), b(&model.flat_values()));
    assert_eq!(loaded.config(), model.config());
    assert!(loaded.decoder.is_initialized());
    let opt = ckpt.optimizer.unwrap();
    assert_eq!((opt.step, b(&opt.m), b(&opt.v)), (9, b(&adam.m), b(&adam.v)));
    assert_eq!(ckpt.step, 9);
    assert_eq!(ckpt.config.train.seed, Some(11));
    assert_eq!(ckpt.config.train.precision, Precision::Double);
    let names: Vec<String> = ckpt.tensors.iter().map(|t| t.0.clone()).collect();
    assert!(names.iter().any(|n| n.contains("coupling")));

    assert!(matches!(Checkpoint::<f32>::load(&path), Err(GlowError::Format(_))));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(matches!(Checkpoint::<f64>::decode(&bytes), Err(GlowError::Format(_))));
}

#[test]
fn config_text_echoes_back() {
    let text = "\
# toy run
preset = desk
precision = f64
seed = 5
vocab_size = 12
decoder_blocks = 6   # deeper decoder
learning_rate_scale = 0.5
";
    let cfg = RunConfig::parse(text).unwrap();
    assert_eq!(cfg.model.vocab_size, 12);
    assert_eq!(cfg.model.decoder_blocks, 6);
    assert_eq!(cfg.train.seed, Some(5));
    let echoed = cfg.to_text();
    assert_eq!(RunConfig::parse(&echoed).unwrap(), cfg);
    assert_eq!(RunConfig::parse(&echoed).unwrap().to_text(), echoed);
    for key in RunConfig::keys() {
        assert!(echoed.lines().any(|l| l.starts_with(&format!("{key} = "))), "{key} missing");
    }
    let paper = RunConfig::parse("preset = paper").unwrap();
    assert_eq!(paper.model, ModelConfig::paper());
}

#[test]
fn bad_config_text_is_rejected() {
    for text in [
        "vocab_sizes = 3",
        "vocab_size = 3\nvocab_size = 4",
        "vocab_size 3",
        "vocab_size = three",
        "preset = huge",
        "precision = f16",
        "attention_heads = 5",
    ] {
        assert!(matches!(RunConfig::parse(text), Err(GlowError::Config(_))), "{text}");
    }
}

#[test]
fn durations_text_format() {
    let a = Alignment::from_durations(vec![3, 1, 2]).unwrap();
    assert_eq!(format_durations(&a), "1 3\n2 1\n3 2\n");
    assert_eq!(parse_durations("# header\n1 3\n2 1\n\n3 2\n").unwrap(), a);
    assert!(parse_durations("1 3\n3 1\n").is_err());
    assert!(parse_durations("1 3 4\n").is_err());
}

#[test]
fn tokens_from_lists_and_files() {
    assert_eq!(parse_tokens("0 5\t7\n2", 8).unwrap().ids(), &[0, 5, 7, 2]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.txt");
    std::fs::write(&path, "1 2\n3\n").unwrap();
    assert_eq!(parse_tokens(path.to_str().unwrap(), 8).unwrap().ids(), &[1, 2, 3]);
    assert!(matches!(parse_tokens("1 8", 8), Err(GlowError::InvalidToken { id: 8, vocab: 8 })));
}

#[test]
fn loss_log_has_a_header_once() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.log");
    append_log(&path, &["1 a".into()]).unwrap();
    append_log(&path, &["2 b".into(), "3 c".into()]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, format!("{LOSS_LOG_HEADER}\n1 a\n2 b\n3 c\n"));
}
