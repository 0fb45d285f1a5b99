use glowtts::nn::{Ctx, RelativeSelfAttention};
use glowtts::{GlowTts, Matrix, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

#[test]
fn paper_encoder_shapes() {
    let model = GlowTts::<f32>::new(&ModelConfig::paper(), 0).unwrap();
    let tokens = [3, 17, 5, 100, 2, 9, 47];
    let (hidden, prior) = model.encode(&tokens).unwrap();
    assert_eq!(hidden.shape(), (192, 7));
    assert_eq!(prior.mean().shape(), (80, 7));
    assert_eq!(prior.scale().shape(), (80, 7));
    assert!(prior.scale().as_slice().iter().all(|&s| s == 1.0));
    let log_d = model.predict_log_durations(&hidden).unwrap();
    assert_eq!(log_d, vec![0.0; 7]);
}

#[test]
fn eval_encoding_is_deterministic() {
    let model = GlowTts::<f64>::new(&ModelConfig::desk(), 4).unwrap();
    let a = model.encode(&[1, 2, 3, 4]).unwrap().1;
    let b = model.encode(&[1, 2, 3, 4]).unwrap().1;
    assert_eq!(
        a.mean().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.mean().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn padding_does_not_leak_into_valid_positions() {
    let model = GlowTts::<f64>::new(&ModelConfig::desk(), 5).unwrap();
    let short = model.encoder.forward(&[4, 2, 7], 3, &mut Ctx::eval()).unwrap();
    let padded = model.encoder.forward(&[4, 2, 7, 1, 1, 1], 3, &mut Ctx::eval()).unwrap();
    assert!(padded.mean.truncate_cols(3).max_abs_diff(&short.mean) < 1e-12);
    for c in 3..6 {
        assert!(padded.mean.column(c).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn single_position_attention_returns_the_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let attn = RelativeSelfAttention::<f64>::new(4, 2, 4, &mut rng);
    let (q, k, v) = (normal(4, 1, &mut rng), normal(4, 1, &mut rng), normal(4, 1, &mut rng));
    let out = attn.attend_projected(&q, &k, &v, &[true]);
    assert!(out.max_abs_diff(&v) < 1e-15);
}

#[test]
fn zero_relative_keys_give_plain_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut attn = RelativeSelfAttention::<f64>::new(2, 1, 4, &mut rng);
    attn.rel_key.value.iter_mut().for_each(|v| *v = 0.0);
    let t = 5;
    let (q, k, v) = (normal(2, t, &mut rng), normal(2, t, &mut rng), normal(2, t, &mut rng));
    let out = attn.attend_projected(&q, &k, &v, &[true; 5]);
    for i in 0..t {
        let logits: Vec<f64> = (0..t)
            .map(|j| (q.get(0, i) * k.get(0, j) + q.get(1, i) * k.get(1, j)) / 2f64.sqrt())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        for r in 0..2 {
            let expect: f64 = (0..t).map(|j| w[j] / z * v.get(r, j)).sum();
            assert!((out.get(r, i) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_is_shift_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let attn = RelativeSelfAttention::<f64>::new(4, 2, 4, &mut rng);
    let x = normal(4, 5, &mut rng);
    let place = |offset: usize| {
        let buf = Matrix::from_fn(4, 11, |r, c| if (offset..offset + 5).contains(&c) { x.get(r, c - offset) } else { 0.0 });
        let valid: Vec<bool> = (0..11).map(|c| (offset..offset + 5).contains(&c)).collect();
        let y = attn.forward(&buf, &valid).0;
        Matrix::from_fn(4, 5, |r, c| y.get(r, c + offset))
    };
    let base = place(0);
    for offset in [1, 3, 6] {
        assert!(place(offset).max_abs_diff(&base) < 1e-6);
    }
}
