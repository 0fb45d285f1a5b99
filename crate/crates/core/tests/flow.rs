use glowtts::flow::{
    mixing_groups, squeeze, unsqueeze, ActNorm, AffineCoupling, CouplingSpec, DecoderSpec, FlowDecoder, GroupedInvConv,
};
use glowtts::nn::{Ctx, Module};
use glowtts::verify::{numeric_log_abs_det, perturbed_decoder, tiny_decoder_spec};
use glowtts::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn as_matrix(rows: usize, v: &[f64]) -> Matrix<f64> {
    Matrix::from_vec(rows, v.len() / rows, v.to_vec()).unwrap()
}

fn coupling_spec(cond_dim: usize) -> CouplingSpec {
    CouplingSpec { hidden: 6, layers: 3, kernel: 3, dilation_rate: 2, dropout: 0.0, cond_dim }
}

fn random_coupling(channels: usize, cond_dim: usize, seed: u64) -> AffineCoupling<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = AffineCoupling::new(channels, coupling_spec(cond_dim), &mut rng).unwrap();
    for (_, p) in c.named_params_mut() {
        p.value.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    c
}

#[test]
fn squeeze_shapes() {
    assert_eq!(squeeze(&Matrix::<f64>::zeros(80, 64)).unwrap().shape(), (160, 32));
    assert_eq!(squeeze(&Matrix::<f64>::zeros(80, 5)).unwrap().shape(), (160, 2));
    let x = Matrix::from_fn(3, 6, |r, c| (r * 10 + c) as f64);
    let h = squeeze(&x).unwrap();
    assert_eq!(h.column(1), vec![2.0, 12.0, 22.0, 3.0, 13.0, 23.0]);
    assert_eq!(unsqueeze(&h).unwrap(), x);
    let odd = Matrix::from_fn(3, 7, |r, c| (r * 10 + c) as f64);
    assert_eq!(unsqueeze(&squeeze(&odd).unwrap()).unwrap(), odd.truncate_cols(6));
}

#[test]
fn actnorm_examples() {
    let h = Matrix::from_fn(2, 3, |r, c| (r + 2 * c) as f64 - 1.5);
    let id = ActNorm::<f64>::from_scale_bias(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
    let (y, ld) = id.forward(&h).unwrap();
    assert_eq!((y, ld), (h.clone(), 0.0));

    let double = ActNorm::<f64>::from_scale_bias(&[2.0, 2.0], &[0.0, 0.0]).unwrap();
    let (y, ld) = double.forward(&h).unwrap();
    assert!((ld - 4.158_883).abs() < 1e-6);
    assert!((ld - 6.0 * 2f64.ln()).abs() < 1e-12);
    assert!(y.max_abs_diff(&h.map(|v| 2.0 * v)) < 1e-15);
    assert!(double.inverse(&y).unwrap().0.max_abs_diff(&h) < 1e-15);
}

#[test]
fn actnorm_logdet_matches_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scale: Vec<f64> = (0..3).map(|_| rng.random_range(0.3..3.0)).collect();
    let bias: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = ActNorm::from_scale_bias(&scale, &bias).unwrap();
    let h = normal(3, 4, &mut rng);
    let numeric = numeric_log_abs_det(|v| a.forward(&as_matrix(3, v)).unwrap().0.into_vec(), h.as_slice(), 1e-5);
    assert!((a.forward(&h).unwrap().1 - numeric).abs() < 1e-5);
}

#[test]
fn identity_kernel_keeps_channels() {
    let conv = GroupedInvConv::<f64>::identity(8, 2).unwrap();
    let h = Matrix::from_fn(8, 3, |r, c| (r * 3 + c) as f64);
    let (y, ld) = conv.forward(&h).unwrap();
    assert_eq!((y, ld), (h, 0.0));
}

#[test]
fn diagonal_kernel_logdet() {
    let k = Matrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap();
    let conv = GroupedInvConv::<f64>::with_kernel(4, 2, &k).unwrap();
    let (_, ld) = conv.forward(&Matrix::zeros(4, 5)).unwrap();
    assert!((ld - 17.917_595).abs() < 1e-6);
}

#[test]
fn grouped_kernel_logdet_matches_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut conv = GroupedInvConv::<f64>::orthogonal(8, 2, &mut rng).unwrap();
    for (_, p) in conv.named_params_mut() {
        p.value.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let h = normal(8, 4, &mut rng);
    let (y, ld) = conv.forward(&h).unwrap();
    let numeric = numeric_log_abs_det(|v| conv.forward(&as_matrix(8, v)).unwrap().0.into_vec(), h.as_slice(), 1e-5);
    assert!((ld - numeric).abs() < 1e-5, "{ld} vs {numeric}");
    let (back, ld_inv) = conv.inverse(&y).unwrap();
    assert!(back.max_abs_diff(&h) < 1e-12);
    assert!((ld + ld_inv).abs() < 1e-12);
}

#[test]
fn labeled_mixing_example() {
    let labels = ["a", "b", "g", "h", "m", "n", "s", "t"];
    let named = |g| -> Vec<String> {
        mixing_groups(8, g).unwrap().iter().map(|ch| ch.iter().map(|&i| labels[i]).collect()).collect()
    };
    assert_eq!(named(2), ["abmn", "ghst"]);
    assert_eq!(named(4), ["am", "bn", "gs", "ht"]);
    assert!(mixing_groups(8, 3).is_err());
}

#[test]
fn zero_initialised_coupling_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = AffineCoupling::<f64>::new(4, coupling_spec(0), &mut rng).unwrap();
    let h = normal(4, 5, &mut rng);
    let (y, ld) = c.forward(&h, None).unwrap();
    assert_eq!((y, ld), (h, 0.0));
}

#[test]
fn coupling_round_trip_and_logdet() {
    let c = random_coupling(6, 0, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = normal(6, 5, &mut rng);
    let (y, ld) = c.forward(&h, None).unwrap();
    assert!(ld.abs() > 1e-3);
    let (back, ld_inv, _) = c.inverse(&y, None, &mut Ctx::eval()).unwrap();
    assert!(back.max_abs_diff(&h) < 1e-8);
    assert!((ld + ld_inv).abs() < 1e-12);
    assert_eq!(y.row_range(0, 3), h.row_range(0, 3));
    let numeric = numeric_log_abs_det(|v| c.forward(&as_matrix(6, v), None).unwrap().0.into_vec(), h.as_slice(), 1e-5);
    assert!((ld - numeric).abs() < 1e-5);
}

#[test]
fn conditioned_coupling_needs_a_vector() {
    let c = random_coupling(4, 3, 6);
    let h = Matrix::zeros(4, 3);
    assert!(c.forward(&h, None).is_err());
    assert!(c.forward(&h, Some(&[0.1, 0.2])).is_err());
    assert!(c.forward(&h, Some(&[0.1, 0.2, 0.3])).is_ok());
}

#[test]
fn identity_decoder_passes_mels_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dec = FlowDecoder::<f64>::new(tiny_decoder_spec(), &mut rng).unwrap();
    let x = normal(4, 6, &mut rng);
    let (z, ld, _) = dec.inverse(&x, None, &mut Ctx::eval()).unwrap();
    assert_eq!(z, x);
    assert_eq!(ld, 0.0);
}

#[test]
fn decoder_round_trips_in_both_directions() {
    let dec = perturbed_decoder::<f64>(tiny_decoder_spec(), 8, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let x = normal(4, 8, &mut rng);
        let (z, ld, _) = dec.inverse(&x, None, &mut Ctx::eval()).unwrap();
        assert!(dec.forward(&z, None).unwrap().max_abs_diff(&x) < 1e-8);
        let (x2, lds) = dec.forward_with_logdet(&x, None).unwrap();
        let (back, ld2, _) = dec.inverse(&x2, None, &mut Ctx::eval()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-8);
        assert!((lds.iter().sum::<f64>() + ld2).abs() < 1e-10);
        assert!(ld.is_finite());
    }
}

#[test]
fn per_layer_round_trips() {
    let dec = perturbed_decoder::<f64>(tiny_decoder_spec(), 10, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let h = normal(8, 4, &mut rng);
        for b in &dec.blocks {
            let a = &b.actnorm;
            assert!(a.inverse(&a.forward(&h).unwrap().0).unwrap().0.max_abs_diff(&h) < 1e-8);
            let w = &b.invconv;
            assert!(w.inverse(&w.forward(&h).unwrap().0).unwrap().0.max_abs_diff(&h) < 1e-8);
            let c = &b.coupling;
            let y = c.forward(&h, None).unwrap().0;
            assert!(c.inverse(&y, None, &mut Ctx::eval()).unwrap().0.max_abs_diff(&h) < 1e-8);
        }
    }
}

#[test]
fn mel_to_latent_logdet_matches_jacobian() {
    let dec = perturbed_decoder::<f64>(tiny_decoder_spec(), 12, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = normal(4, 6, &mut rng);
    let (_, ld, _) = dec.inverse(&x, None, &mut Ctx::eval()).unwrap();
    let map = |v: &[f64]| dec.inverse(&as_matrix(4, v), None, &mut Ctx::eval()).unwrap().0.into_vec();
    let numeric = numeric_log_abs_det(map, x.as_slice(), 1e-5);
    assert!((ld - numeric).abs() < 1e-5, "{ld} vs {numeric}");
}

#[test]
fn speaker_conditioning_is_global() {
    let spec = DecoderSpec {
        num_speakers: 2,
        coupling: CouplingSpec { cond_dim: 3, ..tiny_decoder_spec().coupling },
        ..tiny_decoder_spec()
    };
    let dec = perturbed_decoder::<f64>(spec, 14, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let z = normal(4, 10, &mut rng);
    let a = dec.forward(&z, Some(0)).unwrap();
    let b = dec.forward(&z, Some(1)).unwrap();
    // pairs of frames share a squeezed column; every pair must move
    for t in (0..10).step_by(2) {
        let moved = (0..4).any(|r| (a.get(r, t) - b.get(r, t)).abs() > 1e-9 || (a.get(r, t + 1) - b.get(r, t + 1)).abs() > 1e-9);
        assert!(moved, "frame pair {t} unaffected by the speaker");
    }
}
