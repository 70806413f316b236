mod common;

use proptest::prelude::*;
use tsgzsl::embedder::loss::{instance_loss_value, temporal_loss_value, total_loss_value};
use tsgzsl::embedder::{train_embedder, CropPair, EmbedderModel, EncoderConfig};
use tsgzsl::numcore::{rng_for, Tensor};

use common::*;

fn tiny() -> EncoderConfig {
    EncoderConfig {
        repr_dim: 2,
        hidden_dim: 3,
        num_blocks: 1,
        batch_size: 4,
        ..EncoderConfig::default()
    }
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = rng_for(seed, 0);
        let model = EmbedderModel::new(tiny(), &mut rng).unwrap();
        let batch: Vec<Vec<f64>> = (0..3)
            .map(|_| uniform(&[9], -1.0, 1.0, &mut rng).into_data())
            .collect();
        let crop = CropPair { a1: 0, b1: 7, a2: 2, b2: 9 };
        let params: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
        let err = grad_check(&params, &|tape, vars| {
            let refs: Vec<&[f64]> = batch.iter().map(|s| s.as_slice()).collect();
            model.crop_loss(tape, vars, &refs, crop, None).unwrap()
        });
        assert!(err < FD_TOL, "seed {seed}: relative error {err:e}");
    }
}

fn pool2(h: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    h.iter()
        .map(|series| {
            series
                .chunks_exact(2)
                .map(|p| p[0].iter().zip(&p[1]).map(|(a, b)| a.max(*b)).collect())
                .collect()
        })
        .collect()
}

#[test]
fn hierarchical_loss_is_average_over_three_levels() {
    let mut rng = rng_for(12, 0);
    let h = uniform(&[3, 4, 2], -1.0, 1.0, &mut rng);
    let g = uniform(&[3, 4, 2], -1.0, 1.0, &mut rng);
    let mut levels = vec![(unpack(&h), unpack(&g))];
    for _ in 0..2 {
        let (a, b) = levels.last().unwrap();
        levels.push((pool2(a), pool2(b)));
    }
    let expected: f64 = levels
        .iter()
        .map(|(a, b)| naive_temporal(a, b) + naive_instance(a, b))
        .sum::<f64>()
        / 3.0;
    let got = total_loss_value(&h, &g, true).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    let flat = total_loss_value(&h, &g, false).unwrap();
    let parts = temporal_loss_value(&h, &g).unwrap() + instance_loss_value(&h, &g).unwrap();
    assert!((flat - parts).abs() < 1e-12);
}

fn waves(n: usize, len: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let phase = i as f64 * 0.37;
            (0..len)
                .map(|t| {
                    let s = (t as f64 * 0.4 + phase).sin();
                    if i % 2 == 0 {
                        s
                    } else {
                        s.signum()
                    }
                })
                .collect()
        })
        .collect()
}

#[test]
fn training_lowers_fixed_crop_loss() {
    let data = waves(64, 32);
    let refs: Vec<&[f64]> = data.iter().map(|s| s.as_slice()).collect();
    let cfg = |epochs| EncoderConfig {
        repr_dim: 8,
        hidden_dim: 8,
        num_blocks: 2,
        batch_size: 16,
        epochs,
        ..EncoderConfig::default()
    };
    let crop = CropPair { a1: 0, b1: 24, a2: 8, b2: 32 };
    let loss_after = |epochs| {
        let (model, curve) = train_embedder(&refs, &cfg(epochs), &mut rng_for(13, 0)).unwrap();
        assert_eq!(curve.len(), epochs);
        let mut tape = tsgzsl::numcore::Tape::new();
        let vars = model.params.bind(&mut tape, false);
        let l = model.crop_loss(&mut tape, &vars, &refs, crop, None).unwrap();
        tape.value(l)[0]
    };
    let early = loss_after(1);
    let late = loss_after(50);
    assert!(late < early, "loss after 50 epochs {late} >= after 1 epoch {early}");
}

#[test]
fn embedding_is_max_of_encoding() {
    let mut rng = rng_for(14, 0);
    let model = EmbedderModel::new(tiny(), &mut rng).unwrap();
    let s: Vec<f64> = (0..17).map(|t| (t as f64).cos() * 0.5).collect();
    let enc = model.encode(&[&s], None).unwrap();
    let repr = model.config.repr_dim;
    let mut expected = vec![f64::NEG_INFINITY; repr];
    for row in enc.data().chunks(repr) {
        for (e, v) in expected.iter_mut().zip(row) {
            *e = e.max(*v);
        }
    }
    assert_eq!(model.embed_series(&s).unwrap(), expected);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encode_keeps_timestamps(
        batch in 1usize..4,
        len in 1usize..20,
        repr in 1usize..5,
        hidden in 1usize..5,
        blocks in 0usize..4,
        kernel in 1usize..4,
        seed in 0u64..1000,
    ) {
        let cfg = EncoderConfig {
            repr_dim: repr,
            hidden_dim: hidden,
            num_blocks: blocks,
            kernel_size: kernel,
            ..EncoderConfig::default()
        };
        let mut rng = rng_for(seed, 0);
        let model = EmbedderModel::new(cfg, &mut rng).unwrap();
        let data: Vec<Vec<f64>> = (0..batch).map(|i| (0..len).map(|t| (t + i) as f64 * 0.1).collect()).collect();
        let refs: Vec<&[f64]> = data.iter().map(|s| s.as_slice()).collect();
        let out = model.encode(&refs, None).unwrap();
        prop_assert_eq!(out.shape(), &[batch, len, repr][..]);
    }
}
