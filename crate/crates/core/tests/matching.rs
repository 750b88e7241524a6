use geodiff_core::matching::{cosine_distance, encode, joint_step, StepOptions};
use geodiff_core::nn::{sgd_step, LearningRates, SgdConfig};
use geodiff_core::retrieval::{build_index, top_k_batch};
use geodiff_core::{EmbeddingVector, ItemId, JointModel, ModelSpec, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vector() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-4.0f32..4.0, 8).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 0.1))
}

proptest! {
    #[test]
    fn cosine_distance_ignores_positive_scale(a in vector(), b in vector(), s in 0.01f32..100.0) {
        let ea = EmbeddingVector::new(a.clone()).unwrap();
        let eb = EmbeddingVector::new(b).unwrap();
        let scaled = EmbeddingVector::new(a.iter().map(|x| x * s).collect()).unwrap();
        let d = cosine_distance(&ea, &eb).unwrap();
        prop_assert!((0.0..=2.0 + 1e-6).contains(&d));
        prop_assert!((d - cosine_distance(&scaled, &eb).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn ranking_ignores_positive_scale(seed in any::<u64>(), scales in prop::collection::vec(0.05f32..20.0, 12)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<EmbeddingVector> = (0..12)
            .map(|_| EmbeddingVector::new(Tensor::<f32>::randn(&[6], &mut rng).into_data()).unwrap())
            .collect();
        let rescaled: Vec<EmbeddingVector> = base
            .iter()
            .zip(&scales)
            .map(|(v, &s)| EmbeddingVector::new(v.values().iter().map(|x| x * s).collect()).unwrap())
            .collect();
        let queries: Vec<(ItemId, EmbeddingVector)> = base[..3].iter().cloned().enumerate().map(|(i, v)| (i as ItemId, v)).collect();
        let ia = build_index(base.iter().enumerate().map(|(i, v)| (i as ItemId, v))).unwrap();
        let ib = build_index(rescaled.iter().enumerate().map(|(i, v)| (i as ItemId, v))).unwrap();
        let ra: Vec<Vec<ItemId>> = top_k_batch(&ia, &queries, 12).unwrap().iter().map(|r| r.ids().collect()).collect();
        let rb: Vec<Vec<ItemId>> = top_k_batch(&ib, &queries, 12).unwrap().iter().map(|r| r.ids().collect()).collect();
        prop_assert_eq!(ra, rb);
    }
}

fn spec() -> ModelSpec {
    ModelSpec {
        image_size: 8,
        patch: 4,
        latent_channels: 6,
        embed_dim: 5,
        decoder_channels: [4, 3],
        head_hidden: 7,
        classes: 4,
        steps: 5,
        ..ModelSpec::default()
    }
}

#[test]
fn joint_loss_falls_on_a_fixed_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut m: JointModel<f32> = JointModel::new(spec(), &mut rng).unwrap();
    let clean = Tensor::<f32>::randn(&[4, 3, 8, 8], &mut rng).map(|v| v.clamp(-1.0, 1.0));
    let noisy = clean.map(|v| (0.6 * v + 0.4).clamp(-1.0, 1.0));
    let lrs = LearningRates::new([("backbone", 0.01), ("head", 0.1)]);
    let sgd = SgdConfig { momentum: 0.9, weight_decay: 0.0 };
    let opts = StepOptions::default();
    let mut res = Vec::new();
    let mut mat = Vec::new();
    for _ in 0..50 {
        let l = joint_step(&mut m, &noisy, &noisy, &clean, &[0, 1, 2, 3], 5, &opts, &mut rng).unwrap();
        res.push(l.res);
        mat.push(l.mat);
        sgd_step(&mut m, &lrs, sgd).unwrap();
    }
    assert!(res[45..].iter().sum::<f64>() < res[..5].iter().sum::<f64>(), "{res:?}");
    assert!(mat[45..].iter().sum::<f64>() < mat[..5].iter().sum::<f64>(), "{mat:?}");
}

#[test]
fn embeddings_have_the_configured_dimension() {
    let m: JointModel<f32> = JointModel::new(spec(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let img = Tensor::<f32>::randn(&[3, 8, 8], &mut ChaCha8Rng::seed_from_u64(3));
    let e = encode(&m, &img).unwrap();
    assert_eq!(e.dim(), 5);
    assert_eq!(encode(&m, &img).unwrap(), e);
}
