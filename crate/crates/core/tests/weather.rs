use geodiff_core::dataset::{generate_dataset, DatasetSpec};
use geodiff_core::weather::{corrupt, random_image, WeatherCondition, WeatherKind};
use geodiff_core::ImageTensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(seed: u64) -> ImageTensor {
    random_image(3, 16, 16, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn scene(seed: u64) -> ImageTensor {
    let spec = DatasetSpec { locations: 2, views_per_location: 1, unseen_locations: 0, distractors: 0, seed, ..Default::default() };
    generate_dataset(&spec).unwrap().locations[0].satellite_view.clone()
}

fn mse_after(img: &ImageTensor, kind: WeatherKind, i: f64) -> f64 {
    corrupt(img, &WeatherCondition::new(kind, i, 11).unwrap()).unwrap().mse_to(img).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corruption_keeps_shape_and_range(seed in any::<u64>(), k in 0usize..10, i in 0.0f64..=1.0) {
        let img = image(seed);
        let out = corrupt(&img, &WeatherCondition::new(WeatherKind::ALL[k], i, seed).unwrap()).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn global_corruptions_grow_with_intensity(
        seed in any::<u64>(),
        k in 0usize..3,
        a in 0.0f64..=1.0,
        b in 0.0f64..=1.0,
        use_scene in any::<bool>(),
    ) {
        let kind = [WeatherKind::Fog, WeatherKind::Dark, WeatherKind::Light][k];
        let img = if use_scene { scene(seed % 1000) } else { image(seed) };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(mse_after(&img, kind, lo) <= mse_after(&img, kind, hi) + 1e-7);
    }
}

#[test]
fn composites_equal_their_constituents_in_order() {
    let img = image(3);
    for kind in WeatherKind::ALL {
        let whole = corrupt(&img, &WeatherCondition::new(kind, 0.6, 9).unwrap()).unwrap();
        let mut step = img.clone();
        for &part in kind.constituents() {
            step = corrupt(&step, &WeatherCondition::new(part, 0.6, 9).unwrap()).unwrap();
        }
        assert_eq!(whole, step, "{kind}");
    }
}

#[test]
fn batches_corrupt_like_their_items() {
    let a = image(1);
    let b = image(2);
    let batch = ImageTensor::stack(&[a.clone(), b.clone()]).unwrap();
    let cond = WeatherCondition::new(WeatherKind::Fog, 0.4, 0).unwrap();
    let out = corrupt(&batch, &cond).unwrap().unstack();
    assert_eq!(out[0], corrupt(&a, &cond).unwrap());
    assert_eq!(out[1], corrupt(&b, &cond).unwrap());
}

#[test]
fn dataset_is_a_pure_function_of_its_spec() {
    let spec = DatasetSpec { locations: 3, views_per_location: 2, unseen_locations: 1, distractors: 2, image_size: 16, ..Default::default() };
    let a = generate_dataset(&spec).unwrap();
    let b = generate_dataset(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.gallery_len(), 6);
    let other = generate_dataset(&DatasetSpec { seed: spec.seed + 1, ..spec }).unwrap();
    assert_ne!(a.locations[0].satellite_view, other.locations[0].satellite_view);
}

#[test]
fn clean_drone_views_resemble_their_own_satellite() {
    let mut closer = 0;
    for seed in 0..100 {
        let spec = DatasetSpec {
            locations: 2,
            views_per_location: 1,
            unseen_locations: 0,
            distractors: 0,
            conditions: vec![WeatherKind::Clean],
            seed,
            ..Default::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        let view = &ds.locations[0].drone_views[0].clean;
        let own = view.mse_to(&ds.locations[0].satellite_view).unwrap();
        let other = view.mse_to(&ds.locations[1].satellite_view).unwrap();
        closer += usize::from(own < other);
    }
    assert!(closer >= 90, "{closer}/100");
}

#[test]
fn invalid_intensity_is_rejected() {
    assert!(WeatherCondition::new(WeatherKind::Fog, 1.5, 0).is_err());
    assert!(WeatherCondition::new(WeatherKind::Fog, -0.1, 0).is_err());
}
