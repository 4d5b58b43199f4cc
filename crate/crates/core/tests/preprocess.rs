use form::preprocess::{
    completeness_filter_at, flip_horizontal, CroppedHalf, PreprocessOutput, Side, preprocess_studies, read_crops, rescale, split_halves, write_crops,
    Completeness, DetectorConfig, FilterDecision, KeyPointSet, KeypointDetector, PreprocessConfig, RescaleMode, Route,
};
use form::synthgen::{GeneratorConfig, SyntheticCohort};
use ndarray::Array2;
use proptest::prelude::*;

fn image() -> impl Strategy<Value = Array2<f32>> {
    (1usize..12, 2usize..16).prop_flat_map(|(h, w)| {
        prop::collection::vec(-500.0f32..3000.0, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
    })
}

proptest! {
    #[test]
    fn flip_is_an_involution(img in image()) {
        prop_assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn rescale_stays_in_unit_interval(img in image(), c in 1.0f32..5000.0) {
        for mode in [RescaleMode::Global(c), RescaleMode::PerPatient] {
            let (out, _) = rescale(&img, mode).unwrap();
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn halves_have_equal_dims_and_mirror(img in image()) {
        let (r, l) = split_halves(&img).unwrap();
        prop_assert_eq!(r.dim(), l.dim());
        prop_assert_eq!(r.ncols(), img.ncols() / 2);
        let w = img.ncols();
        for i in 0..img.nrows() {
            prop_assert_eq!(l[[i, 0]], img[[i, w - 1]]);
        }
    }

    #[test]
    fn raising_threshold_never_includes_more(conf in 0.0f64..1.0, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0, c in 0usize..3) {
        let completeness = [Completeness::Complete, Completeness::Implant, Completeness::Incomplete][c];
        let k = KeyPointSet { points: vec![], completeness, confidence: conf, complete_probability: conf };
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        if completeness_filter_at(&k, lo) == FilterDecision::Exclude {
            prop_assert_eq!(completeness_filter_at(&k, hi), FilterDecision::Exclude);
        }
    }
}

#[test]
fn preprocessing_is_deterministic_and_crops_round_trip() {
    let cfg = GeneratorConfig { n_patients: 6, seed: 2, ct_fraction: 1.0, ..Default::default() };
    let cohort = SyntheticCohort::generate(&cfg).unwrap();
    let studies: Vec<_> = (0..cohort.len()).map(|i| cohort.render_study(i)).collect();
    let detector = KeypointDetector::new(&DetectorConfig::default()).unwrap();
    // threshold 0 so the untrained detector's Complete predictions pass
    let pcfg = PreprocessConfig { confidence_threshold: Some(0.0), ..Default::default() };
    let a = preprocess_studies(&studies, Route::Ct, &detector, &pcfg).unwrap();
    let b = preprocess_studies(&studies, Route::Ct, &detector, &pcfg).unwrap();
    assert_eq!(a.halves.len() + a.exclusions.len(), 12);
    assert_eq!(a.exclusions, b.exclusions);
    assert!(a.halves.iter().zip(&b.halves).all(|(x, y)| x.image == y.image && x.keypoints == y.keypoints));

    assert!(preprocess_studies(&studies, Route::Xray, &detector, &pcfg).is_err());
}

#[test]
fn crops_round_trip_through_disk() {
    let kps = KeyPointSet { points: vec![], completeness: Completeness::Complete, confidence: 0.9, complete_probability: 0.9 };
    let halves: Vec<CroppedHalf> = (0..4)
        .map(|i| CroppedHalf {
            patient_id: format!("P{}", i / 2),
            side: if i % 2 == 0 { Side::Right } else { Side::Left },
            image: Array2::from_shape_fn((96, 96), |(r, c)| ((r * 7 + c * 3 + i) % 17) as f32 / 17.0),
            keypoints: kps.clone(),
        })
        .collect();
    let out = PreprocessOutput { halves, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    write_crops(dir.path(), &out).unwrap();
    let back = read_crops(dir.path()).unwrap();
    assert_eq!(back.len(), 4);
    for (x, y) in out.halves.iter().zip(&back) {
        assert_eq!((x.patient_id.as_str(), x.side, &x.image), (y.patient_id.as_str(), y.side, &y.image));
        assert_eq!(y.keypoints.confidence, 0.9);
    }
}
