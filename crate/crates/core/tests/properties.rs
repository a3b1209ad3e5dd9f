use nalgebra::DVector;
use proptest::prelude::*;
use wslab::config::Config;
use wslab::data::{self, apply_perturbation, emb, project_to_ball, synth_context, synth_dataset, Perturbation};
use wslab::featmaps::{prm, FeatureMap, MapKind, MapSpec};
use wslab::glm::{self, FeatureMatrix};
use wslab::sensitivity::ws_ratio;

fn kind() -> impl Strategy<Value = MapKind> {
    prop::sample::select(MapKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projection_lands_in_the_ball(v in prop::collection::vec(-50.0f64..50.0, 1..12), r in 0.1f64..10.0) {
        let mut d = DVector::from_vec(v.clone());
        project_to_ball(&mut d, r);
        prop_assert!(d.norm() <= r * (1.0 + 1e-12));
        if DVector::from_vec(v.clone()).norm() <= r {
            prop_assert_eq!(d, DVector::from_vec(v));
        }
    }

    #[test]
    fn perturbation_touches_only_its_row(n in 1usize..7, d in 1usize..6, seed in 0u64..1000, i in 0usize..7) {
        let i = i % n;
        let x = synth_context(n, d, seed);
        let delta = DVector::from_element(d, 0.5 / (d as f64).sqrt());
        let xp = apply_perturbation(&x, &Perturbation::single(i, delta.clone())).unwrap();
        for r in 0..n {
            let want = if r == i { x.row(r) + &delta } else { x.row(r) };
            prop_assert!((xp.row(r) - want).norm() < 1e-15);
        }
    }

    #[test]
    fn normalized_rows_have_norm_sqrt_d(n in 1usize..6, d in 1usize..9, seed in 0u64..1000) {
        let x = synth_context(n, d, seed);
        for r in 0..n {
            prop_assert!((x.row(r).norm() - (d as f64).sqrt()).abs() < 1e-9 * (d as f64).sqrt());
        }
        let again = data::normalize_rows(&x).unwrap();
        prop_assert!((again.values() - x.values()).amax() < 1e-12);
    }

    #[test]
    fn ratio_is_zero_exactly_at_zero(k in kind(), seed in 0u64..500) {
        let (n, d) = (3, 4);
        let map = FeatureMap::sample(&MapSpec::new(k, n, d).with_k(16).with_depth(2), seed).unwrap();
        let x = synth_context(n, d, seed + 1);
        prop_assert_eq!(ws_ratio(&map, &x, &Perturbation::single(0, DVector::zeros(d))).unwrap(), 0.0);
    }

    #[test]
    fn params_round_trip(k in kind(), seed in 0u64..500) {
        let map = FeatureMap::sample(&MapSpec::new(k, 2, 3).with_k(5).with_depth(2), seed).unwrap();
        let mut buf = Vec::new();
        prm::write_to(&mut buf, &map).unwrap();
        let back = prm::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(prm::fingerprint(&back), prm::fingerprint(&map));
        prop_assert_eq!(back, map);
    }

    #[test]
    fn emb_round_trip(count in 1usize..4, n in 1usize..4, d in 1usize..4, seed in 0u64..500) {
        let ds = synth_dataset(count, n, d, seed);
        let bytes = emb::to_bytes(&ds);
        let back = emb::read_from(&mut bytes.as_slice(), &emb::ReadOptions::default()).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn finetune_hits_the_label(seed in 0u64..500, y in prop::sample::select(vec![-1.0, 1.0])) {
        let map = FeatureMap::sample(&MapSpec::new(MapKind::Rf, 3, 4).with_k(40), seed).unwrap();
        let data = synth_dataset(6, 3, 4, seed + 1);
        let phi = FeatureMatrix::build(&map, data.samples()).unwrap();
        let base = glm::fit(&phi, &data.labels_f64().unwrap(), &DVector::zeros(40), MapKind::Rf).unwrap();
        let phi_x = map.features(&synth_context(3, 4, seed + 2)).unwrap();
        let ft = glm::finetune(&base, &phi_x, y).unwrap();
        prop_assert!((ft.predict(&phi_x).unwrap() - y).abs() < 1e-10);
    }

    #[test]
    fn config_lists_parse_back(values in prop::collection::vec(0usize..10_000, 1..6)) {
        let text = format!("[map]\nn = {}\n", values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", "));
        let cfg = Config::parse(&text).unwrap();
        prop_assert_eq!(cfg.get_list::<usize>("map.n").unwrap().unwrap(), values);
    }
}
