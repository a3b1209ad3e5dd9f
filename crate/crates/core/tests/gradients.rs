mod common;

use nalgebra::DVector;
use wslab::data::synth_context;
use wslab::featmaps::{Activation, DeltaObjective, FeatureMap, MapKind, MapSpec, PiecewiseLinear};
use wslab::rng;

fn specs(n: usize, d: usize) -> Vec<MapSpec> {
    let table = PiecewiseLinear::new(vec![(-1.0, -0.5), (0.0, 0.0), (1.5, 2.0)]).unwrap();
    vec![
        MapSpec::new(MapKind::Rf, n, d).with_k(48),
        MapSpec::new(MapKind::Rf, n, d).with_k(48).with_activation(Activation::Tanh),
        MapSpec::new(MapKind::Drf, n, d).with_k(32).with_depth(3),
        MapSpec::new(MapKind::Drf, n, d).with_k(32).with_depth(2).with_activation(Activation::Table(table)),
        MapSpec::new(MapKind::Raf, n, d),
        MapSpec::new(MapKind::ReluRaf, n, d),
        MapSpec::new(MapKind::Qkv, n, d).with_d_inner(4),
    ]
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let (n, d) = (5, 6);
    let mut g = rng::rng_from(31);
    for (s, spec) in specs(n, d).into_iter().enumerate() {
        let mut checked = 0;
        for trial in 0..12u64 {
            let map = FeatureMap::sample(&spec, 100 + trial).unwrap();
            let x = synth_context(n, d, 200 + trial);
            let i = trial as usize % n;
            let delta = rng::unit_vector(&mut g, d) * (0.8 * (d as f64).sqrt());
            let u = rng::unit_vector(&mut g, d);
            let v = rng::gaussian_vec(&mut g, map.output_dim(n), 1.0);
            for objective in [DeltaObjective::DiffNormSq, DeltaObjective::InnerProduct(v)] {
                if let Some(rel) = common::directional_check(&map, &x, i, &delta, &u, &objective) {
                    assert!(rel <= 1e-5, "spec {s} trial {trial}: relative error {rel}");
                    checked += 1;
                }
            }
        }
        assert!(checked >= 12, "spec {s}: only {checked} smooth instances");
    }
}

#[test]
fn gradient_vanishes_at_zero_perturbation() {
    let (n, d) = (4, 5);
    for spec in specs(n, d) {
        let map = FeatureMap::sample(&spec, 3).unwrap();
        let x = synth_context(n, d, 4);
        let gr = wslab::featmaps::grad_wrt_delta(&map, &x, 1, &DVector::zeros(d), &DeltaObjective::DiffNormSq).unwrap();
        assert_eq!(gr.value, 0.0);
        assert!(gr.gradient.norm() < 1e-12);
    }
}
