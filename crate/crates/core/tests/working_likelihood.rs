mod common;

use common::*;
use mixedreg::worklik::{beta_gls, grad_sigma, h_n, BetaRestrictions, WorkingPoint};
use nalgebra::{DMatrix, DVector};

#[test]
fn h_n_matches_naive_evaluator() {
    for seed in 0..5 {
        let inst = random_instance(seed, mixed_families(4), 20, 2);
        let fast = h_n(&inst.beta, &inst.sigma, &inst.data, &inst.w, &inst.spec).unwrap();
        let slow = naive_h_n(&inst.data, &inst.spec, &inst.w, &inst.beta, &inst.sigma);
        assert!((fast - slow).abs() <= 1e-10 * slow.abs(), "{fast} vs {slow}");
    }
}

#[test]
fn gaussian_h_n_does_not_depend_on_w() {
    let (spec, data) = gaussian_data(3, &[0.3, 0.1, 0.5], &DMatrix::identity(3, 3), 40, 2);
    let beta = DVector::from_fn(6, |k, _| 0.1 * k as f64);
    let sigma = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 0.8, 0.2, 0.0, 0.2, 0.6]);
    let w1 = DMatrix::zeros(40, 3);
    let w2 = DMatrix::from_fn(40, 3, |i, j| (i as f64 - 7.0 * j as f64).sin() * 3.0);
    let a = h_n(&beta, &sigma, &data, &w1, &spec).unwrap();
    let b = h_n(&beta, &sigma, &data, &w2, &spec).unwrap();
    assert!((a - b).abs() < 1e-10 * a.abs());
}

#[test]
fn gls_is_minimal_and_stationary() {
    for seed in 10..13 {
        let inst = random_instance(seed, mixed_families(4), 30, 2);
        let b = beta_gls(&inst.sigma, &inst.data, &inst.w, &inst.spec).unwrap();
        let best = naive_h_n(&inst.data, &inst.spec, &inst.w, &b, &inst.sigma);
        let mut g = rng(seed);
        for _ in 0..100 {
            let pert = DVector::from_fn(b.len(), |_, _| 0.05 * normal(&mut g));
            let other = naive_h_n(&inst.data, &inst.spec, &inst.w, &(&b + pert), &inst.sigma);
            assert!(best <= other);
        }
        let grad = naive_beta_gradient(&inst.data, &inst.spec, &inst.w, &b, &inst.sigma);
        assert!(grad.amax() < 1e-8, "{}", grad.amax());
    }
}

#[test]
fn restricted_gls_holds_restrictions() {
    let inst = random_instance(5, mixed_families(4), 30, 2);
    let restrictions = BetaRestrictions::new(vec![(1, 0.0), (4, 0.25)]).unwrap();
    let point = WorkingPoint::new(&inst.data, &inst.w, &inst.spec).unwrap();
    let b = point
        .factorize(&inst.sigma)
        .unwrap()
        .beta_gls(&restrictions)
        .unwrap();
    assert_eq!(b[1], 0.0);
    assert_eq!(b[4], 0.25);
    let grad = naive_beta_gradient(&inst.data, &inst.spec, &inst.w, &b, &inst.sigma);
    for k in [0, 2, 3, 5, 6, 7] {
        assert!(grad[k].abs() < 1e-8);
    }
}

#[test]
fn scalar_gaussian_gradient_is_inverse_variance() {
    let spec = mixedreg::data::ModelSpec::new(vec![mixedreg::families::Family::gaussian(1e-12).unwrap()], 1)
        .unwrap();
    let data =
        mixedreg::data::Dataset::new(DMatrix::zeros(1, 1), vec![DMatrix::from_element(1, 1, 1.0)]).unwrap();
    let g = grad_sigma(
        &DVector::zeros(1),
        &DMatrix::identity(1, 1),
        &data,
        &DMatrix::zeros(1, 1),
        &spec,
    )
    .unwrap();
    assert!((g[(0, 0)] - 1.0).abs() < 1e-11);
}

#[test]
fn working_point_rejects_shape_mismatch() {
    let inst = random_instance(1, mixed_families(3), 10, 2);
    assert!(WorkingPoint::new(&inst.data, &DMatrix::zeros(9, 3), &inst.spec).is_err());
}
