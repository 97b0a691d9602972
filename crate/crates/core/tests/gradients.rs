use fla_core::attention::{focused_map, DEFAULT_EPS};
use fla_core::dwc::dwc_as_matrix;
use fla_core::gradients::{
    central_difference, dwc_vjp, focused_map_vjp, grad_check, grad_check_scaled, linear_attention_vjp,
    max_relative_error, GradOp,
};
use fla_core::linalg::matmul;
use fla_core::rng::{self, Role, Streams};
use fla_core::{DwcKernel, FeatureMap, Grid, Matrix, Normalization, Vector};
use proptest::prelude::*;

#[test]
fn every_op_matches_finite_differences_on_fifty_seeds() {
    for op in GradOp::ALL {
        for seed in 0..50 {
            let r = grad_check(op, seed, 1e-5, 1e-5).unwrap();
            assert!(r.passed, "{} seed {seed}: {:e}", r.op_name, r.max_rel_err);
        }
    }
}

#[test]
fn corrupted_gradient_is_detected() {
    for op in GradOp::ALL {
        let r = grad_check_scaled(op, 7, 1e-5, 1e-5, 1.01).unwrap();
        assert!(!r.passed, "{}", r.op_name);
        assert!(r.max_rel_err > 5e-3);
    }
}

#[test]
fn focused_map_vjp_against_scalar_oracle() {
    let s = Streams::new(31);
    let x = rng::kink_free_matrix(&mut s.rng(0, Role::X), 1, 6, 0.1, 2.0);
    let x = Vector::new(x.into_vec());
    let g = rng::normal_vector(&mut s.rng(0, Role::Upstream), 6);
    let analytic = focused_map_vjp(&x, 3.0, &g);
    let fd = central_difference(x.as_slice(), 1e-5, |p| {
        focused_map(&Vector::new(p.to_vec()), 3.0).dot(&g)
    });
    assert!(max_relative_error(analytic.as_slice(), &fd) <= 1e-6);
    for (i, &xi) in x.as_slice().iter().enumerate() {
        if xi < 0.0 {
            assert_eq!(analytic[i], 0.0);
        }
    }
}

#[test]
fn dwc_value_gradient_is_transposed_matrix_form() {
    let s = Streams::new(32);
    let grid = Grid::new(4, 5);
    let v = s.normal_matrix(0, Role::Value, 20, 3);
    let kernel = DwcKernel::seeded(&s, 0, 3, 3).unwrap();
    let g = s.normal_matrix(0, Role::Upstream, 20, 3);
    let (dv, _) = dwc_vjp(&v, grid, &kernel, &g).unwrap();
    for c in 0..3 {
        let mt = dwc_as_matrix(kernel.channel(c), 3, grid).unwrap().transpose();
        let col = Matrix::new(20, 1, g.column(c).into_vec()).unwrap();
        let want = matmul(&mt, &col).unwrap();
        for t in 0..20 {
            assert!((dv[(t, c)] - want[(t, 0)]).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let (q, k, v) = Streams::new(33).qkv(0, 6, 3);
    let g = Matrix::zeros(6, 3);
    let (dq, dk, dv) = linear_attention_vjp(
        &q,
        &k,
        &v,
        FeatureMap::Focused(3.0),
        DEFAULT_EPS,
        Normalization::Normalized,
        &g,
    )
    .unwrap();
    assert_eq!(dq.max_abs() + dk.max_abs() + dv.max_abs(), 0.0);
}

#[test]
fn step_size_is_validated() {
    assert!(grad_check(GradOp::FocusedMap, 0, 0.0, 1e-5).is_err());
    assert!(grad_check(GradOp::FocusedMap, 0, 1e-1, 1e-5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn vjp_is_linear_in_upstream(seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let s = Streams::new(seed);
        let (q, k, v) = s.qkv(0, 5, 3);
        let g1 = s.normal_matrix(0, Role::Upstream, 5, 3);
        let g2 = s.normal_matrix(1, Role::Upstream, 5, 3);
        let vjp = |g: &Matrix| {
            linear_attention_vjp(&q, &k, &v, FeatureMap::Focused(3.0), DEFAULT_EPS, Normalization::Normalized, g)
                .unwrap()
        };
        let combo = vjp(&g1.scale(a).add(&g2.scale(b)).unwrap());
        let (x1, x2) = (vjp(&g1), vjp(&g2));
        let pairs = [(&combo.0, &x1.0, &x2.0), (&combo.1, &x1.1, &x2.1), (&combo.2, &x1.2, &x2.2)];
        for (c, p1, p2) in pairs {
            let lin = p1.scale(a).add(&p2.scale(b)).unwrap();
            prop_assert!(c.max_abs_diff(&lin).unwrap() <= 1e-10 * lin.max_abs().max(1.0));
        }
    }
}
