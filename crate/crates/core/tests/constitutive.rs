use archplate_core::constitutive::*;
use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;

fn gradient() -> impl Strategy<Value = Matrix3<f64>> {
    prop::array::uniform9(-0.25f64..0.25)
        .prop_map(|e| Matrix3::identity() + Matrix3::from_row_slice(&e))
        .prop_filter("admissible", |f| f.determinant() > 0.3)
}

fn rotation() -> impl Strategy<Value = Matrix3<f64>> {
    (prop::array::uniform3(-1.0f64..1.0), 0.0f64..std::f64::consts::PI)
        .prop_filter("axis", |(a, _)| Vector3::from(*a).norm() > 0.1)
        .prop_map(|(a, angle)| *Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::from(a)), angle).matrix())
}

fn stress() -> impl Strategy<Value = CauchyStress> {
    prop::array::uniform6(-100.0f64..100.0).prop_map(CauchyStress)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn von_mises_ignores_pressure(s in stress(), p in -1e3f64..1e3) {
        let mut shifted = s;
        for k in 0..3 {
            shifted.0[k] += p;
        }
        let (a, b) = (von_mises(&s), von_mises(&shifted));
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs() + p.abs()));
    }

    #[test]
    fn neo_hookean_cauchy_is_objective(f in gradient(), r in rotation()) {
        let nh = NeoHookean::default();
        let s = nh.cauchy(&DeformationGradient(f)).unwrap().to_matrix();
        let sr = nh.cauchy(&DeformationGradient(r * f)).unwrap().to_matrix();
        prop_assert!((sr - r * s * r.transpose()).amax() <= 1e-9 * (1.0 + s.amax()));
    }

    #[test]
    fn visco_equilibrium_cauchy_is_objective(f in gradient(), r in rotation()) {
        let eq = ViscoMaterial::reference().equilibrium_only();
        let rest = eq.rest_state();
        let s = eq.cauchy(&DeformationGradient(f), &rest).unwrap().to_matrix();
        let sr = eq.cauchy(&DeformationGradient(r * f), &rest).unwrap().to_matrix();
        prop_assert!((sr - r * s * r.transpose()).amax() <= 1e-9 * (1.0 + s.amax()));
    }

    #[test]
    fn internal_update_stays_symmetric_and_unimodular(path in prop::collection::vec(gradient(), 1..12), dt in 1e-4f64..0.05) {
        let visco = ViscoMaterial::reference();
        let mut a = visco.rest_state();
        for f in path {
            a = visco.evolve_internal(&a, &DeformationGradient(f).distortional_cauchy_green(), dt);
            prop_assert_eq!(a.max_asymmetry(), 0.0);
            prop_assert!(a.max_unimodularity_error() <= 1e-6);
        }
    }
}

#[test]
fn cauchy_matches_push_forward_of_piola() {
    let nh = NeoHookean::default();
    let f = Matrix3::new(1.1, 0.05, 0.0, -0.02, 0.95, 0.1, 0.0, 0.03, 1.02);
    let df = DeformationGradient(f);
    let p = nh.piola(&df).unwrap();
    let expected = p * f.transpose() / f.determinant();
    assert!((nh.cauchy(&df).unwrap().to_matrix() - expected).amax() < 1e-12);
}
