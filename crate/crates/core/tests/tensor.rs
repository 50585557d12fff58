use gmc_core::tensor::{
    engineering_strain, isotropic_tensor, quadratic_energy, rotate_tensor, ElasticTensor, Material, MaterialModel,
};
use nalgebra::{DMatrix, Rotation3, Vector3};
use proptest::prelude::*;

fn rot2(theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

fn rot3(axis: [f64; 3], angle: f64) -> DMatrix<f64> {
    let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::from(axis)), angle);
    DMatrix::from_fn(3, 3, |i, j| r[(i, j)])
}

/// Random symmetric positive definite Voigt matrix.
fn spd(dim: usize, entries: &[f64]) -> ElasticTensor {
    let m = if dim == 2 { 3 } else { 6 };
    let a = DMatrix::from_fn(m, m, |i, j| entries[(i * m + j) % entries.len()] + if i == j { 2.0 } else { 0.0 });
    let s = &a * a.transpose();
    let rows: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| 0.5 * (s[(i, j)] + s[(j, i)])).collect()).collect();
    ElasticTensor::from_rows(dim, &rows).unwrap()
}

#[test]
fn plane_stress_tensor_matches_engineering_constants() {
    let (e, nu) = (2.5, 0.25);
    let t = isotropic_tensor(&Material::new(e, nu, MaterialModel::PlaneStress2d).unwrap()).unwrap();
    let f = e / (1.0 - nu * nu);
    let expect = [[f, f * nu, 0.0], [f * nu, f, 0.0], [0.0, 0.0, e / (2.0 * (1.0 + nu))]];
    for a in 0..3 {
        for b in 0..3 {
            assert!((t.get(a, b) - expect[a][b]).abs() < 1e-14);
        }
    }
}

#[test]
fn solid_tensor_matches_engineering_constants() {
    let (e, nu) = (1.0, 0.3);
    let t = isotropic_tensor(&Material::new(e, nu, MaterialModel::Solid3d).unwrap()).unwrap();
    let k = e / ((1.0 + nu) * (1.0 - 2.0 * nu));
    for a in 0..6 {
        for b in 0..6 {
            let want = match (a < 3, b < 3) {
                (true, true) if a == b => k * (1.0 - nu),
                (true, true) => k * nu,
                (false, false) if a == b => e / (2.0 * (1.0 + nu)),
                _ => 0.0,
            };
            assert!((t.get(a, b) - want).abs() < 1e-14, "({a},{b})");
        }
    }
}

#[test]
fn invalid_materials_are_rejected() {
    assert!(Material::new(0.0, 0.3, MaterialModel::Solid3d).is_err());
    assert!(Material::new(1.0, 0.5, MaterialModel::Solid3d).is_err());
    assert!(Material::new(1.0, -1.0, MaterialModel::PlaneStress2d).is_err());
}

#[test]
fn asymmetric_voigt_matrix_is_rejected() {
    let rows = vec![vec![1.0, 0.2, 0.0], vec![0.3, 1.0, 0.0], vec![0.0, 0.0, 0.5]];
    assert!(ElasticTensor::from_rows(2, &rows).is_err());
}

#[test]
fn json_round_trip() {
    let t = isotropic_tensor(&Material::new(1.0, 0.3, MaterialModel::Solid3d).unwrap()).unwrap();
    let s = serde_json::to_string(&t).unwrap();
    assert_eq!(serde_json::from_str::<ElasticTensor>(&s).unwrap(), t);
}

#[test]
fn non_orthogonal_rotation_is_rejected() {
    let t = isotropic_tensor(&Material::new(1.0, 0.3, MaterialModel::PlaneStress2d).unwrap()).unwrap();
    assert!(rotate_tensor(&t, &DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0])).is_err());
}

proptest! {
    #[test]
    fn isotropic_tensors_are_rotation_invariant(theta in -3.2..3.2f64, nu in -0.9..0.49f64, axis in prop::array::uniform3(-1.0..1.0f64)) {
        let t2 = isotropic_tensor(&Material::new(1.0, nu, MaterialModel::PlaneStress2d).unwrap()).unwrap();
        prop_assert!(rotate_tensor(&t2, &rot2(theta)).unwrap().relative_difference(&t2) < 1e-13);
        prop_assume!(axis.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let t3 = isotropic_tensor(&Material::new(1.0, nu, MaterialModel::Solid3d).unwrap()).unwrap();
        prop_assert!(rotate_tensor(&t3, &rot3(axis, theta)).unwrap().relative_difference(&t3) < 1e-12);
    }

    #[test]
    fn rotations_compose(a in -3.2..3.2f64, b in -3.2..3.2f64, e in prop::collection::vec(-1.0..1.0f64, 9)) {
        let t = spd(2, &e);
        let once = rotate_tensor(&rotate_tensor(&t, &rot2(a)).unwrap(), &rot2(b)).unwrap();
        let both = rotate_tensor(&t, &rot2(a + b)).unwrap();
        prop_assert!(once.relative_difference(&both) < 1e-12);
    }

    #[test]
    fn rotation_preserves_strain_energy(theta in -3.2..3.2f64, e in prop::collection::vec(-1.0..1.0f64, 36), g in prop::array::uniform4(-1.0..1.0f64)) {
        // Energy of a strain in the old frame equals the rotated tensor's
        // energy of the rotated strain.
        let t = spd(2, &e);
        let q = rot2(theta);
        let grad = DMatrix::from_row_slice(2, 2, &g);
        let rotated = &q * &grad * q.transpose();
        let to3 = |m: &DMatrix<f64>| [[m[(0, 0)], m[(0, 1)], 0.0], [m[(1, 0)], m[(1, 1)], 0.0], [0.0; 3]];
        let e0 = engineering_strain(2, &to3(&grad));
        let e1 = engineering_strain(2, &to3(&rotated));
        let w0 = quadratic_energy(&t, &e0[..3], &e0[..3]).unwrap();
        let w1 = quadratic_energy(&rotate_tensor(&t, &q).unwrap(), &e1[..3], &e1[..3]).unwrap();
        prop_assert!((w0 - w1).abs() < 1e-11 * (1.0 + w0.abs()));
    }

    #[test]
    fn gram_tensors_are_psd(e in prop::collection::vec(-1.0..1.0f64, 36)) {
        let t = spd(3, &e);
        prop_assert!(t.is_positive_semidefinite(1e-12));
        let mut s = t.clone();
        s.symmetrize();
        prop_assert_eq!(s, t);
    }
}
