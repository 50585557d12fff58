//! Fourth-order elasticity tensors in Voigt form.
//!
//! Strain vectors carry engineering shears:
//! 2D `[e11, e22, 2 e12]`, 3D `[e11, e22, e33, 2 e23, 2 e13, 2 e12]`.
//! Under this convention the Voigt matrix holds the tensor entries `C_ijkl`
//! unchanged, stress follows as `s = D e`, and `e^T D e` is twice the strain
//! energy density. Every module in the crate uses this convention.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PAIRS_2D: [(usize, usize); 3] = [(0, 0), (1, 1), (0, 1)];
const PAIRS_3D: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)];

/// Index pairs `(i, j)` with `i <= j` in Voigt order.
pub fn voigt_pairs(dim: usize) -> &'static [(usize, usize)] {
    match dim {
        2 => &PAIRS_2D,
        3 => &PAIRS_3D,
        _ => panic!("unsupported dimension {dim}"),
    }
}

pub fn voigt_size(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Voigt position of the (unordered) index pair `(i, j)`.
pub fn voigt_index(dim: usize, i: usize, j: usize) -> usize {
    if i == j {
        return i;
    }
    match dim {
        2 => 2,
        // 3D shears are ordered (23, 13, 12): the missing index decides the slot.
        _ => 3 + (3 - i - j),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialModel {
    #[serde(rename = "plane_stress_2d")]
    PlaneStress2d,
    #[serde(rename = "solid_3d")]
    Solid3d,
}

impl MaterialModel {
    pub fn dim(self) -> usize {
        match self {
            MaterialModel::PlaneStress2d => 2,
            MaterialModel::Solid3d => 3,
        }
    }

    pub fn for_dim(dim: usize) -> Result<Self> {
        match dim {
            2 => Ok(MaterialModel::PlaneStress2d),
            3 => Ok(MaterialModel::Solid3d),
            d => Err(Error::param(format!("unsupported dimension {d}"))),
        }
    }
}

/// Isotropic base material.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Material {
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub model: MaterialModel,
}

impl Material {
    pub fn new(youngs_modulus: f64, poisson_ratio: f64, model: MaterialModel) -> Result<Self> {
        let m = Material { youngs_modulus, poisson_ratio, model };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.youngs_modulus > 0.0 && self.youngs_modulus.is_finite()) {
            return Err(Error::param(format!("Young's modulus must be positive, got {}", self.youngs_modulus)));
        }
        if !(self.poisson_ratio > -1.0 && self.poisson_ratio < 0.5) {
            return Err(Error::param(format!("Poisson ratio must lie in (-1, 0.5), got {}", self.poisson_ratio)));
        }
        Ok(())
    }
}

/// Elasticity tensor with major and minor symmetry, stored as its Voigt matrix.
///
/// Derivative tensors (sensitivities) reuse this type; only symmetry is
/// enforced on construction, positive semidefiniteness is checked separately.
#[derive(Clone, Debug, PartialEq)]
pub struct ElasticTensor {
    dim: usize,
    v: [[f64; 6]; 6],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VoigtJson {
    dim: usize,
    voigt: Vec<Vec<f64>>,
}

impl Serialize for ElasticTensor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        VoigtJson { dim: self.dim, voigt: self.to_rows() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ElasticTensor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = VoigtJson::deserialize(d)?;
        ElasticTensor::from_rows(j.dim, &j.voigt).map_err(serde::de::Error::custom)
    }
}

impl ElasticTensor {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim == 2 || dim == 3, "unsupported dimension {dim}");
        ElasticTensor { dim, v: [[0.0; 6]; 6] }
    }

    /// Builds a tensor from a Voigt matrix, rejecting asymmetry above 1e-12 relative.
    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::param(format!("unsupported dimension {dim}")));
        }
        let m = voigt_size(dim);
        if rows.len() != m {
            return Err(Error::dim(m, rows.len()));
        }
        let mut t = ElasticTensor::zeros(dim);
        for (a, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::dim(m, row.len()));
            }
            for (b, &x) in row.iter().enumerate() {
                if !x.is_finite() {
                    return Err(Error::param("non-finite modulus"));
                }
                t.v[a][b] = x;
            }
        }
        let scale = t.max_abs().max(f64::MIN_POSITIVE);
        for a in 0..m {
            for b in 0..a {
                if (t.v[a][b] - t.v[b][a]).abs() > 1e-12 * scale {
                    return Err(Error::param(format!("Voigt matrix not symmetric at ({a},{b})")));
                }
            }
        }
        Ok(t)
    }

    /// Builds a tensor from a function of the four tensor indices.
    pub fn from_full(dim: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = ElasticTensor::zeros(dim);
        let pairs = voigt_pairs(dim);
        for (a, &(i, j)) in pairs.iter().enumerate() {
            for (b, &(k, l)) in pairs.iter().enumerate() {
                t.v[a][b] = f(i, j, k, l);
            }
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn size(&self) -> usize {
        voigt_size(self.dim)
    }

    /// Voigt entry `(a, b)`.
    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.v[a][b]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, x: f64) {
        self.v[a][b] = x;
    }

    /// Tensor entry `C_ijkl`.
    #[inline]
    pub fn full(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.v[voigt_index(self.dim, i, j)][voigt_index(self.dim, k, l)]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        let m = self.size();
        (0..m).map(|a| self.v[a][..m].to_vec()).collect()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let m = self.size();
        DMatrix::from_fn(m, m, |a, b| self.v[a][b])
    }

    pub fn max_abs(&self) -> f64 {
        let m = self.size();
        (0..m).flat_map(|a| (0..m).map(move |b| (a, b))).map(|(a, b)| self.v[a][b].abs()).fold(0.0, f64::max)
    }

    /// `self + s * other`.
    pub fn add_scaled(&mut self, s: f64, other: &ElasticTensor) {
        debug_assert_eq!(self.dim, other.dim);
        let m = self.size();
        for a in 0..m {
            for b in 0..m {
                self.v[a][b] += s * other.v[a][b];
            }
        }
    }

    pub fn scaled(&self, s: f64) -> ElasticTensor {
        let mut t = ElasticTensor::zeros(self.dim);
        t.add_scaled(s, self);
        t
    }

    /// Averages the two off-diagonal triangles, removing round-off asymmetry.
    pub fn symmetrize(&mut self) {
        let m = self.size();
        for a in 0..m {
            for b in 0..a {
                let x = 0.5 * (self.v[a][b] + self.v[b][a]);
                self.v[a][b] = x;
                self.v[b][a] = x;
            }
        }
    }

    /// Frobenius inner product of the Voigt matrices, `sum_ab D_ab M_ab`.
    pub fn contract(&self, m: &[[f64; 6]; 6]) -> f64 {
        let n = self.size();
        let mut s = 0.0;
        for a in 0..n {
            for b in 0..n {
                s += self.v[a][b] * m[a][b];
            }
        }
        s
    }

    /// Voigt matrix–vector product (stress from engineering strain).
    pub fn apply(&self, e: &[f64]) -> [f64; 6] {
        let m = self.size();
        let mut s = [0.0; 6];
        for a in 0..m {
            s[a] = (0..m).map(|b| self.v[a][b] * e[b]).sum();
        }
        s
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.to_matrix()).eigenvalues.min()
    }

    pub fn is_positive_semidefinite(&self, tol: f64) -> bool {
        self.min_eigenvalue() >= -tol * self.max_abs().max(f64::MIN_POSITIVE)
    }

    /// Largest entrywise deviation relative to the larger tensor's magnitude.
    pub fn relative_difference(&self, other: &ElasticTensor) -> f64 {
        let m = self.size();
        let scale = self.max_abs().max(other.max_abs());
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for a in 0..m {
            for b in 0..m {
                worst = worst.max((self.v[a][b] - other.v[a][b]).abs() / scale);
            }
        }
        worst
    }
}

/// Isotropic stiffness of `material`, plane-stress reduced in 2D.
pub fn isotropic_tensor(material: &Material) -> Result<ElasticTensor> {
    material.validate()?;
    let e = material.youngs_modulus;
    let nu = material.poisson_ratio;
    let dim = material.model.dim();
    let (lambda, mu) = match material.model {
        // Plane stress uses the reduced Lamé constant 2 lambda mu / (lambda + 2 mu).
        MaterialModel::PlaneStress2d => (e * nu / (1.0 - nu * nu), e / (2.0 * (1.0 + nu))),
        MaterialModel::Solid3d => (e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)), e / (2.0 * (1.0 + nu))),
    };
    let d = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };
    Ok(ElasticTensor::from_full(dim, |i, j, k, l| {
        lambda * d(i, j) * d(k, l) + mu * (d(i, k) * d(j, l) + d(i, l) * d(j, k))
    }))
}

/// Fourth-order transform `C'_ijkl = Q_ip Q_jq Q_kr Q_ls C_pqrs`.
pub fn rotate_tensor(t: &ElasticTensor, q: &DMatrix<f64>) -> Result<ElasticTensor> {
    let n = t.dim();
    if q.nrows() != n || q.ncols() != n {
        return Err(Error::dim(n, q.nrows()));
    }
    let defect = (q.transpose() * q - DMatrix::<f64>::identity(n, n)).amax();
    if defect > 1e-12 {
        return Err(Error::param(format!("matrix is not orthogonal (|QtQ - I| = {defect:e})")));
    }
    Ok(ElasticTensor::from_full(n, |i, j, k, l| {
        let mut s = 0.0;
        for p in 0..n {
            for qq in 0..n {
                let a = q[(i, p)] * q[(j, qq)];
                if a == 0.0 {
                    continue;
                }
                for r in 0..n {
                    for u in 0..n {
                        s += a * q[(k, r)] * q[(l, u)] * t.full(p, qq, r, u);
                    }
                }
            }
        }
        s
    }))
}

/// Bilinear form `a^T D b` on engineering strain vectors.
pub fn quadratic_energy(t: &ElasticTensor, a: &[f64], b: &[f64]) -> Result<f64> {
    let m = t.size();
    if a.len() != m {
        return Err(Error::dim(m, a.len()));
    }
    if b.len() != m {
        return Err(Error::dim(m, b.len()));
    }
    let s = t.apply(b);
    Ok(a.iter().zip(&s[..m]).map(|(x, y)| x * y).sum())
}

/// Converts a (not necessarily symmetric) displacement gradient into an
/// engineering strain vector.
pub fn engineering_strain(dim: usize, g: &[[f64; 3]; 3]) -> [f64; 6] {
    let mut e = [0.0; 6];
    for (a, &(i, j)) in voigt_pairs(dim).iter().enumerate() {
        e[a] = if i == j { g[i][i] } else { g[i][j] + g[j][i] };
    }
    e
}
