//! Cubic polynomial mapping `y(x)` and its design-vector encoding.
//!
//! `y_i = a_ij x_j + 1/2 b_ijk x_j x_k + 1/3 c_ijkl x_j x_k x_l`, so that
//! `J_ij = dy_i/dx_j = a_ij + b_ijk x_k + c_ijkl x_k x_l` when `b` and `c` are
//! symmetric in their trailing indices. Only nondecreasing trailing
//! multi-indices are stored, which makes the symmetry exact.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Small dense matrix; only the leading `dim x dim` block is meaningful.
pub type Mat = [[f64; 3]; 3];

pub const ZERO_MAT: Mat = [[0.0; 3]; 3];

pub fn identity_mat(dim: usize) -> Mat {
    let mut m = ZERO_MAT;
    for i in 0..dim {
        m[i][i] = 1.0;
    }
    m
}

pub fn det(dim: usize, m: &Mat) -> f64 {
    if dim == 2 {
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    } else {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

/// Adjugate: `adj(M) M = det(M) I`.
pub fn adjugate(dim: usize, m: &Mat) -> Mat {
    let mut a = ZERO_MAT;
    if dim == 2 {
        a[0][0] = m[1][1];
        a[0][1] = -m[0][1];
        a[1][0] = -m[1][0];
        a[1][1] = m[0][0];
    } else {
        for i in 0..3 {
            for j in 0..3 {
                let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                a[i][j] = m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
            }
        }
    }
    a
}

fn sorted2(j: usize, k: usize) -> [usize; 2] {
    if j <= k {
        [j, k]
    } else {
        [k, j]
    }
}

fn sorted3(j: usize, k: usize, l: usize) -> [usize; 3] {
    let mut t = [j, k, l];
    t.sort_unstable();
    t
}

/// Nondecreasing index pairs over `0..dim`.
pub fn index_pairs(dim: usize) -> Vec<[usize; 2]> {
    let mut v = Vec::new();
    for j in 0..dim {
        for k in j..dim {
            v.push([j, k]);
        }
    }
    v
}

/// Nondecreasing index triples over `0..dim`.
pub fn index_triples(dim: usize) -> Vec<[usize; 3]> {
    let mut v = Vec::new();
    for j in 0..dim {
        for k in j..dim {
            for l in k..dim {
                v.push([j, k, l]);
            }
        }
    }
    v
}

fn pair_slot(dim: usize, p: [usize; 2]) -> usize {
    index_pairs(dim).iter().position(|q| *q == p).unwrap()
}

fn triple_slot(dim: usize, t: [usize; 3]) -> usize {
    index_triples(dim).iter().position(|q| *q == t).unwrap()
}

/// Degree-3 polynomial map with deduplicated symmetric coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyMap {
    dim: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    // Flat lookups from full (j,k) / (j,k,l) to the dedup slot.
    pair_of: Vec<usize>,
    triple_of: Vec<usize>,
}

impl PolyMap {
    pub fn identity(dim: usize) -> Self {
        assert!(dim == 2 || dim == 3, "unsupported dimension {dim}");
        let np = index_pairs(dim).len();
        let nt = index_triples(dim).len();
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            a[i * dim + i] = 1.0;
        }
        let mut pair_of = vec![0; dim * dim];
        for j in 0..dim {
            for k in 0..dim {
                pair_of[j * dim + k] = pair_slot(dim, sorted2(j, k));
            }
        }
        let mut triple_of = vec![0; dim * dim * dim];
        for j in 0..dim {
            for k in 0..dim {
                for l in 0..dim {
                    triple_of[(j * dim + k) * dim + l] = triple_slot(dim, sorted3(j, k, l));
                }
            }
        }
        PolyMap { dim, a, b: vec![0.0; dim * np], c: vec![0.0; dim * nt], pair_of, triple_of }
    }

    pub fn zero(dim: usize) -> Self {
        let mut m = PolyMap::identity(dim);
        m.a.iter_mut().for_each(|x| *x = 0.0);
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.dim + j]
    }

    pub fn b(&self, i: usize, j: usize, k: usize) -> f64 {
        let n = self.dim;
        self.b[i * (self.b.len() / n) + self.pair_of[j * n + k]]
    }

    pub fn c(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        let n = self.dim;
        self.c[i * (self.c.len() / n) + self.triple_of[(j * n + k) * n + l]]
    }

    pub fn set_a(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.dim + j] = v;
    }

    /// Sets `b_ijk` and, by storage, `b_ikj`.
    pub fn set_b(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let n = self.dim;
        let s = self.b.len() / n;
        self.b[i * s + self.pair_of[j * n + k]] = v;
    }

    /// Sets `c_ijkl` and all permutations of `(j, k, l)`.
    pub fn set_c(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        let n = self.dim;
        let s = self.c.len() / n;
        self.c[i * s + self.triple_of[(j * n + k) * n + l]] = v;
    }

    /// Linear map `y = A x`.
    pub fn linear(dim: usize, a: &Mat) -> Self {
        let mut m = PolyMap::zero(dim);
        for i in 0..dim {
            for j in 0..dim {
                m.set_a(i, j, a[i][j]);
            }
        }
        m
    }

    pub fn evaluate(&self, x: &[f64]) -> [f64; 3] {
        let n = self.dim;
        let mut y = [0.0; 3];
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += self.a(i, j) * x[j];
                for k in 0..n {
                    s += 0.5 * self.b(i, j, k) * x[j] * x[k];
                    for l in 0..n {
                        s += self.c(i, j, k, l) * x[j] * x[k] * x[l] / 3.0;
                    }
                }
            }
            y[i] = s;
        }
        y
    }

    pub fn jacobian(&self, x: &[f64]) -> Mat {
        let n = self.dim;
        let mut m = ZERO_MAT;
        for i in 0..n {
            for q in 0..n {
                let mut s = self.a(i, q);
                for k in 0..n {
                    s += self.b(i, q, k) * x[k];
                    for l in 0..n {
                        s += self.c(i, q, k, l) * x[k] * x[l];
                    }
                }
                m[i][q] = s;
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Restrictions {
    #[default]
    Full,
    /// All `b_ijk` pinned to zero.
    BZero,
}

/// One free coefficient of the map (0-based indices, trailing ones sorted).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Coefficient {
    A { i: usize, j: usize },
    B { i: usize, jk: [usize; 2] },
    C { i: usize, jkl: [usize; 3] },
}

impl fmt::Display for Coefficient {
    /// 1-based names such as `a12`, `b112`, `c2111`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Coefficient::A { i, j } => write!(f, "a{}{}", i + 1, j + 1),
            Coefficient::B { i, jk } => write!(f, "b{}{}{}", i + 1, jk[0] + 1, jk[1] + 1),
            Coefficient::C { i, jkl } => {
                write!(f, "c{}{}{}{}", i + 1, jkl[0] + 1, jkl[1] + 1, jkl[2] + 1)
            }
        }
    }
}

/// Ordered list of the free coefficients for a dimension and restriction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    dim: usize,
    restrictions: Restrictions,
    entries: Vec<Coefficient>,
}

impl Layout {
    pub fn new(dim: usize, restrictions: Restrictions) -> Self {
        let mut entries = Vec::new();
        for i in 0..dim {
            for j in 0..dim {
                entries.push(Coefficient::A { i, j });
            }
        }
        if restrictions == Restrictions::Full {
            for i in 0..dim {
                for jk in index_pairs(dim) {
                    entries.push(Coefficient::B { i, jk });
                }
            }
        }
        for i in 0..dim {
            for jkl in index_triples(dim) {
                entries.push(Coefficient::C { i, jkl });
            }
        }
        Layout { dim, restrictions, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn restrictions(&self) -> Restrictions {
        self.restrictions
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Coefficient] {
        &self.entries
    }

    pub fn coefficient(&self, alpha: usize) -> Result<Coefficient> {
        self.entries
            .get(alpha)
            .copied()
            .ok_or_else(|| Error::param(format!("design index {alpha} out of range 0..{}", self.len())))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|c| c.to_string()).collect()
    }

    /// Positions of the `a_ii` entries (the uniform-scaling direction).
    pub fn diagonal_a(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(k, c)| matches!(c, Coefficient::A { i, j } if i == j).then_some(k))
            .collect()
    }
}

/// Free coefficients of a map in [`Layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DesignJson {
    dim: usize,
    restrictions: Restrictions,
    layout: Vec<String>,
    values: Vec<f64>,
}

impl Serialize for DesignVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        DesignJson {
            dim: self.layout.dim,
            restrictions: self.layout.restrictions,
            layout: self.layout.names(),
            values: self.values.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DesignVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let j = DesignJson::deserialize(d)?;
        if j.dim != 2 && j.dim != 3 {
            return Err(D::Error::custom(format!("unsupported dimension {}", j.dim)));
        }
        let layout = Layout::new(j.dim, j.restrictions);
        if j.layout != layout.names() {
            return Err(D::Error::custom("design layout does not match dimension/restrictions"));
        }
        if j.values.len() != layout.len() {
            return Err(D::Error::custom(format!(
                "design has {} values, layout needs {}",
                j.values.len(),
                layout.len()
            )));
        }
        Ok(DesignVector { values: j.values, layout })
    }
}

pub fn pack(m: &PolyMap, restrictions: Restrictions) -> DesignVector {
    let layout = Layout::new(m.dim, restrictions);
    let values = layout
        .entries
        .iter()
        .map(|c| match *c {
            Coefficient::A { i, j } => m.a(i, j),
            Coefficient::B { i, jk } => m.b(i, jk[0], jk[1]),
            Coefficient::C { i, jkl } => m.c(i, jkl[0], jkl[1], jkl[2]),
        })
        .collect();
    DesignVector { values, layout }
}

pub fn unpack(v: &DesignVector) -> Result<PolyMap> {
    if v.values.len() != v.layout.len() {
        return Err(Error::dim(v.layout.len(), v.values.len()));
    }
    let mut m = PolyMap::zero(v.layout.dim);
    for (c, &x) in v.layout.entries.iter().zip(&v.values) {
        match *c {
            Coefficient::A { i, j } => m.set_a(i, j, x),
            Coefficient::B { i, jk } => m.set_b(i, jk[0], jk[1], x),
            Coefficient::C { i, jkl } => m.set_c(i, jkl[0], jkl[1], jkl[2], x),
        }
    }
    Ok(m)
}

pub fn evaluate_map(m: &PolyMap, x: &[f64]) -> [f64; 3] {
    m.evaluate(x)
}

pub fn jacobian(m: &PolyMap, x: &[f64]) -> Mat {
    m.jacobian(x)
}

/// `dJ/dd_alpha` at `x`. The map itself does not enter: `J` is linear in the
/// coefficients.
pub fn jacobian_param_derivative(layout: &Layout, x: &[f64], alpha: usize) -> Result<Mat> {
    Ok(coefficient_jacobian_derivative(layout.dim, layout.coefficient(alpha)?, x))
}

pub fn coefficient_jacobian_derivative(dim: usize, c: Coefficient, x: &[f64]) -> Mat {
    let mut m = ZERO_MAT;
    match c {
        Coefficient::A { i, j } => m[i][j] = 1.0,
        Coefficient::B { i, jk } => {
            // J_iq picks up b_iqr x_r for every r with {q, r} = {j, k}.
            for q in 0..dim {
                for r in 0..dim {
                    if sorted2(q, r) == jk {
                        m[i][q] += x[r];
                    }
                }
            }
        }
        Coefficient::C { i, jkl } => {
            for q in 0..dim {
                for r in 0..dim {
                    for s in 0..dim {
                        if sorted3(q, r, s) == jkl {
                            m[i][q] += x[r] * x[s];
                        }
                    }
                }
            }
        }
    }
    m
}

/// det J bounds `lo < |det J| < hi` at a set of points, as inequality
/// constraints `g <= 0` with their design gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct DetJConstraints {
    /// Per point: `[lo - |det J|, |det J| - hi]`.
    pub values: Vec<[f64; 2]>,
    /// Per point: gradients of the two constraints over the layout.
    pub gradients: Vec<[Vec<f64>; 2]>,
    pub dets: Vec<f64>,
}

impl DetJConstraints {
    pub fn max_violation(&self) -> f64 {
        self.values.iter().flat_map(|v| v.iter().copied()).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_feasible(&self) -> bool {
        self.values.iter().all(|v| v[0] <= 0.0 && v[1] <= 0.0)
    }
}

pub fn detj_constraints(
    m: &PolyMap,
    layout: &Layout,
    points: &[Vec<f64>],
    lo: f64,
    hi: f64,
) -> Result<DetJConstraints> {
    if !(lo > 0.0 && lo < hi) {
        return Err(Error::param(format!("det J bounds need 0 < lo < hi, got ({lo}, {hi})")));
    }
    if layout.dim != m.dim {
        return Err(Error::dim(m.dim, layout.dim));
    }
    let n = m.dim;
    let mut out = DetJConstraints { values: Vec::new(), gradients: Vec::new(), dets: Vec::new() };
    for x in points {
        let j = m.jacobian(x);
        let d = det(n, &j);
        let adj = adjugate(n, &j);
        let sign = if d < 0.0 { -1.0 } else { 1.0 };
        // Jacobi: d(det J) = tr(adj(J) dJ).
        let grad: Vec<f64> = layout
            .entries
            .iter()
            .map(|&c| {
                let dj = coefficient_jacobian_derivative(n, c, x);
                let mut t = 0.0;
                for p in 0..n {
                    for q in 0..n {
                        t += adj[p][q] * dj[q][p];
                    }
                }
                sign * t
            })
            .collect();
        out.values.push([lo - d.abs(), d.abs() - hi]);
        out.gradients.push([grad.iter().map(|g| -g).collect(), grad]);
        out.dets.push(d);
    }
    Ok(out)
}
