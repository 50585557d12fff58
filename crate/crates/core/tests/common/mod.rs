//! Independent reference implementations shared by the integration tests.
//!
//! They use the textbook strain-displacement (B-matrix) formulation with
//! counterclockwise Q4 node order, their own assembly and their own linear
//! solvers, so they share no numerical code with the library.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Plane-stress constitutive matrix (engineering shear).
pub fn plane_stress(e: f64, nu: f64) -> [[f64; 3]; 3] {
    let f = e / (1.0 - nu * nu);
    [[f, f * nu, 0.0], [f * nu, f, 0.0], [0.0, 0.0, f * (1.0 - nu) / 2.0]]
}

const GP: f64 = 0.577_350_269_189_625_8;

/// Q4 B-matrix at natural coordinates for a rectangle `hx` by `hy`, node
/// order counterclockwise from the lower-left corner.
fn q4_b(xi: f64, eta: f64, hx: f64, hy: f64) -> [[f64; 8]; 3] {
    let sx = [-1.0, 1.0, 1.0, -1.0];
    let sy = [-1.0, -1.0, 1.0, 1.0];
    let mut b = [[0.0; 8]; 3];
    for a in 0..4 {
        let dx = 0.25 * sx[a] * (1.0 + sy[a] * eta) * 2.0 / hx;
        let dy = 0.25 * sy[a] * (1.0 + sx[a] * xi) * 2.0 / hy;
        b[0][2 * a] = dx;
        b[1][2 * a + 1] = dy;
        b[2][2 * a] = dy;
        b[2][2 * a + 1] = dx;
    }
    b
}

fn gauss() -> [(f64, f64); 4] {
    [(-GP, -GP), (GP, -GP), (GP, GP), (-GP, GP)]
}

/// Element stiffness `sum_gp B^T D B |J| w`.
pub fn q4_stiffness(d: &[[f64; 3]; 3], hx: f64, hy: f64) -> [[f64; 8]; 8] {
    let mut k = [[0.0; 8]; 8];
    let det = hx * hy / 4.0;
    for (xi, eta) in gauss() {
        let b = q4_b(xi, eta, hx, hy);
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0;
                for p in 0..3 {
                    for q in 0..3 {
                        s += b[p][i] * d[p][q] * b[q][j];
                    }
                }
                k[i][j] += s * det;
            }
        }
    }
    k
}

/// Compressed sparse rows built from triplets (duplicates summed).
pub struct Csr {
    pub n: usize,
    pub ptr: Vec<usize>,
    pub col: Vec<usize>,
    pub val: Vec<f64>,
}

impl Csr {
    pub fn from_triplets(n: usize, mut t: Vec<(usize, usize, f64)>) -> Csr {
        t.sort_by_key(|a| (a.0, a.1));
        let mut ptr = vec![0; n + 1];
        let mut col = Vec::new();
        let mut val: Vec<f64> = Vec::new();
        let mut last = (usize::MAX, usize::MAX);
        for (r, c, v) in t {
            if (r, c) == last {
                *val.last_mut().unwrap() += v;
            } else {
                col.push(c);
                val.push(v);
                ptr[r + 1] = col.len();
                last = (r, c);
            }
        }
        for r in 0..n {
            ptr[r + 1] = ptr[r + 1].max(ptr[r]);
        }
        Csr { n, ptr, col, val }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.n {
            let mut s = 0.0;
            for k in self.ptr[r]..self.ptr[r + 1] {
                s += self.val[k] * x[self.col[k]];
            }
            y[r] = s;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|r| (self.ptr[r]..self.ptr[r + 1]).find(|&k| self.col[k] == r).map_or(0.0, |k| self.val[k]))
            .collect()
    }
}

/// Jacobi-preconditioned conjugate gradients to a relative residual `tol`.
pub fn pcg(a: &Csr, b: &[f64], tol: f64, max_iter: usize) -> Vec<f64> {
    let n = a.n;
    let dinv: Vec<f64> = a.diagonal().iter().map(|d| 1.0 / d).collect();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        return x;
    }
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    for _ in 0..max_iter {
        a.matvec(&p, &mut ap);
        let alpha = rz / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if r.iter().map(|v| v * v).sum::<f64>().sqrt() <= tol * bnorm {
            return x;
        }
        for i in 0..n {
            z[i] = r[i] * dinv[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    panic!("reference PCG did not converge");
}

/// Classical periodic homogenization of a 2D pixel cell (density 1 solid,
/// `ersatz` void), node 0 pinned. Returns the Voigt tensor and the three
/// corrector fields, node-major with node index `i + n j`.
pub fn classical_ah_2d(solid: &[bool], n: usize, d: &[[f64; 3]; 3], ersatz: f64) -> ([[f64; 3]; 3], Vec<Vec<f64>>) {
    let h = 1.0 / n as f64;
    let k0 = q4_stiffness(d, h, h);
    let nodes = |ex: usize, ey: usize| {
        let (x1, y1) = ((ex + 1) % n, (ey + 1) % n);
        [ex + n * ey, x1 + n * ey, x1 + n * y1, ex + n * y1]
    };
    // Element load for unit macro strain P: int B^T D e_P.
    let mut fe = [[0.0; 8]; 3];
    for (xi, eta) in gauss() {
        let b = q4_b(xi, eta, h, h);
        for pcol in 0..3 {
            for i in 0..8 {
                let mut s = 0.0;
                for q in 0..3 {
                    s += b[q][i] * d[q][pcol];
                }
                fe[pcol][i] += s * h * h / 4.0;
            }
        }
    }
    let ndof = 2 * n * n;
    // Drop dofs 0 and 1 (node 0 pinned) by shifting indices.
    let map = |g: usize| if g < 2 { None } else { Some(g - 2) };
    let mut trip = Vec::new();
    let mut rhs = vec![vec![0.0; ndof - 2]; 3];
    for ey in 0..n {
        for ex in 0..n {
            let rho = if solid[ex + n * ey] { 1.0 } else { ersatz };
            let nd = nodes(ex, ey);
            let dofs: Vec<usize> = nd.iter().flat_map(|&a| [2 * a, 2 * a + 1]).collect();
            for i in 0..8 {
                let Some(gi) = map(dofs[i]) else { continue };
                for p in 0..3 {
                    rhs[p][gi] += rho * fe[p][i];
                }
                for j in 0..8 {
                    if let Some(gj) = map(dofs[j]) {
                        trip.push((gi, gj, rho * k0[i][j]));
                    }
                }
            }
        }
    }
    let a = Csr::from_triplets(ndof - 2, trip);
    let chi: Vec<Vec<f64>> = rhs
        .iter()
        .map(|b| {
            let x = pcg(&a, b, 1e-14, 200_000);
            let mut full = vec![0.0, 0.0];
            full.extend(x);
            full
        })
        .collect();
    // C_PQ = sum_e int (e_P - B chi_P)^T D_e (e_Q - B chi_Q).
    let mut c = [[0.0; 3]; 3];
    for ey in 0..n {
        for ex in 0..n {
            let rho = if solid[ex + n * ey] { 1.0 } else { ersatz };
            let nd = nodes(ex, ey);
            for (xi, eta) in gauss() {
                let b = q4_b(xi, eta, h, h);
                let mut eps = [[0.0; 3]; 3];
                for p in 0..3 {
                    eps[p][p] = 1.0;
                    for r in 0..3 {
                        for (a, &node) in nd.iter().enumerate() {
                            eps[p][r] -= b[r][2 * a] * chi[p][2 * node] + b[r][2 * a + 1] * chi[p][2 * node + 1];
                        }
                    }
                }
                for p in 0..3 {
                    for q in 0..3 {
                        let mut s = 0.0;
                        for r in 0..3 {
                            for t in 0..3 {
                                s += eps[p][r] * d[r][t] * eps[q][t];
                            }
                        }
                        c[p][q] += rho * s * h * h / 4.0;
                    }
                }
            }
        }
    }
    (c, chi)
}

/// Dense reference solve of a 2D plane-stress cantilever on an `nx` by `ny`
/// grid over `[0, lx] x [0, ly]`, clamped at `x = lx`, with nodal forces
/// `loads` given as `(node index i + (nx+1) j, fx, fy)`. Returns the full
/// displacement vector.
pub fn dense_cantilever(
    nx: usize,
    ny: usize,
    lx: f64,
    ly: f64,
    d: &[[f64; 3]; 3],
    loads: &[(usize, f64, f64)],
) -> Vec<f64> {
    let (hx, hy) = (lx / nx as f64, ly / ny as f64);
    let k0 = q4_stiffness(d, hx, hy);
    let nn = (nx + 1) * (ny + 1);
    let mut k = DMatrix::<f64>::zeros(2 * nn, 2 * nn);
    for ey in 0..ny {
        for ex in 0..nx {
            let id = |i: usize, j: usize| i + (nx + 1) * j;
            let nd = [id(ex, ey), id(ex + 1, ey), id(ex + 1, ey + 1), id(ex, ey + 1)];
            let dofs: Vec<usize> = nd.iter().flat_map(|&a| [2 * a, 2 * a + 1]).collect();
            for i in 0..8 {
                for j in 0..8 {
                    k[(dofs[i], dofs[j])] += k0[i][j];
                }
            }
        }
    }
    let mut f = DVector::<f64>::zeros(2 * nn);
    for &(node, fx, fy) in loads {
        f[2 * node] += fx;
        f[2 * node + 1] += fy;
    }
    let free: Vec<usize> = (0..2 * nn).filter(|&g| (g / 2) % (nx + 1) != nx).collect();
    let kf = DMatrix::from_fn(free.len(), free.len(), |i, j| k[(free[i], free[j])]);
    let ff = DVector::from_fn(free.len(), |i, _| f[free[i]]);
    let uf = kf.cholesky().expect("SPD").solve(&ff);
    let mut u = vec![0.0; 2 * nn];
    for (i, &g) in free.iter().enumerate() {
        u[g] = uf[i];
    }
    u
}

pub fn max_rel(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> f64 {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            worst = worst.max((a[i][j] - b[i][j]).abs() / scale);
        }
    }
    worst
}
