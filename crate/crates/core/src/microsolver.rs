//! Jacobian-mapped periodic cell problems and the homogenized tensor.
//!
//! For a fixed Jacobian `J` the corrector fields `xi^{st}` solve the periodic
//! problem `int G(w) : C~ : G(xi^{st}) = int G(w) : C~ : e^{st}` for all
//! periodic `w`, where `G(w)_ij = J_mj dw_i/dY_m` is the mapped gradient and
//! `C~` is the base tensor scaled by the voxel density (1 in solid, `ersatz`
//! in void). Discretization: multilinear elements on the `N^n` voxel grid,
//! periodic by node wrap-around, 2-point Gauss quadrature.
//!
//! The homogenized tensor is `C^H_ijkl = int C~_ijkl - int C~_ijst G(xi^{kl})_st`
//! (average over the unit cell, no `det J` weight). The symmetric energy form
//! `int (e^{ij} - G(xi^{ij})) : C~ : (e^{kl} - G(xi^{kl}))` agrees with it to
//! solver precision because the cell problem is solved by Galerkin projection
//! with the same quadrature.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{full_tensor, mapped_tensor, periodic_connectivity, DofMap, ElementBasis, Tensor4};
use crate::mapping::{det, Mat};
use crate::sparse::solve_spd;
use crate::tensor::{engineering_strain, voigt_index, voigt_pairs, voigt_size, ElasticTensor};
use crate::unitcell::CellRaster;

pub const DEFAULT_ERSATZ: f64 = 1e-6;

/// Treatment of nodes whose neighbouring voxels are all void.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoidNodes {
    /// 2D: keep; 3D: clamp.
    #[default]
    Auto,
    /// Every node stays free; void voxels carry ersatz stiffness.
    Keep,
    /// Nodes surrounded by void are fixed at zero. This changes the tensor by
    /// O(ersatz) and shrinks 3D systems by the void fraction.
    Clamp,
}

impl VoidNodes {
    pub fn resolve(self, dim: usize) -> VoidNodes {
        match self {
            VoidNodes::Auto if dim == 3 => VoidNodes::Clamp,
            VoidNodes::Auto => VoidNodes::Keep,
            v => v,
        }
    }
}

/// Periodic cell discretization for one raster and ersatz value. The sparsity
/// pattern and symbolic factorization are shared by every Jacobian.
#[derive(Debug)]
pub struct CellMesh {
    raster: Arc<CellRaster>,
    dim: usize,
    n: usize,
    ersatz: f64,
    void_nodes: VoidNodes,
    basis: ElementBasis,
    dofmap: DofMap,
    anchor: Option<usize>,
    /// Element densities: 1 in solid, ersatz in void.
    rho: Vec<f64>,
}

/// Correctors for one Jacobian plus the resulting tensor.
#[derive(Clone, Debug)]
pub struct CellProblemResult {
    /// One full nodal field per Voigt pair `(s, t)`, node-major, length
    /// `N^n * n`. `xi^{ts}` is the same field.
    pub xi: Vec<Vec<f64>>,
    pub jacobian: Mat,
    pub tensor: ElasticTensor,
    pub residual: f64,
}

impl CellProblemResult {
    pub fn xi(&self, s: usize, t: usize) -> &[f64] {
        &self.xi[voigt_index(self.tensor.dim(), s, t)]
    }
}

/// `dC/dJ_ab` for every `(a, b)`, flattened as `a * n + b`, split into the
/// explicit part (linear in the corrector gradients against `C~`) and the
/// remainder (quadratic in the corrector gradients).
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianSensitivity {
    pub part1: Vec<ElasticTensor>,
    pub part2: Vec<ElasticTensor>,
}

impl JacobianSensitivity {
    pub fn total(&self, ab: usize) -> ElasticTensor {
        let mut t = self.part1[ab].clone();
        t.add_scaled(1.0, &self.part2[ab]);
        t
    }

    pub fn zeros(dim: usize) -> Self {
        JacobianSensitivity {
            part1: vec![ElasticTensor::zeros(dim); dim * dim],
            part2: vec![ElasticTensor::zeros(dim); dim * dim],
        }
    }
}

impl CellMesh {
    pub fn new(raster: Arc<CellRaster>, ersatz: f64, void_nodes: VoidNodes) -> Result<Self> {
        if !(ersatz > 0.0 && ersatz <= 1e-3) {
            return Err(Error::param(format!("ersatz must lie in (0, 1e-3], got {ersatz}")));
        }
        let dim = raster.dim();
        let n = raster.resolution();
        let void_nodes = void_nodes.resolve(dim);
        let n_nodes = n.pow(dim as u32);
        let conn = periodic_connectivity(dim, n);
        let npe = 1 << dim;
        let rho: Vec<f64> = (0..n_nodes).map(|e| if raster.is_solid(e) { 1.0 } else { ersatz }).collect();

        let mut fixed_node = vec![false; n_nodes];
        if void_nodes == VoidNodes::Clamp {
            let mut touches_solid = vec![false; n_nodes];
            for (e, el) in conn.chunks_exact(npe).enumerate() {
                if rho[e] == 1.0 {
                    for &a in el {
                        touches_solid[a as usize] = true;
                    }
                }
            }
            for (f, t) in fixed_node.iter_mut().zip(&touches_solid) {
                *f = !t;
            }
        }
        // Without clamped nodes the correctors are unique only up to a
        // translation; pin node 0.
        let anchor = if fixed_node.iter().any(|&f| f) { None } else { Some(0) };
        if let Some(a) = anchor {
            fixed_node[a] = true;
        }
        let constrained: Vec<bool> = fixed_node.iter().flat_map(|&f| std::iter::repeat_n(f, dim)).collect();
        let dofmap = DofMap::new(dim, n_nodes, conn, &constrained)?;
        let h = 1.0 / n as f64;
        Ok(CellMesh { raster, dim, n, ersatz, void_nodes, basis: ElementBasis::new(dim, [h; 3]), dofmap, anchor, rho })
    }

    pub fn raster(&self) -> &Arc<CellRaster> {
        &self.raster
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    pub fn ersatz(&self) -> f64 {
        self.ersatz
    }

    pub fn void_nodes(&self) -> VoidNodes {
        self.void_nodes
    }

    /// Node pinned to remove the translation modes, if any.
    pub fn anchor(&self) -> Option<usize> {
        self.anchor
    }

    pub fn n_free(&self) -> usize {
        self.dofmap.n_free()
    }

    pub fn n_nodes(&self) -> usize {
        self.dofmap.n_nodes()
    }

    /// Periodic partner of grid point `ijk` (coordinates in `0..=N`): the
    /// stored node it is identified with.
    pub fn periodic_master(&self, ijk: [usize; 3]) -> usize {
        let w = |d: usize| ijk[d] % self.n;
        w(0) + self.n * (w(1) + if self.dim == 3 { self.n * w(2) } else { 0 })
    }

    pub fn element_density(&self, e: usize) -> f64 {
        self.rho[e]
    }

    fn check_jacobian(&self, base: &ElasticTensor, j: &Mat) -> Result<()> {
        if base.dim() != self.dim {
            return Err(Error::dim(self.dim, base.dim()));
        }
        let scale: f64 = (0..self.dim)
            .flat_map(|a| (0..self.dim).map(move |b| (a, b)))
            .map(|(a, b)| j[a][b].abs())
            .fold(0.0, f64::max);
        let d = det(self.dim, j);
        if !d.is_finite() || d.abs() <= 1e-14 * scale.powi(self.dim as i32) || scale == 0.0 {
            return Err(Error::param(format!("singular Jacobian (det J = {d:e})")));
        }
        Ok(())
    }

    /// Solves the `n(n+1)/2` distinct cell problems for Jacobian `j`.
    pub fn solve(&self, base: &ElasticTensor, j: &Mat) -> Result<CellProblemResult> {
        self.check_jacobian(base, j)?;
        let dim = self.dim;
        let m = voigt_size(dim);
        let c4 = full_tensor(base);
        let a4 = mapped_tensor(&c4, dim, j);
        let ke = self.basis.stiffness(&a4);
        let fes = self.rhs_element_vectors(&c4, j);
        let n_free = self.dofmap.n_free();

        let mut rhs = vec![0.0; n_free * m];
        for (p, fe) in fes.into_iter().enumerate() {
            self.dofmap.assemble_vector(&[fe], |e| (0, self.rho[e]), &mut rhs[p * n_free..(p + 1) * n_free]);
        }
        let residual = if n_free > 0 {
            let values = self.dofmap.assemble(&[ke], |e| (0, self.rho[e]));
            let symbolic = self.dofmap.symbolic()?;
            solve_spd(&symbolic, &values, &mut rhs, m)?
        } else {
            0.0
        };
        let xi: Vec<Vec<f64>> = (0..m).map(|p| self.dofmap.expand(&rhs[p * n_free..(p + 1) * n_free], None)).collect();
        let mut result = CellProblemResult { xi, jacobian: *j, tensor: ElasticTensor::zeros(dim), residual };
        result.tensor = self.homogenized_tensor(&result, base)?;
        Ok(result)
    }

    /// Element load vectors `f[(a,i)] = int dN_a/dY_m J_mj C_ijst` per Voigt pair.
    fn rhs_element_vectors(&self, c4: &Tensor4, j: &Mat) -> Vec<Vec<f64>> {
        let dim = self.dim;
        let gi = self.basis.gradient_integrals();
        voigt_pairs(dim)
            .iter()
            .map(|&(s, t)| {
                let mut fe = vec![0.0; self.basis.ndof()];
                for (a, g) in gi.iter().enumerate() {
                    for i in 0..dim {
                        let mut v = 0.0;
                        for mm in 0..dim {
                            for jj in 0..dim {
                                v += g[mm] * j[mm][jj] * c4[i][jj][s][t];
                            }
                        }
                        fe[a * dim + i] = v;
                    }
                }
                fe
            })
            .collect()
    }

    fn check_result(&self, result: &CellProblemResult, base: &ElasticTensor) -> Result<()> {
        if base.dim() != self.dim || result.tensor.dim() != self.dim {
            return Err(Error::dim(self.dim, base.dim()));
        }
        let len = self.n_nodes() * self.dim;
        if result.xi.len() != voigt_size(self.dim) || result.xi.iter().any(|x| x.len() != len) {
            return Err(Error::param("corrector fields do not match this cell mesh"));
        }
        Ok(())
    }

    /// `C^H_ijkl = int C~_ijkl - int C~_ijst J_nt dxi^{kl}_s/dY_n`.
    pub fn homogenized_tensor(&self, result: &CellProblemResult, base: &ElasticTensor) -> Result<ElasticTensor> {
        self.check_result(result, base)?;
        let dim = self.dim;
        let pairs = voigt_pairs(dim);
        let m = pairs.len();
        let c4 = full_tensor(base);
        let j = &result.jacobian;
        let gi = self.basis.gradient_integrals();
        let vol = self.basis.volume();
        let npe = self.basis.nodes();

        let mut rho_total = 0.0;
        // int rho dxi^Q_s / dY_n, accumulated per Q.
        let mut dxi = vec![[[0.0f64; 3]; 3]; m];
        for e in 0..self.dofmap.n_elements() {
            let r = self.rho[e];
            rho_total += r * vol;
            let nodes = self.dofmap.element_nodes(e);
            for (q, field) in result.xi.iter().enumerate() {
                for a in 0..npe {
                    let base_idx = nodes[a] as usize * dim;
                    for s in 0..dim {
                        let x = field[base_idx + s];
                        if x != 0.0 {
                            for nn in 0..dim {
                                dxi[q][s][nn] += r * x * gi[a][nn];
                            }
                        }
                    }
                }
            }
        }
        let mut out = ElasticTensor::zeros(dim);
        for (p, &(i, jj)) in pairs.iter().enumerate() {
            for q in 0..m {
                let (k, l) = pairs[q];
                let mut v = c4[i][jj][k][l] * rho_total;
                for s in 0..dim {
                    for t in 0..dim {
                        let g: f64 = (0..dim).map(|nn| j[nn][t] * dxi[q][s][nn]).sum();
                        v -= c4[i][jj][s][t] * g;
                    }
                }
                out.set(p, q, v);
            }
        }
        Ok(out)
    }

    /// Symmetric energy form of the homogenized tensor.
    pub fn energy_form_tensor(&self, result: &CellProblemResult, base: &ElasticTensor) -> Result<ElasticTensor> {
        self.check_result(result, base)?;
        Ok(self.integrate(result, base, false)?.0)
    }

    /// `dC^H/dJ_ab` with the correctors held fixed. By stationarity of the
    /// energy form in the correctors this is the total derivative.
    pub fn jacobian_sensitivity(
        &self,
        result: &CellProblemResult,
        base: &ElasticTensor,
    ) -> Result<JacobianSensitivity> {
        self.check_result(result, base)?;
        Ok(self.integrate(result, base, true)?.1.expect("requested"))
    }

    /// Gauss-point pass shared by the energy form and its Jacobian derivative.
    fn integrate(
        &self,
        result: &CellProblemResult,
        base: &ElasticTensor,
        with_sensitivity: bool,
    ) -> Result<(ElasticTensor, Option<JacobianSensitivity>)> {
        let dim = self.dim;
        let pairs = voigt_pairs(dim);
        let m = pairs.len();
        let j = &result.jacobian;
        let npe = self.basis.nodes();
        let vol = self.basis.volume();

        // Unit-strain stresses C : e^Q as symmetric matrices.
        let mut sigma0 = vec![[[0.0f64; 3]; 3]; m];
        for q in 0..m {
            for (p, &(a, b)) in pairs.iter().enumerate() {
                sigma0[q][a][b] = base.get(p, q);
                sigma0[q][b][a] = base.get(p, q);
            }
        }

        let mut energy = [[0.0f64; 6]; 6];
        let mut d_total = vec![[[0.0f64; 6]; 6]; dim * dim];
        let mut d_part1 = vec![[[0.0f64; 6]; 6]; dim * dim];
        let mut void_volume = 0.0;

        let mut local = vec![0.0; m * npe * dim];
        let mut h = vec![[[0.0f64; 3]; 3]; m];
        let mut eng = vec![[0.0f64; 6]; m];
        let mut sig = vec![[[0.0f64; 3]; 3]; m];

        for e in 0..self.dofmap.n_elements() {
            let r = self.rho[e];
            let nodes = self.dofmap.element_nodes(e);
            let mut nonzero = false;
            for (q, field) in result.xi.iter().enumerate() {
                for a in 0..npe {
                    for s in 0..dim {
                        let x = field[nodes[a] as usize * dim + s];
                        local[(q * npe + a) * dim + s] = x;
                        nonzero |= x != 0.0;
                    }
                }
            }
            if !nonzero {
                // E^Q = e^Q exactly: contributes r * C and no sensitivity.
                void_volume += r * vol;
                continue;
            }
            for gp in self.basis.gauss() {
                let w = gp.weight * r;
                for q in 0..m {
                    let mut hq = [[0.0; 3]; 3];
                    for a in 0..npe {
                        let g = &gp.grad[a];
                        for p in 0..dim {
                            let x = local[(q * npe + a) * dim + p];
                            for nn in 0..dim {
                                hq[p][nn] += x * g[nn];
                            }
                        }
                    }
                    // E = e^Q - G, G_pk = J_nk H_pn.
                    let mut ef = [[0.0; 3]; 3];
                    for p in 0..dim {
                        for k in 0..dim {
                            ef[p][k] = -(0..dim).map(|nn| j[nn][k] * hq[p][nn]).sum::<f64>();
                        }
                    }
                    let (s0, t0) = pairs[q];
                    ef[s0][t0] += 1.0;
                    eng[q] = engineering_strain(dim, &ef);
                    let sv = base.apply(&eng[q]);
                    let mut sm = [[0.0; 3]; 3];
                    for (p, &(a, b)) in pairs.iter().enumerate() {
                        sm[a][b] = sv[p];
                        sm[b][a] = sv[p];
                    }
                    sig[q] = sm;
                    h[q] = hq;
                }
                for p in 0..m {
                    for q in p..m {
                        let v: f64 = (0..m)
                            .map(|k| {
                                eng[p][k] * {
                                    let (a, b) = pairs[k];
                                    sig[q][a][b]
                                }
                            })
                            .sum();
                        energy[p][q] += w * v;
                    }
                }
                if with_sensitivity {
                    for a in 0..dim {
                        for b in 0..dim {
                            let ab = a * dim + b;
                            for p in 0..m {
                                for q in p..m {
                                    let mut t = 0.0;
                                    let mut t1 = 0.0;
                                    for pp in 0..dim {
                                        t += h[p][pp][a] * sig[q][pp][b] + h[q][pp][a] * sig[p][pp][b];
                                        t1 += h[p][pp][a] * sigma0[q][pp][b] + h[q][pp][a] * sigma0[p][pp][b];
                                    }
                                    d_total[ab][p][q] -= w * t;
                                    d_part1[ab][p][q] -= w * t1;
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut c18 = ElasticTensor::zeros(dim);
        for p in 0..m {
            for q in p..m {
                let v = energy[p][q] + void_volume * base.get(p, q);
                c18.set(p, q, v);
                c18.set(q, p, v);
            }
        }
        let sens = with_sensitivity.then(|| {
            let mut s = JacobianSensitivity::zeros(dim);
            for ab in 0..dim * dim {
                for p in 0..m {
                    for q in p..m {
                        let t1 = d_part1[ab][p][q];
                        let t2 = d_total[ab][p][q] - t1;
                        s.part1[ab].set(p, q, t1);
                        s.part1[ab].set(q, p, t1);
                        s.part2[ab].set(p, q, t2);
                        s.part2[ab].set(q, p, t2);
                    }
                }
            }
            s
        });
        Ok((c18, sens))
    }
}

/// Builds a one-off mesh and solves the cell problems (convenience wrapper;
/// repeated solves should share a [`CellMesh`]).
pub fn solve_cell_problem(
    raster: &CellRaster,
    base: &ElasticTensor,
    j: &Mat,
    ersatz: f64,
) -> Result<CellProblemResult> {
    CellMesh::new(Arc::new(raster.clone()), ersatz, VoidNodes::Auto)?.solve(base, j)
}
