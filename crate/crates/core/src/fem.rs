//! Shared finite-element machinery for regular grids: multilinear box
//! elements (Q4 / H8) with full 2-point Gauss quadrature, degree-of-freedom
//! numbering and sparse assembly.
//!
//! Element nodes are numbered lexicographically: local node `a` sits at
//! offset `(a & 1, (a >> 1) & 1, (a >> 2) & 1)` in grid steps. Local and
//! global degrees of freedom are node-major (`node * dim + component`).

use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::mapping::Mat;
use crate::sparse::{SymPattern, SymbolicFactor};
use crate::tensor::{voigt_pairs, ElasticTensor};

/// Full fourth-order tensor `T[i][m][k][n]`.
pub type Tensor4 = [[[[f64; 3]; 3]; 3]; 3];

const NONE: u32 = u32::MAX;

#[derive(Clone, Debug)]
pub struct GaussPoint {
    /// Quadrature weight including the element volume.
    pub weight: f64,
    pub shape: Vec<f64>,
    /// Physical gradients of the shape functions.
    pub grad: Vec<[f64; 3]>,
}

/// Multilinear element on a box with edge lengths `h`.
#[derive(Clone, Debug)]
pub struct ElementBasis {
    dim: usize,
    h: [f64; 3],
    gauss: Vec<GaussPoint>,
}

fn node_offset(a: usize) -> [usize; 3] {
    [a & 1, (a >> 1) & 1, (a >> 2) & 1]
}

impl ElementBasis {
    pub fn new(dim: usize, h: [f64; 3]) -> Self {
        let g = 0.5 / 3f64.sqrt();
        let pts = [0.5 - g, 0.5 + g];
        let npts = 1 << dim;
        let volume: f64 = h[..dim].iter().product();
        let gauss = (0..npts)
            .map(|q| {
                let o = node_offset(q);
                let mut xi = [0.5; 3];
                for d in 0..dim {
                    xi[d] = pts[o[d]];
                }
                let (shape, grad) = Self::eval(dim, &h, &xi);
                GaussPoint { weight: volume / npts as f64, shape, grad }
            })
            .collect();
        ElementBasis { dim, h, gauss }
    }

    /// Shape values and physical gradients at reference point `xi` in `[0,1]^n`.
    fn eval(dim: usize, h: &[f64; 3], xi: &[f64; 3]) -> (Vec<f64>, Vec<[f64; 3]>) {
        let nn = 1 << dim;
        let mut shape = vec![0.0; nn];
        let mut grad = vec![[0.0; 3]; nn];
        for a in 0..nn {
            let o = node_offset(a);
            let f: Vec<f64> = (0..dim).map(|d| if o[d] == 1 { xi[d] } else { 1.0 - xi[d] }).collect();
            let df: Vec<f64> = (0..dim).map(|d| if o[d] == 1 { 1.0 } else { -1.0 } / h[d]).collect();
            shape[a] = f.iter().product();
            for d in 0..dim {
                grad[a][d] = (0..dim).map(|e| if e == d { df[e] } else { f[e] }).product();
            }
        }
        (shape, grad)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn h(&self) -> [f64; 3] {
        self.h
    }

    pub fn nodes(&self) -> usize {
        1 << self.dim
    }

    pub fn ndof(&self) -> usize {
        self.nodes() * self.dim
    }

    pub fn volume(&self) -> f64 {
        self.h[..self.dim].iter().product()
    }

    pub fn gauss(&self) -> &[GaussPoint] {
        &self.gauss
    }

    /// Shape-function gradients at the element centroid.
    pub fn center_gradients(&self) -> Vec<[f64; 3]> {
        Self::eval(self.dim, &self.h, &[0.5; 3]).1
    }

    /// `int_e grad N_a`.
    pub fn gradient_integrals(&self) -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; self.nodes()];
        for gp in &self.gauss {
            for (a, g) in gp.grad.iter().enumerate() {
                for d in 0..self.dim {
                    out[a][d] += gp.weight * g[d];
                }
            }
        }
        out
    }

    /// Stiffness `K[(a,i),(b,k)] = int dN_a/dx_m T_imkn dN_b/dx_n`, row-major.
    pub fn stiffness(&self, t: &Tensor4) -> Vec<f64> {
        let n = self.dim;
        let nd = self.ndof();
        let mut k = vec![0.0; nd * nd];
        for gp in &self.gauss {
            for (a, ga) in gp.grad.iter().enumerate() {
                for (b, gb) in gp.grad.iter().enumerate() {
                    for i in 0..n {
                        for kk in 0..n {
                            let mut s = 0.0;
                            for m in 0..n {
                                for nn in 0..n {
                                    s += ga[m] * t[i][m][kk][nn] * gb[nn];
                                }
                            }
                            k[(a * n + i) * nd + b * n + kk] += gp.weight * s;
                        }
                    }
                }
            }
        }
        k
    }

    /// Engineering strain at a point from element nodal displacements.
    pub fn strain(&self, grad: &[[f64; 3]], ue: &[f64]) -> [f64; 6] {
        let n = self.dim;
        let mut g = [[0.0; 3]; 3];
        for (a, ga) in grad.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    g[i][j] += ue[a * n + i] * ga[j];
                }
            }
        }
        crate::tensor::engineering_strain(n, &g)
    }
}

/// Expands a Voigt tensor into full four-index form.
pub fn full_tensor(c: &ElasticTensor) -> Tensor4 {
    let n = c.dim();
    let mut t = [[[[0.0; 3]; 3]; 3]; 3];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    t[i][j][k][l] = c.full(i, j, k, l);
                }
            }
        }
    }
    t
}

/// Effective tensor of the mapped operator, `A_imkn = J_mj C_ijkl J_nl`.
pub fn mapped_tensor(c: &Tensor4, dim: usize, j: &Mat) -> Tensor4 {
    let mut cj = [[[[0.0; 3]; 3]; 3]; 3];
    for i in 0..dim {
        for jj in 0..dim {
            for k in 0..dim {
                for n in 0..dim {
                    cj[i][jj][k][n] = (0..dim).map(|l| c[i][jj][k][l] * j[n][l]).sum();
                }
            }
        }
    }
    let mut a = [[[[0.0; 3]; 3]; 3]; 3];
    for i in 0..dim {
        for m in 0..dim {
            for k in 0..dim {
                for n in 0..dim {
                    a[i][m][k][n] = (0..dim).map(|jj| j[m][jj] * cj[i][jj][k][n]).sum();
                }
            }
        }
    }
    a
}

/// Regular box grid of `counts` elements over `[origin, origin + size]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxGrid {
    pub dim: usize,
    pub counts: [usize; 3],
    pub origin: [f64; 3],
    pub size: [f64; 3],
}

impl BoxGrid {
    pub fn new(dim: usize, counts: &[usize], origin: &[f64], size: &[f64]) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::param(format!("unsupported dimension {dim}")));
        }
        if counts.len() != dim || origin.len() != dim || size.len() != dim {
            return Err(Error::dim(dim, counts.len().min(origin.len()).min(size.len())));
        }
        let mut g = BoxGrid { dim, counts: [1; 3], origin: [0.0; 3], size: [1.0; 3] };
        for d in 0..dim {
            if counts[d] == 0 || !(size[d] > 0.0) {
                return Err(Error::param("grid needs positive counts and sizes"));
            }
            g.counts[d] = counts[d];
            g.origin[d] = origin[d];
            g.size[d] = size[d];
        }
        Ok(g)
    }

    pub fn h(&self) -> [f64; 3] {
        let mut h = [1.0; 3];
        for d in 0..self.dim {
            h[d] = self.size[d] / self.counts[d] as f64;
        }
        h
    }

    pub fn n_elements(&self) -> usize {
        self.counts[..self.dim].iter().product()
    }

    pub fn node_counts(&self) -> [usize; 3] {
        let mut c = [1; 3];
        for d in 0..self.dim {
            c[d] = self.counts[d] + 1;
        }
        c
    }

    pub fn n_nodes(&self) -> usize {
        self.node_counts()[..self.dim].iter().product()
    }

    pub fn element_ijk(&self, e: usize) -> [usize; 3] {
        let c = self.counts;
        [e % c[0], (e / c[0]) % c[1], e / (c[0] * c[1])]
    }

    pub fn node_ijk(&self, node: usize) -> [usize; 3] {
        let c = self.node_counts();
        [node % c[0], (node / c[0]) % c[1], node / (c[0] * c[1])]
    }

    pub fn node_index(&self, ijk: [usize; 3]) -> usize {
        let c = self.node_counts();
        ijk[0] + c[0] * (ijk[1] + c[1] * ijk[2])
    }

    pub fn element_nodes(&self, e: usize) -> [usize; 8] {
        let base = self.element_ijk(e);
        let mut out = [0; 8];
        for (a, slot) in out.iter_mut().enumerate().take(1 << self.dim) {
            let o = node_offset(a);
            *slot = self.node_index([base[0] + o[0], base[1] + o[1], base[2] + o[2]]);
        }
        out
    }

    pub fn node_coord(&self, node: usize) -> [f64; 3] {
        let ijk = self.node_ijk(node);
        let h = self.h();
        let mut x = [0.0; 3];
        for d in 0..self.dim {
            x[d] = self.origin[d] + ijk[d] as f64 * h[d];
        }
        x
    }

    pub fn element_center(&self, e: usize) -> [f64; 3] {
        let ijk = self.element_ijk(e);
        let h = self.h();
        let mut x = [0.0; 3];
        for d in 0..self.dim {
            x[d] = self.origin[d] + (ijk[d] as f64 + 0.5) * h[d];
        }
        x
    }

    pub fn element_connectivity(&self) -> Vec<u32> {
        let nn = 1 << self.dim;
        let mut v = Vec::with_capacity(self.n_elements() * nn);
        for e in 0..self.n_elements() {
            v.extend(self.element_nodes(e)[..nn].iter().map(|&x| x as u32));
        }
        v
    }
}

/// Element connectivity of a periodic `N^n` grid on the unit cell: node
/// indices wrap, so the `N^n` nodes carry the periodic pairing implicitly
/// (a node at coordinate 1 is its partner at coordinate 0).
pub fn periodic_connectivity(dim: usize, n: usize) -> Vec<u32> {
    let nn = 1 << dim;
    let ne = n.pow(dim as u32);
    let mut v = Vec::with_capacity(ne * nn);
    for e in 0..ne {
        let base = [e % n, (e / n) % n, e / (n * n)];
        for a in 0..nn {
            let o = node_offset(a);
            let w = |d: usize| (base[d] + o[d]) % n;
            let idx = w(0) + n * (w(1) + if dim == 3 { n * w(2) } else { 0 });
            v.push(idx as u32);
        }
    }
    v
}

/// Numbering of unconstrained degrees of freedom, the resulting sparsity
/// pattern, and the per-element scatter slots. Built once per mesh and
/// constraint set; the symbolic factorization is computed on first use.
pub struct DofMap {
    dim: usize,
    nodes_per_elem: usize,
    n_nodes: usize,
    n_free: usize,
    conn: Vec<u32>,
    /// Global dof -> free index (or `NONE`).
    free_of: Vec<u32>,
    pattern: Arc<SymPattern>,
    /// Per element, for local pairs `p >= q` in row-major lower order.
    slots: Vec<u32>,
    symbolic: OnceLock<std::result::Result<Arc<SymbolicFactor>, String>>,
}

impl std::fmt::Debug for DofMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DofMap").field("n_free", &self.n_free).field("nnz", &self.pattern.nnz()).finish()
    }
}

impl DofMap {
    /// `conn` lists `2^dim` nodes per element; `constrained[node * dim + c]`
    /// removes that degree of freedom from the system.
    pub fn new(dim: usize, n_nodes: usize, conn: Vec<u32>, constrained: &[bool]) -> Result<Self> {
        let npe = 1 << dim;
        assert_eq!(conn.len() % npe, 0);
        assert_eq!(constrained.len(), n_nodes * dim);
        let mut free_of = vec![NONE; n_nodes * dim];
        let mut n_free = 0u32;
        for (g, &c) in constrained.iter().enumerate() {
            if !c {
                free_of[g] = n_free;
                n_free += 1;
            }
        }
        let n_free = n_free as usize;

        // Node adjacency through shared elements.
        let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n_nodes];
        for el in conn.chunks_exact(npe) {
            for &a in el {
                adj[a as usize].extend_from_slice(el);
            }
        }
        let mut col_ptr = Vec::with_capacity(n_free + 1);
        col_ptr.push(0);
        let mut row_idx = Vec::new();
        let mut rows = Vec::new();
        for node in 0..n_nodes {
            let nb = &mut adj[node];
            nb.sort_unstable();
            nb.dedup();
            for c in 0..dim {
                let col = free_of[node * dim + c];
                if col == NONE {
                    continue;
                }
                rows.clear();
                for &m in nb.iter() {
                    for c2 in 0..dim {
                        let r = free_of[m as usize * dim + c2];
                        if r != NONE && r >= col {
                            rows.push(r as usize);
                        }
                    }
                }
                rows.sort_unstable();
                if rows.first() != Some(&(col as usize)) {
                    // Free dof not touched by any element.
                    return Err(Error::Solver(format!("degree of freedom {col} has no stiffness")));
                }
                row_idx.extend_from_slice(&rows);
                col_ptr.push(row_idx.len());
            }
            nb.clear();
            nb.shrink_to_fit();
        }
        let pattern = Arc::new(SymPattern::new(n_free, col_ptr, row_idx)?);

        let nd = npe * dim;
        let npairs = nd * (nd + 1) / 2;
        let ne = conn.len() / npe;
        for el in conn.chunks_exact(npe) {
            for a in 0..npe {
                if el[..a].contains(&el[a]) {
                    return Err(Error::param("element references the same node twice"));
                }
            }
        }
        let mut slots = vec![NONE; ne * npairs];
        let mut gdofs = vec![NONE; nd];
        for e in 0..ne {
            for (a, &node) in conn[e * npe..(e + 1) * npe].iter().enumerate() {
                for c in 0..dim {
                    gdofs[a * dim + c] = free_of[node as usize * dim + c];
                }
            }
            let out = &mut slots[e * npairs..(e + 1) * npairs];
            let mut k = 0;
            for p in 0..nd {
                for q in 0..=p {
                    let (gp, gq) = (gdofs[p], gdofs[q]);
                    if gp != NONE && gq != NONE {
                        let (r, c) = if gp >= gq { (gp, gq) } else { (gq, gp) };
                        out[k] = pattern.slot(r as usize, c as usize).expect("pattern covers element") as u32;
                    }
                    k += 1;
                }
            }
        }
        Ok(DofMap {
            dim,
            nodes_per_elem: npe,
            n_nodes,
            n_free,
            conn,
            free_of,
            pattern,
            slots,
            symbolic: OnceLock::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_free(&self) -> usize {
        self.n_free
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_elements(&self) -> usize {
        self.conn.len() / self.nodes_per_elem
    }

    pub fn pattern(&self) -> &Arc<SymPattern> {
        &self.pattern
    }

    pub fn element_nodes(&self, e: usize) -> &[u32] {
        &self.conn[e * self.nodes_per_elem..(e + 1) * self.nodes_per_elem]
    }

    /// Free index of global dof `g`, if unconstrained.
    pub fn free_index(&self, g: usize) -> Option<usize> {
        let f = self.free_of[g];
        (f != NONE).then_some(f as usize)
    }

    pub fn symbolic(&self) -> Result<Arc<SymbolicFactor>> {
        self.symbolic
            .get_or_init(|| SymbolicFactor::new(self.pattern.clone()).map(Arc::new).map_err(|e| e.to_string()))
            .clone()
            .map_err(Error::Solver)
    }

    /// Assembles `sum_e scale_e K_{mat_e}` into lower-triangle values.
    /// `material(e)` returns `(index into kes, scale)`; scale 0 skips.
    pub fn assemble(&self, kes: &[Vec<f64>], material: impl Fn(usize) -> (usize, f64)) -> Vec<f64> {
        let nd = self.nodes_per_elem * self.dim;
        let npairs = nd * (nd + 1) / 2;
        let mut values = vec![0.0; self.pattern.nnz()];
        for e in 0..self.n_elements() {
            let (m, s) = material(e);
            if s == 0.0 {
                continue;
            }
            let ke = &kes[m];
            let sl = &self.slots[e * npairs..(e + 1) * npairs];
            let mut k = 0;
            for p in 0..nd {
                for q in 0..=p {
                    let slot = sl[k];
                    if slot != NONE {
                        values[slot as usize] += s * ke[p * nd + q];
                    }
                    k += 1;
                }
            }
        }
        values
    }

    fn local_global(&self, e: usize, p: usize) -> u32 {
        let node = self.conn[e * self.nodes_per_elem + p / self.dim];
        self.free_of[node as usize * self.dim + p % self.dim]
    }

    /// Scatters per-element vectors `scale_e * fe_{mat_e}` into the free
    /// right-hand side `out` (length `n_free`).
    pub fn assemble_vector(&self, fes: &[Vec<f64>], material: impl Fn(usize) -> (usize, f64), out: &mut [f64]) {
        let nd = self.nodes_per_elem * self.dim;
        for e in 0..self.n_elements() {
            let (m, s) = material(e);
            if s == 0.0 {
                continue;
            }
            let fe = &fes[m];
            for p in 0..nd {
                let g = self.local_global(e, p);
                if g != NONE {
                    out[g as usize] += s * fe[p];
                }
            }
        }
    }

    /// Right-hand-side correction `-K_fc u_c` for prescribed values in the
    /// full nodal vector `u_full` (only its constrained entries are read).
    pub fn lifting(&self, kes: &[Vec<f64>], material: impl Fn(usize) -> (usize, f64), u_full: &[f64]) -> Vec<f64> {
        let nd = self.nodes_per_elem * self.dim;
        let mut out = vec![0.0; self.n_free];
        let mut ue = vec![0.0; nd];
        for e in 0..self.n_elements() {
            let mut any = false;
            for p in 0..nd {
                let node = self.conn[e * self.nodes_per_elem + p / self.dim] as usize;
                let g = node * self.dim + p % self.dim;
                ue[p] = if self.free_of[g] == NONE { u_full[g] } else { 0.0 };
                any |= ue[p] != 0.0;
            }
            if !any {
                continue;
            }
            let (m, s) = material(e);
            let ke = &kes[m];
            for p in 0..nd {
                let g = self.local_global(e, p);
                if g != NONE {
                    let kv: f64 = (0..nd).map(|q| ke[p * nd + q] * ue[q]).sum();
                    out[g as usize] -= s * kv;
                }
            }
        }
        out
    }

    /// Gathers the element's nodal vector from a full nodal field.
    pub fn gather(&self, e: usize, u_full: &[f64], ue: &mut [f64]) {
        for (a, &node) in self.element_nodes(e).iter().enumerate() {
            for c in 0..self.dim {
                ue[a * self.dim + c] = u_full[node as usize * self.dim + c];
            }
        }
    }

    /// Expands a free solution into a full nodal vector, with `fixed` values
    /// (full-length) at constrained dofs.
    pub fn expand(&self, free: &[f64], fixed: Option<&[f64]>) -> Vec<f64> {
        let mut u = vec![0.0; self.n_nodes * self.dim];
        for (g, &f) in self.free_of.iter().enumerate() {
            if f != NONE {
                u[g] = free[f as usize];
            } else if let Some(fx) = fixed {
                u[g] = fx[g];
            }
        }
        u
    }
}

/// Voigt strain matrix row count helper for tests and exports.
pub fn voigt_len(dim: usize) -> usize {
    voigt_pairs(dim).len()
}
