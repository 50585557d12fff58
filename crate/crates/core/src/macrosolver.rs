//! Macroscopic FE analysis on a regular Q4/H8 grid with one constant tensor
//! per zone, plus the zoning partition itself.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{full_tensor, BoxGrid, DofMap, ElementBasis};
use crate::mapping::Mat;
use crate::sparse::{solve_spd_to, RESIDUAL_TOLERANCE};
use crate::tensor::{voigt_pairs, voigt_size, ElasticTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Face {
    Lo,
    Hi,
}

/// Mirror-plane boundary condition on a domain face.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MirrorKind {
    /// Mirror-symmetric response: zero normal displacement.
    Symmetric,
    /// Mirror-antisymmetric response (load normal to the plane): zero
    /// tangential displacement.
    Antisymmetric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub struct Mirror {
    pub axis: usize,
    pub face: Face,
    pub kind: MirrorKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum Constraint {
    /// Components fixed to `value` on every node of a face.
    Face { axis: usize, face: Face, components: Vec<usize>, value: f64 },
    /// `u = gradient x + offset` on every boundary node (all components).
    BoundaryLinear { gradient: Vec<Vec<f64>>, offset: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum Load {
    /// Uniform traction (force per area) on a face, consistently lumped.
    FaceTraction { axis: usize, face: Face, traction: Vec<f64> },
    /// Force applied at the node nearest to `position`.
    Point { position: Vec<f64>, force: Vec<f64> },
    /// Total force spread uniformly over the node line through `position`
    /// running along `axis`.
    Line { axis: usize, position: Vec<f64>, force: Vec<f64> },
}

/// Boundary-value problem on an axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroProblem {
    pub dim: usize,
    pub origin: Vec<f64>,
    pub size: Vec<f64>,
    pub mesh: Vec<usize>,
    pub constraints: Vec<Constraint>,
    pub loads: Vec<Load>,
    #[serde(default)]
    pub mirror: Option<Mirror>,
    /// Ratio of the full structure's compliance to the modelled part's
    /// (2 for a half model, 1 otherwise).
    #[serde(default = "one")]
    pub compliance_factor: f64,
}

fn one() -> f64 {
    1.0
}

impl MacroProblem {
    pub fn grid(&self) -> Result<BoxGrid> {
        BoxGrid::new(self.dim, &self.mesh, &self.origin, &self.size)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.constraints.is_empty() {
            return Err(Error::param("problem needs at least one Dirichlet constraint"));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        for l in &self.loads {
            let ok = match l {
                Load::FaceTraction { axis, traction, .. } => {
                    *axis < self.dim && traction.len() == self.dim && finite(traction)
                }
                Load::Point { position, force } => {
                    position.len() == self.dim && force.len() == self.dim && finite(force)
                }
                Load::Line { axis, position, force } => {
                    *axis < self.dim && position.len() == self.dim && force.len() == self.dim && finite(force)
                }
            };
            if !ok {
                return Err(Error::param(format!("malformed load {l:?}")));
            }
        }
        for c in &self.constraints {
            match c {
                Constraint::Face { axis, components, .. } => {
                    if *axis >= self.dim || components.iter().any(|&k| k >= self.dim) {
                        return Err(Error::param(format!("malformed constraint {c:?}")));
                    }
                }
                Constraint::BoundaryLinear { gradient, offset } => {
                    if gradient.len() != self.dim
                        || gradient.iter().any(|r| r.len() != self.dim)
                        || offset.len() != self.dim
                    {
                        return Err(Error::param("malformed linear boundary constraint"));
                    }
                }
            }
        }
        if let Some(m) = &self.mirror {
            if m.axis >= self.dim {
                return Err(Error::param("mirror axis out of range"));
            }
        }
        Ok(())
    }

    /// The same problem with every load scaled by `s`.
    pub fn with_load_scale(&self, s: f64) -> MacroProblem {
        let mut p = self.clone();
        for l in &mut p.loads {
            let f = match l {
                Load::FaceTraction { traction, .. } => traction,
                Load::Point { force, .. } | Load::Line { force, .. } => force,
            };
            f.iter_mut().for_each(|x| *x *= s);
        }
        p
    }
}

/// Partition of the element grid into equal boxes ("zones").
#[derive(Clone, Debug, PartialEq)]
pub struct Zoning {
    dim: usize,
    counts: [usize; 3],
    mesh: [usize; 3],
    points: Vec<[f64; 3]>,
    element_zone: Vec<u32>,
}

impl Zoning {
    pub fn counts(&self) -> &[usize] {
        &self.counts[..self.dim]
    }

    pub fn k(&self) -> usize {
        self.counts[..self.dim].iter().product()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Representative points (zone centers), one per zone.
    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn point_vecs(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(|p| p[..self.dim].to_vec()).collect()
    }

    pub fn element_zone(&self) -> &[u32] {
        &self.element_zone
    }

    pub fn zone_of_element(&self, e: usize) -> usize {
        self.element_zone[e] as usize
    }

    /// Elements per zone along each axis.
    pub fn zone_extent(&self) -> [usize; 3] {
        let mut z = [1; 3];
        for d in 0..self.dim {
            z[d] = self.mesh[d] / self.counts[d];
        }
        z
    }

    fn zone_ijk(&self, z: usize) -> [usize; 3] {
        let c = self.counts;
        [z % c[0], (z / c[0]) % c[1], z / (c[0] * c[1])]
    }

    /// Zone of a refined partition containing this zone's child `z`.
    pub fn parent_in(&self, coarse: &Zoning, z: usize) -> usize {
        let ijk = self.zone_ijk(z);
        let mut p = [0; 3];
        for d in 0..self.dim {
            p[d] = ijk[d] * coarse.counts[d] / self.counts[d];
        }
        p[0] + coarse.counts[0] * (p[1] + coarse.counts[1] * p[2])
    }

    /// Splits every zone in two along each axis.
    pub fn refine(&self, grid: &BoxGrid) -> Result<Zoning> {
        let c: Vec<usize> = self.counts().iter().map(|c| 2 * c).collect();
        partition(grid, &c)
    }
}

/// Splits `grid` into `counts` equal zones; each must hold a whole number of
/// elements per axis.
pub fn partition(grid: &BoxGrid, counts: &[usize]) -> Result<Zoning> {
    let dim = grid.dim;
    if counts.len() != dim {
        return Err(Error::Partition(format!("{} zone counts for a {dim}D mesh", counts.len())));
    }
    let mut c = [1usize; 3];
    let mut ext = [1usize; 3];
    for d in 0..dim {
        if counts[d] == 0 || !grid.counts[d].is_multiple_of(counts[d]) {
            return Err(Error::Partition(format!(
                "{} zones do not divide {} elements along axis {}",
                counts[d],
                grid.counts[d],
                d + 1
            )));
        }
        c[d] = counts[d];
        ext[d] = grid.counts[d] / counts[d];
    }
    let k: usize = c[..dim].iter().product();
    let h = grid.h();
    let points = (0..k)
        .map(|z| {
            let ijk = [z % c[0], (z / c[0]) % c[1], z / (c[0] * c[1])];
            let mut x = [0.0; 3];
            for d in 0..dim {
                x[d] = grid.origin[d] + (ijk[d] as f64 + 0.5) * ext[d] as f64 * h[d];
            }
            x
        })
        .collect();
    let element_zone = (0..grid.n_elements())
        .map(|e| {
            let ijk = grid.element_ijk(e);
            let z = [ijk[0] / ext[0], ijk[1] / ext[1], if dim == 3 { ijk[2] / ext[2] } else { 0 }];
            (z[0] + c[0] * (z[1] + c[1] * z[2])) as u32
        })
        .collect();
    Ok(Zoning { dim, counts: c, mesh: grid.counts, points, element_zone })
}

/// Solved macroscopic state.
#[derive(Clone, Debug)]
pub struct MacroSolution {
    pub dim: usize,
    /// Full nodal displacements, node-major.
    pub u: Vec<f64>,
    /// Strain energy form `sum_e int eps^T C eps`.
    pub compliance: f64,
    /// `f . u` (plus reaction work of nonzero prescribed displacements).
    pub external_work: f64,
    /// Per element `(1/|e|) int eps^T C eps`.
    pub element_energy: Vec<f64>,
    /// Per element Voigt stress at the centroid.
    pub element_stress: Vec<[f64; 6]>,
    /// Per element engineering strain at the centroid.
    pub element_strain: Vec<[f64; 6]>,
    /// Per material group (zone): `sum_{e in group} int eps eps^T`.
    pub group_moments: Vec<[[f64; 6]; 6]>,
    pub residual: f64,
}

/// Meshed problem ready for repeated solves with different zone tensors.
#[derive(Debug)]
pub struct MacroModel {
    problem: MacroProblem,
    grid: BoxGrid,
    basis: ElementBasis,
    dofmap: DofMap,
    load: Vec<f64>,
    prescribed: Vec<f64>,
    tolerance: f64,
}

impl MacroModel {
    pub fn new(problem: &MacroProblem) -> Result<Self> {
        problem.validate()?;
        let grid = problem.grid()?;
        let dim = grid.dim;
        let nn = grid.n_nodes();
        let ncount = grid.node_counts();
        let on_face = |node: usize, axis: usize, face: Face| {
            let ijk = grid.node_ijk(node);
            match face {
                Face::Lo => ijk[axis] == 0,
                Face::Hi => ijk[axis] == ncount[axis] - 1,
            }
        };
        let on_boundary = |node: usize| {
            let ijk = grid.node_ijk(node);
            (0..dim).any(|d| ijk[d] == 0 || ijk[d] == ncount[d] - 1)
        };

        let mut constrained = vec![false; nn * dim];
        let mut prescribed = vec![0.0; nn * dim];
        for c in &problem.constraints {
            match c {
                Constraint::Face { axis, face, components, value } => {
                    for node in 0..nn {
                        if on_face(node, *axis, *face) {
                            for &k in components {
                                constrained[node * dim + k] = true;
                                prescribed[node * dim + k] = *value;
                            }
                        }
                    }
                }
                Constraint::BoundaryLinear { gradient, offset } => {
                    for node in 0..nn {
                        if on_boundary(node) {
                            let x = grid.node_coord(node);
                            for i in 0..dim {
                                constrained[node * dim + i] = true;
                                prescribed[node * dim + i] =
                                    offset[i] + (0..dim).map(|j| gradient[i][j] * x[j]).sum::<f64>();
                            }
                        }
                    }
                }
            }
        }
        if let Some(m) = &problem.mirror {
            for node in 0..nn {
                if on_face(node, m.axis, m.face) {
                    for k in 0..dim {
                        let fix = match m.kind {
                            MirrorKind::Symmetric => k == m.axis,
                            MirrorKind::Antisymmetric => k != m.axis,
                        };
                        if fix {
                            constrained[node * dim + k] = true;
                            prescribed[node * dim + k] = 0.0;
                        }
                    }
                }
            }
        }

        let load = nodal_loads(problem, &grid)?;
        let dofmap = DofMap::new(dim, nn, grid.element_connectivity(), &constrained)?;
        let basis = ElementBasis::new(dim, grid.h());
        Ok(MacroModel {
            problem: problem.clone(),
            grid,
            basis,
            dofmap,
            load,
            prescribed,
            tolerance: RESIDUAL_TOLERANCE,
        })
    }

    /// Overrides the relative residual the linear solve must reach.
    /// High-contrast systems with a million unknowns stall near 1e-9 in
    /// double precision.
    pub fn with_residual_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn problem(&self) -> &MacroProblem {
        &self.problem
    }

    pub fn grid(&self) -> &BoxGrid {
        &self.grid
    }

    pub fn basis(&self) -> &ElementBasis {
        &self.basis
    }

    pub fn n_free(&self) -> usize {
        self.dofmap.n_free()
    }

    /// Consistent nodal load vector (full, node-major).
    pub fn load(&self) -> &[f64] {
        &self.load
    }

    /// Solves with `tensors[group[e]]` on element `e`.
    pub fn solve(&self, tensors: &[ElasticTensor], group: &[u32]) -> Result<MacroSolution> {
        let dim = self.grid.dim;
        let ne = self.grid.n_elements();
        if group.len() != ne {
            return Err(Error::dim(ne, group.len()));
        }
        if let Some(&g) = group.iter().find(|&&g| g as usize >= tensors.len()) {
            return Err(Error::MissingRecord(g as usize));
        }
        for t in tensors {
            if t.dim() != dim {
                return Err(Error::dim(dim, t.dim()));
            }
        }
        let kes: Vec<Vec<f64>> = tensors.iter().map(|t| self.basis.stiffness(&full_tensor(t))).collect();
        let material = |e: usize| (group[e] as usize, 1.0);
        let values = self.dofmap.assemble(&kes, material);
        let n_free = self.dofmap.n_free();
        let mut rhs = vec![0.0; n_free];
        for (g, &f) in self.load.iter().enumerate() {
            if let Some(k) = self.dofmap.free_index(g) {
                rhs[k] += f;
            }
        }
        let has_prescribed = self.prescribed.iter().any(|&x| x != 0.0);
        if has_prescribed {
            for (r, l) in rhs.iter_mut().zip(self.dofmap.lifting(&kes, material, &self.prescribed)) {
                *r += l;
            }
        }
        let residual = if n_free > 0 {
            let symbolic = self.dofmap.symbolic()?;
            solve_spd_to(&symbolic, &values, &mut rhs, 1, self.tolerance)?
        } else {
            0.0
        };
        let u = self.dofmap.expand(&rhs, Some(&self.prescribed));
        Ok(self.postprocess(u, tensors, group, residual))
    }

    fn postprocess(&self, u: Vec<f64>, tensors: &[ElasticTensor], group: &[u32], residual: f64) -> MacroSolution {
        let dim = self.grid.dim;
        let m = voigt_size(dim);
        let ne = self.grid.n_elements();
        let nd = self.basis.ndof();
        let vol = self.basis.volume();
        let center = self.basis.center_gradients();
        let mut ue = vec![0.0; nd];
        let mut sol = MacroSolution {
            dim,
            compliance: 0.0,
            external_work: 0.0,
            element_energy: vec![0.0; ne],
            element_stress: vec![[0.0; 6]; ne],
            element_strain: vec![[0.0; 6]; ne],
            group_moments: vec![[[0.0; 6]; 6]; tensors.len()],
            residual,
            u: Vec::new(),
        };
        for e in 0..ne {
            self.dofmap.gather(e, &u, &mut ue);
            let g = group[e] as usize;
            let t = &tensors[g];
            let mut energy = 0.0;
            for gp in self.basis.gauss() {
                let eps = self.basis.strain(&gp.grad, &ue);
                let s = t.apply(&eps);
                energy += gp.weight * (0..m).map(|a| eps[a] * s[a]).sum::<f64>();
                let mom = &mut sol.group_moments[g];
                for a in 0..m {
                    for b in 0..m {
                        mom[a][b] += gp.weight * eps[a] * eps[b];
                    }
                }
            }
            sol.compliance += energy;
            sol.element_energy[e] = energy / vol;
            let eps = self.basis.strain(&center, &ue);
            sol.element_strain[e] = eps;
            sol.element_stress[e] = t.apply(&eps);
        }
        // f . u, plus the work of reactions at prescribed nonzero values.
        let mut work: f64 = self.load.iter().zip(&u).map(|(f, x)| f * x).sum();
        if self.prescribed.iter().any(|&x| x != 0.0) {
            work = sol.compliance;
        }
        sol.external_work = work;
        sol.u = u;
        sol
    }
}

fn nearest_index(x: f64, origin: f64, h: f64, count: usize) -> usize {
    (((x - origin) / h).round().max(0.0) as usize).min(count)
}

/// Trapezoid weight of node `i` on a 1D line of `count` segments of length `h`.
fn trapezoid(i: usize, count: usize, h: f64) -> f64 {
    if i == 0 || i == count {
        0.5 * h
    } else {
        h
    }
}

fn nodal_loads(problem: &MacroProblem, grid: &BoxGrid) -> Result<Vec<f64>> {
    let dim = grid.dim;
    let h = grid.h();
    let mut f = vec![0.0; grid.n_nodes() * dim];
    for load in &problem.loads {
        match load {
            Load::FaceTraction { axis, face, traction } => {
                let fixed = match face {
                    Face::Lo => 0,
                    Face::Hi => grid.counts[*axis],
                };
                for node in 0..grid.n_nodes() {
                    let ijk = grid.node_ijk(node);
                    if ijk[*axis] != fixed {
                        continue;
                    }
                    let area: f64 =
                        (0..dim).filter(|&d| d != *axis).map(|d| trapezoid(ijk[d], grid.counts[d], h[d])).product();
                    for k in 0..dim {
                        f[node * dim + k] += traction[k] * area;
                    }
                }
            }
            Load::Point { position, force } => {
                let mut ijk = [0; 3];
                for d in 0..dim {
                    ijk[d] = nearest_index(position[d], grid.origin[d], h[d], grid.counts[d]);
                }
                let node = grid.node_index(ijk);
                for k in 0..dim {
                    f[node * dim + k] += force[k];
                }
            }
            Load::Line { axis, position, force } => {
                let mut ijk = [0; 3];
                for d in 0..dim {
                    if d != *axis {
                        ijk[d] = nearest_index(position[d], grid.origin[d], h[d], grid.counts[d]);
                    }
                }
                let count = grid.counts[*axis];
                let len = grid.size[*axis];
                for i in 0..=count {
                    ijk[*axis] = i;
                    let node = grid.node_index(ijk);
                    let w = trapezoid(i, count, h[*axis]) / len;
                    for k in 0..dim {
                        f[node * dim + k] += force[k] * w;
                    }
                }
            }
        }
    }
    Ok(f)
}

/// Builds the model and solves in one call, with zone tensors assigned
/// through `zoning`.
pub fn assemble_solve(problem: &MacroProblem, tensors: &[ElasticTensor], zoning: &Zoning) -> Result<MacroSolution> {
    if tensors.len() != zoning.k() {
        return Err(Error::dim(zoning.k(), tensors.len()));
    }
    MacroModel::new(problem)?.solve(tensors, zoning.element_zone())
}

/// Energy-form compliance `sum_I <C^I, M^I>` from zone strain moments.
pub fn compliance(solution: &MacroSolution, tensors: &[ElasticTensor]) -> f64 {
    tensors.iter().zip(&solution.group_moments).map(|(t, m)| t.contract(m)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrincipalStress {
    pub value: f64,
    /// Unit direction of the largest principal stress.
    pub direction: [f64; 3],
}

/// Largest principal stress of a Voigt stress vector.
pub fn principal_stress(dim: usize, s: &[f64; 6]) -> PrincipalStress {
    if dim == 2 {
        let c = 0.5 * (s[0] + s[1]);
        let r = (0.25 * (s[0] - s[1]).powi(2) + s[2] * s[2]).sqrt();
        let theta = 0.5 * (2.0 * s[2]).atan2(s[0] - s[1]);
        PrincipalStress { value: c + r, direction: [theta.cos(), theta.sin(), 0.0] }
    } else {
        let mut m = Matrix3::zeros();
        for (a, &(i, j)) in voigt_pairs(3).iter().enumerate() {
            m[(i, j)] = s[a];
            m[(j, i)] = s[a];
        }
        let eig = SymmetricEigen::new(m);
        let k = eig.eigenvalues.imax();
        let v = eig.eigenvectors.column(k);
        PrincipalStress { value: eig.eigenvalues[k], direction: [v[0], v[1], v[2]] }
    }
}

pub fn principal_stress_field(solution: &MacroSolution) -> Vec<PrincipalStress> {
    solution.element_stress.iter().map(|s| principal_stress(solution.dim, s)).collect()
}

/// Convenience: a Dirichlet face clamp on all components.
pub fn clamp_face(dim: usize, axis: usize, face: Face) -> Constraint {
    Constraint::Face { axis, face, components: (0..dim).collect(), value: 0.0 }
}

/// Linear boundary data `u = G x` as a constraint.
pub fn linear_boundary(dim: usize, g: &Mat) -> Constraint {
    Constraint::BoundaryLinear { gradient: (0..dim).map(|i| g[i][..dim].to_vec()).collect(), offset: vec![0.0; dim] }
}
