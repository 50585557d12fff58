//! Method of Moving Asymptotes (Svanberg 1987) with the primal-dual
//! interior-point subproblem solver of Svanberg's reference implementation.
//!
//! Problem form: minimize `f0(x) + a0 z + sum_i (c_i y_i + d_i y_i^2 / 2)`
//! subject to `f_i(x) - a_i z - y_i <= 0`, box bounds, `y, z >= 0`. The
//! artificial variables `y` keep every subproblem feasible; a step with
//! `y > 0` is a feasibility-restoration step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmaParams {
    /// Largest step per iteration as a fraction of the box width.
    pub move_limit: f64,
    pub asyinit: f64,
    pub asyincr: f64,
    pub asydecr: f64,
    pub a0: f64,
    /// Penalty on the artificial variables (same for every constraint).
    pub c: f64,
    pub d: f64,
}

impl Default for MmaParams {
    fn default() -> Self {
        MmaParams { move_limit: 0.1, asyinit: 0.5, asyincr: 1.2, asydecr: 0.7, a0: 1.0, c: 1000.0, d: 1.0 }
    }
}

/// Optimizer memory between iterations.
#[derive(Clone, Debug)]
pub struct MmaState {
    pub n: usize,
    pub m: usize,
    pub xmin: Vec<f64>,
    pub xmax: Vec<f64>,
    pub low: Vec<f64>,
    pub upp: Vec<f64>,
    pub xold1: Vec<f64>,
    pub xold2: Vec<f64>,
    pub iter: usize,
    pub params: MmaParams,
}

#[derive(Clone, Debug)]
pub struct MmaStep {
    pub x: Vec<f64>,
    /// Artificial variables of the subproblem solution.
    pub y: Vec<f64>,
    pub restoration: bool,
}

impl MmaState {
    pub fn new(x0: &[f64], xmin: Vec<f64>, xmax: Vec<f64>, m: usize, params: MmaParams) -> Result<Self> {
        let n = x0.len();
        if xmin.len() != n || xmax.len() != n {
            return Err(Error::dim(n, xmin.len().min(xmax.len())));
        }
        if xmin.iter().zip(&xmax).any(|(a, b)| !(a < b)) {
            return Err(Error::param("MMA box needs xmin < xmax"));
        }
        if x0.iter().zip(xmin.iter().zip(&xmax)).any(|(x, (a, b))| x < a || x > b) {
            return Err(Error::param("MMA start point outside the box"));
        }
        if !(params.move_limit > 0.0) {
            return Err(Error::param("MMA move limit must be positive"));
        }
        Ok(MmaState {
            n,
            m,
            low: xmin.clone(),
            upp: xmax.clone(),
            xmin,
            xmax,
            xold1: x0.to_vec(),
            xold2: x0.to_vec(),
            iter: 0,
            params,
        })
    }

    /// One MMA iteration from `x` with objective gradient `df0`, constraint
    /// values `fval` (feasible when <= 0) and constraint gradients `dfdx`
    /// (one row per constraint).
    pub fn update(&mut self, x: &[f64], df0: &[f64], fval: &[f64], dfdx: &[Vec<f64>]) -> Result<MmaStep> {
        let (n, m) = (self.n, self.m);
        if x.len() != n || df0.len() != n {
            return Err(Error::dim(n, x.len().min(df0.len())));
        }
        if fval.len() != m || dfdx.len() != m || dfdx.iter().any(|r| r.len() != n) {
            return Err(Error::dim(m, fval.len()));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(x) || !finite(df0) || !finite(fval) || !dfdx.iter().all(|r| finite(r)) {
            return Err(Error::param("non-finite MMA input"));
        }
        self.iter += 1;
        let p = self.params.clone();
        let raa0 = 1e-5;
        let albefa = 0.1;

        let width: Vec<f64> = (0..n).map(|j| self.xmax[j] - self.xmin[j]).collect();
        if self.iter <= 2 {
            for j in 0..n {
                self.low[j] = x[j] - p.asyinit * width[j];
                self.upp[j] = x[j] + p.asyinit * width[j];
            }
        } else {
            for j in 0..n {
                let zzz = (x[j] - self.xold1[j]) * (self.xold1[j] - self.xold2[j]);
                let factor = if zzz > 0.0 {
                    p.asyincr
                } else if zzz < 0.0 {
                    p.asydecr
                } else {
                    1.0
                };
                let low = x[j] - factor * (self.xold1[j] - self.low[j]);
                let upp = x[j] + factor * (self.upp[j] - self.xold1[j]);
                self.low[j] = low.clamp(x[j] - 10.0 * width[j], x[j] - 0.01 * width[j]);
                self.upp[j] = upp.clamp(x[j] + 0.01 * width[j], x[j] + 10.0 * width[j]);
            }
        }

        let mut alfa = vec![0.0; n];
        let mut beta = vec![0.0; n];
        let mut p0 = vec![0.0; n];
        let mut q0 = vec![0.0; n];
        let mut pm = vec![vec![0.0; n]; m];
        let mut qm = vec![vec![0.0; n]; m];
        let mut b = vec![0.0; m];
        for j in 0..n {
            alfa[j] =
                (self.low[j] + albefa * (x[j] - self.low[j])).max(x[j] - p.move_limit * width[j]).max(self.xmin[j]);
            beta[j] =
                (self.upp[j] - albefa * (self.upp[j] - x[j])).min(x[j] + p.move_limit * width[j]).min(self.xmax[j]);
            let xmami_inv = 1.0 / width[j].max(1e-5);
            let ux1 = self.upp[j] - x[j];
            let xl1 = x[j] - self.low[j];
            let (ux2, xl2) = (ux1 * ux1, xl1 * xl1);
            let pos = df0[j].max(0.0);
            let neg = (-df0[j]).max(0.0);
            let pq = 0.001 * (pos + neg) + raa0 * xmami_inv;
            p0[j] = (pos + pq) * ux2;
            q0[j] = (neg + pq) * xl2;
            for i in 0..m {
                let g = dfdx[i][j];
                let pos = g.max(0.0);
                let neg = (-g).max(0.0);
                let pq = 0.001 * (pos + neg) + raa0 * xmami_inv;
                pm[i][j] = (pos + pq) * ux2;
                qm[i][j] = (neg + pq) * xl2;
                b[i] += pm[i][j] / ux1 + qm[i][j] / xl1;
            }
        }
        for i in 0..m {
            b[i] -= fval[i];
        }
        let sub = Subproblem {
            n,
            m,
            low: &self.low,
            upp: &self.upp,
            alfa: &alfa,
            beta: &beta,
            p0: &p0,
            q0: &q0,
            p: &pm,
            q: &qm,
            b: &b,
            a0: p.a0,
            c: p.c,
            d: p.d,
        };
        let (xnew, y) = sub.solve()?;
        self.xold2 = std::mem::replace(&mut self.xold1, x.to_vec());
        let restoration = y.iter().any(|&v| v > 1e-6);
        Ok(MmaStep { x: xnew, y, restoration })
    }
}

struct Subproblem<'a> {
    n: usize,
    m: usize,
    low: &'a [f64],
    upp: &'a [f64],
    alfa: &'a [f64],
    beta: &'a [f64],
    p0: &'a [f64],
    q0: &'a [f64],
    p: &'a [Vec<f64>],
    q: &'a [Vec<f64>],
    b: &'a [f64],
    a0: f64,
    c: f64,
    d: f64,
}

#[derive(Clone)]
struct Point {
    x: Vec<f64>,
    y: Vec<f64>,
    z: f64,
    lam: Vec<f64>,
    xsi: Vec<f64>,
    eta: Vec<f64>,
    mu: Vec<f64>,
    zet: f64,
    s: Vec<f64>,
}

impl Subproblem<'_> {
    /// Residual vector of the perturbed KKT system at `pt`.
    fn residual(&self, pt: &Point, epsi: f64) -> Vec<f64> {
        let (n, m) = (self.n, self.m);
        let mut r = Vec::with_capacity(2 * n + 4 * m + 2);
        let mut gvec = vec![0.0; m];
        for j in 0..n {
            let ux1 = self.upp[j] - pt.x[j];
            let xl1 = pt.x[j] - self.low[j];
            let mut plam = self.p0[j];
            let mut qlam = self.q0[j];
            for i in 0..m {
                plam += self.p[i][j] * pt.lam[i];
                qlam += self.q[i][j] * pt.lam[i];
                gvec[i] += self.p[i][j] / ux1 + self.q[i][j] / xl1;
            }
            let dpsidx = plam / (ux1 * ux1) - qlam / (xl1 * xl1);
            r.push(dpsidx - pt.xsi[j] + pt.eta[j]);
        }
        for i in 0..m {
            r.push(self.c + self.d * pt.y[i] - pt.mu[i] - pt.lam[i]);
        }
        // a_i = 0 for every constraint.
        r.push(self.a0 - pt.zet);
        for i in 0..m {
            r.push(gvec[i] - pt.y[i] + pt.s[i] - self.b[i]);
        }
        for j in 0..n {
            r.push(pt.xsi[j] * (pt.x[j] - self.alfa[j]) - epsi);
        }
        for j in 0..n {
            r.push(pt.eta[j] * (self.beta[j] - pt.x[j]) - epsi);
        }
        for i in 0..m {
            r.push(pt.mu[i] * pt.y[i] - epsi);
        }
        r.push(pt.zet * pt.z - epsi);
        for i in 0..m {
            r.push(pt.lam[i] * pt.s[i] - epsi);
        }
        r
    }

    fn solve(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, m) = (self.n, self.m);
        let epsimin = 1e-7;
        let mut epsi = 1.0;
        let mut pt = Point {
            x: (0..n).map(|j| 0.5 * (self.alfa[j] + self.beta[j])).collect(),
            y: vec![1.0; m],
            z: 1.0,
            lam: vec![1.0; m],
            xsi: (0..n).map(|j| (1.0 / (0.5 * (self.beta[j] - self.alfa[j]))).max(1.0)).collect(),
            eta: (0..n).map(|j| (1.0 / (0.5 * (self.beta[j] - self.alfa[j]))).max(1.0)).collect(),
            mu: vec![(0.5 * self.c).max(1.0); m],
            zet: 1.0,
            s: vec![1.0; m],
        };
        let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let maxabs = |r: &[f64]| r.iter().fold(0.0f64, |a, v| a.max(v.abs()));

        while epsi > epsimin {
            let mut res = self.residual(&pt, epsi);
            let mut resnorm = norm(&res);
            let mut resmax = maxabs(&res);
            let mut inner = 0;
            while resmax > 0.9 * epsi && inner < 200 {
                inner += 1;
                let dir = self.newton_direction(&pt, epsi)?;
                // Step to the boundary of the positive orthant, damped.
                let mut stmx: f64 = 1.0;
                let ratio = |d: f64, v: f64| -1.01 * d / v;
                for i in 0..m {
                    stmx = stmx.max(ratio(dir.y[i], pt.y[i])).max(ratio(dir.lam[i], pt.lam[i]));
                    stmx = stmx.max(ratio(dir.mu[i], pt.mu[i])).max(ratio(dir.s[i], pt.s[i]));
                }
                stmx = stmx.max(ratio(dir.z, pt.z)).max(ratio(dir.zet, pt.zet));
                for j in 0..n {
                    stmx = stmx.max(ratio(dir.xsi[j], pt.xsi[j])).max(ratio(dir.eta[j], pt.eta[j]));
                    stmx = stmx.max(-1.01 * dir.x[j] / (pt.x[j] - self.alfa[j]));
                    stmx = stmx.max(1.01 * dir.x[j] / (self.beta[j] - pt.x[j]));
                }
                let mut steg = 1.0 / stmx;
                let old = pt.clone();
                let mut tries = 0;
                let mut resnew = 2.0 * resnorm;
                while resnew > resnorm && tries < 50 {
                    tries += 1;
                    pt = old.clone();
                    let ax = |v: &mut Vec<f64>, d: &Vec<f64>| v.iter_mut().zip(d).for_each(|(a, b)| *a += steg * b);
                    ax(&mut pt.x, &dir.x);
                    ax(&mut pt.y, &dir.y);
                    pt.z += steg * dir.z;
                    ax(&mut pt.lam, &dir.lam);
                    ax(&mut pt.xsi, &dir.xsi);
                    ax(&mut pt.eta, &dir.eta);
                    ax(&mut pt.mu, &dir.mu);
                    pt.zet += steg * dir.zet;
                    ax(&mut pt.s, &dir.s);
                    res = self.residual(&pt, epsi);
                    resnew = norm(&res);
                    steg *= 0.5;
                }
                resnorm = resnew;
                resmax = maxabs(&res);
            }
            epsi *= 0.1;
        }
        if pt.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver("MMA subproblem diverged".into()));
        }
        Ok((pt.x, pt.y))
    }

    fn newton_direction(&self, pt: &Point, epsi: f64) -> Result<Point> {
        let (n, m) = (self.n, self.m);
        let mut delx = vec![0.0; n];
        let mut diagx = vec![0.0; n];
        let mut gg = DMatrix::<f64>::zeros(m, n);
        let mut gvec = vec![0.0; m];
        for j in 0..n {
            let ux1 = self.upp[j] - pt.x[j];
            let xl1 = pt.x[j] - self.low[j];
            let (ux2, xl2) = (ux1 * ux1, xl1 * xl1);
            let mut plam = self.p0[j];
            let mut qlam = self.q0[j];
            for i in 0..m {
                plam += self.p[i][j] * pt.lam[i];
                qlam += self.q[i][j] * pt.lam[i];
                gvec[i] += self.p[i][j] / ux1 + self.q[i][j] / xl1;
                gg[(i, j)] = self.p[i][j] / ux2 - self.q[i][j] / xl2;
            }
            let dpsidx = plam / ux2 - qlam / xl2;
            delx[j] = dpsidx - epsi / (pt.x[j] - self.alfa[j]) + epsi / (self.beta[j] - pt.x[j]);
            diagx[j] = 2.0 * (plam / (ux2 * ux1) + qlam / (xl2 * xl1))
                + pt.xsi[j] / (pt.x[j] - self.alfa[j])
                + pt.eta[j] / (self.beta[j] - pt.x[j]);
        }
        let dely: Vec<f64> = (0..m).map(|i| self.c + self.d * pt.y[i] - pt.lam[i] - epsi / pt.y[i]).collect();
        let delz = self.a0 - epsi / pt.z;
        let dellam: Vec<f64> = (0..m).map(|i| gvec[i] - pt.y[i] - self.b[i] + epsi / pt.lam[i]).collect();
        let diagy: Vec<f64> = (0..m).map(|i| self.d + pt.mu[i] / pt.y[i]).collect();
        let diaglamyi: Vec<f64> = (0..m).map(|i| pt.s[i] / pt.lam[i] + 1.0 / diagy[i]).collect();

        let dx;
        let dlam;
        let dz;
        if m < n {
            // Reduced system in (lambda, z).
            let mut aa = DMatrix::<f64>::zeros(m + 1, m + 1);
            let mut bb = DVector::<f64>::zeros(m + 1);
            for i in 0..m {
                let mut acc = dellam[i] + dely[i] / diagy[i];
                for j in 0..n {
                    acc -= gg[(i, j)] * delx[j] / diagx[j];
                }
                bb[i] = acc;
                for k in 0..m {
                    let mut v = 0.0;
                    for j in 0..n {
                        v += gg[(i, j)] * gg[(k, j)] / diagx[j];
                    }
                    aa[(i, k)] = v;
                }
                aa[(i, i)] += diaglamyi[i];
                // a_i = 0: no coupling to z.
            }
            aa[(m, m)] = -pt.zet / pt.z;
            bb[m] = delz;
            let sol = aa.lu().solve(&bb).ok_or_else(|| Error::Solver("singular MMA Newton system".into()))?;
            dlam = (0..m).map(|i| sol[i]).collect::<Vec<_>>();
            dz = sol[m];
            dx = (0..n)
                .map(|j| {
                    let gl: f64 = (0..m).map(|i| gg[(i, j)] * dlam[i]).sum();
                    -delx[j] / diagx[j] - gl / diagx[j]
                })
                .collect::<Vec<_>>();
        } else {
            let dellamyi: Vec<f64> = (0..m).map(|i| dellam[i] + dely[i] / diagy[i]).collect();
            let mut aa = DMatrix::<f64>::zeros(n + 1, n + 1);
            let mut bb = DVector::<f64>::zeros(n + 1);
            for j in 0..n {
                aa[(j, j)] += diagx[j];
                for k in 0..n {
                    let mut v = 0.0;
                    for i in 0..m {
                        v += gg[(i, j)] * gg[(i, k)] / diaglamyi[i];
                    }
                    aa[(j, k)] += v;
                }
                let mut bx = delx[j];
                for i in 0..m {
                    bx += gg[(i, j)] * dellamyi[i] / diaglamyi[i];
                }
                bb[j] = -bx;
            }
            aa[(n, n)] = pt.zet / pt.z;
            bb[n] = -delz;
            let sol = aa.lu().solve(&bb).ok_or_else(|| Error::Solver("singular MMA Newton system".into()))?;
            dx = (0..n).map(|j| sol[j]).collect::<Vec<_>>();
            dz = sol[n];
            dlam = (0..m)
                .map(|i| {
                    let gdx: f64 = (0..n).map(|j| gg[(i, j)] * dx[j]).sum();
                    gdx / diaglamyi[i] + dellamyi[i] / diaglamyi[i]
                })
                .collect();
        }
        let dy: Vec<f64> = (0..m).map(|i| -dely[i] / diagy[i] + dlam[i] / diagy[i]).collect();
        let dxsi: Vec<f64> = (0..n)
            .map(|j| {
                let xa = pt.x[j] - self.alfa[j];
                -pt.xsi[j] + epsi / xa - pt.xsi[j] * dx[j] / xa
            })
            .collect();
        let deta: Vec<f64> = (0..n)
            .map(|j| {
                let bx = self.beta[j] - pt.x[j];
                -pt.eta[j] + epsi / bx + pt.eta[j] * dx[j] / bx
            })
            .collect();
        let dmu: Vec<f64> = (0..m).map(|i| -pt.mu[i] + epsi / pt.y[i] - pt.mu[i] * dy[i] / pt.y[i]).collect();
        let dzet = -pt.zet + epsi / pt.z - pt.zet * dz / pt.z;
        let ds: Vec<f64> = (0..m).map(|i| -pt.s[i] + epsi / pt.lam[i] - pt.s[i] * dlam[i] / pt.lam[i]).collect();
        Ok(Point { x: dx, y: dy, z: dz, lam: dlam, xsi: dxsi, eta: deta, mu: dmu, zet: dzet, s: ds })
    }
}

/// Single MMA step on a fresh or existing state (see [`MmaState::update`]).
pub fn mma_update(state: &mut MmaState, x: &[f64], df0: &[f64], fval: &[f64], dfdx: &[Vec<f64>]) -> Result<MmaStep> {
    state.update(x, df0, fval, dfdx)
}
