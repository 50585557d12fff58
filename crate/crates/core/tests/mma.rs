use gmc_core::mma::{MmaParams, MmaState};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Runs MMA on `f` with constraints `g`, both returning value and gradient;
/// returns the last iterate and the best objective seen.
fn run_best(
    x0: &[f64],
    lo: f64,
    hi: f64,
    m: usize,
    iters: usize,
    f: impl Fn(&[f64]) -> (f64, Vec<f64>),
    g: impl Fn(&[f64]) -> (Vec<f64>, Vec<Vec<f64>>),
) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut st = MmaState::new(x0, vec![lo; n], vec![hi; n], m, MmaParams::default()).unwrap();
    let mut x = x0.to_vec();
    let mut best = f64::INFINITY;
    for _ in 0..iters {
        let (fx, df) = f(&x);
        best = best.min(fx);
        let (gv, dg) = g(&x);
        x = st.update(&x, &df, &gv, &dg).unwrap().x;
    }
    let last = f(&x).0;
    (x, best.min(last))
}

fn run(
    x0: &[f64],
    lo: f64,
    hi: f64,
    m: usize,
    iters: usize,
    f: impl Fn(&[f64]) -> (f64, Vec<f64>),
    g: impl Fn(&[f64]) -> (Vec<f64>, Vec<Vec<f64>>),
) -> Vec<f64> {
    run_best(x0, lo, hi, m, iters, f, g).0
}

#[test]
fn svanberg_two_sphere_problem_satisfies_kkt() {
    // min |x|^2 subject to two balls of radius 3; both constraints active.
    let centers = [[5.0, 2.0, 1.0], [3.0, 4.0, 3.0]];
    let f = |x: &[f64]| (x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect());
    let g = |x: &[f64]| {
        let vals = centers.iter().map(|c| (0..3).map(|i| (x[i] - c[i]).powi(2)).sum::<f64>() - 9.0).collect();
        let grads = centers.iter().map(|c| (0..3).map(|i| 2.0 * (x[i] - c[i])).collect()).collect();
        (vals, grads)
    };
    let x = run(&[4.0, 3.0, 2.0], 0.0, 5.0, 2, 60, f, g);
    let (gv, dg) = g(&x);
    assert!(gv.iter().all(|v| v.abs() < 1e-5), "constraints {gv:?}");
    // Stationarity: grad f + sum lambda_i grad g_i = 0 with lambda >= 0.
    let a = DMatrix::from_fn(3, 2, |r, c| dg[c][r]);
    let b = -DVector::from_vec(f(&x).1);
    let lam = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
    assert!(lam.iter().all(|&l| l > 0.0), "multipliers {lam:?}");
    assert!((a * &lam - b).norm() < 1e-4);
    // Published solution of this test problem, to its printed digits.
    for (a, b) in x.iter().zip([2.0175, 1.7800, 1.2375]) {
        assert!((a - b).abs() < 1e-4, "{x:?}");
    }
}

#[test]
fn linear_objective_runs_to_the_box_corner() {
    let c = [1.0, -2.0, 0.5, -0.25];
    let f = |x: &[f64]| (x.iter().zip(&c).map(|(a, b)| a * b).sum(), c.to_vec());
    let none = |_: &[f64]| (Vec::new(), Vec::new());
    let x = run(&[0.0; 4], -1.0, 1.0, 0, 80, f, none);
    for (xi, ci) in x.iter().zip(&c) {
        assert!((xi + ci.signum()).abs() < 1e-3, "{x:?}");
    }
}

#[test]
fn restoration_is_reported_from_infeasible_start() {
    // x1 + x2 >= 1 written as 1 - x1 - x2 <= 0, starting at the origin.
    let f = |x: &[f64]| (x[0] * x[0] + x[1] * x[1], vec![2.0 * x[0], 2.0 * x[1]]);
    let g = |x: &[f64]| (vec![1.0 - x[0] - x[1]], vec![vec![-1.0, -1.0]]);
    let mut st = MmaState::new(&[0.0, 0.0], vec![-2.0; 2], vec![2.0; 2], 1, MmaParams::default()).unwrap();
    let mut x = vec![0.0, 0.0];
    let mut any_restoration = false;
    for _ in 0..60 {
        let (gv, dg) = g(&x);
        let step = st.update(&x, &f(&x).1, &gv, &dg).unwrap();
        any_restoration |= step.restoration;
        x = step.x;
    }
    assert!(any_restoration);
    assert!((x[0] - 0.5).abs() < 1e-3 && (x[1] - 0.5).abs() < 1e-3, "{x:?}");
}

#[test]
fn rejects_start_outside_the_box() {
    assert!(MmaState::new(&[3.0], vec![-1.0], vec![1.0], 0, MmaParams::default()).is_err());
    assert!(MmaState::new(&[0.0], vec![1.0], vec![-1.0], 0, MmaParams::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn separable_quadratic_approaches_projected_minimizer(t in prop::collection::vec(-1.5..1.5f64, 1..6)) {
        let n = t.len();
        let tt = t.clone();
        let f = move |x: &[f64]| {
            (x.iter().zip(&tt).map(|(a, b)| (a - b).powi(2)).sum(), x.iter().zip(&tt).map(|(a, b)| 2.0 * (a - b)).collect())
        };
        let none = |_: &[f64]| (Vec::new(), Vec::new());
        let fstar: f64 = t.iter().map(|v| (v.abs() - 1.0).max(0.0).powi(2)).sum();
        // Plain MMA can settle into a small two-cycle once the asymptotes
        // reach their closest allowed distance, so the iterates are only
        // required to come within a fraction of the box width.
        let (x, best) = run_best(&vec![0.0; n], -1.0, 1.0, 0, 100, f, none);
        prop_assert!(best - fstar < 1e-4 * n as f64, "best {} vs {}", best, fstar);
        for (xi, ti) in x.iter().zip(&t) {
            prop_assert!((xi - ti.clamp(-1.0, 1.0)).abs() < 0.03, "{:?} vs {:?}", x, t);
        }
    }

    #[test]
    fn iterates_stay_inside_the_box(seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut st = MmaState::new(&vec![0.0; n], vec![-0.5; n], vec![0.7; n], 0, MmaParams::default()).unwrap();
        let mut x = vec![0.0; n];
        for _ in 0..10 {
            x = st.update(&x, &c, &[], &[]).unwrap().x;
            prop_assert!(x.iter().all(|&v| (-0.5..=0.7).contains(&v)));
        }
    }
}
