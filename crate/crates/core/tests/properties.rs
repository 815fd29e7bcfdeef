use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use stochdiss::analysis::{min_gain, AnalysisOptions, Builder};
use stochdiss::lmi::{
    big_block, build_deterministic_lmi, build_pi, build_stochastic_lmi, expand_three_block, newton_delay_value,
    DecisionVarTable, SupplyTemplate,
};
use stochdiss::model::{
    benchmark_plant, conic_to_qsr, freq_gain, qsr_to_conic, to_interval, ConicSector, DelayDistribution, PlantModel,
    SupplyRate, Upper,
};
use stochdiss::network::{compose, sof_max_gain, stable_in_expectation, Interconnection, SofOptions};
use stochdiss::sim::{draw_delays, scalar_signal, simulate, DelaySource};
use stochdiss::solver::{solve, Status};

fn min_eig(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

fn matrix(rows: usize, cols: usize, vals: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| vals[(i * cols + j) % vals.len()])
}

fn stable_plant(vals: &[f64]) -> PlantModel {
    let mut a = matrix(2, 2, &vals[0..4]);
    let rho = a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    if rho > 0.9 {
        a *= 0.9 / rho;
    }
    PlantModel::new(a, matrix(2, 1, &vals[4..6]), matrix(1, 2, &vals[6..8]), matrix(1, 1, &vals[8..9])).unwrap()
}

fn pmf_from(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let rest: f64 = p[1..].iter().sum();
    p[0] = 1.0 - rest;
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn two_and_three_block_psd_forms_agree(
        p in 1usize..4,
        q in 1usize..4,
        vals in prop::collection::vec(-1.0f64..1.0, 40),
        shift in prop::collection::vec(0.1f64..2.0, 3),
        signs in prop::collection::vec(any::<bool>(), 3),
        n in 0.0f64..6.0,
    ) {
        let b = matrix(p, q, &vals[0..12]);
        let g = matrix(q, q, &vals[12..21]);
        let c = &g * g.transpose() + DMatrix::identity(q, q) * 0.2;
        let u = matrix(p, p, &vals[21..30]).qr().q();
        let d = DMatrix::from_fn(p, p, |i, j| {
            if i == j { if signs[i] { shift[i] } else { -shift[i] } } else { 0.0 }
        });
        let a = &b * c.clone().try_inverse().unwrap() * b.transpose() + &u * d * u.transpose();
        let a = (&a + a.transpose()) * 0.5;
        let mut two = DMatrix::zeros(p + q, p + q);
        two.view_mut((0, 0), (p, p)).copy_from(&a);
        two.view_mut((0, p), (p, q)).copy_from(&b);
        two.view_mut((p, 0), (q, p)).copy_from(&b.transpose());
        two.view_mut((p, p), (q, q)).copy_from(&c);
        let three = expand_three_block(&a, &b, &c, n).unwrap();
        prop_assert_eq!(min_eig(&two) >= -1e-9, min_eig(&three) >= -1e-9);
    }

    #[test]
    fn newton_expansion_matches_direct_lookup(
        w_min in 1usize..6,
        spread in 0usize..9,
        vals in prop::collection::vec(-1.0f64..1.0, 40),
    ) {
        let w_max = w_min + spread;
        let u: Vec<DVector<f64>> = vals.iter().map(|v| DVector::from_element(1, *v)).collect();
        for k in w_max..u.len() {
            for w in w_min..=w_max {
                let got = newton_delay_value(&u, k, w, w_min, w_max).unwrap();
                prop_assert!((got[0] - u[k - w][0]).abs() <= 1e-12, "k={} w={} {} vs {}", k, w, got[0], u[k - w][0]);
            }
        }
    }

    #[test]
    fn conic_round_trip(a in -10.0f64..10.0, width in 0.01f64..20.0, c in -5.0f64..5.0, r in 0.01f64..10.0) {
        let b = a + width;
        match to_interval(&qsr_to_conic(&conic_to_qsr(&ConicSector::interval(a, b)).unwrap()).unwrap()) {
            ConicSector::Interval { a: a2, b: Upper::Finite(b2) } => {
                prop_assert!((a2 - a).abs() <= 1e-9 * (1.0 + a.abs()));
                prop_assert!((b2 - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
            other => prop_assert!(false, "{:?}", other),
        }
        match qsr_to_conic(&conic_to_qsr(&ConicSector::disk(c, r)).unwrap()).unwrap() {
            ConicSector::Disk { c: c2, r: r2 } => {
                prop_assert!((c2 - c).abs() <= 1e-9 && (r2 - r).abs() <= 1e-9);
            }
            other => prop_assert!(false, "{:?}", other),
        }
        prop_assert_eq!(
            qsr_to_conic(&conic_to_qsr(&ConicSector::half_plane(a)).unwrap()).unwrap(),
            ConicSector::half_plane(a)
        );
    }

    #[test]
    fn membership_sign_matches_supply(
        a in -5.0f64..5.0,
        width in 0.1f64..10.0,
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1000),
    ) {
        let b = a + width;
        for sector in [ConicSector::interval(a, b), ConicSector::half_plane(a)] {
            let qsr = conic_to_qsr(&sector).unwrap();
            for &(u, y) in &pairs {
                let s = qsr.eval(&[y], &[u]);
                let scale = 1.0 + (u * u + y * y) * (1.0 + a.abs()) * (1.0 + b.abs());
                if s.abs() > 1e-12 * scale {
                    prop_assert_eq!(sector.contains(u, y), s > 0.0, "u={} y={} s={}", u, y, s);
                }
            }
        }
    }

    #[test]
    fn distribution_validation(w_min in 0usize..4, raw in prop::collection::vec(0.01f64..1.0, 1..6), bump in prop::sample::select(vec![1e-6, -1e-6])) {
        let p = pmf_from(&raw);
        let w_max = w_min + p.len() - 1;
        prop_assert_eq!(DelayDistribution::new(w_min, w_max, p.clone()).is_ok(), w_min >= 1);
        let mut off = p.clone();
        off[0] += bump;
        let lo = w_min.max(1);
        prop_assert!(DelayDistribution::new(lo, lo + p.len() - 1, off).is_err());
        if p.len() > 1 {
            let mut neg = p.clone();
            neg[0] += neg[1] + 0.5;
            neg[1] = -0.5;
            prop_assert!(DelayDistribution::new(1, p.len(), neg).is_err());
        }
    }

    #[test]
    fn lambda_scaling_keeps_verdict(
        q1 in -2.0f64..1.0, s1 in -1.0f64..1.0, r1 in -1.0f64..2.0,
        q2 in -2.0f64..1.0, s2 in -1.0f64..1.0, r2 in -1.0f64..2.0,
        l1 in 0.01f64..10.0, l2 in 0.01f64..10.0, c in 0.01f64..100.0,
    ) {
        let systems = vec![SupplyRate::siso(q1, s1, r1), SupplyRate::siso(q2, s2, r2)];
        let h = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let base = compose(&Interconnection { systems: systems.clone(), h: h.clone(), lambdas: vec![l1, l2] }).unwrap();
        let scaled = compose(&Interconnection { systems, h, lambdas: vec![c * l1, c * l2] }).unwrap();
        prop_assert!((&scaled.q - &base.q * c).amax() <= 1e-12 * (1.0 + base.q.amax() * c));
        let robust = base.q.clone().symmetric_eigenvalues().max().abs() > 1e-6 * (1.0 + base.q.norm());
        if robust {
            prop_assert_eq!(stable_in_expectation(&base), stable_in_expectation(&scaled));
        }
    }

    #[test]
    fn compose_without_coupling_is_block_diagonal(
        q in -2.0f64..1.0, s in -1.0f64..1.0, r in -1.0f64..2.0, l1 in 0.1f64..5.0, l2 in 0.1f64..5.0,
    ) {
        let a = SupplyRate::siso(q, s, r);
        let b = SupplyRate::siso(r, -s, q);
        let out = compose(&Interconnection { systems: vec![a, b], h: DMatrix::zeros(2, 2), lambdas: vec![l1, l2] }).unwrap();
        prop_assert_eq!(out.q, DMatrix::from_row_slice(2, 2, &[l1 * q, 0.0, 0.0, l2 * r]));
        prop_assert_eq!(out.s, DMatrix::from_row_slice(2, 2, &[l1 * s, 0.0, 0.0, -l2 * s]));
        prop_assert_eq!(out.r, DMatrix::from_row_slice(2, 2, &[l1 * r, 0.0, 0.0, l2 * q]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lmi_expressions_are_affine_and_symmetric(
        raw in prop::collection::vec(0.01f64..1.0, 1..6),
        w_min in 1usize..3,
        v1 in prop::collection::vec(-1.0f64..1.0, 64),
        v2 in prop::collection::vec(-1.0f64..1.0, 64),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let p = pmf_from(&raw);
        let dist = DelayDistribution::new(w_min, w_min + p.len() - 1, p).unwrap();
        let plant = benchmark_plant();
        let template = SupplyTemplate::siso(-1.0, 0.0, 0.0, &[("R", 0.0, 1.0)]);
        for problem in [
            build_stochastic_lmi(&plant, &dist, &template).unwrap(),
            build_deterministic_lmi(&plant, dist.w_min(), dist.w_max(), &template).unwrap(),
        ] {
            let len = problem.vars.len();
            prop_assert!(len <= 64);
            let x1 = &v1[..len];
            let x2 = &v2[..len];
            let mix: Vec<f64> = x1.iter().zip(x2).map(|(a, b)| alpha * a + beta * b).collect();
            for con in &problem.constraints {
                prop_assert!(con.expr.is_symmetric(1e-12), "{}", con.name);
                let lhs = con.expr.eval(&mix);
                let rhs = con.expr.eval(x1) * alpha + con.expr.eval(x2) * beta
                    - con.expr.constant_part() * (alpha + beta - 1.0);
                let scale = 1.0 + lhs.amax();
                prop_assert!((lhs - rhs).amax() <= 1e-12 * scale, "{}", con.name);
            }
        }
    }

    #[test]
    fn point_mass_lmi_is_a_single_block(w in 1usize..6, x in prop::collection::vec(-1.0f64..1.0, 64)) {
        let plant = benchmark_plant();
        let dist = DelayDistribution::point_mass(w).unwrap();
        let template = SupplyTemplate::siso(-1.0, 0.0, 4.0, &[]);
        let problem = build_stochastic_lmi(&plant, &dist, &template).unwrap();
        let vars = DecisionVarTable::new(plant.n(), plant.m(), &template.slot_names());
        let pi = build_pi(&plant, &template, &vars, w, w).unwrap();
        let block = big_block(&plant, &pi, &vars, w, w, w).unwrap().symmetrized();
        let x = &x[..problem.vars.len()];
        let diff = (problem.constraints[0].expr.eval(x) - block.eval(x)).amax();
        prop_assert!(diff <= 1e-12, "{}", diff);
    }

    #[test]
    fn same_seed_same_trajectory(seed in any::<u64>(), stream in 0u64..1000, vals in prop::collection::vec(-1.0f64..1.0, 61)) {
        let plant = benchmark_plant();
        let dist = DelayDistribution::uniform(1, 5).unwrap();
        let input = scalar_signal(&vals);
        let run = || simulate(&plant, DelaySource::Random { dist: &dist, seed, stream }, &input, &DVector::zeros(2), 60).unwrap();
        let (t1, t2) = (run(), run());
        prop_assert_eq!(&t1, &t2);
        let bits = |t: &stochdiss::sim::Trajectory| t.y.iter().map(|v| v[0].to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&t1), bits(&t2));
    }

    #[test]
    fn constant_delay_is_a_shift(w in 1usize..6, vals in prop::collection::vec(-1.0f64..1.0, 41), x in prop::collection::vec(-1.0f64..1.0, 9)) {
        let plant = stable_plant(&x);
        let horizon = 40;
        let delayed = simulate(
            &plant,
            DelaySource::Random { dist: &DelayDistribution::point_mass(w).unwrap(), seed: 0, stream: 0 },
            &scalar_signal(&vals),
            &DVector::zeros(2),
            horizon,
        ).unwrap();
        let shifted: Vec<f64> = (0..=horizon).map(|k| if k < w { 0.0 } else { vals[k - w] }).collect();
        let undelayed = simulate(
            &plant,
            DelaySource::Explicit { delays: &vec![0; horizon + 1], bounds: None },
            &scalar_signal(&shifted),
            &DVector::zeros(2),
            horizon,
        ).unwrap();
        prop_assert_eq!(&delayed.y, &undelayed.y);
        let mut xk = DVector::zeros(2);
        for k in 0..=horizon {
            let yk = (&plant.c * &xk)[0] + plant.d[(0, 0)] * shifted[k];
            prop_assert!((yk - delayed.y[k][0]).abs() <= 1e-12);
            xk = &plant.a * &xk + &plant.b * shifted[k];
        }
    }

    #[test]
    fn dense_grid_agrees(x in prop::collection::vec(-1.0f64..1.0, 9)) {
        let plant = stable_plant(&x);
        let coarse = freq_gain(&plant, 1024).unwrap();
        let (a, b, c, d) = (&plant.a, &plant.b, &plant.c, plant.d[(0, 0)]);
        let mut dense: f64 = 0.0;
        for k in 0..10240 {
            let om = std::f64::consts::PI * k as f64 / 10239.0;
            let (zr, zi) = (om.cos(), om.sin());
            let (m11r, m12r, m21r, m22r) = (zr - a[(0, 0)], -a[(0, 1)], -a[(1, 0)], zr - a[(1, 1)]);
            let detr = m11r * m22r - zi * zi - m12r * m21r;
            let deti = zi * (m11r + m22r);
            let den = detr * detr + deti * deti;
            let adj = [[(m22r, zi), (-m12r, 0.0)], [(-m21r, 0.0), (m11r, zi)]];
            let (mut gr, mut gi) = (d, 0.0);
            for i in 0..2 {
                for j in 0..2 {
                    let (ar, ai) = adj[i][j];
                    let w = c[(0, i)] * b[(j, 0)];
                    gr += w * (ar * detr + ai * deti) / den;
                    gi += w * (ai * detr - ar * deti) / den;
                }
            }
            dense = dense.max((gr * gr + gi * gi).sqrt());
        }
        prop_assert!((coarse - dense).abs() <= 1e-3 * (1.0 + dense), "{} vs {}", coarse, dense);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn solver_is_deterministic_and_sound(x in prop::collection::vec(-1.0f64..1.0, 9), uniform in any::<bool>()) {
        let plant = stable_plant(&x);
        let dist = if uniform { DelayDistribution::uniform(1, 3).unwrap() } else {
            DelayDistribution::new(1, 3, vec![0.7, 0.2, 0.1]).unwrap()
        };
        let template = SupplyTemplate::siso(-1.0, 0.0, 0.0, &[("R", 0.0, 1.0)]);
        let mut problem = build_stochastic_lmi(&plant, &dist, &template).unwrap();
        let r = problem.slot(0);
        problem.minimize(r);
        problem.upper_bound(r, 1e8);
        let a = solve(&problem, 1e-8).unwrap();
        let b = solve(&problem, 1e-8).unwrap();
        prop_assert!(a.same_result(&b));
        if a.status == Status::Feasible {
            prop_assert!(problem.raw_margin(&a.x) >= -1e-8, "{}", problem.raw_margin(&a.x));
        }
        let gain = min_gain(&plant, &Builder::Stochastic(dist), &AnalysisOptions::default());
        if let Ok(g) = gain {
            prop_assert!(g.gain().unwrap() + 1e-6 >= freq_gain(&plant, 1024).unwrap());
        }
    }
}

#[test]
fn sof_gain_is_monotone_in_lower_intercept() {
    let opts = SofOptions::default();
    let mut last = 0.0;
    for i in 0..20 {
        let a = -4.0 + (4.0 - 0.05) * i as f64 / 19.0;
        let k = sof_max_gain(&ConicSector::interval(a, 1e5), &opts).unwrap().k;
        assert!(k + opts.resolution >= last, "a={a}: K={k} < {last}");
        last = k;
    }
}

#[test]
fn delay_histogram_matches_pmf() {
    let dist = DelayDistribution::new(1, 5, vec![0.75, 0.1, 0.05, 0.05, 0.05]).unwrap();
    let n = 100_000;
    let draws = draw_delays(&dist, 42, 0, n);
    for (w, p) in dist.support() {
        let count = draws.iter().filter(|d| **d == w).count() as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((count - n as f64 * p).abs() <= 3.0 * sigma, "w={w}: {count}");
    }
}
