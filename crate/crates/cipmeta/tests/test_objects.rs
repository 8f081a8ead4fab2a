mod common;

use approx::assert_relative_eq;
use cipmeta::config_space::{ConfigSpace, Occ};
use cipmeta::graph_model::{contract_graph, path_graph, reference_path};
use cipmeta::ladder_resolvent::{default_lambda, solve_resolvent};
use cipmeta::test_objects::{
    admissible_cutoffs, build_test_flow, capacity_sandwich, dirichlet_of_f, n_prime, path_flow,
    sparse_flow_norm, SandwichOptions, TestFunction,
};
use cipmeta::Error;
use common::{nine_site, rel, three_site, NINE_SITE_FLOW_LIMIT};

/// `Σ_{t=lo+1}^{hi} (N − t) t`.
fn mass_sum(n: usize, lo: usize, hi: usize) -> f64 {
    ((lo + 1)..=hi).map(|t| ((n - t) * t) as f64).sum()
}

fn path_function(n: usize, d: f64) -> TestFunction {
    let g = reference_path();
    let cg = contract_graph(&g, 0, 4).unwrap();
    let res = solve_resolvent(&g, &cg, n, default_lambda(&g)).unwrap();
    TestFunction::new(&g, &cg, n, d, res).unwrap()
}

#[test]
fn test_function_boundary_values() {
    let f = path_function(20, 0.05);
    assert_eq!(f.n_prime(), 8);
    assert_eq!(f.eval(&[20, 0, 0, 0, 0]), 1.0);
    assert_eq!(f.eval(&[0, 0, 0, 0, 20]), 0.0);
    // Particles on the neighbour of x count towards x.
    assert_eq!(f.eval(&[5, 14, 0, 0, 1]), 1.0);
    assert_eq!(f.eval(&[3, 4, 0, 0, 13]), 0.0);
}

#[test]
fn test_function_interpolates_by_mass() {
    let (n, d) = (20, 0.05);
    let f = path_function(n, d);
    let np = f.n_prime();
    let z = mass_sum(n, np, n - np);
    assert_relative_eq!(f.normalizer(), z, max_relative = 1e-15);
    for nb in np..=(n - np) {
        let eta: [Occ; 5] = [nb as Occ, 0, 0, 0, (n - nb) as Occ];
        assert_relative_eq!(f.eval(&eta), mass_sum(n, np, nb) / z, max_relative = 1e-13);
    }
    let half: [Occ; 5] = [10, 0, 0, 0, 10];
    assert_relative_eq!(f.eval(&half), mass_sum(n, 8, 10) / mass_sum(n, 8, 12), max_relative = 1e-13);
}

#[test]
fn test_function_adds_the_resolvent_correction() {
    let g = reference_path();
    let cg = contract_graph(&g, 0, 4).unwrap();
    let n = 20;
    let res = solve_resolvent(&g, &cg, n, default_lambda(&g)).unwrap();
    let f = TestFunction::new(&g, &cg, n, 0.05, res.clone()).unwrap();
    let z = f.normalizer();
    for k in 1..=3 {
        let nb = 10;
        let eta: [Occ; 5] = [nb as Occ, 0, k as Occ, 0, (n - nb - k) as Occ];
        let want = (mass_sum(n, 8, nb) + ((n - nb) * nb) as f64 * res.ghat_single(2, k).unwrap()) / z;
        assert_relative_eq!(f.eval(&eta), want, max_relative = 1e-13);
    }
}

#[test]
fn cutoff_rules() {
    assert_eq!(n_prime(40, 0.05).unwrap(), 18);
    assert!(matches!(n_prime(4, 0.05), Err(Error::AssumptionViolated(_))));
    assert_eq!(admissible_cutoffs(10), vec![2, 4]);
    let g = reference_path();
    let cg = contract_graph(&g, 0, 4).unwrap();
    let res = solve_resolvent(&g, &cg, 20, default_lambda(&g)).unwrap();
    for bad in [3, 0, 10] {
        assert!(TestFunction::with_cutoff(&g, &cg, 20, bad, res.clone()).is_err(), "N′ = {bad}");
    }
}

#[test]
fn dirichlet_breakdown_sums_and_near_x_block_vanishes() {
    let g = nine_site();
    let cg = contract_graph(&g, 0, 6).unwrap();
    let (n, d) = (12, 0.05);
    let cs = ConfigSpace::enumerate(&g, n, d, 1 << 20).unwrap();
    let mt = cs.stationary_measure();
    let res = solve_resolvent(&g, &cg, n, default_lambda(&g)).unwrap();
    let f = TestFunction::with_cutoff(&g, &cg, n, 2, res).unwrap();
    let rep = dirichlet_of_f(&g, &cg, &cs, &mt, &f);
    assert_eq!(rep.by_class["T1"], 0.0);
    let sum: f64 = rep.by_class.values().sum();
    assert!(rel(sum, rep.total) < 1e-12);

    // Brute-force Dirichlet form over the enumerated chain.
    let chain = cs.chain(&mt).unwrap();
    let values: Vec<f64> = (0..cs.len()).map(|i| f.eval(cs.config(i))).collect();
    let direct = chain.dirichlet_form(&values);
    assert!(rel(direct, rep.total) < 1e-9, "{direct} vs {}", rep.total);
}

#[test]
fn two_site_path_flow_norm_is_the_resistor_sum() {
    let g = path_graph(&["x", "y"], &[1.0, 1.0], &[1.0]).unwrap();
    let (n, d, r) = (12, 0.2, g.rate(0, 1));
    // w_k = Γ(k + d)/(Γ(d) k!) by the product recursion.
    let mut w = vec![1.0f64];
    for k in 0..n {
        w.push(w[k] * (d + k as f64) / (k + 1) as f64);
    }
    let z: f64 = (0..=n).map(|k| w[k] * w[n - k]).sum();
    let expected: f64 = (1..=n)
        .map(|i| {
            let k = n - i + 1;
            let mu = w[k] * w[n - k] / z;
            1.0 / (mu * k as f64 * (d + (n - k) as f64) * r)
        })
        .sum();
    let flow = path_flow(&g, n, &[0, 1]).unwrap();
    assert!(rel(sparse_flow_norm(&g, n, d, &flow).unwrap(), expected) < 1e-12);

    // The path flow is the only unit flow here, so its bound is the capacity.
    let cs = ConfigSpace::enumerate(&g, n, d, 100).unwrap();
    let mt = cs.stationary_measure();
    let cap = cs.chain(&mt).unwrap().capacity(&[cs.condensate(0)], &[cs.condensate(1)]).unwrap();
    assert!(rel(cap, 1.0 / expected) < 1e-10);
}

#[test]
fn path_test_flow_is_a_flow_on_the_full_space() {
    let g = reference_path();
    let cg = contract_graph(&g, 0, 4).unwrap();
    let (n, d) = (40, 0.05);
    let cs = ConfigSpace::enumerate(&g, n, d, 1 << 20).unwrap();
    let mt = cs.stationary_measure();
    let chain = cs.chain(&mt).unwrap();
    let (a, b) = (cs.condensate(0), cs.condensate(4));
    for depth in [1, 4, 10] {
        let psi = build_test_flow(&g, &cg, n, depth).unwrap();
        let field = psi.to_flow_field(&cs).unwrap();
        let value = chain.validate_flow(&field, &[a], &[b]).unwrap();
        let scan = psi.scan();
        assert!(scan.relative() < 1e-12, "depth {depth}");
        assert!(rel(value, scan.value) < 1e-12);
        let sparse = sparse_flow_norm(&g, n, d, &psi.flow).unwrap();
        assert!(rel(sparse, chain.flow_norm(&field).unwrap()) < 1e-10);
    }
}

#[test]
fn nine_site_flow_value_converges() {
    let g = nine_site();
    let cg = contract_graph(&g, 0, 6).unwrap();
    let frozen = [(12, 3, 3.015875427999), (20, 5, 3.319889188648), (40, 10, 3.423895856323)];
    let mut last = 0.0;
    for (n, depth, want) in frozen {
        let psi = build_test_flow(&g, &cg, n, depth).unwrap();
        let v = psi.value(1e-12).unwrap();
        assert!((v - want).abs() < 1e-9, "N = {n}, L = {depth}: {v}");
        assert!(v > last && v < NINE_SITE_FLOW_LIMIT);
        last = v;
    }
}

#[test]
fn test_flow_rejects_too_few_particles() {
    let g = reference_path();
    let cg = contract_graph(&g, 0, 4).unwrap();
    assert!(matches!(build_test_flow(&g, &cg, 7, 2), Err(Error::AssumptionViolated(_))));
    assert!(build_test_flow(&g, &cg, 8, 0).is_err());
}

#[test]
fn reference_path_sandwich() {
    let s = capacity_sandwich(&reference_path(), 0, 4, 20, 0.05, &SandwichOptions::default()).unwrap();
    assert!(s.lower <= s.exact && s.exact <= s.upper);
    assert!(s.slack() >= -1e-9);
    assert!((s.exact_scaled - 13.3187).abs() < 5e-5, "{}", s.exact_scaled);
    assert_relative_eq!(s.k_reference, 6.0, max_relative = 1e-10);
    assert!(s.exact_residual < 1e-8);
}

#[test]
fn sandwich_needs_separated_wells() {
    let err = capacity_sandwich(&three_site(), 0, 2, 12, 0.05, &SandwichOptions::default()).unwrap_err();
    assert!(matches!(err, Error::AssumptionViolated(_)));
}
