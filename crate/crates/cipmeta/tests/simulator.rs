mod common;

use cipmeta::config_space::ConfigSpace;
use cipmeta::graph_model::{metastable_hierarchy, path_graph, reference_path};
use cipmeta::simulator::{empirical_vs_magic, jump_counts, simulate_until, timescale_census, SimConfig};
use cipmeta::Error;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use common::{geometry, nine_site, three_site};

#[test]
fn same_seed_reproduces_every_replica() {
    let cs = ConfigSpace::enumerate(&three_site(), 6, 0.3, 1000).unwrap();
    let (a, b) = (cs.condensate(0), cs.condensate(2));
    let cfg = SimConfig::new(11, 64);
    let s1 = simulate_until(&cs, a, &[b], &cfg).unwrap();
    let s2 = simulate_until(&cs, a, &[b], &cfg).unwrap();
    assert_eq!(s1.times, s2.times);
    assert_eq!(s1.events, s2.events);
    let s3 = simulate_until(&cs, a, &[b], &SimConfig::new(12, 64)).unwrap();
    assert_ne!(s1.times, s3.times);
    // Replica streams do not depend on how many replicas run.
    let head = simulate_until(&cs, a, &[b], &SimConfig::new(11, 8)).unwrap();
    assert_eq!(head.times[..], s1.times[..8]);
}

#[test]
fn single_particle_hitting_time_is_exponential() {
    let g = path_graph(&["x", "y"], &[1.0, 1.0], &[1.5]).unwrap();
    let d = 0.4;
    let cs = ConfigSpace::enumerate(&g, 1, d, 10).unwrap();
    let s = simulate_until(&cs, cs.condensate(0), &[cs.condensate(1)], &SimConfig::new(5, 20_000)).unwrap();
    let mean = 1.0 / (d * g.rate(0, 1));
    assert!((s.mean - mean).abs() < 4.0 * s.stderr, "{} vs {mean}", s.mean);
    // Exponential law: standard deviation equals the mean.
    let sd = s.stderr * (s.times.len() as f64).sqrt();
    assert!((sd / mean - 1.0).abs() < 0.05);
    assert!(s.events.iter().all(|&e| e == 1));
}

#[test]
fn mean_hitting_time_matches_the_magic_formula() {
    let cs = ConfigSpace::enumerate(&three_site(), 10, 0.5, 1000).unwrap();
    let mt = cs.stationary_measure();
    let cmp = empirical_vs_magic(&cs, &mt, cs.condensate(0), &[cs.condensate(2)], &SimConfig::new(7, 2000)).unwrap();
    assert!(cmp.pass, "{} vs {} ± {}", cmp.sample.mean, cmp.exact, cmp.sample.stderr);
    assert_eq!(cmp.sample.exact_reference, Some(cmp.exact));
}

#[test]
fn standard_error_shrinks_like_inverse_root_replicas() {
    let cs = ConfigSpace::enumerate(&three_site(), 4, 0.5, 1000).unwrap();
    let (a, b) = (cs.condensate(0), cs.condensate(2));
    let small = simulate_until(&cs, a, &[b], &SimConfig::new(3, 500)).unwrap();
    let large = simulate_until(&cs, a, &[b], &SimConfig::new(3, 8000)).unwrap();
    let ratio = small.stderr / large.stderr;
    assert!((ratio / 4.0 - 1.0).abs() < 0.2, "ratio {ratio}");
}

#[test]
fn census_fractions_are_a_distribution() {
    let g = reference_path();
    let h = metastable_hierarchy(&g);
    let cs = ConfigSpace::enumerate(&g, 6, 0.1, 10_000).unwrap();
    let start = cs.condensate(0);
    let c = timescale_census(&cs, &h, start, 1e-3, &SimConfig::new(1, 200)).unwrap();
    let total: f64 = c.at_alpha.iter().map(|w| w.1).sum::<f64>() + c.outside_at_alpha;
    assert!((total - 1.0).abs() < 1e-12);
    assert!(c.start_occupation > 0.9);
    assert!(c.outside_occupation <= 1.0 - c.start_occupation + 1e-12);
    assert!(timescale_census(&cs, &h, start, 0.0, &SimConfig::new(1, 10)).is_err());
}

#[test]
fn invalid_configurations_are_rejected() {
    let cs = ConfigSpace::enumerate(&three_site(), 3, 0.5, 100).unwrap();
    assert!(matches!(simulate_until(&cs, 0, &[], &SimConfig::new(1, 1)), Err(Error::InvalidInput(_))));
    assert!(simulate_until(&cs, 0, &[cs.len()], &SimConfig::new(1, 1)).is_err());
    assert!(simulate_until(&cs, 0, &[1], &SimConfig::new(1, 0)).is_err());
}

#[test]
fn magic_formula_on_three_geometries() {
    let cases = [(three_site(), 0, 2), (reference_path(), 0, 4), (nine_site(), 0, 6)];
    for (g, x, y) in &cases {
        for n in [5, 10, 20] {
            if g.len() == 9 && n == 20 {
                continue;
            }
            let cs = ConfigSpace::enumerate(g, n, 0.5, 1 << 22).unwrap();
            let mt = cs.stationary_measure();
            let cfg = SimConfig::new(n as u64, 1000);
            let cmp = empirical_vs_magic(&cs, &mt, cs.condensate(*x), &[cs.condensate(*y)], &cfg).unwrap();
            assert!(cmp.pass, "{} sites, N = {n}: {} vs {}", g.len(), cmp.sample.mean, cmp.exact);
        }
    }
}

#[test]
fn edge_fluxes_balance_in_equilibrium() {
    // Reversible three-cycle with one particle: three configurations.
    let g = geometry(&["x", "y", "z"], &[1.0, 0.5, 0.25], &[(0, 1, 1.0), (1, 2, 2.0), (2, 0, 3.0)]);
    let cs = ConfigSpace::enumerate(&g, 1, 0.5, 10).unwrap();
    let counts = jump_counts(&cs, cs.condensate(0), 200.0, &SimConfig::new(4, 50)).unwrap();
    // Each edge: (n_ij − n_ji)²/(n_ij + n_ji) against χ²₁.
    let critical = ChiSquared::new(1.0).unwrap().inverse_cdf(0.999);
    for (u, v) in [(0, 1), (1, 2), (2, 0)] {
        let (i, j) = (cs.condensate(u), cs.condensate(v));
        let (a, b) = (counts[&(i, j)] as f64, counts[&(j, i)] as f64);
        let chi2 = (a - b).powi(2) / (a + b);
        assert!(chi2 < critical, "edge {u}-{v}: {a} vs {b}");
    }
}
