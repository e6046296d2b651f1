use elastic_pricing::diff::Tape;
use elastic_pricing::eval::{fairness_report, FairnessConfig};
use elastic_pricing::hgr::{hgr_metric, AdversaryPair, HgrConfig};
use elastic_pricing::rdc::{rdc, RdcConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn gaussian_pair(n: usize, rho: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normals(n, &mut rng);
    let z = normals(n, &mut rng);
    let y = x.iter().zip(&z).map(|(a, b)| rho * a + (1.0 - rho * rho).sqrt() * b).collect();
    (x, y)
}

fn rdc_at(u: &[f64], v: &[f64], seed: u64) -> f64 {
    rdc(u, v, &RdcConfig { seed, ..RdcConfig::default() }).unwrap()
}

#[test]
fn rdc_is_small_under_independence() {
    let mean: f64 = (0..5)
        .map(|s| {
            let (x, y) = gaussian_pair(1000, 0.0, s);
            rdc_at(&x, &y, s)
        })
        .sum::<f64>()
        / 5.0;
    assert!(mean < 0.2, "{mean}");
}

#[test]
fn rdc_detects_nonlinear_dependence() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let square: Vec<f64> = x.iter().map(|v| v * v + 0.01 * rng.random::<f64>()).collect();
    assert!(rdc_at(&x, &square, 0) > 0.9);
    let (a, b) = gaussian_pair(1000, 0.0, 4);
    assert!(rdc_at(&x, &square, 0) > rdc_at(&a, &b, 0) + 0.5);
}

#[test]
fn rdc_grows_with_correlation() {
    let vals: Vec<f64> = [0.0, 0.5, 0.9]
        .iter()
        .map(|&rho| {
            let (x, y) = gaussian_pair(2000, rho, 5);
            rdc_at(&x, &y, 0)
        })
        .collect();
    assert!(vals[0] < vals[1] && vals[1] < vals[2], "{vals:?}");
}

#[test]
fn rdc_is_symmetric_and_rank_invariant() {
    let (x, y) = gaussian_pair(500, 0.6, 6);
    let a = rdc_at(&x, &y, 1);
    assert_eq!(a.to_bits(), rdc_at(&y, &x, 1).to_bits());
    let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let cy: Vec<f64> = y.iter().map(|v| v * v * v + 2.0).collect();
    assert_eq!(a.to_bits(), rdc_at(&ex, &cy, 1).to_bits());
    assert!((0.0..=1.0).contains(&a));
}

#[test]
fn rdc_is_deterministic_given_seed() {
    let (x, y) = gaussian_pair(300, 0.3, 7);
    assert_eq!(rdc_at(&x, &y, 9).to_bits(), rdc_at(&x, &y, 9).to_bits());
}

#[test]
fn hgr_recovers_gaussian_correlation() {
    // for a bivariate normal the maximal correlation equals |rho|
    let (x, y) = gaussian_pair(2000, 0.8, 8);
    let h = hgr_metric(&x, &y, &HgrConfig::default()).unwrap();
    assert!((h.value - 0.8).abs() < 0.05, "{h:?}");
}

#[test]
fn hgr_finds_nonmonotone_dependence() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| v * v + 0.05 * rng.random::<f64>()).collect();
    let h = hgr_metric(&x, &y, &HgrConfig::default()).unwrap();
    assert!(h.value > 0.8, "{h:?}");
}

#[test]
fn hgr_is_small_under_independence() {
    let mean: f64 = (0..5)
        .map(|s| {
            let (x, y) = gaussian_pair(500, 0.0, 100 + s);
            hgr_metric(&x, &y, &HgrConfig { seed: s, ..HgrConfig::default() }).unwrap().value
        })
        .sum::<f64>()
        / 5.0;
    assert!(mean < 0.15, "{mean}");
}

#[test]
fn hgr_is_nearly_symmetric() {
    let (x, y) = gaussian_pair(1000, 0.5, 10);
    let a = hgr_metric(&x, &y, &HgrConfig::default()).unwrap().value;
    let b = hgr_metric(&y, &x, &HgrConfig::default()).unwrap().value;
    assert!((a - b).abs() < 0.05, "{a} {b}");
}

#[test]
fn ascent_raises_the_objective() {
    let (x, y) = gaussian_pair(500, 0.5, 11);
    let mut pair = AdversaryPair::new(8, &x, &y, 1, 0);
    let mut tape = Tape::new();
    let first = pair.ascent_step(&mut tape, &x, &y, 0.1, 0.1).unwrap().abs();
    for _ in 0..200 {
        pair.ascent_step(&mut tape, &x, &y, 0.1, 0.1).unwrap();
    }
    let last = pair.estimate(&x, &y).unwrap().value.abs();
    assert!(last > first, "{first} -> {last}");
}

#[test]
fn penalty_gradient_only_reaches_prices() {
    let (x, y) = gaussian_pair(64, 0.5, 12);
    let pair = AdversaryPair::new(8, &x, &y, 1, 0);
    let tape = Tape::new();
    let prices = tape.vars(&x);
    let batch = pair.penalty(&prices, &y).unwrap();
    let grads = tape.backward(batch.value).unwrap();
    assert!(prices.iter().any(|p| grads.get(*p) != 0.0));
    assert_eq!(batch.value.value(), pair.estimate(&x, &y).unwrap().value);
}

#[test]
fn fairness_report_separates_dependent_from_independent() {
    let cfg = FairnessConfig::default();
    let (x, y) = gaussian_pair(800, 0.0, 13);
    let indep = fairness_report(&x, &y, &cfg).unwrap();
    let (x, y) = gaussian_pair(800, 0.9, 14);
    let dep = fairness_report(&x, &y, &cfg).unwrap();
    assert!(dep.rdc > indep.rdc + 0.5 && dep.hgr > indep.hgr + 0.5, "{indep:?} {dep:?}");
    assert!(dep.pearson > 0.85);
}
