use crve::linalg::max_abs;
use crve::oracle::{build_design, dense_hrk, expectation_check, random_sigma, Structure, DEFAULT_CAP};
use crve::panel::{fit_panel, panel_unbiased, PanelDataset, PanelEngine};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_panel(n_units: usize, n_waves: usize, k: usize, seed: u64) -> PanelDataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_units * n_waves;
    let x = DMatrix::from_fn(n, k, |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
    let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    PanelDataset::new(n_units, n_waves, y, x).unwrap()
}

#[test]
fn panel_unbiased_under_own_family() {
    for seed in 0..10 {
        let pf = fit_panel(&random_panel(5, 3, 2, seed)).unwrap();
        let d = &pf.fit.design;
        let engine = PanelEngine::new(&pf).unwrap();
        assert_eq!(engine.system_order(), 9);
        let sigma = random_sigma(Structure::Panel { n_units: 5, n_waves: 3 }, d.clustering(), seed);
        let chk = expectation_check(d, &sigma, |z| Ok(engine.estimate(z).variance.v), DEFAULT_CAP).unwrap();
        assert!(chk.max_rel_error <= 1e-8, "seed {seed}: {}", chk.max_rel_error);
    }
}

#[test]
fn panel_equals_dense_route() {
    for (t, seed) in [(1, 3), (2, 4), (3, 5), (4, 6)] {
        let pf = fit_panel(&random_panel(6, t, 2, seed)).unwrap();
        let d = &pf.fit.design;
        let dd = build_design(Structure::Panel { n_units: 6, n_waves: t }, d.clustering(), DEFAULT_CAP).unwrap();
        let dense = dense_hrk(d, &dd, pf.fit.resid(), DEFAULT_CAP).unwrap();
        let fast = panel_unbiased(&pf).unwrap().variance.v;
        let err = max_abs(&(&fast - &dense)) / max_abs(&dense);
        assert!(err <= 1e-10, "T={t}: {err}");
    }
}
