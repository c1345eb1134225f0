use crve::dof::{DofTraces, MomentDesign};
use crve::estimators::Uv3Engine;
use crve::linalg::max_abs;
use crve::oracle::{
    build_design, dense_a_from_map, dense_bb, dense_hrk, dense_hrk_woodbury, dense_projection, dense_tr_amam,
    dense_tr_amsm_sq, expectation_check, hrk_map, random_instance, random_sigma, woodbury_pieces, Structure,
    DEFAULT_CAP, SEEDS,
};
use crve::{
    build_a_blocks, engine, estimate, lz1_stata, plugin_cluster_re, plugin_re, plugin_unrestricted, Method, ReMoments,
    Residuals,
};
use nalgebra::DMatrix;

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = max_abs(b).max(max_abs(a));
    if scale == 0.0 {
        0.0
    } else {
        max_abs(&(a - b)) / scale
    }
}

const UNBIASED: [(Method, Structure); 3] = [
    (Method::Uv1, Structure::Equicorrelated),
    (Method::Uv2, Structure::ClusterSpecific),
    (Method::Uv3, Structure::Unrestricted),
];

#[test]
fn specialized_equals_dense() {
    for &seed in &SEEDS {
        let inst = random_instance(seed);
        let d = inst.design();
        for (m, s) in UNBIASED {
            let dd = build_design(s, d.clustering(), DEFAULT_CAP).unwrap();
            let dense = dense_hrk(d, &dd, inst.fit.resid(), DEFAULT_CAP).unwrap();
            let fast = estimate(&inst.fit, m).unwrap();
            assert!(
                rel(&fast.v, &dense) <= 1e-10,
                "seed {seed} {m}: {}",
                rel(&fast.v, &dense)
            );
        }
    }
}

#[test]
fn unbiased_on_own_family() {
    for &seed in &SEEDS {
        let inst = random_instance(seed);
        let d = inst.design();
        for (m, s) in UNBIASED {
            let eng = engine(d, m).unwrap();
            let sigma = random_sigma(s, d.clustering(), seed);
            let chk = expectation_check(
                d,
                &sigma,
                |z| Ok(eng.estimate(&Residuals::new(d, z.clone())).v),
                DEFAULT_CAP,
            )
            .unwrap();
            assert!(chk.max_rel_error <= 1e-8, "seed {seed} {m}: {}", chk.max_rel_error);
        }
    }
}

#[test]
fn plugins_are_biased() {
    let inst = random_instance(SEEDS[0]);
    let d = inst.design();
    for (m, s) in [
        (Method::PluginRe, Structure::Equicorrelated),
        (Method::PluginClusterRe, Structure::ClusterSpecific),
        (Method::PluginUnrestricted, Structure::Unrestricted),
    ] {
        let eng = engine(d, m).unwrap();
        let sigma = random_sigma(s, d.clustering(), 7);
        let chk = expectation_check(
            d,
            &sigma,
            |z| Ok(eng.estimate(&Residuals::new(d, z.clone())).v),
            DEFAULT_CAP,
        )
        .unwrap();
        assert!(chk.max_rel_error > 1e-3, "{m}: {}", chk.max_rel_error);
    }
}

#[test]
fn zero_sigma_expectation() {
    let inst = random_instance(SEEDS[3]);
    let d = inst.design();
    let eng = engine(d, Method::Uv2).unwrap();
    let n = d.n_obs();
    let chk = expectation_check(
        d,
        &DMatrix::zeros(n, n),
        |z| Ok(eng.estimate(&Residuals::new(d, z.clone())).v),
        DEFAULT_CAP,
    )
    .unwrap();
    assert_eq!(chk.max_rel_error, 0.0);
    assert_eq!(max_abs(&chk.truth), 0.0);
}

#[test]
fn plugins_equal_dense_projection() {
    for &seed in &SEEDS {
        let inst = random_instance(seed);
        let d = inst.design();
        let e = inst.fit.resid();
        let proj = |s| {
            let dd = build_design(s, d.clustering(), DEFAULT_CAP).unwrap();
            dense_projection(d, &dd, e, DEFAULT_CAP).unwrap()
        };
        let re = plugin_re(&inst.fit).unwrap().1;
        assert!(rel(&re.v, &proj(Structure::Equicorrelated)) <= 1e-12, "seed {seed}");
        let cre = plugin_cluster_re(&inst.fit).unwrap().1;
        assert!(rel(&cre.v, &proj(Structure::ClusterSpecific)) <= 1e-12, "seed {seed}");
        let unr = plugin_unrestricted(&inst.fit);
        assert!(rel(&unr.v, &proj(Structure::Unrestricted)) <= 1e-12, "seed {seed}");
        let f = crve::estimators::stata_factor::<f64>(d.n_clusters(), d.n_obs(), d.n_regressors());
        assert_eq!(lz1_stata(&inst.fit).unwrap().v, &unr.v * f);
    }
}

#[test]
fn woodbury_route() {
    for &seed in &SEEDS {
        let inst = random_instance(seed);
        let d = inst.design();
        let dd = build_design(Structure::Unrestricted, d.clustering(), DEFAULT_CAP).unwrap();
        let a = dense_hrk(d, &dd, inst.fit.resid(), DEFAULT_CAP).unwrap();
        let b = dense_hrk_woodbury(d, &dd, inst.fit.resid(), DEFAULT_CAP).unwrap();
        assert!(rel(&a, &b) <= 1e-10, "seed {seed}: {}", rel(&a, &b));
        assert!(max_abs(&(&b - b.transpose())) <= 1e-10 * max_abs(&b));
    }
}

#[test]
fn woodbury_blocks_are_s_inverse() {
    for &seed in &SEEDS[..10] {
        let inst = random_instance(seed);
        let d = inst.design();
        let dd = build_design(Structure::Unrestricted, d.clustering(), DEFAULT_CAP).unwrap();
        let wp = woodbury_pieces(d, &dd, DEFAULT_CAP).unwrap();
        let uv3 = Uv3Engine::new(d).unwrap();
        let mut col = 0;
        for c in 0..d.n_clusters() {
            let xc = d.cluster_x(c);
            let want = uv3.s_inv(c) * xc.kronecker(xc).transpose();
            let got = wp.ft_a_inv.columns(col, want.ncols());
            let err = (got - &want).amax() / want.amax();
            assert!(err <= 1e-10, "seed {seed} cluster {c}: {err}");
            col += want.ncols();
        }
    }
}

#[test]
fn all_outputs_symmetric() {
    for &seed in &SEEDS {
        let inst = random_instance(seed);
        for m in Method::ALL {
            let v = estimate(&inst.fit, m).unwrap();
            assert!(v.relative_asymmetry() <= 1e-10, "seed {seed} {m}");
        }
    }
}

#[test]
fn a_blocks_match_dense_map() {
    for &seed in &SEEDS[..20] {
        let inst = random_instance(seed);
        let d = inst.design();
        let k = d.n_regressors();
        for (m, s) in UNBIASED {
            let dd = build_design(s, d.clustering(), DEFAULT_CAP).unwrap();
            let map = hrk_map(d, &dd, DEFAULT_CAP).unwrap();
            for ell in 0..k {
                let blocks = build_a_blocks(&inst.fit, m, ell).unwrap();
                let a = blocks.dense(d);
                let want = dense_a_from_map(&map, k, ell);
                assert!(rel(&a, &want) <= 1e-8, "seed {seed} {m} {ell}: {}", rel(&a, &want));
                let q = blocks.quadratic_form(&inst.fit.residuals);
                let v = estimate(&inst.fit, m).unwrap().variance(ell);
                assert!((q - v).abs() <= 1e-10 * v.abs(), "seed {seed} {m} {ell}");
            }
        }
    }
}

#[test]
fn trace_expansions_match_dense() {
    for &seed in &SEEDS {
        let inst = random_instance(seed);
        let d = inst.design();
        let bb = dense_bb::<f64>(d.clustering(), DEFAULT_CAP).unwrap();
        let n = d.n_obs();
        for (m, _) in UNBIASED {
            let ell = d.n_regressors() - 1;
            let blocks = build_a_blocks(&inst.fit, m, ell).unwrap();
            let tr = DofTraces::new(d, &blocks);
            let a = blocks.dense(d);
            let t0 = dense_tr_amam(d, &a);
            assert!((tr.t0 - t0).abs() <= 1e-8 * t0.abs(), "seed {seed} {m}");
            let (s2, t2) = (0.9, 0.35);
            let sigma = DMatrix::identity(n, n) * s2 + &bb * t2;
            let den = dense_tr_amsm_sq(d, &a, &sigma);
            let mom = ReMoments {
                sigma4: s2 * s2,
                sigma2tau2: s2 * t2,
                tau4: t2 * t2,
            };
            let got = tr.denominator(&mom);
            assert!((got - den).abs() <= 1e-8 * den.abs(), "seed {seed} {m}: {got} vs {den}");
        }
    }
}

#[test]
fn moment_diagonals_match_dense_across_seeds() {
    for &seed in &SEEDS {
        let inst = random_instance(seed);
        let d = inst.design();
        let md = MomentDesign::new(d).unwrap();
        let mm = d.annihilator();
        let bb = dense_bb::<f64>(d.clustering(), DEFAULT_CAP).unwrap();
        let bm = &bb * &mm;
        let checks = [
            (&md.m10, mm.diagonal()),
            (&md.m21, (&mm * &bm).diagonal()),
            (&md.m11, bm.diagonal()),
            (&md.m22, (&bm * &bm).diagonal()),
            (&md.m12, (&bm * &bb).diagonal()),
            (&md.m23, (&bm * &bm * &bb).diagonal()),
        ];
        for (i, (got, want)) in checks.into_iter().enumerate() {
            let scale = want.amax().max(1.0);
            assert!((got - want).amax() <= 1e-12 * scale, "seed {seed} m{i}");
        }
    }
}
