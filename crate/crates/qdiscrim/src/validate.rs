//! Runtime invariant suite backing the `validate` subcommand: one pass/fail
//! line per check, error on any failure.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::inference::{conditional_error, decide, posteriors};
use crate::montecarlo::{estimate_qe_posterior, run_trial, ExperimentConfig};
use crate::qmath::{
    bloch_to_density, density_to_bloch, dissipator, innovation, msuperop, BlochVector,
    DissipatorOrdering, Operator,
};
use crate::trajectory::{simulate_record, GaussianNoise, SimGrid};

struct Suite {
    failures: Vec<String>,
}

impl Suite {
    fn check(&mut self, name: &str, ok: bool, detail: impl FnOnce() -> String) {
        if ok {
            println!("PASS {name}");
        } else {
            let d = detail();
            println!("FAIL {name}: {d}");
            self.failures.push(format!("{name}: {d}"));
        }
    }
}

fn random_hermitian(rng: &mut ChaCha12Rng) -> Operator {
    let a: f64 = rng.gen_range(-1.0..1.0);
    let d: f64 = rng.gen_range(-1.0..1.0);
    let br: f64 = rng.gen_range(-1.0..1.0);
    let bi: f64 = rng.gen_range(-1.0..1.0);
    Operator::from_rows(
        2,
        &[
            Complex64::new(a, 0.0),
            Complex64::new(br, bi),
            Complex64::new(br, -bi),
            Complex64::new(d, 0.0),
        ],
    )
    .unwrap()
}

fn random_bloch(rng: &mut ChaCha12Rng) -> BlochVector {
    loop {
        let x = rng.gen_range(-1.0..1.0);
        let y = rng.gen_range(-1.0..1.0);
        let z = rng.gen_range(-1.0..1.0);
        if x * x + y * y + z * z <= 1.0 {
            return BlochVector::new(x, y, z).unwrap();
        }
    }
}

/// Run every invariant check against the resolved configuration.
pub fn run_suite(cfg: &ExperimentConfig) -> Result<(), String> {
    let mut suite = Suite {
        failures: Vec::new(),
    };
    let mut rng = ChaCha12Rng::seed_from_u64(0x51d15c);

    // Superoperator algebra on random inputs.
    let mut worst_herm = 0.0f64;
    let mut worst_trace = 0.0f64;
    let mut worst_order = 0.0f64;
    let mut worst_bloch = 0.0f64;
    for _ in 0..200 {
        let f = random_hermitian(&mut rng);
        let rho = bloch_to_density(random_bloch(&mut rng)).unwrap();
        let d_std = dissipator(&f, &rho, DissipatorOrdering::StandardFdagF).unwrap();
        let d_ffd = dissipator(&f, &rho, DissipatorOrdering::FFdag).unwrap();
        let (m, _) = msuperop(&f, &rho).unwrap();
        let h = innovation(&f, &rho).unwrap();
        for op in [&d_std, &d_ffd, &m, &h] {
            worst_herm = worst_herm.max(op.hermiticity_deviation());
        }
        worst_trace = worst_trace
            .max(d_std.trace().norm())
            .max(h.trace().norm());
        worst_order = worst_order.max(d_std.max_abs_diff(&d_ffd));

        let b = density_to_bloch(&rho).unwrap();
        let orig = random_bloch(&mut rng);
        let rt = density_to_bloch(&bloch_to_density(orig).unwrap()).unwrap();
        worst_bloch = worst_bloch
            .max((rt.x - orig.x).abs())
            .max((rt.y - orig.y).abs())
            .max((rt.z - orig.z).abs());
        let _ = b;
    }
    suite.check(
        "superoperator hermiticity",
        worst_herm <= 1e-12,
        || format!("max deviation {worst_herm:.3e}"),
    );
    suite.check(
        "superoperator trace annihilation",
        worst_trace <= 1e-12,
        || format!("max |trace| {worst_trace:.3e}"),
    );
    suite.check(
        "dissipator ordering equivalence for Hermitian F",
        worst_order <= 1e-12,
        || format!("max difference {worst_order:.3e}"),
    );
    suite.check("bloch round trip", worst_bloch <= 1e-12, || {
        format!("max error {worst_bloch:.3e}")
    });

    // State guards along a noisy trajectory of the configured model.
    let grid = SimGrid::new(cfg.grid.dt, cfg.grid.t_max.min(2.0)).unwrap();
    let mut noise = GaussianNoise::new(ChaCha12Rng::seed_from_u64(cfg.base_seed));
    match simulate_record(&cfg.pair.model0, &cfg.rho0, grid, &mut noise) {
        Ok((path, record)) => {
            let trace_ok = path.states.iter().all(|s| (s.trace() - 1.0).abs() <= 1e-9);
            let herm_ok = path.states.iter().all(|s| s.op.is_hermitian(1e-12));
            let psd_ok = path
                .states
                .iter()
                .all(|s| s.op.min_eigenvalue() >= -1e-8);
            suite.check("trajectory trace preservation", trace_ok, String::new);
            suite.check("trajectory hermiticity", herm_ok, String::new);
            suite.check("trajectory positivity", psd_ok, String::new);

            let mut noise2 = GaussianNoise::new(ChaCha12Rng::seed_from_u64(cfg.base_seed));
            let (_, record2) =
                simulate_record(&cfg.pair.model0, &cfg.rho0, grid, &mut noise2).unwrap();
            suite.check(
                "record determinism",
                record.dy == record2.dy,
                || "same seed produced different records".into(),
            );
        }
        Err(e) => suite.check("trajectory integration", false, || e.to_string()),
    }

    // Posterior normalization and shift invariance on random logliks.
    let mut norm_ok = true;
    let mut shift_ok = true;
    let mut map_ok = true;
    for _ in 0..10_000 {
        let l0: f64 = rng.gen_range(-300.0..300.0);
        let l1: f64 = rng.gen_range(-300.0..300.0);
        let c: f64 = rng.gen_range(-100.0..100.0);
        let p = posteriors(l0, l1, &cfg.pair);
        norm_ok &= (p.p0 + p.p1 - 1.0).abs() <= 1e-12;
        let q = posteriors(l0 + c, l1 + c, &cfg.pair);
        shift_ok &= (p.p0 - q.p0).abs() <= 1e-12;
        shift_ok &= decide(l0, l1, &cfg.pair).accepted == decide(l0 + c, l1 + c, &cfg.pair).accepted;
        let ce = conditional_error(&p);
        map_ok &= ce <= 0.5 + 1e-15;
    }
    suite.check("posterior normalization", norm_ok, String::new);
    suite.check("posterior shift invariance", shift_ok, String::new);
    suite.check("conditional error bounded by 1/2", map_ok, String::new);

    // Trial determinism and parallel/sequential bit-equality.
    let mut small = cfg.clone();
    small.n_trials = 6;
    small.grid = SimGrid::new(cfg.grid.dt, cfg.grid.t_max.min(1.0)).unwrap();
    small.truth_sampling = crate::montecarlo::TruthSampling::FromPrior;
    let a = run_trial(&small, 0);
    let b = run_trial(&small, 0);
    match (a, b) {
        (Ok(a), Ok(b)) => suite.check(
            "trial determinism",
            a.conditional_error_path == b.conditional_error_path
                && a.loglik0_path == b.loglik0_path,
            || "repeated trial differs".into(),
        ),
        _ => suite.check("trial determinism", false, || "trial failed".into()),
    }
    let mut seq_cfg = small.clone();
    seq_cfg.workers = 1;
    let mut par_cfg = small;
    par_cfg.workers = 4;
    match (estimate_qe_posterior(&seq_cfg), estimate_qe_posterior(&par_cfg)) {
        (Ok(s), Ok(p)) => suite.check(
            "parallel/sequential bit equality",
            s.qe == p.qe && s.stderr == p.stderr,
            || "worker count changed the curve".into(),
        ),
        _ => suite.check("parallel/sequential bit equality", false, || {
            "estimator failed".into()
        }),
    }

    if suite.failures.is_empty() {
        println!("validate: all checks passed");
        Ok(())
    } else {
        Err(format!("{} check(s) failed", suite.failures.len()))
    }
}
