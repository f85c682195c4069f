//! Monte Carlo statistics of the forward simulation and reproducibility of the
//! whole pipeline under different thread counts.

use varhor::model::{builtin, load_problem, ControlPath};
use varhor::pipeline::Pipeline;
use varhor::sim::{mean_functional, simulate_forward};
use varhor::stopping::h_process;
use varhor::{RunConfig, Settings};

const M: usize = 200_000;

#[test]
fn lq_noise_terminal_law_is_standard_normal() {
    let spec = builtin::<f64>("lq-noise-1d").unwrap();
    let u = ControlPath::constant(spec.grid(50).unwrap(), &[0.0]);
    let ens = simulate_forward(&spec, &u, M, 7).unwrap();
    let xs: Vec<f64> = (0..M).map(|p| ens.x(p, 50)[0]).collect();
    let mean = xs.iter().sum::<f64>() / M as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (M - 1) as f64;
    assert!(mean.abs() <= 3.0 / (M as f64).sqrt(), "mean {mean}");
    assert!((var - 1.0).abs() <= 0.02, "variance {var}");
}

#[test]
fn second_moment_grows_linearly() {
    let spec = builtin::<f64>("lq-noise-1d").unwrap();
    let u = ControlPath::constant(spec.grid(20).unwrap(), &[0.0]);
    let ens = simulate_forward(&spec, &u, M, 11).unwrap();
    let m = mean_functional(&ens, |x| Ok(x[0] * x[0])).unwrap();
    for i in 1..=20 {
        let t = i as f64 / 20.0;
        assert!((m.at(i) - t).abs() <= 0.02 * t, "t={t} m={}", m.at(i));
    }
}

#[test]
fn constant_functional_has_zero_spread() {
    let spec = builtin::<f64>("lq-noise-1d").unwrap();
    let u = ControlPath::constant(spec.grid(10).unwrap(), &[0.3]);
    let ens = simulate_forward(&spec, &u, 1000, 3).unwrap();
    let c = mean_functional(&ens, |_| Ok(2.5)).unwrap();
    assert!(c.values.iter().all(|&v| v == 2.5));
    assert!(c.stderr.iter().all(|&s| s == 0.0));
}

fn squared_phi_spec() -> varhor::ProblemSpec {
    let cfg = RunConfig::from_json_str(
        r#"{
            "problem": {
                "dims": {"n": 1, "m": 1, "d": 1, "k": 1},
                "f": ["u1"], "sigma": [["1"]], "g": ["0"], "psi": ["0"],
                "l": "0", "beta": "0", "gamma": "0", "phi": "x1^2"
            },
            "horizon": 1, "alpha": 10, "x0": [0],
            "control": {"lo": -1, "hi": 1}
        }"#,
    )
    .unwrap();
    load_problem(&cfg).unwrap()
}

// h is the Itô drift of t ↦ E[Φ(X_t)]; compare it with a centred difference of m.
#[test]
fn h_process_is_the_slope_of_the_mean_constraint() {
    let spec = squared_phi_spec();
    let n = 20;
    let u = ControlPath::constant(spec.grid(n).unwrap(), &[0.5]);
    let ens = simulate_forward(&spec, &u, M, 5).unwrap();
    let m = mean_functional(&ens, |x| Ok(x[0] * x[0])).unwrap();
    let h = h_process(&spec, &ens).unwrap();
    let dt = 1.0 / n as f64;
    for i in 1..n {
        let slope = (m.at(i + 1) - m.at(i - 1)) / (2.0 * dt);
        let se = (m.stderr[i + 1] + m.stderr[i - 1]) / (2.0 * dt) + h.stderr[i];
        assert!((h.at(i) - slope).abs() <= 3.0 * se + 1e-12, "i={i} h={} slope={slope} se={se}", h.at(i));
    }
}

#[test]
fn deterministic_euler_is_first_order() {
    let spec = builtin::<f64>("paper-example").unwrap();
    let err = |n: usize| {
        let u = ControlPath::constant(spec.grid(n).unwrap(), &[1.0]);
        let ens = simulate_forward(&spec, &u, 1, 0).unwrap();
        (0..=n).map(|i| (ens.x(0, i)[0] - ((i as f64 / n as f64).exp() - 1.0)).abs()).fold(0.0, f64::max)
    };
    let ratio = err(200) / err(400);
    assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
}

#[test]
fn seeds_reproduce_and_distinguish() {
    let spec = builtin::<f64>("lq-noise-1d").unwrap();
    let u = ControlPath::constant(spec.grid(20).unwrap(), &[0.1]);
    let a = simulate_forward(&spec, &u, 500, 42).unwrap();
    let b = simulate_forward(&spec, &u, 500, 42).unwrap();
    let c = simulate_forward(&spec, &u, 500, 43).unwrap();
    assert_eq!(bits(a.states()), bits(b.states()));
    assert_ne!(bits(a.states()), bits(c.states()));
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Everything a pipeline run produces that could depend on scheduling.
fn fingerprint() -> Vec<u64> {
    let spec = builtin::<f64>("lq-noise-1d").unwrap();
    let u = ControlPath::from_fn(spec.grid(40).unwrap(), 1, |t| vec![0.8 - t]);
    let settings = Settings::default().with_paths(4000).with_seed(99);
    let pl = Pipeline::run(&spec, &u, &settings).unwrap();
    let adj = pl.adjoint().unwrap();
    let mut out = bits(pl.terminal.ensemble.states());
    out.push(pl.cost.to_bits());
    out.push(pl.tau().to_bits());
    for i in 0..pl.horizon().len() {
        out.extend(bits(&pl.backward.mean_y(i)));
        out.extend(bits(&adj.mean_p(i)));
        out.extend(bits(&adj.mean_q(i)));
    }
    out
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let run = |threads: usize| rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(fingerprint);
    let one = run(1);
    let many = run(8);
    assert_eq!(one, many);
}
