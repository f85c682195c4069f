//! The ten acceptance criteria. Every criterion runs, prints one PASS/FAIL line,
//! and the test fails at the end if any of them did.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use varhor::expr::{BinOp, Dims, Expr, Func, Slots, Var};
use varhor::model::{builtin, load_problem};
use varhor::opt::{optimize, OptimizerOptions};
use varhor::sim::simulate_forward;
use varhor::smp::{check_smp, gateaux_cost, rho_convergence, SmpOptions};
use varhor::stopping::{Case, Horizon, TerminalTime};
use varhor::{ControlPath, Pipeline, ProblemSpec, RunConfig, Settings};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ln2() -> f64 {
    2f64.ln()
}

fn paper() -> ProblemSpec {
    builtin("paper-example").unwrap()
}

fn constant(spec: &ProblemSpec, steps: usize, v: f64) -> ControlPath {
    ControlPath::constant(spec.grid(steps).unwrap(), &[v])
}

fn run<'a>(spec: &'a ProblemSpec, u: &ControlPath) -> Pipeline<'a> {
    Pipeline::run(spec, u, &Settings::default()).unwrap()
}

fn terminal_time() -> Outcome {
    let spec = paper();
    let u = constant(&spec, 10_000, 1.0);
    let start = Instant::now();
    let tt = TerminalTime::compute(&spec, &u, 1, 0, 2).unwrap();
    let elapsed = start.elapsed();
    let tau = tt.stopping.tau_hat;
    check(
        (tau - ln2()).abs() <= 1e-3 && tt.stopping.case == Case::BeforeT && elapsed < Duration::from_secs(1),
        format!("tau_hat = {tau:.6} (ln 2 = {:.6}), case {:?}, {elapsed:?}", ln2(), tt.stopping.case),
    )
}

fn costs() -> Outcome {
    let spec = paper();
    let j = run(&spec, &constant(&spec, 10_000, 1.0)).cost;
    let classical = builtin("classical-example").unwrap();
    let jt = run(&classical, &constant(&classical, 10_000, 1.0)).cost;
    check(
        (j - ln2()).abs() <= 1e-3 && (jt - 1.0).abs() <= 1e-6 && j < jt,
        format!("J = {j:.6}, classical J = {jt:.9}, varying horizon improves by {:.6}", jt - j),
    )
}

fn backward() -> Outcome {
    let spec = paper();
    let pl = run(&spec, &constant(&spec, 10_000, 1.0));
    let hz = pl.horizon();
    let y0 = pl.backward.y0()[0];
    let worst = (0..hz.len())
        .map(|i| {
            let t = hz.time(i);
            (pl.backward.mean_y(i)[0] + t.exp() * (ln2() - t)).abs()
        })
        .fold(0.0, f64::max);
    check((y0 + ln2()).abs() <= 1e-3 && worst <= 1e-3, format!("Y(0) = {y0:.6}, max |Y - (-e^t (ln2 - t))| = {worst:.2e}"))
}

fn adjoints() -> Outcome {
    let spec = paper();
    let pl = run(&spec, &constant(&spec, 10_000, 1.0));
    let adj = pl.adjoint().unwrap();
    let m = adj.max_abs();
    check(m <= 1e-12, format!("max |p|, |k|, |q| = {m:e}"))
}

fn tau_derivative() -> Outcome {
    let spec = paper();
    let u = constant(&spec, 10_000, 1.0);
    let v = constant(&spec, 10_000, 1.0);
    let pl = run(&spec, &u);
    let d = pl.tau_derivative(&v).unwrap().value;
    let rho = 1e-3;
    let moved = TerminalTime::compute(&spec, &u.axpy(rho, &v), 1, 0, 2).unwrap().stopping.tau_hat;
    let fd = (pl.tau() - moved) / rho;
    check(
        (d - 0.5).abs() <= 0.02 * 0.5 && (fd - d).abs() <= 0.02 * d.abs(),
        format!("tau derivative = {d:.6}, finite difference at rho = 1e-3: {fd:.6}"),
    )
}

fn fd_cost(spec: &ProblemSpec, u: &ControlPath, v: &ControlPath, rho: f64) -> f64 {
    let j0 = run(spec, u).cost;
    let d = |r: f64| (run(spec, &u.axpy(r, v)).cost - j0) / r;
    2.0 * d(rho / 2.0) - d(rho)
}

fn lq_spec() -> ProblemSpec {
    let cfg = RunConfig::from_json_str(
        r#"{
            "problem": {
                "dims": {"n": 1, "m": 1, "d": 1, "k": 1},
                "f": ["-0.5*x1+u1"], "sigma": [["0"]],
                "g": ["0.3*x1-0.2*y1+0.1*u1"], "psi": ["0.5*x1^2"],
                "l": "0.5*u1^2+0.2*x1^2+0.1*y1", "beta": "0.3*x1^2",
                "gamma": "0.5*y1^2", "phi": "x1"
            },
            "horizon": 1, "alpha": 0.4, "x0": [0],
            "control": {"lo": 0, "hi": 2}
        }"#,
    )
    .unwrap();
    load_problem(&cfg).unwrap()
}

fn gateaux() -> Outcome {
    let spec = paper();
    let u = constant(&spec, 2000, 1.0);
    let v = constant(&spec, 2000, 1.0);
    let g = gateaux_cost(&run(&spec, &u), &v).unwrap().value;
    let want = ln2() - 0.5;
    let fd = fd_cost(&spec, &u, &v, 1e-2);
    let mut ok = (g - want).abs() <= 0.01 * want && (g - fd).abs() <= 0.01 * fd.abs();
    let mut detail = format!("gateaux = {g:.6} (ln2 - 1/2 = {want:.6}), finite difference = {fd:.6}; LQ:");
    let lq = lq_spec();
    let u = constant(&lq, 2000, 1.0);
    let pl = run(&lq, &u);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..3 {
        let (a, b, c, d): (f64, f64, f64, f64) =
            (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..6.0), rng.random_range(0.0..6.0));
        let v = ControlPath::from_fn(*u.grid(), 1, |t| vec![a + b * (c * t + d).sin()]);
        let g = gateaux_cost(&pl, &v).unwrap().value;
        let fd = fd_cost(&lq, &u, &v, 1e-2);
        ok &= (g - fd).abs() <= 0.01 * fd.abs();
        detail += &format!(" {g:.5}/{fd:.5}");
    }
    check(ok, detail)
}

fn margins() -> Outcome {
    let spec = paper();
    let pl = run(&spec, &constant(&spec, 10_000, 1.0));
    let opts = SmpOptions::new(&spec);
    let rep = check_smp(&pl, &pl.adjoint().unwrap(), &opts).unwrap();
    let analytic = rep.rows.iter().map(|r| (r.margin - (r.u[0] - 1.0) * (1.0 - r.t.exp() / 2.0)).abs()).fold(0.0, f64::max);
    let node_gap = pl.tau() / (opts.t_nodes - 1) as f64;
    let bad = run(&spec, &constant(&spec, 10_000, 2.0));
    let bad_min = check_smp(&bad, &bad.adjoint().unwrap(), &opts).unwrap().min_margin;
    check(
        rep.min_margin >= -1e-6 && (rep.argmin_t - pl.tau()).abs() <= node_gap && analytic <= 1e-3 && bad_min <= -0.1,
        format!(
            "{} rows, min margin {:.2e} at t = {:.4} (tau = {:.4}), max gap to (u-1)(1-e^t/2) {analytic:.1e}; at u = 2 min margin {bad_min:.4}",
            rep.rows.len(),
            rep.min_margin,
            rep.argmin_t,
            pl.tau()
        ),
    )
}

fn rho_table() -> Outcome {
    let spec = paper();
    let pl = run(&spec, &constant(&spec, 10_000, 1.0));
    let v = constant(&spec, 10_000, 1.0);
    let rows = rho_convergence(&pl, &v, &[1e-1, 5e-2, 2.5e-2, 1.25e-2]).unwrap();
    let strict = |f: fn(&varhor::smp::RhoRow<f64>) -> f64| rows.windows(2).all(|w| f(&w[1]) < f(&w[0]));
    // p vanishes identically on this problem, so its column can only stay at zero.
    let p_ok = rows.windows(2).all(|w| w[1].err_p <= w[0].err_p);
    let ok = strict(|r| r.d_tau) && strict(|r| r.err_eta) && strict(|r| r.err_y) && p_ok;
    let table: Vec<String> =
        rows.iter().map(|r| format!("[{:.4}: {:.2e} {:.2e} {:.2e} {:.2e}]", r.rho, r.d_tau, r.err_eta, r.err_y, r.err_p)).collect();
    check(ok, format!("rho: d_tau err_eta err_y err_p {}", table.join(" ")))
}

fn optimizer() -> Outcome {
    let spec = paper();
    let steps = RunConfig::builtin("paper-example").grid.steps;
    let start = Instant::now();
    let r = optimize(&spec, &constant(&spec, steps, 2.0), &Settings::default(), &OptimizerOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let hz = Horizon::new(*r.control.grid(), r.tau_hat);
    let dev = (0..hz.cells()).map(|c| (r.control.cell(c)[0] - 1.0).abs()).fold(0.0, f64::max);
    let dev_all = r.control.values().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    // brute force over constant controls
    let (best_c, best_j) = (0..=1000)
        .map(|i| {
            let c = 1.0 + i as f64 * 1e-3;
            (c, run(&spec, &constant(&spec, steps, c)).cost)
        })
        .fold((f64::NAN, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b });
    let ok = dev <= 1e-2
        && (r.cost - ln2()).abs() <= 5e-3
        && r.iterations <= 200
        && elapsed < Duration::from_secs(30)
        && (best_c - 1.0).abs() <= 1e-2
        && (r.cost - best_j).abs() <= 5e-3;
    check(
        ok,
        format!(
            "{} iterations, {elapsed:?}, |u - 1| = {dev:.1e} before tau ({dev_all:.1e} overall), J = {:.6}; scan: best constant {best_c:.3} with J = {best_j:.6}",
            r.iterations, r.cost
        ),
    )
}

fn random_expr(rng: &mut ChaCha8Rng, depth: usize) -> Expr {
    let b = |e: Expr| Box::new(e);
    let lift = |c: f64, a: Expr| Expr::Bin(BinOp::Add, b(Expr::Num(c)), b(Expr::Bin(BinOp::Mul, b(a.clone()), b(a))));
    if depth == 0 || rng.random_bool(0.25) {
        return match rng.random_range(0..5) {
            0 => Expr::Var(Var::T),
            1 => Expr::Var(Var::X(0)),
            2 => Expr::Var(Var::Y(0)),
            3 => Expr::Var(Var::U(0)),
            _ => Expr::Num(rng.random_range(1..2000) as f64 / 1000.0),
        };
    }
    let a = random_expr(rng, depth - 1);
    match rng.random_range(0..9) {
        0 => Expr::Bin(BinOp::Add, b(a), b(random_expr(rng, depth - 1))),
        1 => Expr::Bin(BinOp::Sub, b(a), b(random_expr(rng, depth - 1))),
        2 => Expr::Bin(BinOp::Mul, b(Expr::Call(Func::Sin, b(a))), b(random_expr(rng, depth - 1))),
        3 => Expr::Bin(BinOp::Div, b(a), b(lift(1.5, random_expr(rng, depth - 1)))),
        4 => Expr::Bin(BinOp::Pow, b(Expr::Call(Func::Cos, b(a))), b(Expr::Num(2.0))),
        5 => Expr::Call(Func::Exp, b(Expr::Call(Func::Sin, b(a)))),
        6 => Expr::Call(Func::Log, b(lift(2.0, a))),
        7 => Expr::Call(Func::Sqrt, b(lift(1.0, a))),
        _ => Expr::Neg(b(Expr::Call(Func::Cos, b(a)))),
    }
}

fn hygiene() -> Outcome {
    let dims = Dims::new(1, 1, 1, 1);
    let eval = |e: &Expr, p: &[f64]| e.eval(&Slots { dims: &dims, values: p }).unwrap();
    let close = |a: f64, b: f64, tol: f64| (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut worst1, mut worst2) = (0.0f64, 0.0f64);
    let mut ad_ok = true;
    for _ in 0..500 {
        let e = random_expr(&mut rng, 6);
        let p: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dir: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let at = |h: f64| eval(&e, &p.iter().zip(&dir).map(|(a, b)| a + h * b).collect::<Vec<_>>());
        let (v, d1, d2) = e.directional(&dims, &p, &dir, 2).unwrap();
        let d2 = d2.unwrap();
        let fd1 = (at(1e-6) - at(-1e-6)) / 2e-6;
        let fd2 = (at(1e-4) - 2.0 * v + at(-1e-4)) / 1e-8;
        ad_ok &= close(d1, fd1, 1e-6) && close(d2, fd2, 1e-4);
        worst1 = worst1.max((d1 - fd1).abs() / d1.abs().max(fd1.abs()).max(1.0));
        worst2 = worst2.max((d2 - fd2).abs() / d2.abs().max(fd2.abs()).max(1.0));
    }

    let lq: ProblemSpec = builtin("lq-noise-1d").unwrap();
    let m = 200_000;
    let u = constant(&lq, 50, 0.0);
    let ens = simulate_forward(&lq, &u, m, 7).unwrap();
    let xs: Vec<f64> = (0..m).map(|p| ens.x(p, 50)[0]).collect();
    let mean = xs.iter().sum::<f64>() / m as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    // sample variance of N(0,1) has standard deviation sqrt(2/(m-1))
    let mc_ok = mean.abs() <= 3.0 / (m as f64).sqrt() && (var - 1.0).abs() <= 3.0 * (2.0 / (m - 1) as f64).sqrt();

    let fingerprint = || {
        let u = ControlPath::from_fn(lq.grid(40).unwrap(), 1, |t| vec![0.8 - t]);
        let pl = Pipeline::run(&lq, &u, &Settings::default().with_paths(4000).with_seed(99)).unwrap();
        let mut bits: Vec<u64> = pl.terminal.ensemble.states().iter().map(|x| x.to_bits()).collect();
        bits.push(pl.cost.to_bits());
        bits.extend(pl.backward.mean_y(0).iter().map(|x| x.to_bits()));
        bits
    };
    let pool = |n: usize| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    let same = pool(1).install(fingerprint) == pool(8).install(fingerprint);

    check(
        ad_ok && mc_ok && same,
        format!(
            "AD vs FD worst relative gap {worst1:.1e} (first) {worst2:.1e} (second); lq-noise mean {mean:.2e} variance {var:.4}; 1 vs 8 threads bit-exact: {same}"
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("terminal time", terminal_time),
        ("costs", costs),
        ("backward solution", backward),
        ("adjoints", adjoints),
        ("tau derivative", tau_derivative),
        ("gateaux derivative", gateaux),
        ("maximum principle margins", margins),
        ("rho convergence", rho_table),
        ("optimizer", optimizer),
        ("numerics hygiene", hygiene),
    ];
    // the report goes straight to the stderr handle so the harness never captures it
    let mut err = std::io::stderr();
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let line = match f() {
            Ok(d) => format!("criterion {:>2} PASS {name}: {d}", i + 1),
            Err(d) => {
                failed.push(i + 1);
                format!("criterion {:>2} FAIL {name}: {d}", i + 1)
            }
        };
        writeln!(err, "{line}").unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
