use std::fs;
use std::path::PathBuf;

use serde_json::{json, Value};
use varhor::config::{apply_override, ControlInit};
use varhor::model::{builtin, control_from_init, load_problem};
use varhor::opt::{self, OptimizerOptions};
use varhor::sim::simulate_forward;
use varhor::smp::{self, SmpOptions};
use varhor::stopping::{stopping_time, Case, TerminalTime};
use varhor::{ControlPath, Pipeline, ProblemSpec, RunConfig, Settings, TimeGrid};

use crate::output::{columns, matrix_columns, nums, Cell, Sink, Table};
use crate::{CliError, Common};

/// Everything a subcommand needs after the config has been loaded and validated.
struct Ctx {
    cfg: RunConfig,
    spec: ProblemSpec,
    control: ControlPath,
    settings: Settings,
    sink: Sink,
}

fn schema(message: String) -> CliError {
    CliError::Validation { code: "SchemaError".into(), message }
}

fn load(args: &Common) -> Result<Ctx, CliError> {
    let mut doc: Value = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| schema(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::builtin("paper-example").to_value(),
    };
    for assignment in &args.overrides {
        apply_override(&mut doc, assignment)?;
    }
    let cfg = RunConfig::from_value(doc)?;
    let spec = load_problem::<f64>(&cfg)?;
    let grid = spec.grid(cfg.grid.steps)?;
    let control = control_from_init(&spec, grid, cfg.control.init.as_ref())?;
    let settings = Settings::from_config(&cfg);
    let dir = args.out.clone().or_else(|| cfg.output.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"));
    let sink = Sink::new(&dir, cfg.to_value(), cfg.mc.seed)?;
    Ok(Ctx { cfg, spec, control, settings, sink })
}

/// Perturbation direction from `smp.direction`, all ones when absent. Unlike a
/// control it may leave the box.
fn direction(cfg: &RunConfig, spec: &ProblemSpec, grid: TimeGrid) -> Result<ControlPath, CliError> {
    let k = spec.dims.k;
    Ok(match &cfg.smp.direction {
        None => ControlPath::constant(grid, &vec![1.0; k]),
        Some(ControlInit::Constant(v)) => ControlPath::constant(grid, &v.expand(k, "smp.direction")?),
        Some(ControlInit::Path(rows)) => {
            if rows.iter().any(|r| r.len() != k) {
                return Err(schema(format!("smp.direction rows must have {k} components")));
            }
            ControlPath::from_values(grid, k, rows.concat())?
        }
    })
}

fn grid_summary(ctx: &Ctx) -> Value {
    let g = ctx.control.grid();
    json!({"steps": g.steps(), "dt": g.dt(), "horizon": g.horizon()})
}

pub fn simulate(args: &Common) -> Result<(), CliError> {
    let ctx = load(args)?;
    let (spec, s) = (&ctx.spec, &ctx.settings);
    let ens = simulate_forward(spec, &ctx.control, s.paths, s.seed)?;
    let n = spec.dims.n;
    let comps = (0..n)
        .map(|i| varhor::sim::mean_functional(&ens, |x| Ok(x[i])))
        .collect::<varhor::Result<Vec<_>>>()?;
    let m = stopping_time(spec, &ens, s.band_cells)?.m_curve;
    let mut header = vec!["t".to_string()];
    for i in 1..=n {
        header.push(format!("x{i}_mean"));
        header.push(format!("x{i}_stderr"));
    }
    header.extend(["phi_mean".to_string(), "phi_stderr".to_string()]);
    let mut table = Table::new(header);
    for (i, t) in ens.grid().nodes().into_iter().enumerate() {
        let mut row = vec![Cell::Num(t)];
        for c in &comps {
            row.push(c.values[i].into());
            row.push(c.stderr[i].into());
        }
        row.push(m.values[i].into());
        row.push(m.stderr[i].into());
        table.push(row);
    }
    let file = ctx.sink.write_csv("simulate", &table)?;
    let last = ens.grid().steps();
    let summary = json!({
        "paths": ens.paths(),
        "grid": grid_summary(&ctx),
        "terminal_mean_x": comps.iter().map(|c| c.values[last]).collect::<Vec<_>>(),
    });
    ctx.sink.write_meta("simulate", &[file], summary)?;
    println!("simulated {} path(s) over {} steps", ens.paths(), last);
    Ok(())
}

pub fn stopping(args: &Common) -> Result<(), CliError> {
    let ctx = load(args)?;
    let s = &ctx.settings;
    let tt = TerminalTime::compute(&ctx.spec, &ctx.control, s.paths, s.seed, s.band_cells)?;
    let st = &tt.stopping;
    let mut table = Table::new(["t", "m", "m_stderr", "h", "h_stderr"]);
    for (i, t) in ctx.control.grid().nodes().into_iter().enumerate() {
        table.push(vec![
            t.into(),
            st.m_curve.values[i].into(),
            st.m_curve.stderr[i].into(),
            st.h_curve.values[i].into(),
            st.h_curve.stderr[i].into(),
        ]);
    }
    let file = ctx.sink.write_csv("stopping", &table)?;
    let summary = json!({
        "tau_hat": st.tau_hat,
        "case": st.case.to_string(),
        "cross_index": st.cross_index,
        "h_tau": tt.h_tau,
        "grid": grid_summary(&ctx),
    });
    ctx.sink.write_meta("stopping", &[file], summary)?;
    println!("tau_hat = {:.6} ({})", st.tau_hat, st.case);
    Ok(())
}

pub fn cost(args: &Common) -> Result<(), CliError> {
    let ctx = load(args)?;
    let pl = Pipeline::run(&ctx.spec, &ctx.control, &ctx.settings)?;
    let dims = ctx.spec.dims;
    let hz = *pl.horizon();
    let mut header = vec!["t".to_string()];
    header.extend(columns("y", dims.m));
    header.extend(matrix_columns("z", dims.m, dims.d));
    let mut table = Table::new(header);
    for i in 0..hz.len() {
        let mut row = vec![Cell::Num(hz.time(i))];
        row.extend(nums(&pl.backward.mean_y(i)));
        if i < hz.cells() {
            row.extend(nums(&pl.backward.mean_z(i)));
        } else {
            row.extend((0..dims.m * dims.d).map(|_| Cell::Empty));
        }
        table.push(row);
    }
    let file = ctx.sink.write_csv("cost", &table)?;
    let summary = json!({
        "cost": pl.cost,
        "tau_hat": pl.tau(),
        "case": pl.case().to_string(),
        "mode": pl.mode.name(),
        "y0": pl.backward.y0(),
        "grid": grid_summary(&ctx),
    });
    ctx.sink.write_meta("cost", &[file], summary)?;
    println!("J = {:.6} (tau_hat = {:.6}, {})", pl.cost, pl.tau(), pl.case());
    Ok(())
}

pub fn adjoint(args: &Common) -> Result<(), CliError> {
    let ctx = load(args)?;
    let pl = Pipeline::run(&ctx.spec, &ctx.control, &ctx.settings)?;
    let adj = pl.adjoint()?;
    let dims = ctx.spec.dims;
    let hz = *pl.horizon();
    let mut header = vec!["t".to_string()];
    header.extend(columns("p", dims.n));
    header.extend(matrix_columns("k", dims.n, dims.d));
    header.extend(columns("q", dims.m));
    let mut table = Table::new(header);
    for i in 0..hz.len() {
        let mut row = vec![Cell::Num(hz.time(i))];
        row.extend(nums(&adj.mean_p(i)));
        if i < hz.cells() {
            row.extend(nums(&adj.mean_k(i)));
        } else {
            row.extend((0..dims.n * dims.d).map(|_| Cell::Empty));
        }
        row.extend(nums(&adj.mean_q(i)));
        table.push(row);
    }
    let file = ctx.sink.write_csv("adjoint", &table)?;
    let script_l = if pl.case() == Case::Never { None } else { Some(pl.script_l(&adj)?) };
    let summary = json!({
        "tau_hat": pl.tau(),
        "case": pl.case().to_string(),
        "max_abs": adj.max_abs(),
        "script_l": script_l,
        "grid": grid_summary(&ctx),
    });
    ctx.sink.write_meta("adjoint", &[file], summary)?;
    println!("max |p|, |k|, |q| = {:e}", adj.max_abs());
    Ok(())
}

fn margin_table(k: usize, rep: &varhor::SmpReport) -> Table {
    let mut header = vec!["t".to_string(), "node".to_string()];
    header.extend(columns("u", k));
    header.extend(["margin".to_string(), "branch".to_string()]);
    let mut table = Table::new(header);
    for r in &rep.rows {
        let mut row = vec![Cell::Num(r.t), r.node.into()];
        row.extend(nums(&r.u));
        row.push(r.margin.into());
        row.push(r.branch.to_string().into());
        table.push(row);
    }
    table
}

pub fn check_smp(args: &Common) -> Result<(), CliError> {
    let ctx = load(args)?;
    let pl = Pipeline::run(&ctx.spec, &ctx.control, &ctx.settings)?;
    let adj = pl.adjoint()?;
    let opts = SmpOptions::from_config(&ctx.spec, &ctx.cfg)?;
    let rep = smp::check_smp(&pl, &adj, &opts)?;
    let file = ctx.sink.write_csv("check-smp", &margin_table(ctx.spec.dims.k, &rep))?;
    let branch_min: serde_json::Map<String, Value> = rep.branch_min.iter().map(|(b, m)| (b.to_string(), json!(m))).collect();
    let summary = json!({
        "case": rep.case.to_string(),
        "tau_hat": rep.tau_hat,
        "script_l": rep.script_l,
        "h_tau": rep.h_tau,
        "min_margin": rep.min_margin,
        "argmin_t": rep.argmin_t,
        "argmin_u": rep.argmin_u,
        "branch_min": branch_min,
        "rows": rep.rows.len(),
    });
    ctx.sink.write_meta("check-smp", &[file], summary)?;
    println!("min margin = {:.3e} at t = {:.6}, u = {:?} ({})", rep.min_margin, rep.argmin_t, rep.argmin_u, rep.case);
    Ok(())
}

pub fn grad_check(args: &Common) -> Result<(), CliError> {
    let ctx = load(args)?;
    let (spec, u, s) = (&ctx.spec, &ctx.control, &ctx.settings);
    let v = direction(&ctx.cfg, spec, *u.grid())?;
    let pl = Pipeline::run(spec, u, s)?;
    let gat = smp::gateaux_cost(&pl, &v)?;
    let pairing = opt::gradient(&pl, &pl.adjoint()?)?.path.dot(&v);
    let dtau = pl.tau_derivative(&v)?;
    let mut table = Table::new(["rho", "cost_fd", "gateaux", "gradient_pairing", "tau_fd", "tau_derivative"]);
    let mut quotients = Vec::new();
    for &rho in &ctx.cfg.smp.rho_list {
        let moved = u.axpy(rho, &v);
        if !spec.contains(&moved) {
            return Err(varhor::Error::DirectionLeavesBox.into());
        }
        let next = Pipeline::run(spec, &moved, s)?;
        let dj = (next.cost - pl.cost) / rho;
        let dt = (pl.tau() - next.tau()) / rho;
        quotients.push((rho, dj));
        table.push(vec![rho.into(), dj.into(), gat.value.into(), pairing.into(), dt.into(), dtau.value.into()]);
    }
    // first-order Richardson over the two smallest steps
    let richardson = match quotients.as_slice() {
        [.., (r1, d1), (r2, d2)] => {
            let ratio = r1 / r2;
            Some((ratio * d2 - d1) / (ratio - 1.0))
        }
        _ => None,
    };
    let file = ctx.sink.write_csv("grad-check", &table)?;
    let summary = json!({
        "case": gat.case.to_string(),
        "gateaux": gat.value,
        "gateaux_fixed_horizon": gat.alternative,
        "gradient_pairing": pairing,
        "cost_fd_richardson": richardson,
        "tau_derivative": dtau.value,
        "tau_derivative_alternative": dtau.alternative,
    });
    ctx.sink.write_meta("grad-check", &[file], summary)?;
    println!("gateaux = {:.6}, gradient pairing = {:.6}, finite difference (Richardson) = {}", gat.value, pairing, richardson.map_or("n/a".into(), |r| format!("{r:.6}")));
    Ok(())
}

pub fn rho_table(args: &Common) -> Result<(), CliError> {
    let ctx = load(args)?;
    let v = direction(&ctx.cfg, &ctx.spec, *ctx.control.grid())?;
    let pl = Pipeline::run(&ctx.spec, &ctx.control, &ctx.settings)?;
    let rows = smp::rho_convergence(&pl, &v, &ctx.cfg.smp.rho_list)?;
    let mut table = Table::new(["rho", "tau_rho", "d_tau", "err_eta", "err_Y", "err_p"]);
    for r in &rows {
        table.push(vec![r.rho.into(), r.tau_rho.into(), r.d_tau.into(), r.err_eta.into(), r.err_y.into(), r.err_p.into()]);
    }
    let file = ctx.sink.write_csv("rho-table", &table)?;
    let summary = json!({"tau_hat": pl.tau(), "case": pl.case().to_string(), "rows": rows.len()});
    ctx.sink.write_meta("rho-table", &[file], summary)?;
    println!("{} rows written", rows.len());
    Ok(())
}

pub fn optimize(args: &Common) -> Result<(), CliError> {
    let ctx = load(args)?;
    let opts = OptimizerOptions::from(&ctx.cfg.optimizer);
    let r = opt::optimize(&ctx.spec, &ctx.control, &ctx.settings, &opts)?;
    let mut trace = Table::new(["iter", "J", "tau_hat", "step", "grad_norm"]);
    for row in &r.trace {
        trace.push(vec![row.iter.into(), row.cost.into(), row.tau_hat.into(), row.step.into(), row.grad_norm.into()]);
    }
    let k = ctx.spec.dims.k;
    let mut header = vec!["t".to_string()];
    header.extend(columns("u", k));
    let mut control = Table::new(header);
    let grid = *r.control.grid();
    for c in 0..grid.steps() {
        let mut row = vec![Cell::Num(grid.node(c))];
        row.extend(nums(r.control.cell(c)));
        control.push(row);
    }
    let files = [ctx.sink.write_csv("optimize", &trace)?, ctx.sink.write_csv("optimize_control", &control)?];
    let pl = Pipeline::run(&ctx.spec, &r.control, &ctx.settings)?;
    let margin = smp::check_smp(&pl, &pl.adjoint()?, &SmpOptions::from_config(&ctx.spec, &ctx.cfg)?)?.min_margin;
    let summary = json!({
        "iterations": r.iterations,
        "converged": r.converged,
        "cost": r.cost,
        "tau_hat": r.tau_hat,
        "smp_min_margin": margin,
    });
    ctx.sink.write_meta("optimize", &files, summary)?;
    println!(
        "{} after {} iteration(s): J = {:.6}, tau_hat = {:.6}, SMP min margin = {:.3e}",
        if r.converged { "converged" } else { "stopped" },
        r.iterations,
        r.cost,
        r.tau_hat,
        margin
    );
    Ok(())
}

struct Verdict {
    name: &'static str,
    value: f64,
    expected: f64,
    tolerance: f64,
    pass: bool,
}

fn near(name: &'static str, value: f64, expected: f64, tolerance: f64) -> Verdict {
    Verdict { name, value, expected, tolerance, pass: (value - expected).abs() <= tolerance }
}

fn at_least(name: &'static str, value: f64, bound: f64) -> Verdict {
    Verdict { name, value, expected: bound, tolerance: 0.0, pass: value >= bound }
}

pub fn example_verify(args: &Common) -> Result<(), CliError> {
    let ctx = load(args)?;
    let paper = builtin::<f64>("paper-example")?;
    if ctx.spec != paper {
        return Err(CliError::Validation {
            code: "InvalidArgument".into(),
            message: "example-verify needs the unmodified builtin paper-example problem".into(),
        });
    }
    let ln2 = 2f64.ln();
    let grid = *ctx.control.grid();
    let ubar = ControlPath::constant(grid, &[1.0]);
    let pl = Pipeline::run(&ctx.spec, &ubar, &ctx.settings)?;
    let classical = builtin::<f64>("classical-example")?;
    let jt = Pipeline::run(&classical, &ubar, &ctx.settings)?.cost;
    let hz = *pl.horizon();
    let y_gap = (0..hz.len()).map(|i| (pl.backward.mean_y(i)[0] + hz.time(i).exp() * (ln2 - hz.time(i))).abs()).fold(0.0, f64::max);
    let adj = pl.adjoint()?;
    let ones = ControlPath::constant(grid, &[1.0]);
    let dtau = pl.tau_derivative(&ones)?.value;
    let gat = smp::gateaux_cost(&pl, &ones)?.value;
    let rep = smp::check_smp(&pl, &adj, &SmpOptions::new(&ctx.spec))?;
    let checks = [
        near("tau_hat", pl.tau(), ln2, 1e-3),
        near("J", pl.cost, ln2, 1e-3),
        near("J_classical", jt, 1.0, 1e-6),
        at_least("improvement", jt - pl.cost, 0.0),
        near("Y0", pl.backward.y0()[0], -ln2, 1e-3),
        near("Y_max_error", y_gap, 0.0, 1e-3),
        near("adjoint_max_abs", adj.max_abs(), 0.0, 1e-12),
        near("tau_derivative", dtau, 0.5, 0.02 * 0.5),
        near("gateaux", gat, ln2 - 0.5, 0.01 * (ln2 - 0.5)),
        at_least("smp_min_margin", rep.min_margin, -1e-6),
    ];
    let mut table = Table::new(["check", "value", "expected", "tolerance", "pass"]);
    println!("{:<18} {:>14} {:>14} {:>10}  result", "check", "value", "expected", "tolerance");
    for c in &checks {
        println!(
            "{:<18} {:>14.10} {:>14.10} {:>10.1e}  {}",
            c.name,
            c.value,
            c.expected,
            c.tolerance,
            if c.pass { "PASS" } else { "FAIL" }
        );
        table.push(vec![c.name.into(), c.value.into(), c.expected.into(), c.tolerance.into(), (if c.pass { "true" } else { "false" }).into()]);
    }
    println!("varying horizon J = {:.6} < classical J = {:.6}", pl.cost, jt);
    let file = ctx.sink.write_csv("example-verify", &table)?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    let summary = json!({"checks": table.len(), "failed": failed, "tau_hat": pl.tau(), "cost": pl.cost, "classical_cost": jt});
    ctx.sink.write_meta("example-verify", &[file], summary)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical { code: "VerificationFailed".into(), message: format!("failed checks: {}", failed.join(", ")) })
    }
}
