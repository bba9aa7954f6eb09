//! `hamsym` — verify point symmetries of Hamiltonian systems, build their
//! first integrals, and run conservative integrations, from the built-in
//! catalog or from plain-text system description files.
//!
//! Exit codes: 0 all checks passed (or run completed), 1 a verification check
//! failed, 2 bad input (arguments, unknown system, malformed description
//! file), 3 a runtime failure (integration broke down mid-run).

mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hamsym::continuous::{
    check_hamiltonian_identity, integrate_reference, monitor, DriftReport, IntegrateError, State,
};
use hamsym::discrete::{
    check_discrete_identity, discrete_energy, monitor_lattice, run_lattice, LatticeTrajectory,
};
use hamsym::systems::{
    self, CatalogEntry, ContinuousBundle, DiscreteBundle, RunDefaults, SystemKind, VerifyError,
    VerifySettings,
};

#[derive(Parser)]
#[command(
    name = "hamsym",
    version,
    about = "Point symmetries of Hamiltonian systems: verification, first integrals, \
             and conservative integration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify every claim a system makes: symmetry classifications, first
    /// integrals against their closed forms, and relations among integrals
    Verify {
        /// Catalog id or path to a description file
        target: String,
        /// Random states (continuous) or solution triples (discrete) to test at
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Pass tolerance for scaled residuals
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// RNG seed (results are deterministic per seed)
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Check the structural identity that ties invariance defects to the
    /// equations of motion, at random off-solution data
    Identity {
        /// Catalog id or path to a description file
        target: String,
        /// Random evaluation points per symmetry
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Pass tolerance for scaled residuals
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// RNG seed (results are deterministic per seed)
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Integrate a continuous system (reference RK4) and emit CSV, with a
    /// first-integral drift report on stderr
    Integrate {
        /// Catalog id or path to a description file
        target: String,
        /// Time step (defaults to the system's run defaults)
        #[arg(long)]
        dt: Option<f64>,
        /// Final time (defaults to the system's run defaults)
        #[arg(long, value_name = "T")]
        t_end: Option<f64>,
        /// Write CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a discrete system on its self-determining lattice and emit CSV,
    /// with a drift report on stderr
    Lattice {
        /// Catalog id or path to a description file
        target: String,
        /// First lattice spacing (defaults to the system's run defaults)
        #[arg(long)]
        h0: Option<f64>,
        /// Number of steps (defaults to the system's run defaults)
        #[arg(long)]
        steps: Option<usize>,
        /// Write CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect the built-in catalog
    Catalog {
        #[command(subcommand)]
        what: CatalogCmd,
    },
}

#[derive(Subcommand)]
enum CatalogCmd {
    /// List built-in systems
    List,
    /// Print a built-in system as a description file (editable and loadable
    /// everywhere a catalog id is accepted)
    Export {
        /// Catalog id
        id: String,
    },
}

enum Failure {
    /// Bad arguments, unknown system, malformed description file.
    Input(String),
    /// The computation itself broke down.
    Runtime(String),
}

fn input(msg: impl std::fmt::Display) -> Failure {
    Failure::Input(msg.to_string())
}

fn runtime(msg: impl std::fmt::Display) -> Failure {
    Failure::Runtime(msg.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(command: Command) -> Result<bool, Failure> {
    match command {
        Command::Verify {
            target,
            samples,
            tol,
            seed,
        } => cmd_verify(&target, samples, tol, seed),
        Command::Identity {
            target,
            samples,
            tol,
            seed,
        } => cmd_identity(&target, samples, tol, seed),
        Command::Integrate {
            target,
            dt,
            t_end,
            out,
        } => cmd_integrate(&target, dt, t_end, out.as_deref()).map(|()| true),
        Command::Lattice {
            target,
            h0,
            steps,
            out,
        } => cmd_lattice(&target, h0, steps, out.as_deref()).map(|()| true),
        Command::Catalog { what } => match what {
            CatalogCmd::List => {
                cmd_catalog_list();
                Ok(true)
            }
            CatalogCmd::Export { id } => cmd_catalog_export(&id).map(|()| true),
        },
    }
}

/// A target is a catalog id, or a path to a description file.
fn resolve(target: &str) -> Result<CatalogEntry, Failure> {
    if let Some(entry) = systems::get(target) {
        return Ok(entry);
    }
    let path = Path::new(target);
    if path.exists() {
        let text =
            fs::read_to_string(path).map_err(|e| input(format!("cannot read '{target}': {e}")))?;
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("system")
            .to_string();
        config::parse_config(&text, &id).map_err(|e| input(format!("{target}: {e}")))
    } else {
        Err(input(format!(
            "'{target}' is neither a catalog id nor a file; try 'hamsym catalog list'"
        )))
    }
}

fn cmd_verify(target: &str, samples: usize, tol: f64, seed: u64) -> Result<bool, Failure> {
    let entry = resolve(target)?;
    let settings = VerifySettings { samples, tol, seed };
    let report = systems::verify(&entry, &settings).map_err(|e| match e {
        VerifyError::Build(b) => input(b),
        other => runtime(other),
    })?;
    println!(
        "{} ({}): {} symmetries, {} integrals, {} relations; \
         {} samples, tolerance {:.1e}, seed {}",
        report.id,
        report.kind,
        report.symmetries.len(),
        report.integrals.len(),
        report.relations.len(),
        samples,
        tol,
        seed
    );
    for line in report.lines() {
        println!("  {line}");
    }
    let pass = report.pass();
    println!("{}", if pass { "PASS" } else { "FAIL" });
    Ok(pass)
}

fn cmd_identity(target: &str, samples: usize, tol: f64, seed: u64) -> Result<bool, Failure> {
    let entry = resolve(target)?;
    if entry.symmetries.is_empty() {
        return Err(input(format!(
            "'{}' declares no symmetries to run the identity against",
            entry.id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all_pass = true;
    match entry.kind {
        SystemKind::Continuous => {
            let bundle = entry.build_continuous().map_err(input)?;
            for bs in &bundle.symmetries {
                let mut max = 0.0_f64;
                for _ in 0..samples {
                    let s = entry.sample_state(&mut rng);
                    let qdot: Vec<f64> = (0..entry.n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    let pdot: Vec<f64> = (0..entry.n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    let chk =
                        check_hamiltonian_identity(&bundle.system, &bs.symmetry, &s, &qdot, &pdot)
                            .map_err(runtime)?;
                    max = max.max(chk.residual.scaled().abs());
                }
                all_pass &= report_identity_line(&bs.name, max, tol, samples);
            }
        }
        SystemKind::Discrete => {
            let h0 = default_h0(&entry)?;
            let bundle = entry.build_discrete(h0).map_err(input)?;
            for bs in &bundle.symmetries {
                let mut max = 0.0_f64;
                for _ in 0..samples {
                    let a = entry.sample_state(&mut rng);
                    let mut b = entry.sample_state(&mut rng);
                    let mut c = entry.sample_state(&mut rng);
                    // Arbitrary lattice triples: only the time ordering is
                    // imposed, nothing is solved for.
                    b.t = a.t + rng.gen_range(0.1..0.6);
                    c.t = b.t + rng.gen_range(0.1..0.6);
                    let chk = check_discrete_identity(&bundle.system, &bs.symmetry, &a, &b, &c)
                        .map_err(runtime)?;
                    max = max.max(chk.residual.scaled().abs());
                }
                all_pass &= report_identity_line(&bs.name, max, tol, samples);
            }
        }
    }
    println!("{}", if all_pass { "PASS" } else { "FAIL" });
    Ok(all_pass)
}

fn report_identity_line(name: &str, max: f64, tol: f64, samples: usize) -> bool {
    let ok = max <= tol;
    println!(
        "  identity under {name}: max scaled residual {max:.2e} over {samples} draws -> {}",
        if ok { "ok" } else { "FAIL" }
    );
    ok
}

fn default_h0(entry: &CatalogEntry) -> Result<f64, Failure> {
    match &entry.defaults {
        RunDefaults::Discrete { h0, .. } => Ok(*h0),
        RunDefaults::Continuous { .. } => Err(input(format!(
            "'{}' carries no lattice spacing in its run defaults",
            entry.id
        ))),
    }
}

fn open_output(out: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    match out {
        Some(path) => {
            let file = fs::File::create(path)
                .map_err(|e| input(format!("cannot create '{}': {e}", path.display())))?;
            Ok(Box::new(io::BufWriter::new(file)))
        }
        None => Ok(Box::new(io::BufWriter::new(io::stdout()))),
    }
}

fn write_failed(e: io::Error) -> Failure {
    runtime(format!("writing output failed: {e}"))
}

fn print_drift(report: &DriftReport) {
    eprintln!(
        "{:<12} {:>24} {:>24} {:>12}",
        "integral", "initial", "final", "max drift"
    );
    for e in &report.entries {
        eprintln!(
            "{:<12} {:>24.16e} {:>24.16e} {:>12.3e}",
            e.name, e.initial, e.final_value, e.max_drift
        );
    }
}

fn cmd_integrate(
    target: &str,
    dt: Option<f64>,
    t_end: Option<f64>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let entry = resolve(target)?;
    if entry.kind != SystemKind::Continuous {
        return Err(input(format!(
            "'{}' is a discrete system; use 'hamsym lattice {}'",
            entry.id, entry.id
        )));
    }
    let bundle = entry.build_continuous().map_err(input)?;
    let (default_dt, default_t_end) = match &entry.defaults {
        RunDefaults::Continuous { dt, t_end, .. } => (*dt, *t_end),
        RunDefaults::Discrete { .. } => unreachable!("kind checked above"),
    };
    let dt = dt.unwrap_or(default_dt);
    let t_end = t_end.unwrap_or(default_t_end);
    let s0 = entry.defaults.initial_state();

    let states = match integrate_reference(&bundle.system, &s0, t_end, dt) {
        Ok(states) => states,
        Err(IntegrateError::InvalidSpan { dt, span }) => {
            return Err(input(format!(
                "invalid integration span: dt = {dt}, span = {span}"
            )))
        }
        Err(e @ IntegrateError::Failed { .. }) => return Err(runtime(e)),
    };

    let mut w = open_output(out)?;
    write_integrate_csv(&mut w, &bundle, &states)?;
    w.flush().map_err(write_failed)?;

    let report = monitor(&bundle.system, &states, &bundle.named_integrals()).map_err(runtime)?;
    eprintln!(
        "integrated '{}' over [{}, {}] with dt = {dt}: {} states",
        entry.id,
        s0.t,
        t_end,
        states.len()
    );
    if !report.entries.is_empty() {
        print_drift(&report);
    }
    Ok(())
}

fn write_integrate_csv(
    w: &mut dyn Write,
    bundle: &ContinuousBundle,
    states: &[State],
) -> Result<(), Failure> {
    let n = bundle.system.n();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("q{i}")));
    header.extend((1..=n).map(|i| format!("p{i}")));
    header.extend(bundle.integrals.iter().map(|i| i.name.clone()));
    writeln!(w, "{}", header.join(",")).map_err(write_failed)?;
    for s in states {
        let mut row = vec![format!("{:.16e}", s.t)];
        row.extend(s.q.iter().map(|x| format!("{x:.16e}")));
        row.extend(s.p.iter().map(|x| format!("{x:.16e}")));
        let values = bundle.integral_values(s).map_err(runtime)?;
        row.extend(values.iter().map(|x| format!("{x:.16e}")));
        writeln!(w, "{}", row.join(",")).map_err(write_failed)?;
    }
    Ok(())
}

fn cmd_lattice(
    target: &str,
    h0: Option<f64>,
    steps: Option<usize>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let entry = resolve(target)?;
    if entry.kind != SystemKind::Discrete {
        return Err(input(format!(
            "'{}' is a continuous system; use 'hamsym integrate {}'",
            entry.id, entry.id
        )));
    }
    let (default_h0, default_steps) = match &entry.defaults {
        RunDefaults::Discrete { h0, steps, .. } => (*h0, *steps),
        RunDefaults::Continuous { .. } => unreachable!("kind checked above"),
    };
    let h0 = h0.unwrap_or(default_h0);
    let steps = steps.unwrap_or(default_steps);
    if h0.is_nan() || h0 <= 0.0 {
        return Err(input(format!("h0 must be positive, got {h0}")));
    }
    if steps == 0 {
        return Err(input("steps must be at least 1".to_string()));
    }
    let bundle = entry.build_discrete(h0).map_err(input)?;
    let s0 = entry.defaults.initial_state();

    let (traj, failure) = match run_lattice(&bundle.system, &s0, h0, steps) {
        Ok(traj) => (traj, None),
        Err(e) => {
            let msg = e.to_string();
            (e.partial, Some(msg))
        }
    };

    let mut w = open_output(out)?;
    write_lattice_csv(&mut w, &bundle, &traj)?;
    w.flush().map_err(write_failed)?;

    if let Some(msg) = failure {
        return Err(runtime(format!(
            "{msg} ({} points were computed and written)",
            traj.points.len()
        )));
    }

    let with_energy = !bundle.system.depends_on_t();
    let report = monitor_lattice(
        &bundle.system,
        &traj.points,
        &bundle.named_integrals(),
        with_energy,
    )
    .map_err(runtime)?;
    eprintln!(
        "ran '{}' for {steps} lattice steps from t = {}, first spacing {h0}",
        entry.id, s0.t
    );
    if !report.entries.is_empty() {
        print_drift(&report);
    }
    Ok(())
}

fn write_lattice_csv(
    w: &mut dyn Write,
    bundle: &DiscreteBundle,
    traj: &LatticeTrajectory,
) -> Result<(), Failure> {
    let n = bundle.system.n();
    let with_energy = !bundle.system.depends_on_t();
    let mut header = vec!["index".to_string(), "t".to_string(), "h_minus".to_string()];
    header.extend((1..=n).map(|i| format!("q{i}")));
    header.extend((1..=n).map(|i| format!("p{i}")));
    header.push("newton_iters".to_string());
    header.push("residual_norm".to_string());
    header.extend(bundle.integrals.iter().map(|i| i.name.clone()));
    if with_energy {
        header.push("energy".to_string());
    }
    writeln!(w, "{}", header.join(",")).map_err(write_failed)?;

    // Interval-based columns (spacing, Newton diagnostics, integrals, energy)
    // describe the interval ending at each point, so the first row leaves
    // them blank.
    for (k, pt) in traj.points.iter().enumerate() {
        let mut row = vec![k.to_string(), format!("{:.16e}", pt.t)];
        let interval = if k > 0 {
            Some((&traj.points[k - 1], &traj.diags[k - 1]))
        } else {
            None
        };
        match interval {
            Some((prev, _)) => row.push(format!("{:.16e}", pt.t - prev.t)),
            None => row.push(String::new()),
        }
        row.extend(pt.q.iter().map(|x| format!("{x:.16e}")));
        row.extend(pt.p.iter().map(|x| format!("{x:.16e}")));
        match interval {
            Some((_, d)) => {
                row.push(d.iters.to_string());
                row.push(format!("{:.3e}", d.residual_norm));
            }
            None => {
                row.push(String::new());
                row.push(String::new());
            }
        }
        match interval {
            Some((prev, _)) => {
                let values = bundle.integral_values(prev, pt).map_err(runtime)?;
                row.extend(values.iter().map(|x| format!("{x:.16e}")));
                if with_energy {
                    let e = discrete_energy(&bundle.system, prev, pt).map_err(runtime)?;
                    row.push(format!("{e:.16e}"));
                }
            }
            None => {
                row.extend(bundle.integrals.iter().map(|_| String::new()));
                if with_energy {
                    row.push(String::new());
                }
            }
        }
        writeln!(w, "{}", row.join(",")).map_err(write_failed)?;
    }
    Ok(())
}

fn cmd_catalog_list() {
    println!("{:<14} {:<11} {:>2}  title", "id", "kind", "n");
    for entry in systems::list() {
        println!(
            "{:<14} {:<11} {:>2}  {}",
            entry.id,
            entry.kind.to_string(),
            entry.n,
            entry.title
        );
    }
}

fn cmd_catalog_export(id: &str) -> Result<(), Failure> {
    let entry = systems::get(id).ok_or_else(|| {
        input(format!(
            "unknown catalog id '{id}'; try 'hamsym catalog list'"
        ))
    })?;
    print!("{}", config::render(&entry));
    Ok(())
}
