//! End-to-end tests of the `hamsym` binary: exit codes, report shape, CSV
//! output, description-file loading, and determinism.

use std::path::Path;
use std::process::{Command, Output};

fn hamsym(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hamsym"))
        .args(args)
        .output()
        .expect("failed to spawn hamsym")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout not UTF-8")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr not UTF-8")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "expected exit {code}\n--- stdout ---\n{}\n--- stderr ---\n{}",
        stdout(out),
        stderr(out)
    );
}

#[test]
fn catalog_list_names_every_system() {
    let out = hamsym(&["catalog", "list"]);
    assert_code(&out, 0);
    let text = stdout(&out);
    for id in [
        "cubic",
        "coulomb",
        "kepler2d",
        "kepler3d",
        "osc-midpoint",
        "osc-exact",
        "nonlinear",
    ] {
        assert!(text.contains(id), "missing {id} in:\n{text}");
    }
}

#[test]
fn verify_passes_on_a_catalog_system() {
    let out = hamsym(&["verify", "cubic", "--samples", "25", "--seed", "7"]);
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.trim_end().ends_with("PASS"), "{text}");
    assert!(
        text.contains("symmetry x3 [divergence-invariant] ok"),
        "{text}"
    );
    assert!(text.contains("relation casimir ok"), "{text}");
}

#[test]
fn verify_is_deterministic_per_seed() {
    let args = ["verify", "kepler2d", "--samples", "30", "--seed", "11"];
    let a = hamsym(&args);
    let b = hamsym(&args);
    assert_code(&a, 0);
    assert_eq!(stdout(&a), stdout(&b));
    let c = hamsym(&["verify", "kepler2d", "--samples", "30", "--seed", "12"]);
    assert_code(&c, 0);
    assert_ne!(
        stdout(&a),
        stdout(&c),
        "different seeds gave identical reports"
    );
}

#[test]
fn unknown_target_is_an_input_error() {
    let out = hamsym(&["verify", "no-such-system"]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("catalog list"));
}

#[test]
fn identity_holds_for_catalog_systems() {
    for target in ["cubic", "osc-midpoint"] {
        let out = hamsym(&["identity", target, "--samples", "120", "--seed", "5"]);
        assert_code(&out, 0);
        assert!(stdout(&out).trim_end().ends_with("PASS"));
    }
}

#[test]
fn integrate_writes_csv_and_drift_report() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("cubic.csv");
    let out = hamsym(&[
        "integrate",
        "cubic",
        "--t-end",
        "1",
        "--dt",
        "0.001",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,q1,p1,i1,i2,i3"));
    assert_eq!(text.lines().count(), 1002, "header plus 1001 states");
    let last = text.lines().last().unwrap();
    let t_final: f64 = last.split(',').next().unwrap().parse().unwrap();
    assert!((t_final - 1.0).abs() < 1e-12);
    let err = stderr(&out);
    assert!(err.contains("max drift"), "{err}");
    assert!(err.contains("i2"), "{err}");
}

#[test]
fn lattice_writes_csv_with_interval_columns() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("osc.csv");
    let out = hamsym(&[
        "lattice",
        "osc-midpoint",
        "--steps",
        "12",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("index,t,h_minus,q1,p1,newton_iters,residual_norm,i1,i2,i3,energy")
    );
    let first = lines.next().unwrap();
    // Interval columns are blank on the starting point.
    assert!(first.starts_with("0,"), "{first}");
    assert!(first.ends_with(",,,"), "{first}");
    assert_eq!(text.lines().count(), 14, "header plus 13 points");
    // Uniform lattice: every solved spacing stays at 0.2.
    for line in text.lines().skip(2) {
        let h: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((h - 0.2).abs() < 1e-12, "{line}");
    }
}

#[test]
fn lattice_rejects_continuous_systems_and_vice_versa() {
    let out = hamsym(&["lattice", "cubic"]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("integrate"));
    let out = hamsym(&["integrate", "osc-exact"]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("lattice"));
}

#[test]
fn exported_description_verifies_from_a_file() {
    let out = hamsym(&["catalog", "export", "nonlinear"]);
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("[system]"));
    assert!(text.contains("kind = discrete"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nonlinear.conf");
    std::fs::write(&path, &text).unwrap();
    let out = hamsym(&[
        "verify",
        path.to_str().unwrap(),
        "--samples",
        "15",
        "--seed",
        "3",
    ]);
    assert_code(&out, 0);
    assert!(stdout(&out).trim_end().ends_with("PASS"));
}

#[test]
fn export_of_unknown_id_is_an_input_error() {
    let out = hamsym(&["catalog", "export", "nope"]);
    assert_code(&out, 2);
}

#[test]
fn a_false_claim_fails_verification_with_exit_1() {
    // Export the Coulomb system and promote its scaling symmetry to a full
    // invariance, which it is not.
    let exported = hamsym(&["catalog", "export", "coulomb"]);
    assert_code(&exported, 0);
    let doctored = stdout(&exported).replace("expect = admitted-only", "expect = invariant");
    assert!(doctored.contains("expect = invariant"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("doctored.conf");
    std::fs::write(&path, &doctored).unwrap();
    let out = hamsym(&["verify", path.to_str().unwrap(), "--samples", "20"]);
    assert_code(&out, 1);
    let text = stdout(&out);
    assert!(text.contains("symmetry x2 [invariant] FAIL"), "{text}");
    assert!(text.trim_end().ends_with("FAIL"), "{text}");
}

#[test]
fn malformed_description_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.conf");
    std::fs::write(&path, "[system]\nkind = continuous\nn = one\n").unwrap();
    let out = hamsym(&["verify", path.to_str().unwrap()]);
    assert_code(&out, 2);
    let err = stderr(&out);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn runtime_breakdown_exits_with_3_and_writes_the_prefix() {
    // Steer the nonlinear system into its q = 0 singularity: from q0 = 0.2
    // with p0 = -1.2 the next iterate crosses zero and Newton cannot recover.
    let conf = "\
[system]
kind = discrete
n = 1
hamiltonian = 0.5*(pp1^2 + 1/q1^2)

[run]
q0 = 0.05
p0 = -2
h0 = 0.5
steps = 40
";
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("crash.conf");
    std::fs::write(&path, conf).unwrap();
    let csv = dir.path().join("crash.csv");
    let out = hamsym(&[
        "lattice",
        path.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_code(&out, 3);
    assert!(stderr(&out).contains("were computed and written"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().count() >= 1, "header must always be written");
}

#[test]
fn identity_survives_a_symmetry_that_is_no_symmetry_at_all() {
    // The structural identity is an algebraic fact about arbitrary
    // coefficient fields, so even nonsense coefficients must satisfy it.
    let conf = "\
[system]
kind = continuous
n = 1
hamiltonian = p1^2/2 + q1^4/4

[symmetry wild]
xi = sin(t*q1)
eta1 = exp(0.1*p1) + q1^2
zeta1 = t*p1*q1
expect = invariant

[run]
q0 = 1
p0 = 0
dt = 0.01
t-end = 1
";
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wild.conf");
    std::fs::write(&path, conf).unwrap();
    let out = hamsym(&[
        "identity",
        path.to_str().unwrap(),
        "--samples",
        "300",
        "--seed",
        "8",
    ]);
    assert_code(&out, 0);
    assert!(stdout(&out).trim_end().ends_with("PASS"));
    // But verification of the same file must reject the bogus
    // "invariant" claim.
    let out = hamsym(&["verify", path.to_str().unwrap(), "--samples", "20"]);
    assert_code(&out, 1);
}

#[test]
fn help_mentions_every_subcommand() {
    let out = hamsym(&["--help"]);
    assert_code(&out, 0);
    let text = stdout(&out);
    for cmd in ["verify", "identity", "integrate", "lattice", "catalog"] {
        assert!(text.contains(cmd), "missing {cmd} in:\n{text}");
    }
    assert!(Path::new(env!("CARGO_BIN_EXE_hamsym")).exists());
}
