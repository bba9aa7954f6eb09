//! Plain-text system description files.
//!
//! A description file carries exactly the information a built-in catalog
//! entry does, in an INI-like layout of `[section]` headers and `key = value`
//! lines. `#` starts a comment anywhere on a line; blank lines are ignored;
//! unknown keys and duplicate keys are errors (with line numbers), so typos
//! fail loudly instead of silently changing meaning.
//!
//! ```text
//! [system]
//! kind = continuous            # or: discrete
//! n = 1
//! title = My system            # optional, defaults to the file stem
//! hamiltonian = 0.5*(p1^2 + 1/q1^2)
//! param.k = 1                  # fixed parameters, one key each
//! derived.omega = atan-half-h  # discrete only: resolved from the spacing
//!
//! [symmetry x2]
//! xi = 2*t
//! eta1 = q1
//! zeta1 = -p1
//! v = q1^2/2                   # optional gauge term
//! expect = invariant           # invariant | divergence-invariant |
//!                              # admitted-only | not-noether
//!
//! [integral i2]
//! from = x2                    # optional: symmetry to cross-check against
//! closed = q1*p1 - t*(p1^2 + 1/q1^2)
//!
//! [relation casimir]
//! lhs = 4*i1*i3 - i2^2         # over integral names, state vars, params
//! rhs = 1                     # constants and params only
//!
//! [sampler]                    # optional; default box q 0.5 1.5, p -1.5 1.5
//! kind = box                   # box | positive-box | kepler-bound
//! q = 0.4 2.2
//! p = -2 2
//!
//! [run]
//! t0 = 0
//! q0 = 1
//! p0 = 1
//! dt = 0.001                   # continuous runs
//! t-end = 5                    # continuous runs
//! # h0 = 0.2                   # discrete runs
//! # steps = 100                # discrete runs
//! ```
//!
//! [`render`] writes this format back out; `parse(render(entry))` reproduces
//! the entry exactly.

use std::collections::HashSet;
use std::fmt::Write as _;

use hamsym::systems::{
    CatalogEntry, Expectation, IntegralSpec, ParamRule, RelationSpec, RunDefaults, Sampler,
    SymmetrySpec, SystemKind,
};

/// Parse failure, pointing at the offending (or missing-from) line.
#[derive(Debug, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

fn fail<T>(line: usize, msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError {
        line,
        msg: msg.into(),
    })
}

struct RawSection {
    kind: String,
    name: String,
    line: usize,
    entries: Vec<(String, String, usize)>,
}

fn split_sections(text: &str) -> Result<Vec<RawSection>, ConfigError> {
    let mut sections: Vec<RawSection> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let Some(inner) = inner.strip_suffix(']') else {
                return fail(line_no, "unterminated section header");
            };
            let inner = inner.trim();
            let (kind, name) = match inner.split_once(char::is_whitespace) {
                Some((k, n)) => (k.to_string(), n.trim().to_string()),
                None => (inner.to_string(), String::new()),
            };
            match kind.as_str() {
                "system" | "sampler" | "run" => {
                    if !name.is_empty() {
                        return fail(line_no, format!("section [{kind}] takes no name"));
                    }
                }
                "symmetry" | "integral" | "relation" => {
                    if name.is_empty() {
                        return fail(
                            line_no,
                            format!("section [{kind}] needs a name, e.g. [{kind} x1]"),
                        );
                    }
                }
                other => return fail(line_no, format!("unknown section [{other}]")),
            }
            sections.push(RawSection {
                kind,
                name,
                line: line_no,
                entries: Vec::new(),
            });
        } else if let Some((key, value)) = line.split_once('=') {
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return fail(line_no, "missing key before '='");
            }
            if value.is_empty() {
                return fail(line_no, format!("key '{key}' has an empty value"));
            }
            let Some(section) = sections.last_mut() else {
                return fail(
                    line_no,
                    format!("'{key}' appears before any [section] header"),
                );
            };
            if section.entries.iter().any(|(k, _, _)| k == &key) {
                return fail(line_no, format!("duplicate key '{key}' in this section"));
            }
            section.entries.push((key, value, line_no));
        } else {
            return fail(
                line_no,
                format!("expected 'key = value' or '[section]', got '{line}'"),
            );
        }
    }
    Ok(sections)
}

/// Key-value access for one section, with strict unknown-key detection.
struct Fields {
    label: String,
    header_line: usize,
    entries: Vec<(String, String, usize)>,
    used: HashSet<String>,
}

impl Fields {
    fn new(section: RawSection) -> Self {
        let label = if section.name.is_empty() {
            section.kind.clone()
        } else {
            format!("{} {}", section.kind, section.name)
        };
        Fields {
            label,
            header_line: section.line,
            entries: section.entries,
            used: HashSet::new(),
        }
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        let (_, value, line) = self.entries.iter().find(|(k, _, _)| k == key)?;
        let out = (value.clone(), *line);
        self.used.insert(key.to_string());
        Some(out)
    }

    fn require(&mut self, key: &str) -> Result<(String, usize), ConfigError> {
        self.take(key).ok_or_else(|| ConfigError {
            line: self.header_line,
            msg: format!("[{}] is missing required key '{key}'", self.label),
        })
    }

    /// All keys `prefix<suffix>` in file order, as `(suffix, value, line)`.
    fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, String, usize)> {
        let mut out = Vec::new();
        for (k, v, l) in &self.entries {
            if let Some(suffix) = k.strip_prefix(prefix) {
                if !suffix.is_empty() {
                    out.push((suffix.to_string(), v.clone(), *l));
                }
            }
        }
        for (suffix, _, _) in &out {
            self.used.insert(format!("{prefix}{suffix}"));
        }
        out
    }

    fn finish(self) -> Result<(), ConfigError> {
        for (k, _, l) in &self.entries {
            if !self.used.contains(k) {
                return fail(*l, format!("unknown key '{k}' in [{}]", self.label));
            }
        }
        Ok(())
    }
}

fn parse_f64(value: &str, line: usize, key: &str) -> Result<f64, ConfigError> {
    value.parse().map_err(|_| ConfigError {
        line,
        msg: format!("key '{key}': '{value}' is not a number"),
    })
}

fn parse_usize(value: &str, line: usize, key: &str) -> Result<usize, ConfigError> {
    value.parse().map_err(|_| ConfigError {
        line,
        msg: format!("key '{key}': '{value}' is not a non-negative integer"),
    })
}

fn parse_vector(value: &str, line: usize, key: &str) -> Result<Vec<f64>, ConfigError> {
    value
        .split_whitespace()
        .map(|tok| parse_f64(tok, line, key))
        .collect()
}

fn parse_range(value: &str, line: usize, key: &str) -> Result<(f64, f64), ConfigError> {
    let v = parse_vector(value, line, key)?;
    if v.len() != 2 {
        return fail(
            line,
            format!("key '{key}' needs exactly two numbers (low high)"),
        );
    }
    if v[0].is_nan() || v[1].is_nan() || v[0] >= v[1] {
        return fail(
            line,
            format!("key '{key}': range {} {} is empty", v[0], v[1]),
        );
    }
    Ok((v[0], v[1]))
}

/// Parse a description file into a catalog entry. `id` is typically the file
/// stem; it names the entry in reports.
pub fn parse_config(text: &str, id: &str) -> Result<CatalogEntry, ConfigError> {
    let sections = split_sections(text)?;

    let mut system: Option<Fields> = None;
    let mut sampler: Option<Fields> = None;
    let mut run: Option<Fields> = None;
    let mut symmetries: Vec<(String, Fields)> = Vec::new();
    let mut integrals: Vec<(String, Fields)> = Vec::new();
    let mut relations: Vec<(String, Fields)> = Vec::new();

    for section in sections {
        let line = section.line;
        match section.kind.as_str() {
            "system" => {
                if system.is_some() {
                    return fail(line, "duplicate [system] section");
                }
                system = Some(Fields::new(section));
            }
            "sampler" => {
                if sampler.is_some() {
                    return fail(line, "duplicate [sampler] section");
                }
                sampler = Some(Fields::new(section));
            }
            "run" => {
                if run.is_some() {
                    return fail(line, "duplicate [run] section");
                }
                run = Some(Fields::new(section));
            }
            kind => {
                let bucket = match kind {
                    "symmetry" => &mut symmetries,
                    "integral" => &mut integrals,
                    _ => &mut relations,
                };
                if bucket.iter().any(|(n, _)| n == &section.name) {
                    return fail(line, format!("duplicate [{kind} {}] section", section.name));
                }
                let name = section.name.clone();
                bucket.push((name, Fields::new(section)));
            }
        }
    }

    let mut sysf = system.ok_or(ConfigError {
        line: 1,
        msg: "missing [system] section".to_string(),
    })?;
    let (kind_text, kind_line) = sysf.require("kind")?;
    let kind = match kind_text.as_str() {
        "continuous" => SystemKind::Continuous,
        "discrete" => SystemKind::Discrete,
        other => {
            return fail(
                kind_line,
                format!("unknown kind '{other}' (expected continuous or discrete)"),
            )
        }
    };
    let (n_text, n_line) = sysf.require("n")?;
    let n = parse_usize(&n_text, n_line, "n")?;
    if n == 0 {
        return fail(n_line, "n must be at least 1");
    }
    let (hamiltonian, _) = sysf.require("hamiltonian")?;
    let title = sysf
        .take("title")
        .map(|(v, _)| v)
        .unwrap_or_else(|| id.to_string());
    let mut params = Vec::new();
    for (name, value, line) in sysf.take_prefixed("param.") {
        let v = parse_f64(&value, line, &format!("param.{name}"))?;
        params.push((name, v));
    }
    let mut derived_params = Vec::new();
    for (name, value, line) in sysf.take_prefixed("derived.") {
        if kind == SystemKind::Continuous {
            return fail(
                line,
                format!(
                    "derived.{name}: derived parameters need a lattice spacing, \
                         so they only apply to discrete systems"
                ),
            );
        }
        let rule: ParamRule = value.parse().map_err(|e| ConfigError { line, msg: e })?;
        derived_params.push((name, rule));
    }
    sysf.finish()?;

    let mut symmetry_specs = Vec::with_capacity(symmetries.len());
    for (name, mut f) in symmetries {
        let (xi, _) = f.require("xi")?;
        let mut eta = Vec::with_capacity(n);
        let mut zeta = Vec::with_capacity(n);
        for i in 1..=n {
            eta.push(f.require(&format!("eta{i}"))?.0);
            zeta.push(f.require(&format!("zeta{i}"))?.0);
        }
        let v = f.take("v").map(|(v, _)| v);
        let (exp_text, exp_line) = f.require("expect")?;
        let expectation: Expectation = exp_text.parse().map_err(|e| ConfigError {
            line: exp_line,
            msg: e,
        })?;
        f.finish()?;
        symmetry_specs.push(SymmetrySpec {
            name,
            xi,
            eta,
            zeta,
            v,
            expectation,
        });
    }

    let mut integral_specs = Vec::with_capacity(integrals.len());
    for (name, mut f) in integrals {
        let from_symmetry = f.take("from").map(|(v, _)| v);
        let (closed_form, _) = f.require("closed")?;
        f.finish()?;
        integral_specs.push(IntegralSpec {
            name,
            from_symmetry,
            closed_form,
        });
    }

    let mut relation_specs = Vec::with_capacity(relations.len());
    for (name, mut f) in relations {
        let (lhs, _) = f.require("lhs")?;
        let (rhs, _) = f.require("rhs")?;
        f.finish()?;
        relation_specs.push(RelationSpec { name, lhs, rhs });
    }

    let sampler = match sampler {
        None => Sampler::Box {
            q_abs: (0.5, 1.5),
            p: (-1.5, 1.5),
        },
        Some(mut f) => {
            let (kind_text, kind_line) = f.require("kind")?;
            let s = match kind_text.as_str() {
                "box" => {
                    let (q_text, q_line) = f.require("q")?;
                    let q_abs = parse_range(&q_text, q_line, "q")?;
                    if q_abs.0 < 0.0 {
                        return fail(
                            q_line,
                            "box sampler: q is a magnitude range, so it must be non-negative",
                        );
                    }
                    let (p_text, p_line) = f.require("p")?;
                    let p = parse_range(&p_text, p_line, "p")?;
                    Sampler::Box { q_abs, p }
                }
                "positive-box" => {
                    let (q_text, q_line) = f.require("q")?;
                    let q = parse_range(&q_text, q_line, "q")?;
                    let (p_text, p_line) = f.require("p")?;
                    let p = parse_range(&p_text, p_line, "p")?;
                    Sampler::PositiveBox { q, p }
                }
                "kepler-bound" => Sampler::KeplerBound,
                other => {
                    return fail(
                        kind_line,
                        format!(
                            "unknown sampler kind '{other}' \
                             (expected box, positive-box, or kepler-bound)"
                        ),
                    )
                }
            };
            f.finish()?;
            s
        }
    };

    let mut runf = run.ok_or(ConfigError {
        line: 1,
        msg: "missing [run] section".to_string(),
    })?;
    let t0 = match runf.take("t0") {
        Some((v, l)) => parse_f64(&v, l, "t0")?,
        None => 0.0,
    };
    let (q0_text, q0_line) = runf.require("q0")?;
    let q0 = parse_vector(&q0_text, q0_line, "q0")?;
    if q0.len() != n {
        return fail(
            q0_line,
            format!("q0 needs {n} components, got {}", q0.len()),
        );
    }
    let (p0_text, p0_line) = runf.require("p0")?;
    let p0 = parse_vector(&p0_text, p0_line, "p0")?;
    if p0.len() != n {
        return fail(
            p0_line,
            format!("p0 needs {n} components, got {}", p0.len()),
        );
    }
    let defaults = match kind {
        SystemKind::Continuous => {
            let (dt_text, dt_line) = runf.require("dt")?;
            let dt = parse_f64(&dt_text, dt_line, "dt")?;
            if dt.is_nan() || dt <= 0.0 {
                return fail(dt_line, "dt must be positive");
            }
            let (te_text, te_line) = runf.require("t-end")?;
            let t_end = parse_f64(&te_text, te_line, "t-end")?;
            RunDefaults::Continuous {
                t0,
                q0,
                p0,
                dt,
                t_end,
            }
        }
        SystemKind::Discrete => {
            let (h0_text, h0_line) = runf.require("h0")?;
            let h0 = parse_f64(&h0_text, h0_line, "h0")?;
            if h0.is_nan() || h0 <= 0.0 {
                return fail(h0_line, "h0 must be positive");
            }
            let (steps_text, steps_line) = runf.require("steps")?;
            let steps = parse_usize(&steps_text, steps_line, "steps")?;
            if steps == 0 {
                return fail(steps_line, "steps must be at least 1");
            }
            RunDefaults::Discrete {
                t0,
                q0,
                p0,
                h0,
                steps,
            }
        }
    };
    runf.finish()?;

    Ok(CatalogEntry {
        id: id.to_string(),
        title,
        kind,
        n,
        hamiltonian,
        params,
        derived_params,
        symmetries: symmetry_specs,
        integrals: integral_specs,
        relations: relation_specs,
        sampler,
        defaults,
    })
}

fn render_vector(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Write an entry back out as a description file. Round-trips exactly:
/// `parse_config(render(e), &e.id)` reproduces `e`.
pub fn render(entry: &CatalogEntry) -> String {
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, "# {}", entry.title);
    let _ = writeln!(w, "[system]");
    let _ = writeln!(w, "kind = {}", entry.kind);
    let _ = writeln!(w, "n = {}", entry.n);
    let _ = writeln!(w, "title = {}", entry.title);
    let _ = writeln!(w, "hamiltonian = {}", entry.hamiltonian);
    for (name, value) in &entry.params {
        let _ = writeln!(w, "param.{name} = {value}");
    }
    for (name, rule) in &entry.derived_params {
        let _ = writeln!(w, "derived.{name} = {}", rule.label());
    }
    for s in &entry.symmetries {
        let _ = writeln!(w);
        let _ = writeln!(w, "[symmetry {}]", s.name);
        let _ = writeln!(w, "xi = {}", s.xi);
        for (i, e) in s.eta.iter().enumerate() {
            let _ = writeln!(w, "eta{} = {e}", i + 1);
        }
        for (i, z) in s.zeta.iter().enumerate() {
            let _ = writeln!(w, "zeta{} = {z}", i + 1);
        }
        if let Some(v) = &s.v {
            let _ = writeln!(w, "v = {v}");
        }
        let _ = writeln!(w, "expect = {}", s.expectation);
    }
    for i in &entry.integrals {
        let _ = writeln!(w);
        let _ = writeln!(w, "[integral {}]", i.name);
        if let Some(src) = &i.from_symmetry {
            let _ = writeln!(w, "from = {src}");
        }
        let _ = writeln!(w, "closed = {}", i.closed_form);
    }
    for r in &entry.relations {
        let _ = writeln!(w);
        let _ = writeln!(w, "[relation {}]", r.name);
        let _ = writeln!(w, "lhs = {}", r.lhs);
        let _ = writeln!(w, "rhs = {}", r.rhs);
    }
    let _ = writeln!(w);
    let _ = writeln!(w, "[sampler]");
    match entry.sampler {
        Sampler::Box { q_abs, p } => {
            let _ = writeln!(w, "kind = box");
            let _ = writeln!(w, "q = {} {}", q_abs.0, q_abs.1);
            let _ = writeln!(w, "p = {} {}", p.0, p.1);
        }
        Sampler::PositiveBox { q, p } => {
            let _ = writeln!(w, "kind = positive-box");
            let _ = writeln!(w, "q = {} {}", q.0, q.1);
            let _ = writeln!(w, "p = {} {}", p.0, p.1);
        }
        Sampler::KeplerBound => {
            let _ = writeln!(w, "kind = kepler-bound");
        }
    }
    let _ = writeln!(w);
    let _ = writeln!(w, "[run]");
    match &entry.defaults {
        RunDefaults::Continuous {
            t0,
            q0,
            p0,
            dt,
            t_end,
        } => {
            let _ = writeln!(w, "t0 = {t0}");
            let _ = writeln!(w, "q0 = {}", render_vector(q0));
            let _ = writeln!(w, "p0 = {}", render_vector(p0));
            let _ = writeln!(w, "dt = {dt}");
            let _ = writeln!(w, "t-end = {t_end}");
        }
        RunDefaults::Discrete {
            t0,
            q0,
            p0,
            h0,
            steps,
        } => {
            let _ = writeln!(w, "t0 = {t0}");
            let _ = writeln!(w, "q0 = {}", render_vector(q0));
            let _ = writeln!(w, "p0 = {}", render_vector(p0));
            let _ = writeln!(w, "h0 = {h0}");
            let _ = writeln!(w, "steps = {steps}");
        }
    }
    out
}
