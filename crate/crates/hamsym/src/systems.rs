//! Built-in catalog of worked systems, plus the shared verification driver.
//!
//! Each [`CatalogEntry`] is a plain-text description — Hamiltonian, symmetry
//! generators, claimed first integrals with closed forms, algebraic relations
//! among the integrals, a state sampler, and run defaults — that can be built
//! into an executable bundle for either the continuous or the discrete
//! machinery. The [`verify`] driver then checks every claim numerically:
//!
//! * each symmetry is classified against its expected status (invariant,
//!   divergence-invariant, admitted by the equations only, or admitted but
//!   demonstrably not variational even after an attempted gauge repair);
//! * each first integral built from its symmetry must agree with its closed
//!   form at random states;
//! * each relation among integrals must hold at random states (they are
//!   pointwise algebraic identities, not merely on-shell facts).
//!
//! The same driver backs both the test suite and the command-line tool, so a
//! user-supplied configuration file gets exactly the checks the catalog gets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::continuous::{
    equation_invariance_residuals, first_integral_value, invariance_residual, vector_field,
    ContinuousSystem, FirstIntegral, ScaledResidual, State, Symmetry,
};
use crate::discrete::{
    discrete_equation_invariance, discrete_first_integral_value, discrete_invariance_residual,
    run_lattice, solve_lu, DiscreteFirstIntegral, DiscreteSystem, LatticePoint,
};
use crate::expr::{parse, BindError, BoundExpr, EvalError, Expr, ParseError};

/// Which machinery an entry runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemKind {
    Continuous,
    Discrete,
}

impl std::fmt::Display for SystemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SystemKind::Continuous => "continuous",
            SystemKind::Discrete => "discrete",
        })
    }
}

/// Expected verification status of a symmetry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expectation {
    /// Leaves the action invariant; induces a first integral.
    Invariant,
    /// Leaves the action invariant up to the divergence of its gauge term;
    /// induces a first integral.
    DivergenceInvariant,
    /// Admitted by the equations of motion but not an action invariance.
    AdmittedOnly,
    /// Admitted by the equations, not an action invariance, and provably not
    /// repairable by any low-degree polynomial gauge term.
    NotNoether,
}

impl Expectation {
    pub fn label(self) -> &'static str {
        match self {
            Expectation::Invariant => "invariant",
            Expectation::DivergenceInvariant => "divergence-invariant",
            Expectation::AdmittedOnly => "admitted-only",
            Expectation::NotNoether => "not-noether",
        }
    }
}

impl std::fmt::Display for Expectation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Expectation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "invariant" => Ok(Expectation::Invariant),
            "divergence-invariant" => Ok(Expectation::DivergenceInvariant),
            "admitted-only" => Ok(Expectation::AdmittedOnly),
            "not-noether" => Ok(Expectation::NotNoether),
            other => Err(format!(
                "unknown expectation '{other}' (expected invariant, \
                 divergence-invariant, admitted-only, or not-noether)"
            )),
        }
    }
}

/// A parameter whose value is derived from the initial lattice spacing when a
/// discrete system is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRule {
    /// `atan(h/2) / (h/2)` — the frequency a uniform-lattice midpoint
    /// oscillator actually rotates with, per unit time.
    AtanHalfH,
    /// `tan(h/2) / (h/2)` — the stiffness rescaling that makes a midpoint-type
    /// oscillator scheme advance by exactly the true flow.
    TanHalfH,
}

impl ParamRule {
    pub fn value(self, h0: f64) -> f64 {
        let half = h0 / 2.0;
        match self {
            ParamRule::AtanHalfH => half.atan() / half,
            ParamRule::TanHalfH => half.tan() / half,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ParamRule::AtanHalfH => "atan-half-h",
            ParamRule::TanHalfH => "tan-half-h",
        }
    }
}

impl std::str::FromStr for ParamRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "atan-half-h" => Ok(ParamRule::AtanHalfH),
            "tan-half-h" => Ok(ParamRule::TanHalfH),
            other => Err(format!(
                "unknown parameter rule '{other}' (expected atan-half-h or tan-half-h)"
            )),
        }
    }
}

/// How random states are drawn for sampling-based verification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    /// Each `q_i` gets a random sign and magnitude in `q_abs`; each `p_i` is
    /// uniform in `p`. Keeps coordinates away from singular loci at 0.
    Box { q_abs: (f64, f64), p: (f64, f64) },
    /// All coordinates positive: `q_i ∈ q`, `p_i ∈ p`.
    PositiveBox { q: (f64, f64), p: (f64, f64) },
    /// Bound-orbit initial data for an attractive `-k²/r` potential: radius
    /// in `[0.6, 1.6]`, speed `0.85–1.1×` circular, mostly transverse.
    KeplerBound,
}

/// A symmetry generator in source form.
#[derive(Debug, Clone)]
pub struct SymmetrySpec {
    pub name: String,
    pub xi: String,
    pub eta: Vec<String>,
    pub zeta: Vec<String>,
    pub v: Option<String>,
    pub expectation: Expectation,
}

/// A first integral in source form. `closed_form` is over the phase variables
/// (continuous) or one lattice interval (discrete); `from_symmetry` names the
/// symmetry whose induced integral must agree with it.
#[derive(Debug, Clone)]
pub struct IntegralSpec {
    pub name: String,
    pub from_symmetry: Option<String>,
    pub closed_form: String,
}

/// An algebraic relation among the named integrals (and, if needed, the state
/// variables and parameters): `lhs = rhs`, with `rhs` constant in the state.
#[derive(Debug, Clone)]
pub struct RelationSpec {
    pub name: String,
    pub lhs: String,
    pub rhs: String,
}

/// Default run configuration for an entry.
#[derive(Debug, Clone)]
pub enum RunDefaults {
    Continuous {
        t0: f64,
        q0: Vec<f64>,
        p0: Vec<f64>,
        dt: f64,
        t_end: f64,
    },
    Discrete {
        t0: f64,
        q0: Vec<f64>,
        p0: Vec<f64>,
        h0: f64,
        steps: usize,
    },
}

impl RunDefaults {
    pub fn initial_state(&self) -> State {
        match self {
            RunDefaults::Continuous { t0, q0, p0, .. }
            | RunDefaults::Discrete { t0, q0, p0, .. } => State::new(*t0, q0.clone(), p0.clone()),
        }
    }
}

/// A complete source-form description of a system with its symmetry analysis.
#[derive(Debug, Clone)]
pub struct CatalogEntry {
    pub id: String,
    pub title: String,
    pub kind: SystemKind,
    pub n: usize,
    pub hamiltonian: String,
    pub params: Vec<(String, f64)>,
    pub derived_params: Vec<(String, ParamRule)>,
    pub symmetries: Vec<SymmetrySpec>,
    pub integrals: Vec<IntegralSpec>,
    pub relations: Vec<RelationSpec>,
    pub sampler: Sampler,
    pub defaults: RunDefaults,
}

/// Error building an entry into an executable bundle.
#[derive(Debug, Error)]
pub enum BuildError {
    #[error("in {context}: {source}")]
    Parse { context: String, source: ParseError },
    #[error("in {context}: {source}")]
    Bind { context: String, source: BindError },
    #[error("in {context}: {source}")]
    Eval { context: String, source: EvalError },
    #[error("{0}")]
    Invalid(String),
}

fn parse_ctx(text: &str, context: impl Into<String>) -> Result<Expr, BuildError> {
    parse(text).map_err(|source| BuildError::Parse {
        context: context.into(),
        source,
    })
}

/// A built symmetry with its name and expected classification.
#[derive(Debug, Clone)]
pub struct BuiltSymmetry {
    pub name: String,
    pub expectation: Expectation,
    pub symmetry: Symmetry,
}

/// A built first integral (closed form, plus the symmetry it must agree with).
#[derive(Debug, Clone)]
pub struct BuiltIntegral {
    pub name: String,
    pub from_symmetry: Option<String>,
    closed: BoundExpr,
}

/// A built relation: `lhs` is bound over
/// `[integral names…, state variables…, parameters…]`; `rhs` was evaluated to
/// a constant at build time.
#[derive(Debug, Clone)]
pub struct BuiltRelation {
    pub name: String,
    pub lhs_text: String,
    pub rhs_text: String,
    lhs: BoundExpr,
    rhs_value: f64,
}

/// An executable continuous system with its full symmetry analysis.
#[derive(Debug, Clone)]
pub struct ContinuousBundle {
    pub system: ContinuousSystem,
    pub symmetries: Vec<BuiltSymmetry>,
    pub integrals: Vec<BuiltIntegral>,
    pub relations: Vec<BuiltRelation>,
}

impl ContinuousBundle {
    /// Closed-form values of all integrals at a state, in catalog order.
    pub fn integral_values(&self, s: &State) -> Result<Vec<f64>, EvalError> {
        self.integrals
            .iter()
            .map(|i| self.system.eval_at(&i.closed, s))
            .collect()
    }

    /// `lhs - rhs` of a relation at a state, scaled by the magnitudes of the
    /// two sides.
    pub fn relation_residual(
        &self,
        rel: &BuiltRelation,
        s: &State,
    ) -> Result<ScaledResidual, EvalError> {
        let mut args = self.integral_values(s)?;
        args.push(s.t);
        args.extend_from_slice(&s.q);
        args.extend_from_slice(&s.p);
        args.extend(self.system.params().map(|(_, v)| v));
        let lhs = rel.lhs.eval(&args)?;
        Ok(ScaledResidual::from_terms(
            lhs - rel.rhs_value,
            &[lhs, rel.rhs_value],
        ))
    }

    /// The integrals as named monitors for drift reports.
    pub fn named_integrals(&self) -> Vec<(String, FirstIntegral)> {
        self.integrals
            .iter()
            .map(|i| (i.name.clone(), FirstIntegral::ClosedForm(i.closed.clone())))
            .collect()
    }

    fn symmetry(&self, name: &str) -> Option<&BuiltSymmetry> {
        self.symmetries.iter().find(|b| b.name == name)
    }
}

/// An executable discrete system with its full symmetry analysis.
#[derive(Debug, Clone)]
pub struct DiscreteBundle {
    /// The lattice spacing the derived parameters were resolved at (and the
    /// natural first-step spacing).
    pub h0: f64,
    pub system: DiscreteSystem,
    pub symmetries: Vec<BuiltSymmetry>,
    pub integrals: Vec<BuiltIntegral>,
    pub relations: Vec<BuiltRelation>,
}

impl DiscreteBundle {
    /// Closed-form values of all integrals on an interval, in catalog order.
    pub fn integral_values(
        &self,
        prev: &LatticePoint,
        cur: &LatticePoint,
    ) -> Result<Vec<f64>, EvalError> {
        self.integrals
            .iter()
            .map(|i| self.system.eval_on_interval(&i.closed, prev, cur))
            .collect()
    }

    /// `lhs - rhs` of a relation on an interval.
    pub fn relation_residual(
        &self,
        rel: &BuiltRelation,
        prev: &LatticePoint,
        cur: &LatticePoint,
    ) -> Result<ScaledResidual, EvalError> {
        let mut args = self.integral_values(prev, cur)?;
        args.push(prev.t);
        args.push(cur.t - prev.t);
        args.extend_from_slice(&prev.q);
        args.extend_from_slice(&prev.p);
        args.push(cur.t);
        args.extend_from_slice(&cur.q);
        args.extend_from_slice(&cur.p);
        args.extend(self.system.params().map(|(_, v)| v));
        let lhs = rel.lhs.eval(&args)?;
        Ok(ScaledResidual::from_terms(
            lhs - rel.rhs_value,
            &[lhs, rel.rhs_value],
        ))
    }

    /// The integrals as named monitors for drift reports.
    pub fn named_integrals(&self) -> Vec<(String, DiscreteFirstIntegral)> {
        self.integrals
            .iter()
            .map(|i| {
                (
                    i.name.clone(),
                    DiscreteFirstIntegral::ClosedForm(i.closed.clone()),
                )
            })
            .collect()
    }

    fn symmetry(&self, name: &str) -> Option<&BuiltSymmetry> {
        self.symmetries.iter().find(|b| b.name == name)
    }
}

impl CatalogEntry {
    /// Fixed parameters plus derived ones resolved at `h0`.
    pub fn resolved_params(&self, h0: Option<f64>) -> Result<Vec<(String, f64)>, BuildError> {
        let mut out = self.params.clone();
        for (name, rule) in &self.derived_params {
            let h0 = h0.ok_or_else(|| {
                BuildError::Invalid(format!(
                    "parameter '{name}' is derived from the lattice spacing, \
                     which only discrete systems have"
                ))
            })?;
            if h0.is_nan() || h0 <= 0.0 {
                return Err(BuildError::Invalid(format!(
                    "derived parameter '{name}' needs a positive spacing, got {h0}"
                )));
            }
            out.push((name.clone(), rule.value(h0)));
        }
        Ok(out)
    }

    fn build_symmetries(&self, params: &[(String, f64)]) -> Result<Vec<BuiltSymmetry>, BuildError> {
        let mut out = Vec::with_capacity(self.symmetries.len());
        for spec in &self.symmetries {
            if spec.eta.len() != self.n || spec.zeta.len() != self.n {
                return Err(BuildError::Invalid(format!(
                    "symmetry '{}' must provide {} eta and zeta components",
                    spec.name, self.n
                )));
            }
            let xi = parse_ctx(&spec.xi, format!("symmetry '{}', xi", spec.name))?;
            let eta = spec
                .eta
                .iter()
                .enumerate()
                .map(|(i, t)| parse_ctx(t, format!("symmetry '{}', eta{}", spec.name, i + 1)))
                .collect::<Result<Vec<_>, _>>()?;
            let zeta = spec
                .zeta
                .iter()
                .enumerate()
                .map(|(i, t)| parse_ctx(t, format!("symmetry '{}', zeta{}", spec.name, i + 1)))
                .collect::<Result<Vec<_>, _>>()?;
            let v = spec
                .v
                .as_ref()
                .map(|t| parse_ctx(t, format!("symmetry '{}', v", spec.name)))
                .transpose()?;
            let symmetry =
                Symmetry::new(self.n, &xi, &eta, &zeta, v.as_ref(), params).map_err(|source| {
                    BuildError::Bind {
                        context: format!("symmetry '{}'", spec.name),
                        source,
                    }
                })?;
            out.push(BuiltSymmetry {
                name: spec.name.clone(),
                expectation: spec.expectation,
                symmetry,
            });
        }
        Ok(out)
    }

    fn validate_integral_sources(&self) -> Result<(), BuildError> {
        for spec in &self.integrals {
            if let Some(src) = &spec.from_symmetry {
                if !self.symmetries.iter().any(|s| &s.name == src) {
                    return Err(BuildError::Invalid(format!(
                        "integral '{}' references unknown symmetry '{src}'",
                        spec.name
                    )));
                }
            }
        }
        Ok(())
    }

    fn build_relations<F>(
        &self,
        params: &[(String, f64)],
        bind_lhs: F,
    ) -> Result<Vec<BuiltRelation>, BuildError>
    where
        F: Fn(&Expr) -> Result<BoundExpr, BindError>,
    {
        let param_names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        let param_values: Vec<f64> = params.iter().map(|(_, v)| *v).collect();
        let mut out = Vec::with_capacity(self.relations.len());
        for spec in &self.relations {
            let lhs_expr = parse_ctx(&spec.lhs, format!("relation '{}', lhs", spec.name))?;
            let lhs = bind_lhs(&lhs_expr).map_err(|source| BuildError::Bind {
                context: format!("relation '{}', lhs", spec.name),
                source,
            })?;
            let rhs_expr = parse_ctx(&spec.rhs, format!("relation '{}', rhs", spec.name))?;
            let rhs_bound = rhs_expr
                .bind(&param_names)
                .map_err(|source| BuildError::Bind {
                    context: format!(
                        "relation '{}', rhs (constants and parameters only)",
                        spec.name
                    ),
                    source,
                })?;
            let rhs_value = rhs_bound
                .eval(&param_values)
                .map_err(|source| BuildError::Eval {
                    context: format!("relation '{}', rhs", spec.name),
                    source,
                })?;
            out.push(BuiltRelation {
                name: spec.name.clone(),
                lhs_text: spec.lhs.clone(),
                rhs_text: spec.rhs.clone(),
                lhs,
                rhs_value,
            });
        }
        Ok(out)
    }

    /// Build the continuous machinery for this entry.
    pub fn build_continuous(&self) -> Result<ContinuousBundle, BuildError> {
        if self.kind != SystemKind::Continuous {
            return Err(BuildError::Invalid(format!(
                "'{}' is a {} system",
                self.id, self.kind
            )));
        }
        let params = self.resolved_params(None)?;
        let h_expr = parse_ctx(&self.hamiltonian, "hamiltonian")?;
        let system =
            ContinuousSystem::new(self.n, h_expr, &params).map_err(|source| BuildError::Bind {
                context: "hamiltonian".to_string(),
                source,
            })?;
        let symmetries = self.build_symmetries(&params)?;
        self.validate_integral_sources()?;

        let mut integrals = Vec::with_capacity(self.integrals.len());
        for spec in &self.integrals {
            let expr = parse_ctx(&spec.closed_form, format!("integral '{}'", spec.name))?;
            let closed = system
                .bind_over_phase(&expr)
                .map_err(|source| BuildError::Bind {
                    context: format!("integral '{}'", spec.name),
                    source,
                })?;
            integrals.push(BuiltIntegral {
                name: spec.name.clone(),
                from_symmetry: spec.from_symmetry.clone(),
                closed,
            });
        }

        let mut layout: Vec<String> = integrals.iter().map(|i| i.name.clone()).collect();
        layout.extend(crate::continuous::phase_vars(self.n));
        layout.extend(params.iter().map(|(n, _)| n.clone()));
        let relations = self.build_relations(&params, |e| e.bind(&layout))?;

        Ok(ContinuousBundle {
            system,
            symmetries,
            integrals,
            relations,
        })
    }

    /// Build the discrete machinery for this entry, resolving derived
    /// parameters at spacing `h0`.
    pub fn build_discrete(&self, h0: f64) -> Result<DiscreteBundle, BuildError> {
        if self.kind != SystemKind::Discrete {
            return Err(BuildError::Invalid(format!(
                "'{}' is a {} system",
                self.id, self.kind
            )));
        }
        let params = self.resolved_params(Some(h0))?;
        let hd_expr = parse_ctx(&self.hamiltonian, "hamiltonian")?;
        let system =
            DiscreteSystem::new(self.n, hd_expr, &params).map_err(|source| BuildError::Bind {
                context: "hamiltonian".to_string(),
                source,
            })?;
        let symmetries = self.build_symmetries(&params)?;
        self.validate_integral_sources()?;

        let mut integrals = Vec::with_capacity(self.integrals.len());
        for spec in &self.integrals {
            let expr = parse_ctx(&spec.closed_form, format!("integral '{}'", spec.name))?;
            let closed = system
                .bind_over_interval(&expr)
                .map_err(|source| BuildError::Bind {
                    context: format!("integral '{}'", spec.name),
                    source,
                })?;
            integrals.push(BuiltIntegral {
                name: spec.name.clone(),
                from_symmetry: spec.from_symmetry.clone(),
                closed,
            });
        }

        let mut layout: Vec<String> = integrals.iter().map(|i| i.name.clone()).collect();
        layout.extend(crate::discrete::interval_vars(self.n));
        layout.extend(params.iter().map(|(n, _)| n.clone()));
        let relations = self.build_relations(&params, |e| e.bind(&layout))?;

        Ok(DiscreteBundle {
            h0,
            system,
            symmetries,
            integrals,
            relations,
        })
    }

    /// Draw a random state per this entry's sampler; `t ∈ [-0.5, 0.5]`.
    pub fn sample_state<R: Rng>(&self, rng: &mut R) -> State {
        let n = self.n;
        let t = rng.gen_range(-0.5..0.5);
        match self.sampler {
            Sampler::Box { q_abs, p } => {
                let q = (0..n)
                    .map(|_| {
                        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                        sign * rng.gen_range(q_abs.0..q_abs.1)
                    })
                    .collect();
                let p = (0..n).map(|_| rng.gen_range(p.0..p.1)).collect();
                State::new(t, q, p)
            }
            Sampler::PositiveBox { q, p } => State::new(
                t,
                (0..n).map(|_| rng.gen_range(q.0..q.1)).collect(),
                (0..n).map(|_| rng.gen_range(p.0..p.1)).collect(),
            ),
            Sampler::KeplerBound => {
                let k = self
                    .params
                    .iter()
                    .find(|(name, _)| name == "k")
                    .map(|&(_, v)| v)
                    .unwrap_or(1.0);
                let r: f64 = rng.gen_range(0.6..1.6);
                let q_dir = unit_vector(rng, n);
                let p_dir = loop {
                    let d = unit_vector(rng, n);
                    let radial: f64 = d.iter().zip(&q_dir).map(|(a, b)| a * b).sum();
                    let transverse = (1.0 - radial * radial).max(0.0).sqrt();
                    if transverse >= 0.8 {
                        break d;
                    }
                };
                let speed = rng.gen_range(0.85..1.1) * k / r.sqrt();
                State::new(
                    t,
                    q_dir.iter().map(|c| c * r).collect(),
                    p_dir.iter().map(|c| c * speed).collect(),
                )
            }
        }
    }
}

fn unit_vector<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if (0.2..=1.0).contains(&norm) {
            return v.into_iter().map(|c| c / norm).collect();
        }
    }
}

// ---------------------------------------------------------------------------
// The catalog
// ---------------------------------------------------------------------------

/// Identifiers of the built-in entries.
pub fn ids() -> [&'static str; 7] {
    [
        "cubic",
        "coulomb",
        "kepler2d",
        "kepler3d",
        "osc-midpoint",
        "osc-exact",
        "nonlinear",
    ]
}

/// All built-in entries.
pub fn list() -> Vec<CatalogEntry> {
    ids().iter().map(|id| get(id).unwrap()).collect()
}

/// Look up a built-in entry by identifier.
pub fn get(id: &str) -> Option<CatalogEntry> {
    match id {
        "cubic" => Some(cubic()),
        "coulomb" => Some(coulomb()),
        "kepler2d" => Some(kepler2d()),
        "kepler3d" => Some(kepler3d()),
        "osc-midpoint" => Some(osc_midpoint()),
        "osc-exact" => Some(osc_exact()),
        "nonlinear" => Some(nonlinear()),
        _ => None,
    }
}

fn sym(
    name: &str,
    xi: &str,
    eta: &[&str],
    zeta: &[&str],
    v: Option<&str>,
    expectation: Expectation,
) -> SymmetrySpec {
    SymmetrySpec {
        name: name.to_string(),
        xi: xi.to_string(),
        eta: eta.iter().map(|s| s.to_string()).collect(),
        zeta: zeta.iter().map(|s| s.to_string()).collect(),
        v: v.map(|s| s.to_string()),
        expectation,
    }
}

fn integral(name: &str, from_symmetry: &str, closed_form: &str) -> IntegralSpec {
    IntegralSpec {
        name: name.to_string(),
        from_symmetry: Some(from_symmetry.to_string()),
        closed_form: closed_form.to_string(),
    }
}

fn relation(name: &str, lhs: &str, rhs: &str) -> RelationSpec {
    RelationSpec {
        name: name.to_string(),
        lhs: lhs.to_string(),
        rhs: rhs.to_string(),
    }
}

/// One-dimensional motion under an attractive inverse-cube force
/// (`ṗ = 1/q³`), whose three-parameter symmetry algebra closes on `sl(2)`.
fn cubic() -> CatalogEntry {
    CatalogEntry {
        id: "cubic".to_string(),
        title: "Inverse-cube force in one dimension".to_string(),
        kind: SystemKind::Continuous,
        n: 1,
        hamiltonian: "0.5*(p1^2 + 1/q1^2)".to_string(),
        params: vec![],
        derived_params: vec![],
        symmetries: vec![
            sym("x1", "1", &["0"], &["0"], None, Expectation::Invariant),
            sym("x2", "2*t", &["q1"], &["-p1"], None, Expectation::Invariant),
            sym(
                "x3",
                "t^2",
                &["t*q1"],
                &["q1 - t*p1"],
                Some("q1^2/2"),
                Expectation::DivergenceInvariant,
            ),
        ],
        integrals: vec![
            integral("i1", "x1", "-0.5*(p1^2 + 1/q1^2)"),
            integral("i2", "x2", "q1*p1 - t*(p1^2 + 1/q1^2)"),
            integral("i3", "x3", "-0.5*(t^2/q1^2 + (q1 - t*p1)^2)"),
        ],
        relations: vec![relation("casimir", "4*i1*i3 - i2^2", "1")],
        sampler: Sampler::Box {
            q_abs: (0.4, 2.2),
            p: (-2.0, 2.0),
        },
        defaults: RunDefaults::Continuous {
            t0: 0.0,
            q0: vec![1.0],
            p0: vec![1.0],
            dt: 1e-3,
            t_end: 5.0,
        },
    }
}

/// One-dimensional repulsive Coulomb potential. The scaling field `x2` is
/// admitted by the equations of motion but is not an action invariance, so it
/// induces no conservation law — the classic dichotomy case.
fn coulomb() -> CatalogEntry {
    CatalogEntry {
        id: "coulomb".to_string(),
        title: "Repulsive Coulomb force in one dimension".to_string(),
        kind: SystemKind::Continuous,
        n: 1,
        hamiltonian: "p1^2/2 + 1/q1".to_string(),
        params: vec![],
        derived_params: vec![],
        symmetries: vec![
            sym("x1", "1", &["0"], &["0"], None, Expectation::Invariant),
            sym(
                "x2",
                "3*t",
                &["2*q1"],
                &["-p1"],
                None,
                Expectation::AdmittedOnly,
            ),
        ],
        integrals: vec![integral("i1", "x1", "-(p1^2/2 + 1/q1)")],
        relations: vec![],
        sampler: Sampler::PositiveBox {
            q: (0.3, 2.5),
            p: (-2.0, 2.0),
        },
        defaults: RunDefaults::Continuous {
            t0: 0.0,
            q0: vec![1.0],
            p0: vec![1.0],
            dt: 1e-3,
            t_end: 5.0,
        },
    }
}

/// Planar Kepler problem: energy, angular momentum, and both components of
/// the Laplace–Runge–Lenz vector from divergence-invariant symmetries, with
/// the norm relation tying them together. The Kepler-third-law scaling is
/// admitted but provably not variational.
fn kepler2d() -> CatalogEntry {
    let r = "sqrt(q1^2 + q2^2)";
    CatalogEntry {
        id: "kepler2d".to_string(),
        title: "Planar Kepler problem".to_string(),
        kind: SystemKind::Continuous,
        n: 2,
        hamiltonian: format!("0.5*(p1^2 + p2^2) - k^2/{r}"),
        params: vec![("k".to_string(), 1.0)],
        derived_params: vec![],
        symmetries: vec![
            sym(
                "x0",
                "1",
                &["0", "0"],
                &["0", "0"],
                None,
                Expectation::Invariant,
            ),
            sym(
                "x1",
                "3*t",
                &["2*q1", "2*q2"],
                &["-p1", "-p2"],
                None,
                Expectation::NotNoether,
            ),
            sym(
                "x12",
                "0",
                &["-q2", "q1"],
                &["-p2", "p1"],
                None,
                Expectation::Invariant,
            ),
            SymmetrySpec {
                name: "y1".to_string(),
                xi: "0".to_string(),
                eta: vec!["-q2*p2".to_string(), "2*q1*p2 - q2*p1".to_string()],
                zeta: vec![
                    format!("-p2^2 + k^2*q2^2/{r}^3"),
                    format!("p1*p2 - k^2*q1*q2/{r}^3"),
                ],
                v: Some(format!("q1*(p1^2 + p2^2 + k^2/{r}) - p1*(q1*p1 + q2*p2)")),
                expectation: Expectation::DivergenceInvariant,
            },
            SymmetrySpec {
                name: "y2".to_string(),
                xi: "0".to_string(),
                eta: vec!["2*q2*p1 - q1*p2".to_string(), "-q1*p1".to_string()],
                zeta: vec![
                    format!("p1*p2 - k^2*q1*q2/{r}^3"),
                    format!("-p1^2 + k^2*q1^2/{r}^3"),
                ],
                v: Some(format!("q2*(p1^2 + p2^2 + k^2/{r}) - p2*(q1*p1 + q2*p2)")),
                expectation: Expectation::DivergenceInvariant,
            },
        ],
        integrals: vec![
            integral("i0", "x0", &format!("-(0.5*(p1^2 + p2^2) - k^2/{r})")),
            integral("i12", "x12", "q1*p2 - q2*p1"),
            integral(
                "a1",
                "y1",
                &format!("q1*(p1^2 + p2^2) - p1*(q1*p1 + q2*p2) - k^2*q1/{r}"),
            ),
            integral(
                "a2",
                "y2",
                &format!("q2*(p1^2 + p2^2) - p2*(q1*p1 + q2*p2) - k^2*q2/{r}"),
            ),
        ],
        relations: vec![relation("laplace-norm", "a1^2 + a2^2 + 2*i0*i12^2", "k^4")],
        sampler: Sampler::KeplerBound,
        defaults: RunDefaults::Continuous {
            t0: 0.0,
            q0: vec![1.0, 0.0],
            p0: vec![0.0, 1.0],
            dt: 1e-3,
            t_end: std::f64::consts::TAU,
        },
    }
}

/// Spatial Kepler problem: seven first integrals (energy, three angular
/// momenta, three Laplace–Runge–Lenz components) from the symmetry algebra,
/// with the two classical relations among them.
fn kepler3d() -> CatalogEntry {
    let r = "sqrt(q1^2 + q2^2 + q3^2)";
    let qdotp = "q1*p1 + q2*p2 + q3*p3";
    let psq = "p1^2 + p2^2 + p3^2";
    CatalogEntry {
        id: "kepler3d".to_string(),
        title: "Spatial Kepler problem".to_string(),
        kind: SystemKind::Continuous,
        n: 3,
        hamiltonian: format!("0.5*({psq}) - k^2/{r}"),
        params: vec![("k".to_string(), 1.0)],
        derived_params: vec![],
        symmetries: vec![
            sym(
                "x0",
                "1",
                &["0", "0", "0"],
                &["0", "0", "0"],
                None,
                Expectation::Invariant,
            ),
            sym(
                "x1",
                "3*t",
                &["2*q1", "2*q2", "2*q3"],
                &["-p1", "-p2", "-p3"],
                None,
                Expectation::NotNoether,
            ),
            sym(
                "x12",
                "0",
                &["-q2", "q1", "0"],
                &["-p2", "p1", "0"],
                None,
                Expectation::Invariant,
            ),
            sym(
                "x13",
                "0",
                &["-q3", "0", "q1"],
                &["-p3", "0", "p1"],
                None,
                Expectation::Invariant,
            ),
            sym(
                "x23",
                "0",
                &["0", "-q3", "q2"],
                &["0", "-p3", "p2"],
                None,
                Expectation::Invariant,
            ),
            SymmetrySpec {
                name: "y1".to_string(),
                xi: "0".to_string(),
                eta: vec![
                    "-(q2*p2 + q3*p3)".to_string(),
                    "2*q1*p2 - q2*p1".to_string(),
                    "2*q1*p3 - q3*p1".to_string(),
                ],
                zeta: vec![
                    format!("-(p2^2 + p3^2) + k^2*(q2^2 + q3^2)/{r}^3"),
                    format!("p1*p2 - k^2*q1*q2/{r}^3"),
                    format!("p1*p3 - k^2*q1*q3/{r}^3"),
                ],
                v: Some(format!("q1*({psq} + k^2/{r}) - p1*({qdotp})")),
                expectation: Expectation::DivergenceInvariant,
            },
            SymmetrySpec {
                name: "y2".to_string(),
                xi: "0".to_string(),
                eta: vec![
                    "2*q2*p1 - q1*p2".to_string(),
                    "-(q1*p1 + q3*p3)".to_string(),
                    "2*q2*p3 - q3*p2".to_string(),
                ],
                zeta: vec![
                    format!("p1*p2 - k^2*q1*q2/{r}^3"),
                    format!("-(p1^2 + p3^2) + k^2*(q1^2 + q3^2)/{r}^3"),
                    format!("p2*p3 - k^2*q2*q3/{r}^3"),
                ],
                v: Some(format!("q2*({psq} + k^2/{r}) - p2*({qdotp})")),
                expectation: Expectation::DivergenceInvariant,
            },
            SymmetrySpec {
                name: "y3".to_string(),
                xi: "0".to_string(),
                eta: vec![
                    "2*q3*p1 - q1*p3".to_string(),
                    "2*q3*p2 - q2*p3".to_string(),
                    "-(q1*p1 + q2*p2)".to_string(),
                ],
                zeta: vec![
                    format!("p1*p3 - k^2*q1*q3/{r}^3"),
                    format!("p2*p3 - k^2*q2*q3/{r}^3"),
                    format!("-(p1^2 + p2^2) + k^2*(q1^2 + q2^2)/{r}^3"),
                ],
                v: Some(format!("q3*({psq} + k^2/{r}) - p3*({qdotp})")),
                expectation: Expectation::DivergenceInvariant,
            },
        ],
        integrals: vec![
            integral("i0", "x0", &format!("-(0.5*({psq}) - k^2/{r})")),
            integral("i12", "x12", "q1*p2 - q2*p1"),
            integral("i13", "x13", "q1*p3 - q3*p1"),
            integral("i23", "x23", "q2*p3 - q3*p2"),
            integral(
                "a1",
                "y1",
                &format!("q1*({psq}) - p1*({qdotp}) - k^2*q1/{r}"),
            ),
            integral(
                "a2",
                "y2",
                &format!("q2*({psq}) - p2*({qdotp}) - k^2*q2/{r}"),
            ),
            integral(
                "a3",
                "y3",
                &format!("q3*({psq}) - p3*({qdotp}) - k^2*q3/{r}"),
            ),
        ],
        relations: vec![
            relation(
                "laplace-norm",
                "a1^2 + a2^2 + a3^2 + 2*i0*(i12^2 + i13^2 + i23^2)",
                "k^4",
            ),
            relation("laplace-orthogonality", "a1*i23 - a2*i13 + a3*i12", "0"),
        ],
        sampler: Sampler::KeplerBound,
        defaults: RunDefaults::Continuous {
            t0: 0.0,
            q0: vec![1.0, 0.0, 0.0],
            p0: vec![0.0, 1.0, 0.0],
            dt: 1e-3,
            t_end: std::f64::consts::TAU,
        },
    }
}

/// Midpoint discretization of the harmonic oscillator. The lattice equation
/// keeps the mesh uniform; the scheme rotates by angle `ω·h` per step with
/// `ω = atan(h/2)/(h/2)`, and the two time-dependent symmetries built on that
/// frequency are divergence-invariant and give amplitude/phase integrals.
fn osc_midpoint() -> CatalogEntry {
    CatalogEntry {
        id: "osc-midpoint".to_string(),
        title: "Harmonic oscillator, midpoint discretization".to_string(),
        kind: SystemKind::Discrete,
        n: 1,
        hamiltonian: "2*(q1^2 + pp1^2 + hp*q1*pp1)/(4 - hp^2)".to_string(),
        params: vec![],
        derived_params: vec![("omega".to_string(), ParamRule::AtanHalfH)],
        symmetries: vec![
            sym(
                "x1",
                "0",
                &["sin(omega*t)"],
                &["cos(omega*t)"],
                Some("q1*cos(omega*t)"),
                Expectation::DivergenceInvariant,
            ),
            sym(
                "x2",
                "0",
                &["cos(omega*t)"],
                &["-sin(omega*t)"],
                Some("-q1*sin(omega*t)"),
                Expectation::DivergenceInvariant,
            ),
            sym("x3", "1", &["0"], &["0"], None, Expectation::Invariant),
            sym("x4", "0", &["q1"], &["p1"], None, Expectation::AdmittedOnly),
            sym(
                "x5",
                "0",
                &["p1"],
                &["-q1"],
                None,
                Expectation::AdmittedOnly,
            ),
        ],
        integrals: vec![
            integral("i1", "x1", "p1*sin(omega*t) - q1*cos(omega*t)"),
            integral("i2", "x2", "p1*cos(omega*t) + q1*sin(omega*t)"),
            integral(
                "i3",
                "x3",
                "-(2*((qm1^2 + p1^2)*(4 + hm^2) + 8*hm*qm1*p1)/(4 - hm^2)^2)",
            ),
        ],
        relations: vec![
            relation("amplitude", "i1^2 + i2^2 - (q1^2 + p1^2)", "0"),
            relation(
                "reconstruct-q",
                "i2*sin(omega*t) - i1*cos(omega*t) - q1",
                "0",
            ),
            relation(
                "reconstruct-p",
                "i1*sin(omega*t) + i2*cos(omega*t) - p1",
                "0",
            ),
        ],
        sampler: Sampler::Box {
            q_abs: (0.2, 1.5),
            p: (-1.5, 1.5),
        },
        defaults: RunDefaults::Discrete {
            t0: 0.0,
            q0: vec![1.0],
            p0: vec![0.0],
            h0: 0.2,
            steps: 100,
        },
    }
}

/// Exact-energy discretization of the harmonic oscillator: rescaling the
/// midpoint scheme by `Ω = tan(h/2)/(h/2)` makes each step the exact time-`h`
/// flow, so the symmetries carry plain `sin(t)`, `cos(t)` coefficients.
fn osc_exact() -> CatalogEntry {
    CatalogEntry {
        id: "osc-exact".to_string(),
        title: "Harmonic oscillator, exact-flow discretization".to_string(),
        kind: SystemKind::Discrete,
        n: 1,
        hamiltonian: "2*bigomega*(q1^2 + pp1^2 + bigomega*hp*q1*pp1)/(4 - bigomega^2*hp^2)"
            .to_string(),
        params: vec![],
        derived_params: vec![("bigomega".to_string(), ParamRule::TanHalfH)],
        symmetries: vec![
            sym(
                "x1",
                "0",
                &["sin(t)"],
                &["cos(t)"],
                Some("q1*cos(t)"),
                Expectation::DivergenceInvariant,
            ),
            sym(
                "x2",
                "0",
                &["cos(t)"],
                &["-sin(t)"],
                Some("-q1*sin(t)"),
                Expectation::DivergenceInvariant,
            ),
            sym("x3", "1", &["0"], &["0"], None, Expectation::Invariant),
            sym("x4", "0", &["q1"], &["p1"], None, Expectation::AdmittedOnly),
            sym(
                "x5",
                "0",
                &["p1"],
                &["-q1"],
                None,
                Expectation::AdmittedOnly,
            ),
        ],
        integrals: vec![
            integral("i1", "x1", "p1*sin(t) - q1*cos(t)"),
            integral("i2", "x2", "p1*cos(t) + q1*sin(t)"),
            integral(
                "i3",
                "x3",
                "-(2*bigomega*((qm1^2 + p1^2)*(4 + bigomega^2*hm^2) \
                 + 8*bigomega*hm*qm1*p1)/(4 - bigomega^2*hm^2)^2)",
            ),
        ],
        relations: vec![
            relation("amplitude", "i1^2 + i2^2 - (q1^2 + p1^2)", "0"),
            relation("reconstruct-q", "i2*sin(t) - i1*cos(t) - q1", "0"),
            relation("reconstruct-p", "i1*sin(t) + i2*cos(t) - p1", "0"),
        ],
        sampler: Sampler::Box {
            q_abs: (0.2, 1.5),
            p: (-1.5, 1.5),
        },
        defaults: RunDefaults::Discrete {
            t0: 0.0,
            q0: vec![1.0],
            p0: vec![0.0],
            h0: 0.2,
            steps: 1000,
        },
    }
}

/// Discrete inverse-cube system on a genuinely self-adapting lattice: the
/// mesh equation varies the spacing, yet time translation and the scaling
/// field stay invariant and their integrals are conserved exactly.
fn nonlinear() -> CatalogEntry {
    CatalogEntry {
        id: "nonlinear".to_string(),
        title: "Inverse-cube force, variable-lattice discretization".to_string(),
        kind: SystemKind::Discrete,
        n: 1,
        hamiltonian: "0.5*(pp1^2 + 1/q1^2)".to_string(),
        params: vec![],
        derived_params: vec![],
        symmetries: vec![
            sym("x1", "1", &["0"], &["0"], None, Expectation::Invariant),
            sym("x2", "2*t", &["q1"], &["-p1"], None, Expectation::Invariant),
        ],
        integrals: vec![
            integral("i1", "x1", "-0.5*(p1^2 + 1/qm1^2)"),
            integral("i2", "x2", "q1*p1 - t*(p1^2 + 1/qm1^2)"),
        ],
        relations: vec![relation("affine", "i2 - (q1*p1 + 2*t*i1)", "0")],
        sampler: Sampler::PositiveBox {
            q: (0.5, 2.0),
            p: (0.2, 1.5),
        },
        defaults: RunDefaults::Discrete {
            t0: 0.0,
            q0: vec![1.0],
            p0: vec![1.0],
            h0: 0.1,
            steps: 100,
        },
    }
}

// ---------------------------------------------------------------------------
// Verification driver
// ---------------------------------------------------------------------------

/// Sampling-based verification settings.
#[derive(Debug, Clone, Copy)]
pub struct VerifySettings {
    /// Number of random states (continuous) or solution triples (discrete).
    pub samples: usize,
    /// Pass tolerance for scaled residuals.
    pub tol: f64,
    /// RNG seed; identical settings give identical reports.
    pub seed: u64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            samples: 200,
            tol: 1e-9,
            seed: 42,
        }
    }
}

/// A residual must exceed this (scaled) to count as demonstrably nonzero.
const NON_INVARIANCE_FLOOR: f64 = 1e-3;

/// Outcome of the attempted least-squares gauge repair of a non-variational
/// symmetry: the defect that remains after fitting the best low-degree
/// polynomial gauge term.
#[derive(Debug, Clone, Copy)]
pub struct RefutationReport {
    /// Number of polynomial basis functions fitted (degree ≤ 2 monomials in
    /// `t, q, p`, constants excluded).
    pub basis_size: usize,
    /// States used for the fit.
    pub samples: usize,
    /// RMS invariance defect before fitting.
    pub rms_defect: f64,
    /// RMS defect after subtracting the fitted divergence.
    pub rms_after_fit: f64,
}

impl RefutationReport {
    /// The defect survives the repair attempt.
    pub fn refuted(&self) -> bool {
        self.rms_after_fit > NON_INVARIANCE_FLOOR.max(0.01 * self.rms_defect)
    }
}

/// Verdict on one symmetry.
#[derive(Debug, Clone)]
pub struct SymmetryVerdict {
    pub name: String,
    pub expectation: Expectation,
    /// Max scaled action-invariance defect over the samples.
    pub action_max: f64,
    /// Max scaled equation-invariance residual over the samples.
    pub equation_max: f64,
    /// Max scaled mesh-invariance residual (discrete systems only).
    pub mesh_max: Option<f64>,
    /// Gauge-repair refutation (not-noether expectation only).
    pub refutation: Option<RefutationReport>,
    pub pass: bool,
}

impl SymmetryVerdict {
    /// One human-readable line.
    pub fn describe(&self) -> String {
        let status = if self.pass { "ok" } else { "FAIL" };
        let mesh = match self.mesh_max {
            Some(m) => format!(", mesh {m:.2e}"),
            None => String::new(),
        };
        let tail = match self.expectation {
            Expectation::Invariant | Expectation::DivergenceInvariant => format!(
                "action {:.2e}, equations {:.2e}{mesh}",
                self.action_max, self.equation_max
            ),
            Expectation::AdmittedOnly => format!(
                "equations {:.2e}{mesh}; action defect {:.2e} (non-invariance expected)",
                self.equation_max, self.action_max
            ),
            Expectation::NotNoether => {
                let refut = match &self.refutation {
                    Some(r) => format!(
                        "; gauge repair over {} basis functions leaves rms {:.2e} of {:.2e}",
                        r.basis_size, r.rms_after_fit, r.rms_defect
                    ),
                    None => String::new(),
                };
                format!(
                    "equations {:.2e}{mesh}; action defect {:.2e}{refut}",
                    self.equation_max, self.action_max
                )
            }
        };
        format!(
            "symmetry {} [{}] {}: {}",
            self.name, self.expectation, status, tail
        )
    }
}

/// Verdict on one symmetry-vs-closed-form integral cross-check.
#[derive(Debug, Clone)]
pub struct IntegralVerdict {
    pub name: String,
    /// The symmetry whose induced integral was compared.
    pub source: String,
    /// Max scaled mismatch over the samples.
    pub max_mismatch: f64,
    pub pass: bool,
}

impl IntegralVerdict {
    pub fn describe(&self) -> String {
        format!(
            "integral {} (from {}) {}: mismatch {:.2e}",
            self.name,
            self.source,
            if self.pass { "ok" } else { "FAIL" },
            self.max_mismatch
        )
    }
}

/// Verdict on one relation among integrals.
#[derive(Debug, Clone)]
pub struct RelationVerdict {
    pub name: String,
    /// Max scaled defect over the samples.
    pub max_defect: f64,
    pub pass: bool,
}

impl RelationVerdict {
    pub fn describe(&self) -> String {
        format!(
            "relation {} {}: defect {:.2e}",
            self.name,
            if self.pass { "ok" } else { "FAIL" },
            self.max_defect
        )
    }
}

/// Full verification report for one entry.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub id: String,
    pub kind: SystemKind,
    pub symmetries: Vec<SymmetryVerdict>,
    pub integrals: Vec<IntegralVerdict>,
    pub relations: Vec<RelationVerdict>,
}

impl VerifyReport {
    pub fn pass(&self) -> bool {
        self.symmetries.iter().all(|v| v.pass)
            && self.integrals.iter().all(|v| v.pass)
            && self.relations.iter().all(|v| v.pass)
    }

    /// All verdicts as lines.
    pub fn lines(&self) -> Vec<String> {
        self.symmetries
            .iter()
            .map(SymmetryVerdict::describe)
            .chain(self.integrals.iter().map(IntegralVerdict::describe))
            .chain(self.relations.iter().map(RelationVerdict::describe))
            .collect()
    }
}

/// Error from [`verify`].
#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("evaluation failed during verification: {0}")]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Sampling(String),
}

/// Run every check an entry claims: classify each symmetry against its
/// expectation, cross-check each integral against the symmetry that induces
/// it, and test each relation — all at randomly sampled states (continuous)
/// or solution triples (discrete).
pub fn verify(
    entry: &CatalogEntry,
    settings: &VerifySettings,
) -> Result<VerifyReport, VerifyError> {
    match entry.kind {
        SystemKind::Continuous => verify_continuous(entry, settings),
        SystemKind::Discrete => verify_discrete(entry, settings),
    }
}

fn verdict_pass(
    expectation: Expectation,
    tol: f64,
    action_max: f64,
    equation_max: f64,
    mesh_max: Option<f64>,
    refutation: &Option<RefutationReport>,
) -> bool {
    let mesh_ok = mesh_max.is_none_or(|m| m <= tol);
    match expectation {
        Expectation::Invariant | Expectation::DivergenceInvariant => {
            action_max <= tol && equation_max <= tol && mesh_ok
        }
        Expectation::AdmittedOnly => {
            equation_max <= tol && mesh_ok && action_max > NON_INVARIANCE_FLOOR
        }
        Expectation::NotNoether => {
            equation_max <= tol
                && mesh_ok
                && action_max > NON_INVARIANCE_FLOOR
                && refutation.as_ref().is_some_and(RefutationReport::refuted)
        }
    }
}

fn verify_continuous(
    entry: &CatalogEntry,
    settings: &VerifySettings,
) -> Result<VerifyReport, VerifyError> {
    let bundle = entry.build_continuous()?;
    let sys = &bundle.system;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let states: Vec<State> = (0..settings.samples.max(1))
        .map(|_| entry.sample_state(&mut rng))
        .collect();

    let mut symmetries = Vec::with_capacity(bundle.symmetries.len());
    for bs in &bundle.symmetries {
        let mut action_max = 0.0_f64;
        let mut equation_max = 0.0_f64;
        for s in &states {
            let a = invariance_residual(sys, &bs.symmetry, s)?;
            action_max = action_max.max(a.scaled().abs());
            for r in equation_invariance_residuals(sys, &bs.symmetry, s)? {
                equation_max = equation_max.max(r.scaled().abs());
            }
        }
        let refutation = if bs.expectation == Expectation::NotNoether {
            Some(gauge_refutation(entry, sys, &bs.symmetry, settings)?)
        } else {
            None
        };
        let pass = verdict_pass(
            bs.expectation,
            settings.tol,
            action_max,
            equation_max,
            None,
            &refutation,
        );
        symmetries.push(SymmetryVerdict {
            name: bs.name.clone(),
            expectation: bs.expectation,
            action_max,
            equation_max,
            mesh_max: None,
            refutation,
            pass,
        });
    }

    let mut integrals = Vec::new();
    for bi in &bundle.integrals {
        let Some(src) = &bi.from_symmetry else {
            continue;
        };
        let sym = bundle
            .symmetry(src)
            .expect("validated at build time")
            .symmetry
            .clone();
        let mut max_mismatch = 0.0_f64;
        for s in &states {
            let from_sym = first_integral_value(sys, &sym, s)?;
            let closed = sys.eval_at(&bi.closed, s)?;
            let r = ScaledResidual::from_terms(from_sym - closed, &[from_sym, closed]);
            max_mismatch = max_mismatch.max(r.scaled().abs());
        }
        integrals.push(IntegralVerdict {
            name: bi.name.clone(),
            source: src.clone(),
            max_mismatch,
            pass: max_mismatch <= settings.tol,
        });
    }

    let mut relations = Vec::new();
    for rel in &bundle.relations {
        let mut max_defect = 0.0_f64;
        for s in &states {
            let r = bundle.relation_residual(rel, s)?;
            max_defect = max_defect.max(r.scaled().abs());
        }
        relations.push(RelationVerdict {
            name: rel.name.clone(),
            max_defect,
            pass: max_defect <= settings.tol,
        });
    }

    Ok(VerifyReport {
        id: entry.id.clone(),
        kind: entry.kind,
        symmetries,
        integrals,
        relations,
    })
}

/// Least-squares attempt to repair a non-invariant symmetry with a polynomial
/// gauge term: fit coefficients `c` so that `D(Σ c_k b_k)` best matches the
/// invariance defect along the canonical flow, over all monomials `b_k` of
/// degree ≤ 2 in `(t, q, p)`. A defect that survives the fit cannot be a
/// divergence of anything in that space.
fn gauge_refutation(
    entry: &CatalogEntry,
    sys: &ContinuousSystem,
    sym: &Symmetry,
    settings: &VerifySettings,
) -> Result<RefutationReport, VerifyError> {
    let n = sys.n();
    let m = 2 * n + 1;
    let basis_size = m + m * (m + 1) / 2;
    // The fit needs comfortably more states than coefficients, whatever the
    // caller's sample count; use a dedicated deterministic stream.
    let samples = settings.samples.max(3 * basis_size);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut ata = vec![vec![0.0; basis_size]; basis_size];
    let mut atb = vec![0.0; basis_size];
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(samples);
    for _ in 0..samples {
        let s = entry.sample_state(&mut rng);
        let (qdot, pdot) = vector_field(sys, &s)?;
        let mut z = Vec::with_capacity(m);
        z.push(s.t);
        z.extend_from_slice(&s.q);
        z.extend_from_slice(&s.p);
        let mut zdot = Vec::with_capacity(m);
        zdot.push(1.0);
        zdot.extend_from_slice(&qdot);
        zdot.extend_from_slice(&pdot);

        // D(b) along the canonical flow for each monomial basis function.
        let mut d = Vec::with_capacity(basis_size);
        d.extend_from_slice(&zdot);
        for i in 0..m {
            for j in i..m {
                d.push(zdot[i] * z[j] + z[i] * zdot[j]);
            }
        }
        let y = invariance_residual(sys, sym, &s)?.value;
        for (k, dk) in d.iter().enumerate() {
            atb[k] += dk * y;
            for (l, dl) in d.iter().enumerate() {
                ata[k][l] += dk * dl;
            }
        }
        rows.push((d, y));
    }
    for (k, row) in ata.iter_mut().enumerate() {
        row[k] += 1e-10 * (1.0 + row[k]);
    }
    let coeffs = solve_lu(ata, atb).unwrap_or_else(|_| vec![0.0; basis_size]);

    let mut sum_y2 = 0.0;
    let mut sum_r2 = 0.0;
    for (d, y) in &rows {
        let fit: f64 = d.iter().zip(&coeffs).map(|(dk, ck)| dk * ck).sum();
        sum_y2 += y * y;
        sum_r2 += (y - fit) * (y - fit);
    }
    let count = rows.len() as f64;
    Ok(RefutationReport {
        basis_size,
        samples,
        rms_defect: (sum_y2 / count).sqrt(),
        rms_after_fit: (sum_r2 / count).sqrt(),
    })
}

fn verify_discrete(
    entry: &CatalogEntry,
    settings: &VerifySettings,
) -> Result<VerifyReport, VerifyError> {
    let h0 = match &entry.defaults {
        RunDefaults::Discrete { h0, .. } => *h0,
        RunDefaults::Continuous { .. } => {
            return Err(VerifyError::Build(BuildError::Invalid(format!(
                "discrete entry '{}' carries continuous run defaults",
                entry.id
            ))))
        }
    };
    let bundle = entry.build_discrete(h0)?;
    let sys = &bundle.system;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);

    // Harvest solution triples: short runs from sampled starts, using the
    // interior triple so the spacing of the last interval was genuinely
    // solved for.
    let wanted = settings.samples.max(1);
    let mut triples: Vec<(LatticePoint, LatticePoint, LatticePoint)> = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while triples.len() < wanted {
        attempts += 1;
        if attempts > 50 * wanted {
            return Err(VerifyError::Sampling(format!(
                "could not produce {wanted} solution triples for '{}' \
                 ({} succeeded in {attempts} attempts)",
                entry.id,
                triples.len()
            )));
        }
        let s0 = entry.sample_state(&mut rng);
        if let Ok(traj) = run_lattice(sys, &s0, h0, 3) {
            triples.push((
                traj.points[1].clone(),
                traj.points[2].clone(),
                traj.points[3].clone(),
            ));
        }
    }

    let mut symmetries = Vec::with_capacity(bundle.symmetries.len());
    for bs in &bundle.symmetries {
        let mut action_max = 0.0_f64;
        let mut equation_max = 0.0_f64;
        let mut mesh_max = 0.0_f64;
        for (prev, cur, next) in &triples {
            let inv = discrete_invariance_residual(sys, &bs.symmetry, prev, cur, next)?;
            action_max = action_max.max(inv.action.scaled().abs());
            mesh_max = mesh_max.max(inv.mesh.scaled().abs());
            for r in discrete_equation_invariance(sys, &bs.symmetry, prev, cur, next)? {
                equation_max = equation_max.max(r.scaled().abs());
            }
        }
        let pass = verdict_pass(
            bs.expectation,
            settings.tol,
            action_max,
            equation_max,
            Some(mesh_max),
            &None,
        );
        symmetries.push(SymmetryVerdict {
            name: bs.name.clone(),
            expectation: bs.expectation,
            action_max,
            equation_max,
            mesh_max: Some(mesh_max),
            refutation: None,
            pass,
        });
    }

    let mut integrals = Vec::new();
    for bi in &bundle.integrals {
        let Some(src) = &bi.from_symmetry else {
            continue;
        };
        let sym = bundle
            .symmetry(src)
            .expect("validated at build time")
            .symmetry
            .clone();
        let mut max_mismatch = 0.0_f64;
        for (prev, cur, next) in &triples {
            for (a, b) in [(prev, cur), (cur, next)] {
                let from_sym = discrete_first_integral_value(sys, &sym, a, b)?;
                let closed = sys.eval_on_interval(&bi.closed, a, b)?;
                let r = ScaledResidual::from_terms(from_sym - closed, &[from_sym, closed]);
                max_mismatch = max_mismatch.max(r.scaled().abs());
            }
        }
        integrals.push(IntegralVerdict {
            name: bi.name.clone(),
            source: src.clone(),
            max_mismatch,
            pass: max_mismatch <= settings.tol,
        });
    }

    let mut relations = Vec::new();
    for rel in &bundle.relations {
        let mut max_defect = 0.0_f64;
        for (prev, cur, next) in &triples {
            for (a, b) in [(prev, cur), (cur, next)] {
                let r = bundle.relation_residual(rel, a, b)?;
                max_defect = max_defect.max(r.scaled().abs());
            }
        }
        relations.push(RelationVerdict {
            name: rel.name.clone(),
            max_defect,
            pass: max_defect <= settings.tol,
        });
    }

    Ok(VerifyReport {
        id: entry.id.clone(),
        kind: entry.kind,
        symmetries,
        integrals,
        relations,
    })
}
