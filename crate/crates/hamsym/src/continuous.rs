//! Continuous-time canonical Hamiltonian systems and their point symmetries.
//!
//! A system is defined by `H(t, q, p)` with the canonical equations
//! `dq^i/dt = ∂H/∂p_i`, `dp_i/dt = -∂H/∂q^i`. A candidate point symmetry is
//! `X = ξ ∂_t + η^i ∂_{q^i} + ζ_i ∂_{p_i}` whose coefficients are functions of
//! `(t, q, p)`, optionally with a gauge term `V(t, q, p)` for divergence
//! invariance.
//!
//! The module provides, all derivative-exact via forward AD:
//!
//! * [`invariance_residual`] — the action-invariance defect
//!   `Σ ζ_i q̇^i + Σ p_i D(η^i) - X(H) - H·D(ξ) - D(V)`, evaluated with the
//!   canonical velocities. Zero (to roundoff) means the symmetry is
//!   (divergence-)invariant and induces a first integral.
//! * [`first_integral_value`] — `I = Σ p_i η^i - ξ·H - V`, the integral the
//!   symmetry induces, built directly from the coefficients; no integration.
//! * [`check_hamiltonian_identity`] — both sides of the operator identity that
//!   links the invariance defect to the equations of motion, evaluated for
//!   *arbitrary* `(q̇, ṗ)` supplied by the caller. The two sides are computed
//!   literally and independently; their agreement for off-solution data is a
//!   machine-checkable certificate of the whole derivative stack.
//! * [`equation_invariance_residuals`] — the prolonged action of `X` on the
//!   canonical equations themselves. A symmetry can be admitted by the
//!   equations while failing action invariance (then it yields no integral
//!   this way); this op separates the two notions.
//! * [`integrate_reference`] / [`monitor`] — a fixed-step RK4 reference
//!   integrator and drift reporting for named first integrals along a
//!   trajectory.
//!
//! Variable layout: expressions for `H`, symmetry coefficients, gauge terms,
//! and closed-form integrals are bound over `t, q1..qn, p1..pn` followed by
//! any named parameters (`n` is the number of degrees of freedom).

use thiserror::Error;

use crate::autodiff::{grad, mixed_second};
use crate::expr::{BindError, BoundExpr, EvalError, Expr, Scalar};

/// A phase-space point `(t, q, p)` with `q.len() == p.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub t: f64,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl State {
    /// Create a state; panics if `q` and `p` lengths differ.
    pub fn new(t: f64, q: Vec<f64>, p: Vec<f64>) -> Self {
        assert_eq!(q.len(), p.len(), "q and p must have the same dimension");
        State { t, q, p }
    }

    /// Number of degrees of freedom.
    pub fn dim(&self) -> usize {
        self.q.len()
    }
}

/// Ordered names of the phase variables: `t, q1..qn, p1..pn`.
pub fn phase_vars(n: usize) -> Vec<String> {
    let mut vars = Vec::with_capacity(1 + 2 * n);
    vars.push("t".to_string());
    for i in 1..=n {
        vars.push(format!("q{i}"));
    }
    for i in 1..=n {
        vars.push(format!("p{i}"));
    }
    vars
}

fn layout_with_params(n: usize, params: &[(String, f64)]) -> Vec<String> {
    let mut vars = phase_vars(n);
    vars.extend(params.iter().map(|(name, _)| name.clone()));
    vars
}

/// Flatten `(t, q, p)` plus parameter values into the argument slots.
fn point_args(n: usize, params: &[f64], s: &State) -> Vec<f64> {
    assert_eq!(s.dim(), n, "state dimension mismatch");
    let mut args = Vec::with_capacity(1 + 2 * n + params.len());
    args.push(s.t);
    args.extend_from_slice(&s.q);
    args.extend_from_slice(&s.p);
    args.extend_from_slice(params);
    args
}

/// A residual together with the magnitude of the largest term that formed it.
///
/// Residuals of symbolic identities are sums of terms that can be large even
/// when the sum is tiny; comparing `|value|` against `tol · scale` with
/// `scale = 1 + max|term|` makes the test meaningful across systems of very
/// different size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledResidual {
    /// The signed residual value.
    pub value: f64,
    /// `1 + max|term|` over the terms summed into `value`.
    pub scale: f64,
}

impl ScaledResidual {
    /// Build from a residual and the individual terms it summed.
    pub fn from_terms(value: f64, terms: &[f64]) -> Self {
        let max = terms.iter().fold(0.0_f64, |m, t| m.max(t.abs()));
        ScaledResidual {
            value,
            scale: 1.0 + max,
        }
    }

    /// `|value| / scale`.
    pub fn scaled(&self) -> f64 {
        self.value.abs() / self.scale
    }

    /// Whether `|value| ≤ tol · scale`.
    pub fn within(&self, tol: f64) -> bool {
        self.value.abs() <= tol * self.scale
    }
}

/// A canonical Hamiltonian system `H(t, q, p)` with named constant parameters.
#[derive(Debug, Clone)]
pub struct ContinuousSystem {
    n: usize,
    h_text: Expr,
    h: BoundExpr,
    param_names: Vec<String>,
    param_values: Vec<f64>,
}

impl ContinuousSystem {
    /// Bind a Hamiltonian over `n` degrees of freedom and the given
    /// parameters. Fails if `H` references anything outside
    /// `t, q1..qn, p1..pn` and the parameter names.
    pub fn new(n: usize, h: Expr, params: &[(String, f64)]) -> Result<Self, BindError> {
        let layout = layout_with_params(n, params);
        let bound = h.bind(&layout)?;
        Ok(ContinuousSystem {
            n,
            h_text: h,
            h: bound,
            param_names: params.iter().map(|(name, _)| name.clone()).collect(),
            param_values: params.iter().map(|(_, v)| *v).collect(),
        })
    }

    /// Number of degrees of freedom.
    pub fn n(&self) -> usize {
        self.n
    }

    /// The Hamiltonian as an expression tree.
    pub fn h_expr(&self) -> &Expr {
        &self.h_text
    }

    /// Parameter names and values, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (&str, f64)> {
        self.param_names
            .iter()
            .map(|s| s.as_str())
            .zip(self.param_values.iter().copied())
    }

    fn args(&self, s: &State) -> Vec<f64> {
        point_args(self.n, &self.param_values, s)
    }

    /// `H` at a state.
    pub fn hamiltonian(&self, s: &State) -> Result<f64, EvalError> {
        self.h.eval(&self.args(s))
    }

    /// `H` and its gradient over the `t, q, p` slots (parameter components
    /// are also returned but unused by callers).
    fn h_grad(&self, s: &State) -> Result<(f64, Vec<f64>), EvalError> {
        grad(&self.h, &self.args(s))
    }

    /// Bind an auxiliary expression (closed-form integral, relation term)
    /// over this system's variable layout.
    pub fn bind_over_phase(&self, expr: &Expr) -> Result<BoundExpr, BindError> {
        let mut params: Vec<(String, f64)> = Vec::new();
        for (name, value) in self.param_names.iter().zip(&self.param_values) {
            params.push((name.clone(), *value));
        }
        expr.bind(&layout_with_params(self.n, &params))
    }

    /// Evaluate an expression bound with [`bind_over_phase`] at a state.
    pub fn eval_at(&self, bound: &BoundExpr, s: &State) -> Result<f64, EvalError> {
        bound.eval(&self.args(s))
    }
}

/// A candidate point symmetry `X = ξ ∂_t + η^i ∂_{q^i} + ζ_i ∂_{p_i}` with an
/// optional gauge term `V` (for divergence invariance).
///
/// Coefficients are functions of `(t, q, p)` and any named parameters; the
/// parameter list should match the system the symmetry is checked against.
#[derive(Debug, Clone)]
pub struct Symmetry {
    n: usize,
    xi: BoundExpr,
    eta: Vec<BoundExpr>,
    zeta: Vec<BoundExpr>,
    v: Option<BoundExpr>,
    param_values: Vec<f64>,
}

impl Symmetry {
    /// Bind symmetry coefficients over `n` degrees of freedom.
    pub fn new(
        n: usize,
        xi: &Expr,
        eta: &[Expr],
        zeta: &[Expr],
        v: Option<&Expr>,
        params: &[(String, f64)],
    ) -> Result<Self, BindError> {
        assert_eq!(eta.len(), n, "expected {n} eta coefficients");
        assert_eq!(zeta.len(), n, "expected {n} zeta coefficients");
        let layout = layout_with_params(n, params);
        Ok(Symmetry {
            n,
            xi: xi.bind(&layout)?,
            eta: eta
                .iter()
                .map(|e| e.bind(&layout))
                .collect::<Result<_, _>>()?,
            zeta: zeta
                .iter()
                .map(|e| e.bind(&layout))
                .collect::<Result<_, _>>()?,
            v: v.map(|e| e.bind(&layout)).transpose()?,
            param_values: params.iter().map(|(_, v)| *v).collect(),
        })
    }

    /// Number of degrees of freedom.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Whether the symmetry carries a gauge term `V`.
    pub fn has_gauge(&self) -> bool {
        self.v.is_some()
    }

    pub(crate) fn args(&self, s: &State) -> Vec<f64> {
        point_args(self.n, &self.param_values, s)
    }

    /// Coefficient values `(ξ, η, ζ, V)` at a state (`V = 0` when absent).
    pub fn coefficients(&self, s: &State) -> Result<(f64, Vec<f64>, Vec<f64>, f64), EvalError> {
        let args = self.args(s);
        let xi = self.xi.eval(&args)?;
        let eta = self
            .eta
            .iter()
            .map(|e| e.eval(&args))
            .collect::<Result<Vec<f64>, _>>()?;
        let zeta = self
            .zeta
            .iter()
            .map(|e| e.eval(&args))
            .collect::<Result<Vec<f64>, _>>()?;
        let v = match &self.v {
            Some(v) => v.eval(&args)?,
            None => 0.0,
        };
        Ok((xi, eta, zeta, v))
    }
}

/// Value + gradient pairs of all symmetry coefficients at one state.
struct CoefficientJet {
    xi: (f64, Vec<f64>),
    eta: Vec<(f64, Vec<f64>)>,
    zeta: Vec<(f64, Vec<f64>)>,
    v: Option<(f64, Vec<f64>)>,
}

impl Symmetry {
    fn jet(&self, s: &State) -> Result<CoefficientJet, EvalError> {
        let args = self.args(s);
        Ok(CoefficientJet {
            xi: grad(&self.xi, &args)?,
            eta: self
                .eta
                .iter()
                .map(|e| grad(e, &args))
                .collect::<Result<_, _>>()?,
            zeta: self
                .zeta
                .iter()
                .map(|e| grad(e, &args))
                .collect::<Result<_, _>>()?,
            v: self.v.as_ref().map(|v| grad(v, &args)).transpose()?,
        })
    }
}

/// Total derivative of `f` along velocities `(q̇, ṗ)` given its gradient over
/// the `t, q1.., p1..` slots: `D(f) = f_t + Σ q̇^i f_{q^i} + Σ ṗ_i f_{p_i}`.
fn total_derivative(n: usize, g: &[f64], qdot: &[f64], pdot: &[f64]) -> f64 {
    let mut d = g[0];
    for i in 0..n {
        d += qdot[i] * g[1 + i] + pdot[i] * g[1 + n + i];
    }
    d
}

/// Action of the point operator on `f` given its gradient:
/// `X(f) = ξ f_t + Σ η^i f_{q^i} + Σ ζ_i f_{p_i}`.
fn apply_operator(n: usize, g: &[f64], xi: f64, eta: &[f64], zeta: &[f64]) -> f64 {
    let mut x = xi * g[0];
    for i in 0..n {
        x += eta[i] * g[1 + i] + zeta[i] * g[1 + n + i];
    }
    x
}

/// Canonical velocities `(q̇, ṗ) = (∂H/∂p, -∂H/∂q)` at a state.
pub fn vector_field(sys: &ContinuousSystem, s: &State) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let n = sys.n;
    let (_, g) = sys.h_grad(s)?;
    let qdot = (0..n).map(|i| g[1 + n + i]).collect();
    let pdot = (0..n).map(|i| -g[1 + i]).collect();
    Ok((qdot, pdot))
}

/// Action-invariance residual of a symmetry at a state, evaluated with the
/// canonical velocities:
/// `Σ ζ_i q̇^i + Σ p_i D(η^i) - X(H) - H·D(ξ) - D(V)`.
///
/// Zero (within roundoff) means invariance: the symmetry then induces the
/// first integral of [`first_integral_value`].
pub fn invariance_residual(
    sys: &ContinuousSystem,
    sym: &Symmetry,
    s: &State,
) -> Result<ScaledResidual, EvalError> {
    let n = sys.n;
    assert_eq!(sym.n, n, "symmetry dimension mismatch");
    let (h, gh) = sys.h_grad(s)?;
    let qdot: Vec<f64> = (0..n).map(|i| gh[1 + n + i]).collect();
    let pdot: Vec<f64> = (0..n).map(|i| -gh[1 + i]).collect();

    let jet = sym.jet(s)?;
    let xi = jet.xi.0;
    let eta: Vec<f64> = jet.eta.iter().map(|(v, _)| *v).collect();
    let zeta: Vec<f64> = jet.zeta.iter().map(|(v, _)| *v).collect();

    let mut terms = Vec::with_capacity(2 * n + 3);
    let mut residual = 0.0;
    for i in 0..n {
        let term = zeta[i] * qdot[i];
        residual += term;
        terms.push(term);
    }
    for i in 0..n {
        let term = s.p[i] * total_derivative(n, &jet.eta[i].1, &qdot, &pdot);
        residual += term;
        terms.push(term);
    }
    let xh = apply_operator(n, &gh, xi, &eta, &zeta);
    residual -= xh;
    terms.push(xh);
    let hdxi = h * total_derivative(n, &jet.xi.1, &qdot, &pdot);
    residual -= hdxi;
    terms.push(hdxi);
    if let Some((_, gv)) = &jet.v {
        let dv = total_derivative(n, gv, &qdot, &pdot);
        residual -= dv;
        terms.push(dv);
    }
    Ok(ScaledResidual::from_terms(residual, &terms))
}

/// The first integral a (divergence-)invariant symmetry induces:
/// `I = Σ p_i η^i - ξ·H - V`.
pub fn first_integral_value(
    sys: &ContinuousSystem,
    sym: &Symmetry,
    s: &State,
) -> Result<f64, EvalError> {
    let (xi, eta, _, v) = sym.coefficients(s)?;
    let h = sys.hamiltonian(s)?;
    let mut i = -xi * h - v;
    for (pi, etai) in s.p.iter().zip(&eta) {
        i += pi * etai;
    }
    Ok(i)
}

/// Both sides of the operator identity evaluated at off-solution data.
#[derive(Debug, Clone, Copy)]
pub struct IdentityCheck {
    /// The invariance-defect side, assembled term by term.
    pub lhs: f64,
    /// The equations-of-motion side, assembled term by term.
    pub rhs: f64,
    /// `lhs - rhs` with the scale of the largest contributing term.
    pub residual: ScaledResidual,
}

/// Evaluate the identity connecting the invariance defect with the canonical
/// equations for **arbitrary** velocities `(q̇, ṗ)`:
///
/// ```text
/// Σ ζ_i q̇^i + Σ p_i D(η^i) - X(H) - H·D(ξ)
///   ≡ ξ·(D(H) - H_t) - Σ η^i·(ṗ_i + H_{q^i}) + Σ ζ_i·(q̇^i - H_{p_i})
///     + D[Σ p_i η^i - ξ·H]
/// ```
///
/// where `D` is the total derivative along the *given* `(q̇, ṗ)` — not the
/// canonical flow. Both sides are computed literally and independently (the
/// trailing `D[...]` by the product/chain rule on the same data), so agreement
/// to roundoff over random draws certifies the implementation of every
/// ingredient, not a cancellation baked into shared code.
pub fn check_hamiltonian_identity(
    sys: &ContinuousSystem,
    sym: &Symmetry,
    s: &State,
    qdot: &[f64],
    pdot: &[f64],
) -> Result<IdentityCheck, EvalError> {
    let n = sys.n;
    assert_eq!(sym.n, n, "symmetry dimension mismatch");
    assert_eq!(qdot.len(), n);
    assert_eq!(pdot.len(), n);

    let (h, gh) = sys.h_grad(s)?;
    let jet = sym.jet(s)?;
    let xi = jet.xi.0;
    let eta: Vec<f64> = jet.eta.iter().map(|(v, _)| *v).collect();
    let zeta: Vec<f64> = jet.zeta.iter().map(|(v, _)| *v).collect();
    let d_xi = total_derivative(n, &jet.xi.1, qdot, pdot);
    let d_eta: Vec<f64> = jet
        .eta
        .iter()
        .map(|(_, g)| total_derivative(n, g, qdot, pdot))
        .collect();
    let d_h = total_derivative(n, &gh, qdot, pdot);

    let mut terms: Vec<f64> = Vec::new();

    // Left side: the invariance defect with arbitrary velocities.
    let mut lhs = 0.0;
    for i in 0..n {
        let t = zeta[i] * qdot[i];
        lhs += t;
        terms.push(t);
        let t = s.p[i] * d_eta[i];
        lhs += t;
        terms.push(t);
    }
    let xh = apply_operator(n, &gh, xi, &eta, &zeta);
    lhs -= xh;
    terms.push(xh);
    let t = h * d_xi;
    lhs -= t;
    terms.push(t);

    // Right side: combination of the equations of motion plus the total
    // derivative of the would-be integral's bracket, Σ p_i η^i - ξ·H,
    // expanded by the product rule along the same (q̇, ṗ).
    let mut rhs = xi * (d_h - gh[0]);
    terms.push(rhs);
    for i in 0..n {
        let t = eta[i] * (pdot[i] + gh[1 + i]);
        rhs -= t;
        terms.push(t);
        let t = zeta[i] * (qdot[i] - gh[1 + n + i]);
        rhs += t;
        terms.push(t);
    }
    let mut d_bracket = -d_xi * h - xi * d_h;
    for i in 0..n {
        d_bracket += pdot[i] * eta[i] + s.p[i] * d_eta[i];
    }
    rhs += d_bracket;
    terms.push(d_bracket);

    Ok(IdentityCheck {
        lhs,
        rhs,
        residual: ScaledResidual::from_terms(lhs - rhs, &terms),
    })
}

/// Prolonged action of `X` on the canonical equations at a state, using the
/// canonical velocities:
///
/// * entry `j` (for `j < n`): `D(η^j) - q̇^j·D(ξ) - X(∂H/∂p_j)`
/// * entry `n + j`:           `D(ζ_j) - ṗ_j·D(ξ) + X(∂H/∂q^j)`
///
/// All zero (within roundoff) means the equations admit the symmetry — a
/// strictly weaker property than action invariance.
pub fn equation_invariance_residuals(
    sys: &ContinuousSystem,
    sym: &Symmetry,
    s: &State,
) -> Result<Vec<ScaledResidual>, EvalError> {
    let n = sys.n;
    assert_eq!(sym.n, n, "symmetry dimension mismatch");
    let (_, gh) = sys.h_grad(s)?;
    let qdot: Vec<f64> = (0..n).map(|i| gh[1 + n + i]).collect();
    let pdot: Vec<f64> = (0..n).map(|i| -gh[1 + i]).collect();

    let jet = sym.jet(s)?;
    let xi = jet.xi.0;
    let eta: Vec<f64> = jet.eta.iter().map(|(v, _)| *v).collect();
    let zeta: Vec<f64> = jet.zeta.iter().map(|(v, _)| *v).collect();
    let d_xi = total_derivative(n, &jet.xi.1, &qdot, &pdot);

    // Direction of the operator over the t, q, p slots (parameters zero).
    let args = sys.args(s);
    let width = args.len();
    let mut w = vec![0.0; width];
    w[0] = xi;
    for i in 0..n {
        w[1 + i] = eta[i];
        w[1 + n + i] = zeta[i];
    }

    let mut out = Vec::with_capacity(2 * n);
    for j in 0..n {
        // X(∂H/∂p_j) in one second-order pass: w·Hess(H)·e_{p_j}.
        let mut ej = vec![0.0; width];
        ej[1 + n + j] = 1.0;
        let x_hp = mixed_second(&sys.h, &args, &w, &ej)?.d12;
        let d_eta = total_derivative(n, &jet.eta[j].1, &qdot, &pdot);
        let value = d_eta - qdot[j] * d_xi - x_hp;
        out.push(ScaledResidual::from_terms(
            value,
            &[d_eta, qdot[j] * d_xi, x_hp],
        ));
    }
    for j in 0..n {
        let mut ej = vec![0.0; width];
        ej[1 + j] = 1.0;
        let x_hq = mixed_second(&sys.h, &args, &w, &ej)?.d12;
        let d_zeta = total_derivative(n, &jet.zeta[j].1, &qdot, &pdot);
        let value = d_zeta - pdot[j] * d_xi + x_hq;
        out.push(ScaledResidual::from_terms(
            value,
            &[d_zeta, pdot[j] * d_xi, x_hq],
        ));
    }
    Ok(out)
}

/// Error from [`integrate_reference`].
#[derive(Debug, Error)]
pub enum IntegrateError {
    /// `dt` must be positive and `t_end` must not precede the initial time.
    #[error("invalid integration span: dt = {dt}, span = {span}")]
    InvalidSpan { dt: f64, span: f64 },
    /// Evaluation failed mid-run; the prefix that did integrate is returned.
    #[error("integration failed at step {failed_at_step}: {source}")]
    Failed {
        partial: Vec<State>,
        failed_at_step: usize,
        source: EvalError,
    },
}

fn rk4_rhs(sys: &ContinuousSystem, t: f64, y: &[f64]) -> Result<Vec<f64>, EvalError> {
    let n = sys.n;
    let s = State {
        t,
        q: y[..n].to_vec(),
        p: y[n..].to_vec(),
    };
    let (qdot, pdot) = vector_field(sys, &s)?;
    let mut dy = qdot;
    dy.extend(pdot);
    Ok(dy)
}

fn rk4_step(sys: &ContinuousSystem, t: f64, y: &[f64], h: f64) -> Result<Vec<f64>, EvalError> {
    let add = |y: &[f64], k: &[f64], c: f64| -> Vec<f64> {
        y.iter().zip(k).map(|(a, b)| a + c * b).collect()
    };
    let k1 = rk4_rhs(sys, t, y)?;
    let k2 = rk4_rhs(sys, t + 0.5 * h, &add(y, &k1, 0.5 * h))?;
    let k3 = rk4_rhs(sys, t + 0.5 * h, &add(y, &k2, 0.5 * h))?;
    let k4 = rk4_rhs(sys, t + h, &add(y, &k3, h))?;
    Ok(y.iter()
        .enumerate()
        .map(|(i, &yi)| yi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Integrate the canonical equations with classical fixed-step RK4.
///
/// Produces the initial state plus one state per step. The grid is
/// `t0 + k·dt`; if the span is not an integer multiple of `dt`, one final
/// shorter step lands exactly on `t_end`.
pub fn integrate_reference(
    sys: &ContinuousSystem,
    s0: &State,
    t_end: f64,
    dt: f64,
) -> Result<Vec<State>, IntegrateError> {
    let span = t_end - s0.t;
    if dt.is_nan() || dt <= 0.0 || span < 0.0 {
        return Err(IntegrateError::InvalidSpan { dt, span });
    }
    let n = sys.n;
    assert_eq!(s0.dim(), n, "state dimension mismatch");

    // Floor with a tiny relative shelter so span = k·dt doesn't produce an
    // extra sliver step from roundoff.
    let n_full = (span / dt + 1e-9).floor() as usize;
    let remainder = span - n_full as f64 * dt;
    let has_tail = remainder > 1e-12 * dt;

    let mut states = Vec::with_capacity(n_full + 2);
    states.push(s0.clone());
    let mut y: Vec<f64> = s0.q.iter().chain(s0.p.iter()).copied().collect();

    for k in 0..n_full {
        let t = s0.t + k as f64 * dt;
        y = rk4_step(sys, t, &y, dt).map_err(|source| IntegrateError::Failed {
            partial: states.clone(),
            failed_at_step: k,
            source,
        })?;
        let t_next = if !has_tail && k + 1 == n_full {
            t_end
        } else {
            s0.t + (k + 1) as f64 * dt
        };
        states.push(State {
            t: t_next,
            q: y[..n].to_vec(),
            p: y[n..].to_vec(),
        });
    }
    if has_tail {
        let t = s0.t + n_full as f64 * dt;
        y = rk4_step(sys, t, &y, remainder).map_err(|source| IntegrateError::Failed {
            partial: states.clone(),
            failed_at_step: n_full,
            source,
        })?;
        states.push(State {
            t: t_end,
            q: y[..n].to_vec(),
            p: y[n..].to_vec(),
        });
    }
    Ok(states)
}

/// A first integral that can be evaluated along a trajectory: either induced
/// by a symmetry or given in closed form.
#[derive(Debug, Clone)]
pub enum FirstIntegral {
    /// `I = Σ p_i η^i - ξ·H - V` for the given symmetry.
    FromSymmetry(Symmetry),
    /// An expression over the phase variables and system parameters, bound
    /// with [`ContinuousSystem::bind_over_phase`].
    ClosedForm(BoundExpr),
}

impl FirstIntegral {
    /// Evaluate at a state.
    pub fn value(&self, sys: &ContinuousSystem, s: &State) -> Result<f64, EvalError> {
        match self {
            FirstIntegral::FromSymmetry(sym) => first_integral_value(sys, sym, s),
            FirstIntegral::ClosedForm(bound) => sys.eval_at(bound, s),
        }
    }
}

/// Conservation report for one named quantity along a trajectory.
#[derive(Debug, Clone)]
pub struct DriftEntry {
    pub name: String,
    /// Value at the first state.
    pub initial: f64,
    /// Value at the last state.
    pub final_value: f64,
    /// `max_k |I(state_k) - I(state_0)|`.
    pub max_drift: f64,
}

/// Drift of named first integrals along a trajectory.
#[derive(Debug, Clone)]
pub struct DriftReport {
    pub entries: Vec<DriftEntry>,
}

/// Evaluate each named integral along the trajectory and report drift.
pub fn monitor(
    sys: &ContinuousSystem,
    states: &[State],
    integrals: &[(String, FirstIntegral)],
) -> Result<DriftReport, EvalError> {
    assert!(!states.is_empty(), "empty trajectory");
    let mut entries = Vec::with_capacity(integrals.len());
    for (name, integral) in integrals {
        let initial = integral.value(sys, &states[0])?;
        let mut max_drift = 0.0_f64;
        let mut final_value = initial;
        for s in &states[1..] {
            let v = integral.value(sys, s)?;
            max_drift = max_drift.max((v - initial).abs());
            final_value = v;
        }
        entries.push(DriftEntry {
            name: name.clone(),
            initial,
            final_value,
            max_drift,
        });
    }
    Ok(DriftReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn no_params() -> Vec<(String, f64)> {
        Vec::new()
    }

    /// H = (p² + 1/q²)/2 in one degree of freedom.
    fn inverse_square_system() -> ContinuousSystem {
        ContinuousSystem::new(1, parse("0.5*(p1^2 + 1/q1^2)").unwrap(), &no_params()).unwrap()
    }

    fn sym1(xi: &str, eta: &str, zeta: &str, v: Option<&str>) -> Symmetry {
        Symmetry::new(
            1,
            &parse(xi).unwrap(),
            &[parse(eta).unwrap()],
            &[parse(zeta).unwrap()],
            v.map(|t| parse(t).unwrap()).as_ref(),
            &no_params(),
        )
        .unwrap()
    }

    fn random_state_1d(rng: &mut ChaCha8Rng) -> State {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        State::new(
            rng.gen_range(-2.0..2.0),
            vec![sign * rng.gen_range(0.3..2.0)],
            vec![rng.gen_range(-2.0..2.0)],
        )
    }

    #[test]
    fn vector_field_of_inverse_square_potential() {
        let sys = inverse_square_system();
        let s = State::new(0.0, vec![2.0], vec![3.0]);
        let (qdot, pdot) = vector_field(&sys, &s).unwrap();
        // q̇ = ∂H/∂p = p; ṗ = -∂H/∂q = 1/q³.
        assert!((qdot[0] - 3.0).abs() < 1e-15);
        assert!((pdot[0] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn scaling_symmetry_is_invariant() {
        let sys = inverse_square_system();
        let x2 = sym1("2*t", "q1", "-p1", None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = random_state_1d(&mut rng);
            let r = invariance_residual(&sys, &x2, &s).unwrap();
            assert!(r.within(1e-13), "residual {r:?} at {s:?}");
        }
    }

    #[test]
    fn projective_symmetry_is_divergence_invariant() {
        let sys = inverse_square_system();
        let x3 = sym1("t^2", "t*q1", "q1 - t*p1", Some("q1^2/2"));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let s = random_state_1d(&mut rng);
            let r = invariance_residual(&sys, &x3, &s).unwrap();
            assert!(r.within(1e-13), "residual {r:?} at {s:?}");
        }
        // Dropping the gauge term must break invariance.
        let x3_nogauge = sym1("t^2", "t*q1", "q1 - t*p1", None);
        let s = State::new(0.7, vec![1.3], vec![0.4]);
        let r = invariance_residual(&sys, &x3_nogauge, &s).unwrap();
        assert!(
            !r.within(1e-6),
            "gauge-free residual unexpectedly small: {r:?}"
        );
    }

    #[test]
    fn bogus_symmetry_residual_matches_hand_computation() {
        // ξ=0, η=q, ζ=0, V=0 on H=(p²+1/q²)/2:
        // residual = p·D(q) - η·H_q = p² + 1/q².
        let sys = inverse_square_system();
        let bogus = sym1("0", "q1", "0", None);
        let s = State::new(0.0, vec![1.0], vec![1.0]);
        let r = invariance_residual(&sys, &bogus, &s).unwrap();
        assert!((r.value - 2.0).abs() < 1e-14, "residual {r:?}");
        assert!(!r.within(1e-8));
    }

    #[test]
    fn first_integral_values_match_closed_forms() {
        let sys = inverse_square_system();
        let x2 = sym1("2*t", "q1", "-p1", None);
        let x3 = sym1("t^2", "t*q1", "q1 - t*p1", Some("q1^2/2"));
        let i2 = sys
            .bind_over_phase(&parse("q1*p1 - t*(p1^2 + 1/q1^2)").unwrap())
            .unwrap();
        let i3 = sys
            .bind_over_phase(&parse("-0.5*(t^2/q1^2 + (q1 - t*p1)^2)").unwrap())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s = random_state_1d(&mut rng);
            let v2 = first_integral_value(&sys, &x2, &s).unwrap();
            let c2 = sys.eval_at(&i2, &s).unwrap();
            assert!(
                (v2 - c2).abs() <= 1e-12 * (1.0 + c2.abs()),
                "I2 {v2} vs {c2}"
            );
            let v3 = first_integral_value(&sys, &x3, &s).unwrap();
            let c3 = sys.eval_at(&i3, &s).unwrap();
            assert!(
                (v3 - c3).abs() <= 1e-12 * (1.0 + c3.abs()),
                "I3 {v3} vs {c3}"
            );
        }
        // Spot value: I2 at (t,q,p) = (0.5, 1, 1) is q·p - t·(p² + 1/q²) = 0.
        let s = State::new(0.5, vec![1.0], vec![1.0]);
        assert!(first_integral_value(&sys, &x2, &s).unwrap().abs() < 1e-15);
    }

    #[test]
    fn identity_holds_for_arbitrary_velocities() {
        // The identity must balance for ANY (q̇, ṗ), not just the canonical
        // flow, and for symmetries that are nothing like invariances.
        let systems = [
            inverse_square_system(),
            ContinuousSystem::new(
                1,
                parse("p1^2/2 + 1/q1 + 0.3*sin(t)*q1").unwrap(),
                &no_params(),
            )
            .unwrap(),
        ];
        let syms = [
            sym1("2*t", "q1", "-p1", None),
            sym1("t^2", "t*q1", "q1 - t*p1", Some("q1^2/2")),
            sym1("sin(t)*p1", "q1^2", "cos(q1*p1)", None),
            sym1("1", "exp(0.2*q1)", "atan(p1) + t", None),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for sys in &systems {
            for sym in &syms {
                for _ in 0..100 {
                    let s = random_state_1d(&mut rng);
                    let qdot = [rng.gen_range(-2.0..2.0)];
                    let pdot = [rng.gen_range(-2.0..2.0)];
                    let chk = check_hamiltonian_identity(sys, sym, &s, &qdot, &pdot).unwrap();
                    assert!(
                        chk.residual.within(1e-12),
                        "identity violated: lhs={} rhs={} at {s:?}",
                        chk.lhs,
                        chk.rhs
                    );
                }
            }
        }
    }

    #[test]
    fn equation_invariance_separates_from_action_invariance() {
        // H = p²/2 + 1/q admits X = 3t∂t + 2q∂q - p∂p (equations invariant)
        // even though the action is not invariant under it.
        let sys = ContinuousSystem::new(1, parse("p1^2/2 + 1/q1").unwrap(), &no_params()).unwrap();
        let x2 = sym1("3*t", "2*q1", "-p1", None);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let s = State::new(
                rng.gen_range(-2.0..2.0),
                vec![rng.gen_range(0.3..2.5)],
                vec![rng.gen_range(-2.0..2.0)],
            );
            for r in equation_invariance_residuals(&sys, &x2, &s).unwrap() {
                assert!(r.within(1e-13), "equation residual {r:?} at {s:?}");
            }
            let action = invariance_residual(&sys, &x2, &s).unwrap();
            // On solutions the defect reduces to p²/2 - 1/q, which is only
            // zero on a measure-zero set — almost every draw sees it.
            let expected = s.p[0] * s.p[0] / 2.0 - 1.0 / s.q[0];
            assert!(
                (action.value - expected).abs() <= 1e-12 * (1.0 + expected.abs()),
                "defect {} vs closed form {}",
                action.value,
                expected
            );
        }
    }

    #[test]
    fn equation_invariance_detects_non_symmetry() {
        // ξ=0, η=q, ζ=0 on H=(q²+p²)/2: first residual is
        // D(η) - X(H_p) = q̇ - 0 = p.
        let sys =
            ContinuousSystem::new(1, parse("0.5*(q1^2 + p1^2)").unwrap(), &no_params()).unwrap();
        let bogus = sym1("0", "q1", "0", None);
        let s = State::new(0.0, vec![0.7], vec![1.3]);
        let rs = equation_invariance_residuals(&sys, &bogus, &s).unwrap();
        assert!((rs[0].value - 1.3).abs() < 1e-15, "a-residual {rs:?}");
    }

    #[test]
    fn rk4_reproduces_harmonic_oscillator() {
        let sys =
            ContinuousSystem::new(1, parse("0.5*(q1^2 + p1^2)").unwrap(), &no_params()).unwrap();
        let s0 = State::new(0.0, vec![1.0], vec![0.0]);
        let states = integrate_reference(&sys, &s0, 1.0, 1e-3).unwrap();
        assert_eq!(states.len(), 1001);
        let last = states.last().unwrap();
        assert_eq!(last.t, 1.0);
        assert!(
            (last.q[0] - 1.0_f64.cos()).abs() < 1e-11,
            "q = {}",
            last.q[0]
        );
        assert!(
            (last.p[0] + 1.0_f64.sin()).abs() < 1e-11,
            "p = {}",
            last.p[0]
        );
    }

    #[test]
    fn rk4_partial_final_step_lands_exactly() {
        let sys =
            ContinuousSystem::new(1, parse("0.5*(q1^2 + p1^2)").unwrap(), &no_params()).unwrap();
        let s0 = State::new(0.0, vec![1.0], vec![0.0]);
        let states = integrate_reference(&sys, &s0, 0.9995, 1e-3).unwrap();
        // 999 full steps + 1 partial + the initial state.
        assert_eq!(states.len(), 1001);
        let last = states.last().unwrap();
        assert_eq!(last.t, 0.9995);
        assert!((last.q[0] - 0.9995_f64.cos()).abs() < 1e-11);
    }

    #[test]
    fn rk4_rejects_bad_span() {
        let sys =
            ContinuousSystem::new(1, parse("0.5*(q1^2 + p1^2)").unwrap(), &no_params()).unwrap();
        let s0 = State::new(0.0, vec![1.0], vec![0.0]);
        assert!(matches!(
            integrate_reference(&sys, &s0, 1.0, 0.0),
            Err(IntegrateError::InvalidSpan { .. })
        ));
        assert!(matches!(
            integrate_reference(&sys, &s0, -1.0, 0.1),
            Err(IntegrateError::InvalidSpan { .. })
        ));
    }

    #[test]
    fn integration_failure_returns_partial_prefix() {
        // ṗ = +1/q³ with q(0) > 0 and p(0) < 0 heads into q = 0; division by
        // zero (or the sqrt domain) eventually fires. Use 1/q so the blowup is
        // tame enough to step into.
        let sys =
            ContinuousSystem::new(1, parse("p1^2/2 - log(q1)").unwrap(), &no_params()).unwrap();
        let s0 = State::new(0.0, vec![0.05], vec![-3.0]);
        match integrate_reference(&sys, &s0, 10.0, 1e-2) {
            Err(IntegrateError::Failed {
                partial,
                failed_at_step,
                ..
            }) => {
                assert_eq!(partial.len(), failed_at_step + 1);
                assert!(!partial.is_empty());
            }
            Ok(states) => panic!(
                "expected failure, integrated to t = {}",
                states.last().unwrap().t
            ),
            Err(other) => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn monitor_reports_drift() {
        let sys =
            ContinuousSystem::new(1, parse("0.5*(q1^2 + p1^2)").unwrap(), &no_params()).unwrap();
        let s0 = State::new(0.0, vec![1.0], vec![0.0]);
        let states = integrate_reference(&sys, &s0, 6.0, 1e-3).unwrap();
        let energy = FirstIntegral::ClosedForm(
            sys.bind_over_phase(&parse("0.5*(q1^2 + p1^2)").unwrap())
                .unwrap(),
        );
        let not_conserved =
            FirstIntegral::ClosedForm(sys.bind_over_phase(&parse("q1").unwrap()).unwrap());
        let report = monitor(
            &sys,
            &states,
            &[
                ("energy".to_string(), energy),
                ("q1".to_string(), not_conserved),
            ],
        )
        .unwrap();
        assert_eq!(report.entries.len(), 2);
        assert!(
            report.entries[0].max_drift < 1e-12,
            "energy drift {:?}",
            report.entries[0]
        );
        assert!(
            report.entries[1].max_drift > 0.5,
            "q1 drift {:?}",
            report.entries[1]
        );
        assert_eq!(report.entries[0].initial, 0.5);
    }
}
