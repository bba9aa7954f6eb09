//! Discrete Hamiltonian systems on self-determining lattices.
//!
//! A discrete Hamiltonian is a function of one lattice interval,
//! `𝓗(t, t₊, q, p⁺)`, held internally in the step parametrization
//! `Hd(t, h₊, q, p⁺)` with `h₊ = t₊ - t`. Its variational equations advance
//! `(t, q, p) → (t₊, q₊, p⁺)` as a three-point scheme:
//!
//! ```text
//! (q₊^i - q^i)/h₊ = ∂𝓗/∂p⁺_i
//! (p⁺_i - p_i)/h₊ = -∂𝓗/∂q^i
//! h₊·∂𝓗/∂t - 𝓗 + h₋·∂𝓗⁻/∂t + 𝓗⁻ = 0
//! ```
//!
//! where `𝓗` is evaluated on the forward interval `(t, h₊, q, p⁺)`, `𝓗⁻` on
//! the backward interval `(t₋, h₋, q₋, p)`, and the two `∂/∂t` are taken with
//! respect to the time slot the node `t` occupies in each: the *first* slot of
//! the forward term (`∂Hd/∂t - ∂Hd/∂h₊`) and the *second* slot of the backward
//! term (`∂Hd/∂h₋` at backward arguments). The third equation determines the
//! lattice spacing itself — the mesh is part of the solution. For a
//! time-independent `𝓗` it reduces to conservation of the discrete energy
//! `𝓔 = 𝓗 + h·∂𝓗/∂h` across intervals.
//!
//! [`step`] solves the full implicit system (unknowns `h₊, q₊, p⁺`) by a
//! damped Newton iteration whose Jacobian comes from nested forward AD — the
//! residuals already contain first derivatives of `Hd`. [`step_first`] starts
//! a run when no backward interval exists yet, taking `h₊ = h₀` as given.
//!
//! Symmetry machinery mirrors the continuous module: action-invariance
//! residuals with an optional gauge term, mesh invariance (the symmetry must
//! also preserve the lattice equation), first integrals evaluated directly
//! from symmetry coefficients, and a three-point operator identity checkable
//! on arbitrary off-solution triples.

use thiserror::Error;

use crate::autodiff::Dual;
use crate::continuous::{IdentityCheck, ScaledResidual, State, Symmetry};
use crate::expr::{BindError, BoundExpr, EvalError, Expr, Scalar};

/// A lattice node `(t, q, p)` — same data as a continuous [`State`].
pub type LatticePoint = State;

/// Discrete symmetries use the same point-coefficient data as continuous ones.
pub type DiscreteSymmetry = Symmetry;

/// Newton convergence tolerance (max-norm of the residual vector).
const NEWTON_TOL: f64 = 1e-12;
/// Maximum Newton iterations per step.
const NEWTON_MAX_ITERS: usize = 50;
/// Maximum step-halvings in one line search.
const NEWTON_MAX_HALVINGS: usize = 20;
/// Extra full Newton steps after convergence, kept only when they improve the
/// residual; they push the per-step error to the roundoff floor so it cannot
/// accumulate into a visible drift over long runs.
const NEWTON_POLISH: usize = 2;
/// Relative threshold under which the lattice equation's Jacobian row counts
/// as vacuous at the current point.
const DEGENERATE_ROW_TOL: f64 = 1e-10;

/// Ordered variable names for one lattice interval:
/// `tm, hm, qm1.., pm1.., t, q1.., p1..` (previous point, spacing, current
/// point). Closed-form expressions for discrete first integrals are bound
/// over this layout.
pub fn interval_vars(n: usize) -> Vec<String> {
    let mut vars = vec!["tm".to_string(), "hm".to_string()];
    for i in 1..=n {
        vars.push(format!("qm{i}"));
    }
    for i in 1..=n {
        vars.push(format!("pm{i}"));
    }
    vars.push("t".to_string());
    for i in 1..=n {
        vars.push(format!("q{i}"));
    }
    for i in 1..=n {
        vars.push(format!("p{i}"));
    }
    vars
}

/// Value and partial derivatives of `Hd` at one interval, generic over the
/// scalar type so it can be embedded in outer derivatives.
#[derive(Debug, Clone)]
pub struct HdJet<S: Scalar> {
    /// `Hd(t, h, q, pp)`.
    pub value: S,
    /// `∂Hd/∂t` (explicit time slot).
    pub d_t: S,
    /// `∂Hd/∂h`.
    pub d_h: S,
    /// `∂Hd/∂q_i`.
    pub d_q: Vec<S>,
    /// `∂Hd/∂pp_i`.
    pub d_pp: Vec<S>,
}

impl<S: Scalar> HdJet<S> {
    /// Derivative of `𝓗(t, t₊, ·)` with respect to its first time argument
    /// (holding `t₊`): `∂Hd/∂t - ∂Hd/∂h`.
    pub fn d_first_time(&self) -> S {
        self.d_t.clone() - self.d_h.clone()
    }

    /// Discrete energy of the interval: `𝓗 + h·∂𝓗/∂h`.
    pub fn energy(&self, h: S) -> S {
        self.value.clone() + h * self.d_h.clone()
    }
}

/// A discrete Hamiltonian system `Hd(t, h, q, pp)` with named parameters.
///
/// Variable layout for `Hd`: `t, hp, q1..qn, pp1..ppn` then parameters, where
/// `hp` is the forward spacing and `pp` the forward momentum.
#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    n: usize,
    hd_text: Expr,
    hd: BoundExpr,
    param_names: Vec<String>,
    param_values: Vec<f64>,
}

impl DiscreteSystem {
    /// Bind a discrete Hamiltonian over `n` degrees of freedom.
    pub fn new(n: usize, hd: Expr, params: &[(String, f64)]) -> Result<Self, BindError> {
        let mut layout = vec!["t".to_string(), "hp".to_string()];
        for i in 1..=n {
            layout.push(format!("q{i}"));
        }
        for i in 1..=n {
            layout.push(format!("pp{i}"));
        }
        layout.extend(params.iter().map(|(name, _)| name.clone()));
        let bound = hd.bind(&layout)?;
        Ok(DiscreteSystem {
            n,
            hd_text: hd,
            hd: bound,
            param_names: params.iter().map(|(name, _)| name.clone()).collect(),
            param_values: params.iter().map(|(_, v)| *v).collect(),
        })
    }

    /// Number of degrees of freedom.
    pub fn n(&self) -> usize {
        self.n
    }

    /// The discrete Hamiltonian as an expression tree.
    pub fn hd_expr(&self) -> &Expr {
        &self.hd_text
    }

    /// Parameter names and values, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (&str, f64)> {
        self.param_names
            .iter()
            .map(|s| s.as_str())
            .zip(self.param_values.iter().copied())
    }

    /// Whether `Hd` references `t` explicitly (not just through the spacing).
    pub fn depends_on_t(&self) -> bool {
        self.hd_text.free_vars().contains("t")
    }

    /// Evaluate `Hd` and all its first partials at one interval, over any
    /// scalar type. One pass of multi-directional forward AD.
    pub fn partials<S: Scalar>(
        &self,
        t: &S,
        h: &S,
        q: &[S],
        pp: &[S],
    ) -> Result<HdJet<S>, EvalError> {
        let n = self.n;
        assert_eq!(q.len(), n);
        assert_eq!(pp.len(), n);
        let width = 2 + 2 * n;
        let mut args: Vec<Dual<S>> = Vec::with_capacity(width + self.param_values.len());
        args.push(Dual::variable(t.clone(), 0, width));
        args.push(Dual::variable(h.clone(), 1, width));
        for (i, qi) in q.iter().enumerate() {
            args.push(Dual::variable(qi.clone(), 2 + i, width));
        }
        for (i, ppi) in pp.iter().enumerate() {
            args.push(Dual::variable(ppi.clone(), 2 + n + i, width));
        }
        for v in &self.param_values {
            args.push(Dual::constant(S::from_f64(*v)));
        }
        let out = self.hd.eval(&args)?;
        Ok(HdJet {
            value: out.val().clone(),
            d_t: out.deriv(0),
            d_h: out.deriv(1),
            d_q: (0..n).map(|i| out.deriv(2 + i)).collect(),
            d_pp: (0..n).map(|i| out.deriv(2 + n + i)).collect(),
        })
    }

    fn partials_f64(&self, t: f64, h: f64, q: &[f64], pp: &[f64]) -> Result<HdJet<f64>, EvalError> {
        self.partials(&t, &h, q, pp)
    }

    /// Bind an expression (closed-form discrete integral) over one lattice
    /// interval — see [`interval_vars`] — plus this system's parameters.
    pub fn bind_over_interval(&self, expr: &Expr) -> Result<BoundExpr, BindError> {
        let mut layout = interval_vars(self.n);
        layout.extend(self.param_names.iter().cloned());
        expr.bind(&layout)
    }

    /// Evaluate an interval-bound expression on `(prev, cur)`.
    pub fn eval_on_interval(
        &self,
        bound: &BoundExpr,
        prev: &LatticePoint,
        cur: &LatticePoint,
    ) -> Result<f64, EvalError> {
        let n = self.n;
        assert_eq!(prev.dim(), n);
        assert_eq!(cur.dim(), n);
        let mut args = Vec::with_capacity(2 * (1 + 2 * n) + 1 + self.param_values.len());
        args.push(prev.t);
        args.push(cur.t - prev.t);
        args.extend_from_slice(&prev.q);
        args.extend_from_slice(&prev.p);
        args.push(cur.t);
        args.extend_from_slice(&cur.q);
        args.extend_from_slice(&cur.p);
        args.extend_from_slice(&self.param_values);
        bound.eval(&args)
    }
}

// ---------------------------------------------------------------------------
// Residuals over a full lattice triple
// ---------------------------------------------------------------------------

/// Slot layout for functions of a full lattice triple:
/// `tm, t, tp, qm.., q.., qp.., pm.., p.., pp..` — width `3(1 + 2n)`.
fn triple_width(n: usize) -> usize {
    3 * (1 + 2 * n)
}

fn triple_args(prev: &LatticePoint, cur: &LatticePoint, next: &LatticePoint) -> Vec<f64> {
    let n = cur.dim();
    assert_eq!(prev.dim(), n);
    assert_eq!(next.dim(), n);
    let mut x = Vec::with_capacity(triple_width(n));
    x.push(prev.t);
    x.push(cur.t);
    x.push(next.t);
    x.extend_from_slice(&prev.q);
    x.extend_from_slice(&cur.q);
    x.extend_from_slice(&next.q);
    x.extend_from_slice(&prev.p);
    x.extend_from_slice(&cur.p);
    x.extend_from_slice(&next.p);
    x
}

/// All `2n + 1` scheme residuals as functions of the full triple slots.
/// Ordering: `F1_1..F1_n` (coordinate equations), `F2_1..F2_n` (momentum
/// equations), then the lattice equation.
fn triple_residuals<S: Scalar>(sys: &DiscreteSystem, x: &[S]) -> Result<Vec<S>, EvalError> {
    let n = sys.n;
    assert_eq!(x.len(), triple_width(n));
    let tm = &x[0];
    let t = &x[1];
    let tp = &x[2];
    let qm = &x[3..3 + n];
    let q = &x[3 + n..3 + 2 * n];
    let qp = &x[3 + 2 * n..3 + 3 * n];
    let pm_end = 3 + 4 * n;
    let p = &x[pm_end..pm_end + n];
    let pp = &x[pm_end + n..pm_end + 2 * n];

    let hm = t.clone() - tm.clone();
    let hp = tp.clone() - t.clone();
    let fwd = sys.partials(t, &hp, q, pp)?;
    let bwd = sys.partials(tm, &hm, qm, p)?;

    let mut out = Vec::with_capacity(2 * n + 1);
    for i in 0..n {
        out.push((qp[i].clone() - q[i].clone()) / hp.clone() - fwd.d_pp[i].clone());
    }
    for i in 0..n {
        out.push((pp[i].clone() - p[i].clone()) / hp.clone() + fwd.d_q[i].clone());
    }
    out.push(
        hp.clone() * fwd.d_first_time() - fwd.value.clone()
            + hm * bwd.d_h.clone()
            + bwd.value.clone(),
    );
    Ok(out)
}

/// The `2n + 1` scheme residuals at a concrete triple. All zero (to roundoff)
/// means `(prev, cur, next)` is a solution triple of the scheme.
pub fn step_residuals(
    sys: &DiscreteSystem,
    prev: &LatticePoint,
    cur: &LatticePoint,
    next: &LatticePoint,
) -> Result<Vec<f64>, EvalError> {
    triple_residuals(sys, &triple_args(prev, cur, next))
}

// ---------------------------------------------------------------------------
// Newton solver
// ---------------------------------------------------------------------------

/// Error from a single implicit step.
#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("step interval must be positive, got h = {h}")]
    NonPositiveStep { h: f64 },
    #[error(
        "Newton did not converge in {max_iters} iterations (residual max-norm {residual:.3e})"
    )]
    NoConvergence { max_iters: usize, residual: f64 },
    #[error(
        "Newton line search stalled after {halvings} halvings (residual max-norm {residual:.3e})"
    )]
    LineSearchStalled { halvings: usize, residual: f64 },
    #[error("singular Jacobian in Newton step (pivot ratio {pivot_ratio:.3e})")]
    SingularJacobian { pivot_ratio: f64 },
}

/// Convergence data for one accepted step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    /// Newton iterations taken (including accepted polish iterations).
    pub iters: usize,
    /// Final residual max-norm.
    pub residual_norm: f64,
    /// Whether the lattice equation was locally vacuous and the spacing was
    /// carried over from the previous interval instead of solved for.
    pub degenerate_lattice: bool,
}

/// A square system `F(x) = 0` whose residuals are generic over the scalar
/// type, so the Jacobian falls out of one pass with outer duals.
trait ImplicitSystem {
    fn residuals<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>, EvalError>;
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Values and Jacobian of an implicit system at `x`.
fn values_and_jacobian<R: ImplicitSystem>(
    r: &R,
    x: &[f64],
) -> Result<(Vec<f64>, Vec<Vec<f64>>), EvalError> {
    let m = x.len();
    let dx: Vec<Dual<f64>> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| Dual::variable(v, i, m))
        .collect();
    let out = r.residuals(&dx)?;
    debug_assert_eq!(out.len(), m);
    let values = out.iter().map(|o| o.value()).collect();
    let rows = out
        .iter()
        .map(|o| (0..m).map(|k| o.deriv(k)).collect())
        .collect();
    Ok((values, rows))
}

/// Dense LU solve with partial pivoting. On (near-)singularity returns the
/// pivot ratio `min|pivot| / max|pivot|` as a crude condition estimate.
pub(crate) fn solve_lu(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>, f64> {
    let m = b.len();
    let mut max_pivot = 0.0_f64;
    let mut min_pivot = f64::INFINITY;
    for col in 0..m {
        let pivot_row = (col..m)
            .max_by(|&r1, &r2| a[r1][col].abs().total_cmp(&a[r2][col].abs()))
            .unwrap();
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        let pivot = a[col][col];
        if pivot.abs() < 1e-300 {
            return Err(if max_pivot > 0.0 {
                pivot.abs() / max_pivot
            } else {
                0.0
            });
        }
        max_pivot = max_pivot.max(pivot.abs());
        min_pivot = min_pivot.min(pivot.abs());
        for row in col + 1..m {
            let factor = a[row][col] / pivot;
            if factor != 0.0 {
                // Elimination touches two rows of the same matrix; the
                // iterator form would need `split_at_mut` noise for no gain.
                #[allow(clippy::needless_range_loop)]
                for k in col..m {
                    a[row][k] -= factor * a[col][k];
                }
                b[row] -= factor * b[col];
            }
        }
    }
    let _ = min_pivot / max_pivot;
    let mut x = vec![0.0; m];
    for row in (0..m).rev() {
        let mut sum = b[row];
        for k in row + 1..m {
            sum -= a[row][k] * x[k];
        }
        x[row] = sum / a[row][row];
    }
    Ok(x)
}

/// Damped Newton with AD Jacobians. `positivity` names a component that must
/// stay strictly positive (the lattice spacing); the line search backs off
/// rather than cross it.
fn newton<R: ImplicitSystem>(
    r: &R,
    mut x: Vec<f64>,
    positivity: Option<usize>,
) -> Result<(Vec<f64>, usize, f64), StepError> {
    let mut f = r.residuals::<f64>(&x)?;
    let mut norm = inf_norm(&f);
    let mut iters = 0;

    while norm > NEWTON_TOL {
        if iters >= NEWTON_MAX_ITERS {
            return Err(StepError::NoConvergence {
                max_iters: NEWTON_MAX_ITERS,
                residual: norm,
            });
        }
        let (_, jac) = values_and_jacobian(r, &x)?;
        let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        let delta = solve_lu(jac, rhs)
            .map_err(|pivot_ratio| StepError::SingularJacobian { pivot_ratio })?;

        let mut lambda = 1.0;
        let mut halvings = 0;
        loop {
            let xt: Vec<f64> = x
                .iter()
                .zip(&delta)
                .map(|(xi, di)| xi + lambda * di)
                .collect();
            let feasible = positivity.is_none_or(|slot| xt[slot] > 0.0);
            if feasible {
                if let Ok(ft) = r.residuals::<f64>(&xt) {
                    let nt = inf_norm(&ft);
                    if nt < norm || nt <= NEWTON_TOL {
                        x = xt;
                        f = ft;
                        norm = nt;
                        break;
                    }
                }
            }
            halvings += 1;
            if halvings > NEWTON_MAX_HALVINGS {
                return Err(StepError::LineSearchStalled {
                    halvings: NEWTON_MAX_HALVINGS,
                    residual: norm,
                });
            }
            lambda *= 0.5;
        }
        iters += 1;
    }

    // Polish: full steps accepted only on improvement.
    for _ in 0..NEWTON_POLISH {
        let Ok((_, jac)) = values_and_jacobian(r, &x) else {
            break;
        };
        let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        let Ok(delta) = solve_lu(jac, rhs) else { break };
        let xt: Vec<f64> = x.iter().zip(&delta).map(|(xi, di)| xi + di).collect();
        if let Some(slot) = positivity {
            if xt[slot] <= 0.0 {
                break;
            }
        }
        let Ok(ft) = r.residuals::<f64>(&xt) else {
            break;
        };
        let nt = inf_norm(&ft);
        if nt < norm {
            x = xt;
            f = ft;
            norm = nt;
            iters += 1;
        } else {
            break;
        }
    }

    Ok((x, iters, norm))
}

/// First step: `h₊ = h₀` fixed, unknowns `x = [q₊, p⁺]`.
struct TwoPointStep<'a> {
    sys: &'a DiscreteSystem,
    cur: &'a LatticePoint,
    h: f64,
}

impl ImplicitSystem for TwoPointStep<'_> {
    fn residuals<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>, EvalError> {
        let n = self.sys.n;
        let qn = &x[..n];
        let pn = &x[n..];
        let t = S::from_f64(self.cur.t);
        let hp = S::from_f64(self.h);
        let q: Vec<S> = self.cur.q.iter().map(|&v| S::from_f64(v)).collect();
        let fwd = self.sys.partials(&t, &hp, &q, pn)?;
        let mut out = Vec::with_capacity(2 * n);
        for (qni, (&qi, dpp)) in qn.iter().zip(self.cur.q.iter().zip(&fwd.d_pp)) {
            out.push((qni.clone() - S::from_f64(qi)) / hp.clone() - dpp.clone());
        }
        for (pni, (&pi, dq)) in pn.iter().zip(self.cur.p.iter().zip(&fwd.d_q)) {
            out.push((pni.clone() - S::from_f64(pi)) / hp.clone() + dq.clone());
        }
        Ok(out)
    }
}

/// Interior step: unknowns `x = [h₊, q₊, p⁺]`; the backward interval is fully
/// known, so its contribution to the lattice equation is a constant.
struct ThreePointStep<'a> {
    sys: &'a DiscreteSystem,
    cur: &'a LatticePoint,
    /// `h₋·∂𝓗⁻/∂h + 𝓗⁻` evaluated on the backward interval.
    bwd_const: f64,
}

impl ImplicitSystem for ThreePointStep<'_> {
    fn residuals<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>, EvalError> {
        let n = self.sys.n;
        let hp = &x[0];
        let qn = &x[1..1 + n];
        let pn = &x[1 + n..];
        let t = S::from_f64(self.cur.t);
        let q: Vec<S> = self.cur.q.iter().map(|&v| S::from_f64(v)).collect();
        let fwd = self.sys.partials(&t, hp, &q, pn)?;
        let mut out = Vec::with_capacity(2 * n + 1);
        for (qni, (&qi, dpp)) in qn.iter().zip(self.cur.q.iter().zip(&fwd.d_pp)) {
            out.push((qni.clone() - S::from_f64(qi)) / hp.clone() - dpp.clone());
        }
        for (pni, (&pi, dq)) in pn.iter().zip(self.cur.p.iter().zip(&fwd.d_q)) {
            out.push((pni.clone() - S::from_f64(pi)) / hp.clone() + dq.clone());
        }
        out.push(hp.clone() * fwd.d_first_time() - fwd.value.clone() + S::from_f64(self.bwd_const));
        Ok(out)
    }
}

/// Explicit Euler-style predictor for the Newton initial guess, using the
/// current momentum as a stand-in for the unknown forward momentum.
fn predictor(sys: &DiscreteSystem, cur: &LatticePoint, h: f64) -> (Vec<f64>, Vec<f64>) {
    match sys.partials_f64(cur.t, h, &cur.q, &cur.p) {
        Ok(jet) => {
            let qg = cur
                .q
                .iter()
                .zip(&jet.d_pp)
                .map(|(q, d)| q + h * d)
                .collect();
            let pg = cur.p.iter().zip(&jet.d_q).map(|(p, d)| p - h * d).collect();
            (qg, pg)
        }
        // A predictor failure is not an error — fall back to the trivial guess.
        Err(_) => (cur.q.clone(), cur.p.clone()),
    }
}

/// Solve the first interval with `h₊ = h₀` given (no backward interval yet).
pub fn step_first(
    sys: &DiscreteSystem,
    cur: &LatticePoint,
    h0: f64,
) -> Result<(LatticePoint, StepDiagnostics), StepError> {
    if h0.is_nan() || h0 <= 0.0 {
        return Err(StepError::NonPositiveStep { h: h0 });
    }
    assert_eq!(cur.dim(), sys.n, "state dimension mismatch");
    let (qg, pg) = predictor(sys, cur, h0);
    let mut x0 = qg;
    x0.extend(pg);
    let problem = TwoPointStep { sys, cur, h: h0 };
    let (x, iters, residual_norm) = newton(&problem, x0, None)?;
    let n = sys.n;
    let next = LatticePoint {
        t: cur.t + h0,
        q: x[..n].to_vec(),
        p: x[n..].to_vec(),
    };
    Ok((
        next,
        StepDiagnostics {
            iters,
            residual_norm,
            degenerate_lattice: false,
        },
    ))
}

/// Solve one interior step of the scheme: given `(prev, cur)`, find
/// `(t₊, q₊, p⁺)` satisfying all `2n + 1` equations, including the lattice
/// equation that determines `h₊`.
///
/// If the lattice equation is locally vacuous at the initial guess (its whole
/// Jacobian row vanishes — e.g. an oscillator sitting at the origin), the
/// spacing is carried over (`h₊ = h₋`), the remaining `2n` equations are
/// solved, and the step is flagged in the diagnostics.
pub fn step(
    sys: &DiscreteSystem,
    prev: &LatticePoint,
    cur: &LatticePoint,
) -> Result<(LatticePoint, StepDiagnostics), StepError> {
    let n = sys.n;
    assert_eq!(prev.dim(), n, "state dimension mismatch");
    assert_eq!(cur.dim(), n, "state dimension mismatch");
    let hm = cur.t - prev.t;
    if hm.is_nan() || hm <= 0.0 {
        return Err(StepError::NonPositiveStep { h: hm });
    }
    let bwd = sys.partials_f64(prev.t, hm, &prev.q, &cur.p)?;
    let bwd_const = hm * bwd.d_h + bwd.value;
    step_with_bwd_const(sys, cur, hm, bwd_const)
}

/// Interior step with the backward interval already collapsed to its constant
/// contribution `h₋·∂𝓗⁻/∂h + 𝓗⁻`. Callers that know this constant from
/// elsewhere (see [`run_lattice`]) avoid re-deriving it from stored points.
fn step_with_bwd_const(
    sys: &DiscreteSystem,
    cur: &LatticePoint,
    hm: f64,
    bwd_const: f64,
) -> Result<(LatticePoint, StepDiagnostics), StepError> {
    let n = sys.n;
    let (qg, pg) = predictor(sys, cur, hm);
    let mut x0 = vec![hm];
    x0.extend(qg);
    x0.extend(pg);

    let problem = ThreePointStep {
        sys,
        cur,
        bwd_const,
    };

    // Detect a vacuous lattice equation at the initial guess.
    let (_, jac) = values_and_jacobian(&problem, &x0)?;
    let jac_max = jac.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
    let last_row_max = inf_norm(&jac[2 * n]);
    if last_row_max < DEGENERATE_ROW_TOL * (1.0 + jac_max) {
        let reduced = TwoPointStep { sys, cur, h: hm };
        let x0 = x0[1..].to_vec();
        let (x, iters, residual_norm) = newton(&reduced, x0, None)?;
        let next = LatticePoint {
            t: cur.t + hm,
            q: x[..n].to_vec(),
            p: x[n..].to_vec(),
        };
        return Ok((
            next,
            StepDiagnostics {
                iters,
                residual_norm,
                degenerate_lattice: true,
            },
        ));
    }

    let (x, iters, residual_norm) = newton(&problem, x0, Some(0))?;
    let next = LatticePoint {
        t: cur.t + x[0],
        q: x[1..1 + n].to_vec(),
        p: x[1 + n..].to_vec(),
    };
    Ok((
        next,
        StepDiagnostics {
            iters,
            residual_norm,
            degenerate_lattice: false,
        },
    ))
}

/// A computed lattice trajectory: `points.len() == diags.len() + 1`.
#[derive(Debug, Clone)]
pub struct LatticeTrajectory {
    pub points: Vec<LatticePoint>,
    pub diags: Vec<StepDiagnostics>,
}

/// Error from [`run_lattice`], carrying the successfully computed prefix.
#[derive(Debug, Error)]
#[error("lattice run failed at step {failed_at_step}: {source}")]
pub struct LatticeError {
    /// Points and diagnostics computed before the failure.
    pub partial: LatticeTrajectory,
    /// 1-based index of the step that failed.
    pub failed_at_step: usize,
    pub source: StepError,
}

/// Run the scheme for `steps` intervals from `start`, the first with spacing
/// `h0`, all subsequent spacings determined by the lattice equation.
///
/// When the discrete Hamiltonian has no explicit time dependence, the lattice
/// equation telescopes to constancy of the interval energy `𝓗 + h·∂𝓗/∂h`.
/// The runner then matches every interval against the *first* interval's
/// energy instead of its immediate predecessor's backward terms. Both forms
/// agree exactly in real arithmetic, but the anchored form keeps per-step
/// rounding from compounding across long runs: the lattice equation holds
/// against a single stored constant, so a uniform lattice stays uniform to
/// near machine precision even over 10⁴+ steps.
pub fn run_lattice(
    sys: &DiscreteSystem,
    start: &LatticePoint,
    h0: f64,
    steps: usize,
) -> Result<LatticeTrajectory, LatticeError> {
    let mut traj = LatticeTrajectory {
        points: vec![start.clone()],
        diags: Vec::with_capacity(steps),
    };
    if steps == 0 {
        return Ok(traj);
    }
    match step_first(sys, start, h0) {
        Ok((next, diag)) => {
            traj.points.push(next);
            traj.diags.push(diag);
        }
        Err(source) => {
            return Err(LatticeError {
                partial: traj,
                failed_at_step: 1,
                source,
            })
        }
    }
    let anchor = if sys.depends_on_t() {
        None
    } else {
        let (a, b) = (&traj.points[0], &traj.points[1]);
        let h = b.t - a.t;
        match sys.partials_f64(a.t, h, &a.q, &b.p) {
            Ok(jet) => Some(h * jet.d_h + jet.value),
            Err(source) => {
                return Err(LatticeError {
                    partial: traj,
                    failed_at_step: 1,
                    source: source.into(),
                })
            }
        }
    };
    for k in 2..=steps {
        let prev = &traj.points[k - 2];
        let cur = &traj.points[k - 1];
        let hm = cur.t - prev.t;
        let result = match anchor {
            Some(e0) if hm > 0.0 => step_with_bwd_const(sys, cur, hm, e0),
            _ => step(sys, prev, cur),
        };
        match result {
            Ok((next, diag)) => {
                traj.points.push(next);
                traj.diags.push(diag);
            }
            Err(source) => {
                return Err(LatticeError {
                    partial: traj,
                    failed_at_step: k,
                    source,
                })
            }
        }
    }
    Ok(traj)
}

// ---------------------------------------------------------------------------
// Symmetries, integrals, energy
// ---------------------------------------------------------------------------

/// The discrete first integral a (divergence-)invariant symmetry induces,
/// evaluated on the interval `(prev, cur)` with coefficients at `cur`:
/// `𝓘 = Σ η^i·p_i - ξ·(𝓗⁻ + h₋·∂𝓗⁻/∂h) - V`.
pub fn discrete_first_integral_value(
    sys: &DiscreteSystem,
    sym: &DiscreteSymmetry,
    prev: &LatticePoint,
    cur: &LatticePoint,
) -> Result<f64, EvalError> {
    assert_eq!(sym.n(), sys.n, "symmetry dimension mismatch");
    let hm = cur.t - prev.t;
    let bwd = sys.partials_f64(prev.t, hm, &prev.q, &cur.p)?;
    let (xi, eta, _zeta, v) = sym.coefficients(cur)?;
    let mut value = -xi * bwd.energy(hm) - v;
    for (pi, etai) in cur.p.iter().zip(&eta) {
        value += pi * etai;
    }
    Ok(value)
}

/// Error from [`discrete_energy`].
#[derive(Debug, Error)]
pub enum EnergyError {
    /// The discrete energy is conserved (and well-defined as a per-interval
    /// invariant) only when `Hd` has no explicit time dependence.
    #[error("discrete energy requires a time-independent discrete Hamiltonian")]
    TimeDependent,
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Discrete energy `𝓔 = 𝓗 + h·∂𝓗/∂h` of the interval `(a, b)`.
///
/// For time-independent `Hd` the lattice equation makes `𝓔` equal across
/// consecutive intervals, so it is a conserved quantity of the scheme.
pub fn discrete_energy(
    sys: &DiscreteSystem,
    a: &LatticePoint,
    b: &LatticePoint,
) -> Result<f64, EnergyError> {
    if sys.depends_on_t() {
        return Err(EnergyError::TimeDependent);
    }
    let h = b.t - a.t;
    let jet = sys.partials_f64(a.t, h, &a.q, &b.p)?;
    Ok(jet.energy(h))
}

/// A per-interval quantity conserved by the scheme: either induced by a
/// symmetry or given in closed form over one lattice interval.
#[derive(Debug, Clone)]
pub enum DiscreteFirstIntegral {
    /// `𝓘 = Σ η^i·p_i - ξ·(𝓗⁻ + h₋·∂𝓗⁻/∂h) - V`, coefficients at the
    /// current point.
    FromSymmetry(DiscreteSymmetry),
    /// An expression over one lattice interval — see [`interval_vars`] —
    /// bound with [`DiscreteSystem::bind_over_interval`].
    ClosedForm(BoundExpr),
}

impl DiscreteFirstIntegral {
    /// Evaluate on the interval `(prev, cur)`.
    pub fn value(
        &self,
        sys: &DiscreteSystem,
        prev: &LatticePoint,
        cur: &LatticePoint,
    ) -> Result<f64, EvalError> {
        match self {
            DiscreteFirstIntegral::FromSymmetry(sym) => {
                discrete_first_integral_value(sys, sym, prev, cur)
            }
            DiscreteFirstIntegral::ClosedForm(bound) => sys.eval_on_interval(bound, prev, cur),
        }
    }
}

/// Evaluate each named integral on every interval of a lattice trajectory and
/// report drift; optionally also the discrete energy (which requires a
/// time-independent `Hd`).
pub fn monitor_lattice(
    sys: &DiscreteSystem,
    points: &[LatticePoint],
    integrals: &[(String, DiscreteFirstIntegral)],
    include_energy: bool,
) -> Result<crate::continuous::DriftReport, EnergyError> {
    assert!(points.len() >= 2, "need at least one lattice interval");
    let mut entries = Vec::with_capacity(integrals.len() + usize::from(include_energy));
    for (name, integral) in integrals {
        let initial = integral.value(sys, &points[0], &points[1])?;
        let mut max_drift = 0.0_f64;
        let mut final_value = initial;
        for w in points.windows(2).skip(1) {
            let v = integral.value(sys, &w[0], &w[1])?;
            max_drift = max_drift.max((v - initial).abs());
            final_value = v;
        }
        entries.push(crate::continuous::DriftEntry {
            name: name.clone(),
            initial,
            final_value,
            max_drift,
        });
    }
    if include_energy {
        let initial = discrete_energy(sys, &points[0], &points[1])?;
        let mut max_drift = 0.0_f64;
        let mut final_value = initial;
        for w in points.windows(2).skip(1) {
            let v = discrete_energy(sys, &w[0], &w[1])?;
            max_drift = max_drift.max((v - initial).abs());
            final_value = v;
        }
        entries.push(crate::continuous::DriftEntry {
            name: "energy".to_string(),
            initial,
            final_value,
            max_drift,
        });
    }
    Ok(crate::continuous::DriftReport { entries })
}

/// Symmetry coefficients laid out over the full triple slots, each evaluated
/// at its own lattice point.
fn triple_direction(
    sym: &DiscreteSymmetry,
    prev: &LatticePoint,
    cur: &LatticePoint,
    next: &LatticePoint,
) -> Result<Vec<f64>, EvalError> {
    let n = sym.n();
    let (xi_m, eta_m, zeta_m, _) = sym.coefficients(prev)?;
    let (xi, eta, zeta, _) = sym.coefficients(cur)?;
    let (xi_p, eta_p, zeta_p, _) = sym.coefficients(next)?;
    let mut c = Vec::with_capacity(triple_width(n));
    c.push(xi_m);
    c.push(xi);
    c.push(xi_p);
    c.extend(eta_m);
    c.extend(eta);
    c.extend(eta_p);
    c.extend(zeta_m);
    c.extend(zeta);
    c.extend(zeta_p);
    Ok(c)
}

/// Jacobian of all scheme residuals with respect to the full triple slots.
fn triple_jacobian(sys: &DiscreteSystem, x: &[f64]) -> Result<Vec<Vec<f64>>, EvalError> {
    let width = x.len();
    let dx: Vec<Dual<f64>> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| Dual::variable(v, i, width))
        .collect();
    let out = triple_residuals(sys, &dx)?;
    Ok(out
        .iter()
        .map(|o| (0..width).map(|k| o.deriv(k)).collect())
        .collect())
}

/// Prolonged action of the symmetry on all `2n + 1` scheme residuals at a
/// triple (the lattice variables each receive the coefficient evaluated at
/// their own point, including the induced `∂/∂h₊, ∂/∂h₋` contributions via
/// the time slots).
///
/// Evaluated on solution triples, all entries ≈ 0 means the scheme — equations
/// *and* lattice — admits the symmetry; this is weaker than action invariance.
pub fn discrete_equation_invariance(
    sys: &DiscreteSystem,
    sym: &DiscreteSymmetry,
    prev: &LatticePoint,
    cur: &LatticePoint,
    next: &LatticePoint,
) -> Result<Vec<ScaledResidual>, EvalError> {
    let x = triple_args(prev, cur, next);
    let c = triple_direction(sym, prev, cur, next)?;
    let rows = triple_jacobian(sys, &x)?;
    Ok(rows
        .iter()
        .map(|row| {
            let terms: Vec<f64> = row.iter().zip(&c).map(|(d, ci)| d * ci).collect();
            let value = terms.iter().sum();
            ScaledResidual::from_terms(value, &terms)
        })
        .collect())
}

/// Action- and mesh-invariance residuals of a symmetry at a lattice triple.
#[derive(Debug, Clone, Copy)]
pub struct DiscreteInvariance {
    /// Defect of the discrete-action invariance condition
    /// `Σ ζ⁺_i·D₊(q^i) + Σ p⁺_i·D₊(η^i) - X(𝓗) - 𝓗·D₊(ξ) - D₊(V)`.
    pub action: ScaledResidual,
    /// Prolonged action of the symmetry on the lattice equation.
    pub mesh: ScaledResidual,
}

/// Evaluate both invariance residuals at a triple. On solution triples, both
/// ≈ 0 certifies that the symmetry leaves the discrete action invariant (up
/// to the gauge term) *and* preserves the lattice equation — the conditions
/// under which it induces the conserved quantity of
/// [`discrete_first_integral_value`].
pub fn discrete_invariance_residual(
    sys: &DiscreteSystem,
    sym: &DiscreteSymmetry,
    prev: &LatticePoint,
    cur: &LatticePoint,
    next: &LatticePoint,
) -> Result<DiscreteInvariance, EvalError> {
    let n = sys.n;
    assert_eq!(sym.n(), n, "symmetry dimension mismatch");
    let hp = next.t - cur.t;
    let fwd = sys.partials_f64(cur.t, hp, &cur.q, &next.p)?;
    let (xi, eta, _zeta, v) = sym.coefficients(cur)?;
    let (xi_p, eta_p, zeta_p, v_p) = sym.coefficients(next)?;

    let mut terms = Vec::with_capacity(2 * n + 3);
    let mut action = 0.0;
    for (zp, (qn, qc)) in zeta_p.iter().zip(next.q.iter().zip(&cur.q)) {
        let term = zp * (qn - qc) / hp;
        action += term;
        terms.push(term);
    }
    for (pn, (ep, ec)) in next.p.iter().zip(eta_p.iter().zip(&eta)) {
        let term = pn * (ep - ec) / hp;
        action += term;
        terms.push(term);
    }
    // X(𝓗): the node time t sits in the first slot, t₊ in the second; q at
    // the current point, p⁺ at the next.
    let mut x_h = xi * fwd.d_first_time() + xi_p * fwd.d_h;
    for i in 0..n {
        x_h += eta[i] * fwd.d_q[i] + zeta_p[i] * fwd.d_pp[i];
    }
    action -= x_h;
    terms.push(x_h);
    let h_dxi = fwd.value * (xi_p - xi) / hp;
    action -= h_dxi;
    terms.push(h_dxi);
    if sym.has_gauge() {
        let dv = (v_p - v) / hp;
        action -= dv;
        terms.push(dv);
    }
    let action = ScaledResidual::from_terms(action, &terms);

    let x = triple_args(prev, cur, next);
    let c = triple_direction(sym, prev, cur, next)?;
    let rows = triple_jacobian(sys, &x)?;
    let mesh_row = &rows[2 * n];
    let mesh_terms: Vec<f64> = mesh_row.iter().zip(&c).map(|(d, ci)| d * ci).collect();
    let mesh = ScaledResidual::from_terms(mesh_terms.iter().sum(), &mesh_terms);

    Ok(DiscreteInvariance { action, mesh })
}

/// Evaluate the three-point operator identity at an **arbitrary** triple —
/// no solution property is assumed:
///
/// ```text
/// Σ ζ⁺_i·D₊(q^i) + Σ p⁺_i·D₊(η^i) - X(𝓗) - 𝓗·D₊(ξ)
///   ≡ ξ·[D₊(𝓗⁻) - ∂𝓗/∂t|first - (h₋/h₊)·∂𝓗⁻/∂t|second]
///     - Σ η^i·[D₊(p_i) + ∂𝓗/∂q^i]
///     + Σ ζ⁺_i·[D₊(q^i) - ∂𝓗/∂p⁺_i]
///     + D₊[Σ η^i·p_i - ξ·(𝓗⁻ + h₋·∂𝓗⁻/∂h)]
/// ```
///
/// with `D₊(f) = (f₊ - f)/h₊` (shifting every ingredient one interval
/// forward). Both sides are assembled literally from independently computed
/// pieces; agreement to roundoff on random off-solution triples certifies the
/// discrete derivative stack and the slot conventions of the lattice
/// equation.
pub fn check_discrete_identity(
    sys: &DiscreteSystem,
    sym: &DiscreteSymmetry,
    prev: &LatticePoint,
    cur: &LatticePoint,
    next: &LatticePoint,
) -> Result<IdentityCheck, EvalError> {
    let n = sys.n;
    assert_eq!(sym.n(), n, "symmetry dimension mismatch");
    let hp = next.t - cur.t;
    let hm = cur.t - prev.t;
    let fwd = sys.partials_f64(cur.t, hp, &cur.q, &next.p)?;
    let bwd = sys.partials_f64(prev.t, hm, &prev.q, &cur.p)?;
    let (xi, eta, _zeta, _) = sym.coefficients(cur)?;
    let (xi_p, eta_p, zeta_p, _) = sym.coefficients(next)?;

    let mut terms: Vec<f64> = Vec::new();

    // Left: invariance defect (gauge-free form).
    let mut lhs = 0.0;
    for i in 0..n {
        let t = zeta_p[i] * (next.q[i] - cur.q[i]) / hp;
        lhs += t;
        terms.push(t);
        let t = next.p[i] * (eta_p[i] - eta[i]) / hp;
        lhs += t;
        terms.push(t);
    }
    let mut x_h = xi * fwd.d_first_time() + xi_p * fwd.d_h;
    for i in 0..n {
        x_h += eta[i] * fwd.d_q[i] + zeta_p[i] * fwd.d_pp[i];
    }
    lhs -= x_h;
    terms.push(x_h);
    let t = fwd.value * (xi_p - xi) / hp;
    lhs -= t;
    terms.push(t);

    // Right: scheme residuals contracted with the coefficients, plus the
    // forward difference of the would-be integral's bracket.
    let mut rhs = xi * ((fwd.value - bwd.value) / hp - fwd.d_first_time() - (hm / hp) * bwd.d_h);
    terms.push(rhs);
    for i in 0..n {
        let t = eta[i] * ((next.p[i] - cur.p[i]) / hp + fwd.d_q[i]);
        rhs -= t;
        terms.push(t);
        let t = zeta_p[i] * ((next.q[i] - cur.q[i]) / hp - fwd.d_pp[i]);
        rhs += t;
        terms.push(t);
    }
    let mut bracket_next = -xi_p * fwd.energy(hp);
    let mut bracket_cur = -xi * bwd.energy(hm);
    for i in 0..n {
        bracket_next += eta_p[i] * next.p[i];
        bracket_cur += eta[i] * cur.p[i];
    }
    let d_bracket = (bracket_next - bracket_cur) / hp;
    rhs += d_bracket;
    terms.push(d_bracket);

    Ok(IdentityCheck {
        lhs,
        rhs,
        residual: ScaledResidual::from_terms(lhs - rhs, &terms),
    })
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

    /// Midpoint-oscillator discrete Hamiltonian (no explicit t).
    fn midpoint_oscillator() -> DiscreteSystem {
        DiscreteSystem::new(
            1,
            parse("2*(q1^2 + pp1^2 + hp*q1*pp1)/(4 - hp^2)").unwrap(),
            &no_params(),
        )
        .unwrap()
    }

    /// Inverse-square discrete Hamiltonian (variable lattice).
    fn inverse_square_discrete() -> DiscreteSystem {
        DiscreteSystem::new(1, parse("0.5*(pp1^2 + 1/q1^2)").unwrap(), &no_params()).unwrap()
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

    fn point(t: f64, q: f64, p: f64) -> LatticePoint {
        LatticePoint::new(t, vec![q], vec![p])
    }

    /// Closed-form midpoint update (Cayley rotation) for cross-checking.
    fn midpoint_update(q: f64, p: f64, h: f64) -> (f64, f64) {
        let a = h / 2.0;
        let den = 1.0 + a * a;
        (
            ((1.0 - a * a) * q + 2.0 * a * p) / den,
            ((1.0 - a * a) * p - 2.0 * a * q) / den,
        )
    }

    #[test]
    fn first_step_matches_closed_form_midpoint() {
        let sys = midpoint_oscillator();
        let start = point(0.0, 1.0, 0.0);
        let (next, diag) = step_first(&sys, &start, 0.2).unwrap();
        let (qe, pe) = midpoint_update(1.0, 0.0, 0.2);
        assert_eq!(next.t, 0.2);
        assert!((next.q[0] - qe).abs() < 1e-13, "q1 = {} vs {qe}", next.q[0]);
        assert!((next.p[0] - pe).abs() < 1e-13, "p1 = {} vs {pe}", next.p[0]);
        // 0.99/1.01 and -0.2/1.01 written out.
        assert!((next.q[0] - 0.980_198_019_801_980_2).abs() < 1e-12);
        assert!((next.p[0] + 0.198_019_801_980_198_02).abs() < 1e-12);
        assert!(diag.iters <= 6, "took {} iterations", diag.iters);
        assert!(diag.residual_norm <= NEWTON_TOL);
    }

    #[test]
    fn interior_steps_keep_oscillator_lattice_uniform() {
        let sys = midpoint_oscillator();
        let start = point(0.0, 1.0, 0.0);
        let traj = run_lattice(&sys, &start, 0.2, 40).unwrap();
        assert_eq!(traj.points.len(), 41);
        let (mut q, mut p) = (1.0, 0.0);
        for (k, w) in traj.points.windows(2).enumerate() {
            let h = w[1].t - w[0].t;
            assert!((h - 0.2).abs() < 1e-13, "step {k}: h = {h}");
            let (qe, pe) = midpoint_update(q, p, 0.2);
            q = qe;
            p = pe;
            assert!((w[1].q[0] - qe).abs() < 5e-13, "step {k}: q");
            assert!((w[1].p[0] - pe).abs() < 5e-13, "step {k}: p");
        }
        for d in &traj.diags {
            assert!(d.iters <= 6);
            assert!(!d.degenerate_lattice);
        }
    }

    #[test]
    fn first_step_of_inverse_square_system_is_explicit() {
        // F2 gives p⁺ = p + h/q³, then F1 gives q₊ = q + h·p⁺.
        let sys = inverse_square_discrete();
        let start = point(0.0, 1.0, 1.0);
        let (next, _) = step_first(&sys, &start, 0.1).unwrap();
        assert!((next.p[0] - 1.1).abs() < 1e-13, "p = {}", next.p[0]);
        assert!((next.q[0] - 1.11).abs() < 1e-13, "q = {}", next.q[0]);
    }

    #[test]
    fn solved_steps_satisfy_step_residuals() {
        // Cross-validates the Newton unknown-vector path against the
        // independent full-triple residual evaluation.
        for (sys, h0, start) in [
            (midpoint_oscillator(), 0.2, point(0.0, 1.0, 0.0)),
            (inverse_square_discrete(), 0.1, point(0.0, 1.0, 1.0)),
        ] {
            let traj = run_lattice(&sys, &start, h0, 25).unwrap();
            for k in 2..traj.points.len() {
                let r = step_residuals(
                    &sys,
                    &traj.points[k - 2],
                    &traj.points[k - 1],
                    &traj.points[k],
                )
                .unwrap();
                assert!(inf_norm(&r) <= 5e-12, "triple {k} residuals {r:?}");
            }
        }
    }

    #[test]
    fn lattice_spacing_adapts_but_conserves_energy() {
        let sys = inverse_square_discrete();
        let start = point(0.0, 1.0, 1.0);
        let traj = run_lattice(&sys, &start, 0.1, 60).unwrap();
        let e0 = discrete_energy(&sys, &traj.points[0], &traj.points[1]).unwrap();
        for w in traj.points.windows(2) {
            let e = discrete_energy(&sys, &w[0], &w[1]).unwrap();
            assert!((e - e0).abs() < 1e-11, "energy {e} vs {e0}");
        }
        // The spacing is genuinely solved for, not copied.
        let h1 = traj.points[1].t - traj.points[0].t;
        let h2 = traj.points[2].t - traj.points[1].t;
        assert!(
            (h1 - h2).abs() > 1e-6,
            "lattice unexpectedly uniform: {h1} vs {h2}"
        );
    }

    #[test]
    fn discrete_energy_rejects_time_dependence() {
        let sys =
            DiscreteSystem::new(1, parse("0.5*pp1^2 + sin(t)*q1").unwrap(), &no_params()).unwrap();
        assert!(matches!(
            discrete_energy(&sys, &point(0.0, 1.0, 0.0), &point(0.1, 1.0, 0.0)),
            Err(EnergyError::TimeDependent)
        ));
    }

    #[test]
    fn oscillator_integrals_are_conserved_and_match_closed_forms() {
        let sys = midpoint_oscillator();
        let h = 0.2;
        let omega = (h / 2.0).atan() / (h / 2.0);
        let omega_text = format!("{omega:.17e}");
        let x1 = sym1(
            "0",
            &format!("sin({omega_text}*t)"),
            &format!("cos({omega_text}*t)"),
            Some(&format!("q1*cos({omega_text}*t)")),
        );
        let x3 = sym1("1", "0", "0", None);

        let start = point(0.0, 1.0, 0.0);
        let traj = run_lattice(&sys, &start, h, 50).unwrap();

        let i1_first =
            discrete_first_integral_value(&sys, &x1, &traj.points[0], &traj.points[1]).unwrap();
        let i3_first =
            discrete_first_integral_value(&sys, &x3, &traj.points[0], &traj.points[1]).unwrap();
        // ξ = 1 integral is minus the discrete energy of the backward
        // interval; closed form -4/(4 + h²)·(q² + p²)/2 with q² + p² = 1.
        assert!(
            (i3_first - (-0.495_049_504_950_495_05)).abs() < 1e-12,
            "i3 = {i3_first}"
        );
        for w in traj.points.windows(2) {
            let i1 = discrete_first_integral_value(&sys, &x1, &w[0], &w[1]).unwrap();
            let i3 = discrete_first_integral_value(&sys, &x3, &w[0], &w[1]).unwrap();
            assert!(
                (i1 - i1_first).abs() < 1e-12,
                "i1 drift: {i1} vs {i1_first}"
            );
            assert!(
                (i3 - i3_first).abs() < 1e-12,
                "i3 drift: {i3} vs {i3_first}"
            );
            // Closed form for i1 at the current point.
            let cur = &w[1];
            let closed = cur.p[0] * (omega * cur.t).sin() - cur.q[0] * (omega * cur.t).cos();
            assert!((i1 - closed).abs() < 1e-12, "i1 {i1} vs closed {closed}");
        }
    }

    #[test]
    fn identity_holds_on_arbitrary_triples() {
        // Includes an explicitly time-dependent Hd so the two time slots of
        // the lattice equation are genuinely different functions.
        let systems = [
            midpoint_oscillator(),
            inverse_square_discrete(),
            DiscreteSystem::new(
                1,
                parse("0.5*pp1^2 + sin(t)*q1 + 0.1*hp*q1^2 + 0.05*t*hp*pp1").unwrap(),
                &no_params(),
            )
            .unwrap(),
        ];
        let syms = [
            sym1("1", "0", "0", None),
            sym1("2*t", "q1", "-p1", None),
            sym1("sin(t)*p1", "q1^2", "cos(q1*p1)", None),
            sym1("t^2 + 1", "exp(0.2*q1)", "atan(p1) + t", None),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for sys in &systems {
            for sym in &syms {
                for _ in 0..100 {
                    let t = rng.gen_range(-1.0..1.0);
                    let hm = rng.gen_range(0.05..0.4);
                    let hp = rng.gen_range(0.05..0.4);
                    let mut qs = [0.0; 3];
                    for q in &mut qs {
                        let sign: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                        *q = sign * rng.gen_range(0.3..2.0);
                    }
                    let prev = point(t - hm, qs[0], rng.gen_range(-2.0..2.0));
                    let cur = point(t, qs[1], rng.gen_range(-2.0..2.0));
                    let next = point(t + hp, qs[2], rng.gen_range(-2.0..2.0));
                    let chk = check_discrete_identity(sys, sym, &prev, &cur, &next).unwrap();
                    assert!(
                        chk.residual.within(1e-12),
                        "identity violated: lhs={} rhs={} residual={:?}",
                        chk.lhs,
                        chk.rhs,
                        chk.residual
                    );
                }
            }
        }
    }

    #[test]
    fn action_invariance_of_oscillator_symmetries() {
        let sys = midpoint_oscillator();
        let h = 0.2;
        let omega = (h / 2.0).atan() / (h / 2.0);
        let om = format!("{omega:.17e}");
        let x1 = sym1(
            "0",
            &format!("sin({om}*t)"),
            &format!("cos({om}*t)"),
            Some(&format!("q1*cos({om}*t)")),
        );
        let x3 = sym1("1", "0", "0", None);
        let x4 = sym1("0", "q1", "p1", None);

        let start = point(0.3, 0.8, -0.45);
        let traj = run_lattice(&sys, &start, h, 12).unwrap();
        for k in 2..traj.points.len() {
            let (prev, cur, next) = (&traj.points[k - 2], &traj.points[k - 1], &traj.points[k]);
            let inv1 = discrete_invariance_residual(&sys, &x1, prev, cur, next).unwrap();
            assert!(inv1.action.within(1e-12), "x1 action {:?}", inv1.action);
            assert!(inv1.mesh.within(1e-12), "x1 mesh {:?}", inv1.mesh);
            let inv3 = discrete_invariance_residual(&sys, &x3, prev, cur, next).unwrap();
            assert!(inv3.action.within(1e-13), "x3 action {:?}", inv3.action);
            assert!(inv3.mesh.within(1e-13), "x3 mesh {:?}", inv3.mesh);

            // x4 = q∂q + p∂p is admitted by the scheme but NOT an action
            // invariance; its defect has the closed form 2c·(p⁺² - q²).
            let inv4 = discrete_invariance_residual(&sys, &x4, prev, cur, next).unwrap();
            let c = 2.0 / (4.0 - h * h);
            let expected = 2.0 * c * (next.p[0] * next.p[0] - cur.q[0] * cur.q[0]);
            assert!(
                (inv4.action.value - expected).abs() < 1e-11,
                "x4 action {} vs closed form {expected}",
                inv4.action.value
            );
            assert!(!inv4.action.within(1e-6), "x4 unexpectedly invariant");
            for r in discrete_equation_invariance(&sys, &x4, prev, cur, next).unwrap() {
                assert!(r.within(1e-11), "x4 equation residual {r:?}");
            }
        }
    }

    #[test]
    fn scaling_symmetry_of_inverse_square_scheme() {
        // X = 2t∂t + q∂q - p∂p leaves the scheme and the action invariant.
        let sys = inverse_square_discrete();
        let x2 = sym1("2*t", "q1", "-p1", None);
        let x1 = sym1("1", "0", "0", None);
        let start = point(0.0, 1.0, 1.0);
        let traj = run_lattice(&sys, &start, 0.1, 12).unwrap();
        for k in 2..traj.points.len() {
            let (prev, cur, next) = (&traj.points[k - 2], &traj.points[k - 1], &traj.points[k]);
            for sym in [&x1, &x2] {
                let inv = discrete_invariance_residual(&sys, sym, prev, cur, next).unwrap();
                assert!(inv.action.within(1e-12), "action {:?}", inv.action);
                assert!(inv.mesh.within(1e-12), "mesh {:?}", inv.mesh);
                for r in discrete_equation_invariance(&sys, sym, prev, cur, next).unwrap() {
                    assert!(r.within(1e-11), "equation residual {r:?}");
                }
            }
        }
    }

    #[test]
    fn degenerate_lattice_at_oscillator_origin() {
        // At q = p = 0 the lattice equation degenerates (its whole Jacobian
        // row vanishes); the step must fall back to h₊ = h₋ and say so.
        let sys = midpoint_oscillator();
        let prev = point(0.0, 0.0, 0.0);
        let (cur, d1) = step_first(&sys, &prev, 0.2).unwrap();
        assert!(cur.q[0].abs() < 1e-15 && cur.p[0].abs() < 1e-15);
        assert!(!d1.degenerate_lattice);
        let (next, d2) = step(&sys, &prev, &cur).unwrap();
        assert!(
            d2.degenerate_lattice,
            "expected degenerate-lattice fallback"
        );
        assert!((next.t - 0.4).abs() < 1e-15, "h must be carried over");
        assert!(next.q[0].abs() < 1e-15 && next.p[0].abs() < 1e-15);
    }

    #[test]
    fn failed_run_returns_partial_trajectory() {
        // Heading into the 1/q² singularity with p < 0: the lattice equation
        // eventually has no real solution and Newton reports it; the
        // successfully computed prefix must come back with the error.
        let sys = inverse_square_discrete();
        let start = point(0.0, 1.0, -1.0);
        match run_lattice(&sys, &start, 0.5, 100) {
            Err(err) => {
                assert!(err.failed_at_step >= 2, "failed at {}", err.failed_at_step);
                assert_eq!(err.partial.points.len(), err.failed_at_step);
                assert_eq!(err.partial.diags.len(), err.failed_at_step - 1);
            }
            Ok(traj) => panic!(
                "expected failure, ran to t = {}",
                traj.points.last().unwrap().t
            ),
        }
    }

    #[test]
    fn step_rejects_bad_intervals() {
        let sys = midpoint_oscillator();
        assert!(matches!(
            step_first(&sys, &point(0.0, 1.0, 0.0), 0.0),
            Err(StepError::NonPositiveStep { .. })
        ));
        assert!(matches!(
            step(&sys, &point(0.5, 1.0, 0.0), &point(0.5, 1.0, 0.1)),
            Err(StepError::NonPositiveStep { .. })
        ));
    }

    #[test]
    fn lu_solver_flags_singular_systems() {
        let a = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        assert!(solve_lu(a, vec![1.0, 2.0]).is_err());
        let a = vec![vec![2.0, 1.0], vec![1.0, 3.0]];
        let x = solve_lu(a, vec![5.0, 10.0]).unwrap();
        assert!((2.0 * x[0] + x[1] - 5.0).abs() < 1e-14);
        assert!((x[0] + 3.0 * x[1] - 10.0).abs() < 1e-14);
    }

    #[test]
    fn interval_expressions_evaluate_on_intervals() {
        let sys = inverse_square_discrete();
        let bound = sys
            .bind_over_interval(&parse("q1*p1 - t*(p1^2 + 1/qm1^2)").unwrap())
            .unwrap();
        let prev = point(0.0, 1.0, 1.0);
        let cur = point(0.1, 1.11, 1.1);
        let v = sys.eval_on_interval(&bound, &prev, &cur).unwrap();
        let expected = 1.11 * 1.1 - 0.1 * (1.1 * 1.1 + 1.0);
        assert!((v - expected).abs() < 1e-15, "{v} vs {expected}");
    }
}
