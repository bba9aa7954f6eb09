//! Forward-mode automatic differentiation.
//!
//! Two carrier types implement [`Scalar`] and can therefore evaluate any
//! [`BoundExpr`]:
//!
//! * [`Dual<T>`] — multi-directional first-order dual number over any scalar
//!   `T`. The derivative part is a vector of directional components; an empty
//!   vector means "constant" and broadcasts against any seed width, so
//!   constants cost nothing. Because `T` can itself be a `Dual`, nesting
//!   (`Dual<Dual<f64>>`) yields exact higher derivatives; the Newton solver
//!   for the implicit discrete step uses exactly that to differentiate
//!   residuals that already contain first derivatives of the discrete
//!   Hamiltonian.
//! * [`HyperDual`] — a compact second-order number carrying one value, two
//!   directional first derivatives, and the mixed second derivative
//!   `d1ᵀ·Hess·d2`. One evaluation yields one mixed second derivative, which
//!   is all the equation-invariance checks need.
//!
//! All derivatives are exact (up to roundoff): nothing in this crate uses
//! finite differences except the tests, which use them as an independent
//! cross-check.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::expr::{BoundExpr, EvalError, Scalar};

// ---------------------------------------------------------------------------
// Dual<T>
// ---------------------------------------------------------------------------

/// Multi-directional forward-mode dual number over scalar type `T`.
///
/// `deriv[k]` is the derivative along seed direction `k`. An empty `deriv`
/// denotes a constant and combines with any seed width.
#[derive(Debug, Clone, PartialEq)]
pub struct Dual<T: Scalar> {
    value: T,
    deriv: Vec<T>,
}

impl<T: Scalar> Dual<T> {
    /// A constant: empty derivative vector, broadcasts against any width.
    pub fn constant(value: T) -> Self {
        Dual {
            value,
            deriv: Vec::new(),
        }
    }

    /// The variable seeded on direction `slot` out of `width` directions.
    pub fn variable(value: T, slot: usize, width: usize) -> Self {
        let mut deriv = vec![T::from_f64(0.0); width];
        deriv[slot] = T::from_f64(1.0);
        Dual { value, deriv }
    }

    /// A value with an explicit derivative seed.
    pub fn seeded(value: T, deriv: Vec<T>) -> Self {
        Dual { value, deriv }
    }

    /// The value part.
    pub fn val(&self) -> &T {
        &self.value
    }

    /// Derivative along direction `k` (zero if this is a constant).
    pub fn deriv(&self, k: usize) -> T {
        self.deriv
            .get(k)
            .cloned()
            .unwrap_or_else(|| T::from_f64(0.0))
    }

    /// Number of seeded directions (0 for constants).
    pub fn width(&self) -> usize {
        self.deriv.len()
    }

    /// Apply a scalar chain rule: result value `value`, each derivative
    /// component multiplied by `factor`.
    fn chain(&self, value: T, factor: T) -> Self {
        Dual {
            value,
            deriv: self
                .deriv
                .iter()
                .map(|d| d.clone() * factor.clone())
                .collect(),
        }
    }
}

fn assert_same_width(a: usize, b: usize) {
    assert_eq!(
        a, b,
        "dual numbers with mismatched seed widths ({a} vs {b}) combined"
    );
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Dual<T>;
    fn add(self, rhs: Dual<T>) -> Dual<T> {
        let value = self.value + rhs.value;
        let deriv = match (self.deriv.is_empty(), rhs.deriv.is_empty()) {
            (true, _) => rhs.deriv,
            (_, true) => self.deriv,
            (false, false) => {
                assert_same_width(self.deriv.len(), rhs.deriv.len());
                self.deriv
                    .into_iter()
                    .zip(rhs.deriv)
                    .map(|(a, b)| a + b)
                    .collect()
            }
        };
        Dual { value, deriv }
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Dual<T>;
    fn sub(self, rhs: Dual<T>) -> Dual<T> {
        let value = self.value - rhs.value;
        let deriv = match (self.deriv.is_empty(), rhs.deriv.is_empty()) {
            (true, _) => rhs.deriv.into_iter().map(|d| -d).collect(),
            (_, true) => self.deriv,
            (false, false) => {
                assert_same_width(self.deriv.len(), rhs.deriv.len());
                self.deriv
                    .into_iter()
                    .zip(rhs.deriv)
                    .map(|(a, b)| a - b)
                    .collect()
            }
        };
        Dual { value, deriv }
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Dual<T>;
    // The product rule mixes `*` and `+` by construction.
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn mul(self, rhs: Dual<T>) -> Dual<T> {
        let value = self.value.clone() * rhs.value.clone();
        let deriv = match (self.deriv.is_empty(), rhs.deriv.is_empty()) {
            (true, true) => Vec::new(),
            (true, false) => rhs
                .deriv
                .into_iter()
                .map(|d| self.value.clone() * d)
                .collect(),
            (false, true) => self
                .deriv
                .into_iter()
                .map(|d| d * rhs.value.clone())
                .collect(),
            (false, false) => {
                assert_same_width(self.deriv.len(), rhs.deriv.len());
                self.deriv
                    .into_iter()
                    .zip(rhs.deriv)
                    .map(|(a, b)| a * rhs.value.clone() + self.value.clone() * b)
                    .collect()
            }
        };
        Dual { value, deriv }
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Dual<T>;
    // The quotient rule mixes `/`, `*`, and `-` by construction.
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, rhs: Dual<T>) -> Dual<T> {
        let value = self.value.clone() / rhs.value.clone();
        // d(a/b) = (da - (a/b)·db) / b
        let deriv = match (self.deriv.is_empty(), rhs.deriv.is_empty()) {
            (true, true) => Vec::new(),
            (false, true) => self
                .deriv
                .into_iter()
                .map(|d| d / rhs.value.clone())
                .collect(),
            (true, false) => rhs
                .deriv
                .into_iter()
                .map(|db| -(value.clone() * db) / rhs.value.clone())
                .collect(),
            (false, false) => {
                assert_same_width(self.deriv.len(), rhs.deriv.len());
                self.deriv
                    .into_iter()
                    .zip(rhs.deriv)
                    .map(|(da, db)| (da - value.clone() * db) / rhs.value.clone())
                    .collect()
            }
        };
        Dual { value, deriv }
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Dual<T>;
    fn neg(self) -> Dual<T> {
        Dual {
            value: -self.value,
            deriv: self.deriv.into_iter().map(|d| -d).collect(),
        }
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    fn from_f64(x: f64) -> Self {
        Dual::constant(T::from_f64(x))
    }

    fn value(&self) -> f64 {
        self.value.value()
    }

    fn sin(&self) -> Self {
        self.chain(self.value.sin(), self.value.cos())
    }

    fn cos(&self) -> Self {
        self.chain(self.value.cos(), -self.value.sin())
    }

    fn tan(&self) -> Self {
        let t = self.value.tan();
        let factor = T::from_f64(1.0) + t.clone() * t.clone();
        self.chain(t, factor)
    }

    fn atan(&self) -> Self {
        let one = T::from_f64(1.0);
        let factor = one.clone() / (one + self.value.clone() * self.value.clone());
        self.chain(self.value.atan(), factor)
    }

    fn sqrt(&self) -> Self {
        let s = self.value.sqrt();
        let factor = T::from_f64(0.5) / s.clone();
        self.chain(s, factor)
    }

    fn exp(&self) -> Self {
        let e = self.value.exp();
        self.chain(e.clone(), e)
    }

    fn ln(&self) -> Self {
        let factor = T::from_f64(1.0) / self.value.clone();
        self.chain(self.value.ln(), factor)
    }

    fn abs(&self) -> Self {
        // Derivative of |x| is sign(x); the convention at x = 0 is +1.
        let sign = if self.value.value() >= 0.0 { 1.0 } else { -1.0 };
        self.chain(self.value.abs(), T::from_f64(sign))
    }
}

// ---------------------------------------------------------------------------
// HyperDual
// ---------------------------------------------------------------------------

/// Second-order forward number: value, two directional first derivatives, and
/// the mixed second derivative along those two directions.
///
/// Seeding argument `i` with `d1 = u_i`, `d2 = v_i`, `d12 = 0` and evaluating
/// `f` yields `d1 = ∇f·u`, `d2 = ∇f·v`, `d12 = uᵀ·Hess(f)·v`. One evaluation
/// produces one mixed second derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperDual {
    /// Function value.
    pub value: f64,
    /// First derivative along the first seed direction.
    pub d1: f64,
    /// First derivative along the second seed direction.
    pub d2: f64,
    /// Mixed second derivative across the two seed directions.
    pub d12: f64,
}

impl HyperDual {
    /// A constant (all derivative parts zero).
    pub fn constant(value: f64) -> Self {
        HyperDual {
            value,
            d1: 0.0,
            d2: 0.0,
            d12: 0.0,
        }
    }

    /// A seeded variable.
    pub fn seeded(value: f64, d1: f64, d2: f64) -> Self {
        HyperDual {
            value,
            d1,
            d2,
            d12: 0.0,
        }
    }

    /// Apply a unary chain rule given f(x), f'(x), f''(x).
    fn chain(self, f: f64, df: f64, ddf: f64) -> Self {
        HyperDual {
            value: f,
            d1: df * self.d1,
            d2: df * self.d2,
            d12: df * self.d12 + ddf * self.d1 * self.d2,
        }
    }
}

impl Add for HyperDual {
    type Output = HyperDual;
    fn add(self, rhs: HyperDual) -> HyperDual {
        HyperDual {
            value: self.value + rhs.value,
            d1: self.d1 + rhs.d1,
            d2: self.d2 + rhs.d2,
            d12: self.d12 + rhs.d12,
        }
    }
}

impl Sub for HyperDual {
    type Output = HyperDual;
    fn sub(self, rhs: HyperDual) -> HyperDual {
        HyperDual {
            value: self.value - rhs.value,
            d1: self.d1 - rhs.d1,
            d2: self.d2 - rhs.d2,
            d12: self.d12 - rhs.d12,
        }
    }
}

impl Mul for HyperDual {
    type Output = HyperDual;
    // The product rule mixes `*` and `+` by construction.
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn mul(self, rhs: HyperDual) -> HyperDual {
        HyperDual {
            value: self.value * rhs.value,
            d1: self.d1 * rhs.value + self.value * rhs.d1,
            d2: self.d2 * rhs.value + self.value * rhs.d2,
            d12: self.d12 * rhs.value + self.d1 * rhs.d2 + self.d2 * rhs.d1 + self.value * rhs.d12,
        }
    }
}

impl Div for HyperDual {
    type Output = HyperDual;
    // The quotient rule mixes `/`, `*`, and `-` by construction.
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, rhs: HyperDual) -> HyperDual {
        let value = self.value / rhs.value;
        let d1 = (self.d1 - value * rhs.d1) / rhs.value;
        let d2 = (self.d2 - value * rhs.d2) / rhs.value;
        let d12 = (self.d12 - d2 * rhs.d1 - value * rhs.d12 - d1 * rhs.d2) / rhs.value;
        HyperDual { value, d1, d2, d12 }
    }
}

impl Neg for HyperDual {
    type Output = HyperDual;
    fn neg(self) -> HyperDual {
        HyperDual {
            value: -self.value,
            d1: -self.d1,
            d2: -self.d2,
            d12: -self.d12,
        }
    }
}

impl Scalar for HyperDual {
    fn from_f64(x: f64) -> Self {
        HyperDual::constant(x)
    }

    fn value(&self) -> f64 {
        self.value
    }

    fn sin(&self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.chain(s, c, -s)
    }

    fn cos(&self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.chain(c, -s, -c)
    }

    fn tan(&self) -> Self {
        let t = self.value.tan();
        let sec2 = 1.0 + t * t;
        self.chain(t, sec2, 2.0 * t * sec2)
    }

    fn atan(&self) -> Self {
        let den = 1.0 + self.value * self.value;
        self.chain(
            self.value.atan(),
            1.0 / den,
            -2.0 * self.value / (den * den),
        )
    }

    fn sqrt(&self) -> Self {
        let s = self.value.sqrt();
        let df = 0.5 / s;
        self.chain(s, df, -0.5 * df / self.value)
    }

    fn exp(&self) -> Self {
        let e = self.value.exp();
        self.chain(e, e, e)
    }

    fn ln(&self) -> Self {
        let inv = 1.0 / self.value;
        self.chain(self.value.ln(), inv, -inv * inv)
    }

    fn abs(&self) -> Self {
        let sign = if self.value >= 0.0 { 1.0 } else { -1.0 };
        self.chain(self.value.abs(), sign, 0.0)
    }
}

// ---------------------------------------------------------------------------
// Convenience drivers
// ---------------------------------------------------------------------------

/// Value and full gradient of a bound expression at `args`.
pub fn grad(f: &BoundExpr, args: &[f64]) -> Result<(f64, Vec<f64>), EvalError> {
    let width = args.len();
    let dargs: Vec<Dual<f64>> = args
        .iter()
        .enumerate()
        .map(|(i, &x)| Dual::variable(x, i, width))
        .collect();
    let out = f.eval(&dargs)?;
    let g = (0..width).map(|k| out.deriv(k)).collect();
    Ok((out.value(), g))
}

/// Values and Jacobian rows of several bound expressions at `args`.
///
/// All expressions must expect `args.len()` slots; each is evaluated once
/// against a shared multi-directional seed.
pub fn jacobian(fs: &[BoundExpr], args: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>), EvalError> {
    let width = args.len();
    let dargs: Vec<Dual<f64>> = args
        .iter()
        .enumerate()
        .map(|(i, &x)| Dual::variable(x, i, width))
        .collect();
    let mut values = Vec::with_capacity(fs.len());
    let mut rows = Vec::with_capacity(fs.len());
    for f in fs {
        let out = f.eval(&dargs)?;
        values.push(out.value());
        rows.push((0..width).map(|k| out.deriv(k)).collect());
    }
    Ok((values, rows))
}

/// Evaluate `f` with argument `i` seeded `(d1, d2) = (dir1[i], dir2[i])`,
/// returning value, the two directional derivatives, and the mixed second
/// derivative `dir1ᵀ·Hess(f)·dir2`.
pub fn mixed_second(
    f: &BoundExpr,
    args: &[f64],
    dir1: &[f64],
    dir2: &[f64],
) -> Result<HyperDual, EvalError> {
    assert_eq!(args.len(), dir1.len());
    assert_eq!(args.len(), dir2.len());
    let hargs: Vec<HyperDual> = args
        .iter()
        .zip(dir1.iter().zip(dir2))
        .map(|(&x, (&u, &v))| HyperDual::seeded(x, u, v))
        .collect();
    f.eval(&hargs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference along coordinate `i`.
    fn fd_partial(f: &BoundExpr, args: &[f64], i: usize) -> f64 {
        let h = f64::EPSILON.cbrt() * (1.0 + args[i].abs());
        let mut hi = args.to_vec();
        let mut lo = args.to_vec();
        hi[i] += h;
        lo[i] -= h;
        let fhi: f64 = f.eval(&hi).unwrap();
        let flo: f64 = f.eval(&lo).unwrap();
        (fhi - flo) / (hi[i] - lo[i])
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cases = [
            (
                "0.5*(p1^2 + p2^2) - 1/sqrt(q1^2 + q2^2)",
                vec!["q1", "q2", "p1", "p2"],
            ),
            ("sin(x*y)/(1 + y^2)", vec!["x", "y"]),
            ("exp(x)*atan(y) + tan(0.3*x) + log(2 + x^2)", vec!["x", "y"]),
            ("x^-3 + y^2.5 + x^9", vec!["x", "y"]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (text, vars) in cases {
            let f = parse(text).unwrap().bind(&vars).unwrap();
            for _ in 0..50 {
                let args: Vec<f64> = (0..vars.len()).map(|_| rng.gen_range(0.4..1.8)).collect();
                let (_, g) = grad(&f, &args).unwrap();
                for i in 0..vars.len() {
                    let fd = fd_partial(&f, &args, i);
                    let scale = 1.0 + g[i].abs().max(fd.abs());
                    assert!(
                        (g[i] - fd).abs() <= 2e-7 * scale,
                        "{text}: d/d{} at {:?}: ad={} fd={}",
                        vars[i],
                        args,
                        g[i],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn dual_value_is_bitwise_equal_to_plain_eval() {
        let texts = [
            "0.5*(p1^2 + 1/q1^2)",
            "q1*p1 - t*(p1^2 + 1/q1^2)",
            "p1*sin(0.99*t) - q1*cos(0.99*t)",
            "2*(q1^2 + p1^2 + 0.2*q1*p1)/(4 - 0.04)",
        ];
        let vars = ["t", "q1", "p1"];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for text in texts {
            let f = parse(text).unwrap().bind(&vars).unwrap();
            for _ in 0..250 {
                let args = [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(0.3..2.0),
                    rng.gen_range(-2.0..2.0),
                ];
                let plain: f64 = f.eval(&args).unwrap();
                let (dual_value, _) = grad(&f, &args).unwrap();
                assert_eq!(plain.to_bits(), dual_value.to_bits(), "{text} at {args:?}");
            }
        }
    }

    #[test]
    fn linear_gradients_are_exact() {
        let f = parse("2*x + 3*y - 7").unwrap().bind(&["x", "y"]).unwrap();
        let (v, g) = grad(&f, &[1.5, -2.0]).unwrap();
        assert_eq!(v, 2.0 * 1.5 + 3.0 * (-2.0) - 7.0);
        assert_eq!(g, vec![2.0, 3.0]);
    }

    #[test]
    fn jacobian_rows_match_grad() {
        let fs = [
            parse("x*y").unwrap().bind(&["x", "y"]).unwrap(),
            parse("x - y^2").unwrap().bind(&["x", "y"]).unwrap(),
        ];
        let args = [1.25, -0.5];
        let (vals, rows) = jacobian(&fs, &args).unwrap();
        for (i, f) in fs.iter().enumerate() {
            let (v, g) = grad(f, &args).unwrap();
            assert_eq!(vals[i], v);
            assert_eq!(rows[i], g);
        }
        assert_eq!(rows[0], vec![-0.5, 1.25]);
        assert_eq!(rows[1], vec![1.0, 1.0]);
    }

    #[test]
    fn hyperdual_simple_second_derivatives_are_exact() {
        // f(x) = x^2: f'' = 2 exactly.
        let f = parse("x^2").unwrap().bind(&["x"]).unwrap();
        let out = mixed_second(&f, &[1.7], &[1.0], &[1.0]).unwrap();
        assert_eq!(out.value, 1.7 * 1.7);
        assert_eq!(out.d1, 2.0 * 1.7);
        assert_eq!(out.d12, 2.0);

        // f(x, y) = x*y: ∂²/∂x∂y = 1 exactly.
        let f = parse("x*y").unwrap().bind(&["x", "y"]).unwrap();
        let out = mixed_second(&f, &[3.0, 4.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(out.d1, 4.0);
        assert_eq!(out.d2, 3.0);
        assert_eq!(out.d12, 1.0);

        // f(x) = sin(x): f'' = -sin(x).
        let f = parse("sin(x)").unwrap().bind(&["x"]).unwrap();
        let x = 0.8;
        let out = mixed_second(&f, &[x], &[1.0], &[1.0]).unwrap();
        assert!((out.d12 + x.sin()).abs() < 1e-15);
    }

    #[test]
    fn hyperdual_matches_nested_duals() {
        // Mixed second derivative two ways: HyperDual in one pass vs nested
        // Dual<Dual<f64>> (outer seeds x, inner seeds y).
        let texts = [
            "sin(x*y) + x^3/(1 + y^2)",
            "exp(x - y)*sqrt(2 + x)",
            "log(x + 2)*atan(y) + tan(0.2*x*y)",
            "x^-2 + y^7 + abs(x)*y",
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for text in texts {
            let f = parse(text).unwrap().bind(&["x", "y"]).unwrap();
            for _ in 0..50 {
                let x = rng.gen_range(0.4..1.6);
                let y = rng.gen_range(0.4..1.6);

                let hyper = mixed_second(&f, &[x, y], &[1.0, 0.0], &[0.0, 1.0]).unwrap();

                let inner_x = Dual::<f64>::constant(x);
                let inner_y = Dual::<f64>::variable(y, 0, 1);
                let ox = Dual::<Dual<f64>>::variable(inner_x, 0, 1);
                let oy = Dual::<Dual<f64>>::constant(inner_y);
                let nested = f.eval(&[ox, oy]).unwrap();
                let d_x = nested.deriv(0); // inner dual: d/dx and d²/dxdy
                let mixed = d_x.deriv(0);

                let scale = 1.0 + hyper.d12.abs();
                assert!(
                    (hyper.d12 - mixed).abs() <= 1e-12 * scale,
                    "{text} at ({x}, {y}): hyper={} nested={}",
                    hyper.d12,
                    mixed
                );
            }
        }
    }

    #[test]
    fn directional_hyperdual_equals_slotwise_sum() {
        // d1 seeded with a full direction w gives wᵀ·H·e_j in one pass.
        let f = parse("0.5*(p^2 + 1/q^2) + sin(t)*q*p")
            .unwrap()
            .bind(&["t", "q", "p"])
            .unwrap();
        let args = [0.3, 1.2, -0.7];
        let w = [0.5, -1.1, 2.2];
        let ej = [0.0, 1.0, 0.0];
        let combined = mixed_second(&f, &args, &w, &ej).unwrap().d12;
        let mut acc = 0.0;
        for k in 0..3 {
            let mut u = [0.0; 3];
            u[k] = 1.0;
            acc += w[k] * mixed_second(&f, &args, &u, &ej).unwrap().d12;
        }
        assert!(
            (combined - acc).abs() <= 1e-13 * (1.0 + acc.abs()),
            "directional {combined} vs slotwise {acc}"
        );
    }

    #[test]
    fn broadcasting_constant_duals() {
        // A constant dual (empty derivative vector) combines with any width.
        let c = Dual::<f64>::constant(3.0);
        let x = Dual::<f64>::variable(2.0, 1, 4);
        let y = c.clone() * x.clone() + c.clone() - x.clone() / c.clone();
        assert_eq!(y.value(), 3.0 * 2.0 + 3.0 - 2.0 / 3.0);
        assert_eq!(y.deriv(1), 3.0 - 1.0 / 3.0);
        assert_eq!(y.deriv(0), 0.0);
        assert_eq!(y.width(), 4);
    }
}
