//! Verification toolkit for point symmetries of Hamiltonian systems.
//!
//! The crate works with canonical Hamiltonian systems in two flavors:
//!
//! * **Continuous**: `H(t, q, p)` with the canonical equations
//!   `dq^i/dt = ∂H/∂p_i`, `dp_i/dt = -∂H/∂q^i`. Point symmetries are vector
//!   fields `X = ξ ∂_t + η^i ∂_{q^i} + ζ_i ∂_{p_i}` with coefficients that are
//!   functions of `(t, q, p)`.
//! * **Discrete**: a three-point variational scheme generated by a discrete
//!   Hamiltonian `Hd(t, h₊, q, p⁺)` on a self-determining lattice. The scheme
//!   propagates `(t, q, p) → (t₊, q₊, p⁺)` implicitly; the lattice spacing is
//!   one of the unknowns.
//!
//! For both flavors the crate can
//!
//! * evaluate the action-invariance residual of a candidate symmetry
//!   (including divergence invariance with a gauge term `V`),
//! * build the first integral a (divergence-)invariant symmetry induces and
//!   evaluate it without any integration,
//! * check the underlying operator identity that ties the invariance residual
//!   to the equations of motion — for arbitrary off-solution data, which makes
//!   it a machine-checkable certificate of the implementation,
//! * integrate (a reference RK4 for the continuous case, Newton on the full
//!   implicit step for the discrete case) and monitor conservation.
//!
//! Numerics are exact-mode: all derivatives come from forward-mode automatic
//! differentiation ([`autodiff`]), never finite differences. Expressions are
//! parsed from a small text grammar ([`expr`]); a catalog of ready-made
//! systems with their symmetries and integrals lives in [`systems`].

pub mod autodiff;
pub mod continuous;
pub mod discrete;
pub mod expr;
pub mod systems;
