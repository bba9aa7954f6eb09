//! Expression grammar, parser, and generic evaluation.
//!
//! Hamiltonians, symmetry coefficients, gauge terms, and first integrals are
//! all written in a small text grammar:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?          // right-associative
//! atom   := number | 'pi' | ident | ident '(' expr ')' | '(' expr ')'
//! ident  := [a-z][a-z0-9_]*
//! number := digits ('.' digits)? (('e'|'E') ('+'|'-')? digits)?
//! ```
//!
//! `^` binds tighter than unary minus, so `-x^2` is `-(x^2)` and `x^-2` is
//! legal. The function set is fixed: `sin cos tan atan sqrt exp log abs`
//! (`log` is natural log). `pi` is a constant, not a variable.
//!
//! Parsing yields an [`Expr`] tree. Before evaluation an expression is
//! [bound](Expr::bind) to an ordered variable list, producing a [`BoundExpr`]
//! whose variables are argument slots; binding also folds literal integer
//! exponents with |e| ≤ 8 into repeated multiplication so they are exact and
//! defined for negative bases, while all other exponents evaluate through
//! `exp(e·log b)` and require a positive base.
//!
//! Evaluation is generic over [`Scalar`], which `f64` and the dual-number
//! types in [`crate::autodiff`] implement; the same bound expression therefore
//! serves plain evaluation and any order of forward-mode differentiation.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

/// The fixed set of single-argument functions the grammar accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Atan,
    Sqrt,
    Exp,
    Log,
    Abs,
}

impl Func {
    /// The name used in the text grammar.
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Atan => "atan",
            Func::Sqrt => "sqrt",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "atan" => Func::Atan,
            "sqrt" => Func::Sqrt,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "abs" => Func::Abs,
            _ => return None,
        })
    }
}

/// A parsed expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    /// A (non-negative) numeric literal.
    Num(f64),
    /// A named variable.
    Var(String),
    /// The constant `pi`.
    Pi,
    /// Unary negation.
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    /// `base ^ exponent` (right-associative in the grammar).
    Pow(Box<Expr>, Box<Expr>),
    /// Application of one of the built-in functions.
    Call(Func, Box<Expr>),
}

/// Error produced by [`parse`], carrying the byte offset of the failure.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at byte {offset}: {message}")]
pub struct ParseError {
    /// Byte offset into the input where the error was detected.
    pub offset: usize,
    /// Human-readable description of the failure.
    pub message: String,
}

/// Error produced by [`Expr::bind`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BindError {
    /// The expression references a variable that is not in the bind list.
    #[error("expression references unknown variable '{name}'")]
    UnknownVariable { name: String },
    /// The bind list itself contains a duplicate name.
    #[error("variable list contains duplicate name '{name}'")]
    DuplicateVariable { name: String },
}

/// Numeric domain error raised during evaluation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    /// A denominator evaluated to exactly zero.
    #[error("division by zero")]
    DivisionByZero,
    /// `sqrt` of a negative value.
    #[error("square root of negative value {value}")]
    SqrtOfNegative { value: f64 },
    /// `log` of a non-positive value.
    #[error("logarithm of non-positive value {value}")]
    LogOfNonPositive { value: f64 },
    /// Non-integer power of a non-positive base.
    #[error("non-integer power of non-positive base {base}")]
    PowDomain { base: f64 },
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

fn lex(input: &str) -> Result<Vec<(usize, Token)>, ParseError> {
    let bytes = input.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b' ' | b'\t' | b'\r' | b'\n' => i += 1,
            b'+' => {
                tokens.push((i, Token::Plus));
                i += 1;
            }
            b'-' => {
                tokens.push((i, Token::Minus));
                i += 1;
            }
            b'*' => {
                tokens.push((i, Token::Star));
                i += 1;
            }
            b'/' => {
                tokens.push((i, Token::Slash));
                i += 1;
            }
            b'^' => {
                tokens.push((i, Token::Caret));
                i += 1;
            }
            b'(' => {
                tokens.push((i, Token::LParen));
                i += 1;
            }
            b')' => {
                tokens.push((i, Token::RParen));
                i += 1;
            }
            b'0'..=b'9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    if i >= bytes.len() || !bytes[i].is_ascii_digit() {
                        return Err(ParseError {
                            offset: i,
                            message: "expected digit after decimal point".into(),
                        });
                    }
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j >= bytes.len() || !bytes[j].is_ascii_digit() {
                        return Err(ParseError {
                            offset: j.min(bytes.len()),
                            message: "expected digit in exponent".into(),
                        });
                    }
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                let text = &input[start..i];
                let value: f64 = text.parse().map_err(|_| ParseError {
                    offset: start,
                    message: format!("invalid number '{text}'"),
                })?;
                if !value.is_finite() {
                    return Err(ParseError {
                        offset: start,
                        message: format!("number '{text}' overflows f64"),
                    });
                }
                tokens.push((start, Token::Num(value)));
            }
            b'a'..=b'z' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_lowercase()
                        || bytes[i].is_ascii_digit()
                        || bytes[i] == b'_')
                {
                    i += 1;
                }
                tokens.push((start, Token::Ident(input[start..i].to_string())));
            }
            _ => {
                let ch = input[i..].chars().next().unwrap();
                return Err(ParseError {
                    offset: i,
                    message: format!("unexpected character '{ch}'"),
                });
            }
        }
    }
    Ok(tokens)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser<'a> {
    tokens: &'a [(usize, Token)],
    pos: usize,
    end_offset: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|(o, _)| *o)
            .unwrap_or(self.end_offset)
    }

    fn advance(&mut self) -> Option<&'a Token> {
        let t = self.tokens.get(self.pos).map(|(_, t)| t);
        self.pos += 1;
        t
    }

    fn error(&self, message: impl Into<String>) -> ParseError {
        ParseError {
            offset: self.offset(),
            message: message.into(),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.advance();
                    let rhs = self.term()?;
                    lhs = Expr::Add(Box::new(lhs), Box::new(rhs));
                }
                Some(Token::Minus) => {
                    self.advance();
                    let rhs = self.term()?;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Token::Star) => {
                    self.advance();
                    let rhs = self.unary()?;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(rhs));
                }
                Some(Token::Slash) => {
                    self.advance();
                    let rhs = self.unary()?;
                    lhs = Expr::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if let Some(Token::Minus) = self.peek() {
            self.advance();
            let inner = self.unary()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if let Some(Token::Caret) = self.peek() {
            self.advance();
            // Right-associative, and the exponent may carry a unary minus.
            let exponent = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        match self.advance() {
            Some(Token::Num(v)) => Ok(Expr::Num(*v)),
            Some(Token::Ident(name)) => {
                if let Some(Token::LParen) = self.peek() {
                    let func = Func::from_name(name).ok_or(ParseError {
                        offset,
                        message: format!("unknown function '{name}'"),
                    })?;
                    self.advance(); // '('
                    let arg = self.expr()?;
                    match self.advance() {
                        Some(Token::RParen) => Ok(Expr::Call(func, Box::new(arg))),
                        _ => Err(ParseError {
                            offset: self
                                .tokens
                                .get(self.pos - 1)
                                .map(|(o, _)| *o)
                                .unwrap_or(self.end_offset),
                            message: "expected ')'".into(),
                        }),
                    }
                } else if name == "pi" {
                    Ok(Expr::Pi)
                } else if Func::from_name(name).is_some() {
                    Err(ParseError {
                        offset,
                        message: format!("function name '{name}' used as a variable"),
                    })
                } else {
                    Ok(Expr::Var(name.clone()))
                }
            }
            Some(Token::LParen) => {
                let inner = self.expr()?;
                match self.advance() {
                    Some(Token::RParen) => Ok(inner),
                    _ => Err(ParseError {
                        offset: self
                            .tokens
                            .get(self.pos - 1)
                            .map(|(o, _)| *o)
                            .unwrap_or(self.end_offset),
                        message: "expected ')'".into(),
                    }),
                }
            }
            Some(_) => Err(ParseError {
                offset,
                message: "unexpected token".into(),
            }),
            None => Err(ParseError {
                offset: self.end_offset,
                message: "unexpected end of input".into(),
            }),
        }
    }
}

/// Parse an expression from the text grammar.
pub fn parse(input: &str) -> Result<Expr, ParseError> {
    let tokens = lex(input)?;
    let mut parser = Parser {
        tokens: &tokens,
        pos: 0,
        end_offset: input.len(),
    };
    let expr = parser.expr()?;
    if parser.pos < tokens.len() {
        return Err(parser.error("unexpected trailing input"));
    }
    Ok(expr)
}

// ---------------------------------------------------------------------------
// Display (round-trips through `parse`)
// ---------------------------------------------------------------------------

impl Expr {
    /// Operator precedence for printing. Higher binds tighter.
    fn prec(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Pow(..) => 4,
            Expr::Num(_) | Expr::Var(_) | Expr::Pi | Expr::Call(..) => 5,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        let needs_parens = self.prec() < min_prec;
        if needs_parens {
            write!(f, "(")?;
        }
        match self {
            Expr::Num(v) => write!(f, "{v}")?,
            Expr::Var(name) => write!(f, "{name}")?,
            Expr::Pi => write!(f, "pi")?,
            Expr::Neg(inner) => {
                write!(f, "-")?;
                inner.fmt_prec(f, 3)?;
            }
            Expr::Add(l, r) => {
                l.fmt_prec(f, 1)?;
                write!(f, " + ")?;
                r.fmt_prec(f, 2)?;
            }
            Expr::Sub(l, r) => {
                l.fmt_prec(f, 1)?;
                write!(f, " - ")?;
                r.fmt_prec(f, 2)?;
            }
            Expr::Mul(l, r) => {
                l.fmt_prec(f, 2)?;
                write!(f, "*")?;
                r.fmt_prec(f, 3)?;
            }
            Expr::Div(l, r) => {
                l.fmt_prec(f, 2)?;
                write!(f, "/")?;
                r.fmt_prec(f, 3)?;
            }
            Expr::Pow(l, r) => {
                l.fmt_prec(f, 5)?;
                write!(f, "^")?;
                r.fmt_prec(f, 4)?;
            }
            Expr::Call(func, arg) => {
                write!(f, "{}(", func.name())?;
                arg.fmt_prec(f, 0)?;
                write!(f, ")")?;
            }
        }
        if needs_parens {
            write!(f, ")")?;
        }
        Ok(())
    }

    /// The set of variable names the expression references (`pi` excluded).
    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut set = BTreeSet::new();
        self.collect_vars(&mut set);
        set
    }

    fn collect_vars(&self, set: &mut BTreeSet<String>) {
        match self {
            Expr::Num(_) | Expr::Pi => {}
            Expr::Var(name) => {
                set.insert(name.clone());
            }
            Expr::Neg(inner) => inner.collect_vars(set),
            Expr::Add(l, r)
            | Expr::Sub(l, r)
            | Expr::Mul(l, r)
            | Expr::Div(l, r)
            | Expr::Pow(l, r) => {
                l.collect_vars(set);
                r.collect_vars(set);
            }
            Expr::Call(_, arg) => arg.collect_vars(set),
        }
    }

    /// Resolve variable names to argument slots, producing an evaluatable
    /// [`BoundExpr`]. `vars[i]` becomes slot `i`. Fails if the expression
    /// mentions a name missing from `vars` or if `vars` has duplicates.
    pub fn bind<S: AsRef<str>>(&self, vars: &[S]) -> Result<BoundExpr, BindError> {
        for (i, a) in vars.iter().enumerate() {
            for b in &vars[i + 1..] {
                if a.as_ref() == b.as_ref() {
                    return Err(BindError::DuplicateVariable {
                        name: a.as_ref().to_string(),
                    });
                }
            }
        }
        let root = compile(self, vars)?;
        Ok(BoundExpr {
            root,
            nvars: vars.len(),
        })
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

// ---------------------------------------------------------------------------
// Bound (compiled) expressions
// ---------------------------------------------------------------------------

/// Largest literal exponent folded into exact repeated multiplication.
const MAX_FOLDED_EXPONENT: i64 = 8;

#[derive(Debug, Clone)]
enum Node {
    Const(f64),
    Slot(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    /// Exact integer power, 1 ≤ |e| ≤ 8; negative e divides once at the end.
    PowInt(Box<Node>, i32),
    /// General power via `exp(e·log b)`; requires positive base.
    Pow(Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// An expression whose variables have been resolved to argument slots.
///
/// Produced by [`Expr::bind`]; evaluate with [`BoundExpr::eval`].
#[derive(Debug, Clone)]
pub struct BoundExpr {
    root: Node,
    nvars: usize,
}

/// Extract a literal integer exponent (possibly negated) suitable for folding.
fn literal_int_exponent(e: &Expr) -> Option<i64> {
    match e {
        Expr::Num(v) => {
            if v.fract() == 0.0 && v.abs() <= MAX_FOLDED_EXPONENT as f64 {
                Some(*v as i64)
            } else {
                None
            }
        }
        Expr::Neg(inner) => literal_int_exponent(inner).map(|k| -k),
        _ => None,
    }
}

fn compile<S: AsRef<str>>(expr: &Expr, vars: &[S]) -> Result<Node, BindError> {
    Ok(match expr {
        Expr::Num(v) => Node::Const(*v),
        Expr::Pi => Node::Const(std::f64::consts::PI),
        Expr::Var(name) => {
            let slot = vars
                .iter()
                .position(|v| v.as_ref() == name)
                .ok_or_else(|| BindError::UnknownVariable { name: name.clone() })?;
            Node::Slot(slot)
        }
        Expr::Neg(inner) => Node::Neg(Box::new(compile(inner, vars)?)),
        Expr::Add(l, r) => Node::Add(Box::new(compile(l, vars)?), Box::new(compile(r, vars)?)),
        Expr::Sub(l, r) => Node::Sub(Box::new(compile(l, vars)?), Box::new(compile(r, vars)?)),
        Expr::Mul(l, r) => Node::Mul(Box::new(compile(l, vars)?), Box::new(compile(r, vars)?)),
        Expr::Div(l, r) => Node::Div(Box::new(compile(l, vars)?), Box::new(compile(r, vars)?)),
        Expr::Pow(l, r) => {
            let base = compile(l, vars)?;
            match literal_int_exponent(r) {
                Some(0) => Node::Const(1.0),
                Some(k) => Node::PowInt(Box::new(base), k as i32),
                None => Node::Pow(Box::new(base), Box::new(compile(r, vars)?)),
            }
        }
        Expr::Call(func, arg) => Node::Call(*func, Box::new(compile(arg, vars)?)),
    })
}

impl BoundExpr {
    /// Number of argument slots this expression expects.
    pub fn nvars(&self) -> usize {
        self.nvars
    }

    /// Evaluate over any [`Scalar`] type. `args.len()` must equal
    /// [`nvars`](Self::nvars).
    pub fn eval<S: Scalar>(&self, args: &[S]) -> Result<S, EvalError> {
        assert_eq!(
            args.len(),
            self.nvars,
            "bound expression expects {} arguments, got {}",
            self.nvars,
            args.len()
        );
        eval_node(&self.root, args)
    }
}

fn eval_node<S: Scalar>(node: &Node, args: &[S]) -> Result<S, EvalError> {
    Ok(match node {
        Node::Const(v) => S::from_f64(*v),
        Node::Slot(i) => args[*i].clone(),
        Node::Neg(inner) => -eval_node(inner, args)?,
        Node::Add(l, r) => eval_node(l, args)? + eval_node(r, args)?,
        Node::Sub(l, r) => eval_node(l, args)? - eval_node(r, args)?,
        Node::Mul(l, r) => eval_node(l, args)? * eval_node(r, args)?,
        Node::Div(l, r) => {
            let den = eval_node(r, args)?;
            if den.value() == 0.0 {
                return Err(EvalError::DivisionByZero);
            }
            eval_node(l, args)? / den
        }
        Node::PowInt(base, e) => {
            let b = eval_node(base, args)?;
            powi(&b, *e)?
        }
        Node::Pow(base, exponent) => {
            let b = eval_node(base, args)?;
            if b.value() <= 0.0 {
                return Err(EvalError::PowDomain { base: b.value() });
            }
            let e = eval_node(exponent, args)?;
            (e * b.ln()).exp()
        }
        Node::Call(func, arg) => {
            let x = eval_node(arg, args)?;
            match func {
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Tan => x.tan(),
                Func::Atan => x.atan(),
                Func::Sqrt => {
                    if x.value() < 0.0 {
                        return Err(EvalError::SqrtOfNegative { value: x.value() });
                    }
                    x.sqrt()
                }
                Func::Exp => x.exp(),
                Func::Log => {
                    if x.value() <= 0.0 {
                        return Err(EvalError::LogOfNonPositive { value: x.value() });
                    }
                    x.ln()
                }
                Func::Abs => x.abs(),
            }
        }
    })
}

/// Exact integer power by repeated multiplication (1 ≤ |e| ≤ 8).
pub fn powi<S: Scalar>(base: &S, e: i32) -> Result<S, EvalError> {
    debug_assert!(e != 0 && e.unsigned_abs() <= MAX_FOLDED_EXPONENT as u32);
    let mut acc = base.clone();
    for _ in 1..e.unsigned_abs() {
        acc = acc * base.clone();
    }
    if e < 0 {
        if acc.value() == 0.0 {
            return Err(EvalError::DivisionByZero);
        }
        Ok(S::from_f64(1.0) / acc)
    } else {
        Ok(acc)
    }
}

// ---------------------------------------------------------------------------
// Scalar abstraction
// ---------------------------------------------------------------------------

/// Number-like type that expressions can be evaluated over.
///
/// Implemented by `f64` and the forward-mode dual types in
/// [`crate::autodiff`]; the latter are nestable, so a single generic
/// evaluation path serves values, gradients, and higher derivatives.
pub trait Scalar:
    Clone
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Lift a plain constant (zero derivatives in dual types).
    fn from_f64(x: f64) -> Self;
    /// The underlying numeric value (innermost value for nested duals).
    fn value(&self) -> f64;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn tan(&self) -> Self;
    fn atan(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn abs(&self) -> Self;
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn value(&self) -> f64 {
        *self
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn tan(&self) -> Self {
        f64::tan(*self)
    }
    fn atan(&self) -> Self {
        f64::atan(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn abs(&self) -> Self {
        f64::abs(*self)
    }
}
