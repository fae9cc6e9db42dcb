//! Symbolic integer expressions and the per-dimension value lattice.
//!
//! Expressions are kept in a canonical sum-of-products form: a map from a
//! sorted multiset of atoms to a nonzero integer coefficient. Atoms are named
//! symbols or opaque `floor-div`/`max`/`min` nodes whose arguments are
//! themselves canonical. Two expressions are equal iff their canonical forms
//! are structurally equal, which makes `==` usable as the lattice equality.
//!
//! Every symbol is assumed to denote an integer `>= 1` (tensor dimensions are
//! positive). Sign reasoning relies on that assumption.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Symbol bindings used for evaluation.
pub type Env = BTreeMap<String, i64>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SymError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("unbound symbol `{0}`")]
    Unbound(String),
    #[error("integer overflow in symbolic arithmetic")]
    Overflow,
    #[error("cannot parse `{input}` at byte {pos}: {msg}")]
    Parse {
        input: String,
        pos: usize,
        msg: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Atom {
    Symbol(String),
    FloorDiv(Box<SymExpr>, Box<SymExpr>),
    Max(Box<SymExpr>, Box<SymExpr>),
    Min(Box<SymExpr>, Box<SymExpr>),
}

/// A canonical integer polynomial over symbols and opaque atoms.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SymExpr {
    // key: sorted atom multiset (empty for the constant term); value never 0
    terms: BTreeMap<Vec<Atom>, i64>,
}

/// Result of sign analysis under the "every symbol >= 1" assumption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sign {
    AlwaysNonnegative,
    AlwaysNonpositive,
    Indeterminate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    FloorDiv,
    Max,
    Min,
}

fn floor_div_i64(a: i64, b: i64) -> Result<i64, SymError> {
    if b == 0 {
        return Err(SymError::DivisionByZero);
    }
    let q = a.checked_div(b).ok_or(SymError::Overflow)?;
    if (a % b != 0) && ((a < 0) != (b < 0)) {
        Ok(q - 1)
    } else {
        Ok(q)
    }
}

impl SymExpr {
    pub fn zero() -> Self {
        SymExpr::default()
    }

    pub fn lit(v: i64) -> Self {
        let mut terms = BTreeMap::new();
        if v != 0 {
            terms.insert(Vec::new(), v);
        }
        SymExpr { terms }
    }

    pub fn symbol(name: impl Into<String>) -> Self {
        Self::atom(Atom::Symbol(name.into()))
    }

    fn atom(a: Atom) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(vec![a], 1);
        SymExpr { terms }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// The value of a literal-only expression.
    pub fn as_literal(&self) -> Option<i64> {
        match self.terms.len() {
            0 => Some(0),
            1 => self.terms.get(&Vec::new()).copied(),
            _ => None,
        }
    }

    /// The symbol name if this expression is exactly one symbol.
    pub fn as_symbol(&self) -> Option<&str> {
        if self.terms.len() != 1 {
            return None;
        }
        let (mono, coef) = self.terms.iter().next()?;
        match (mono.as_slice(), coef) {
            ([Atom::Symbol(s)], 1) => Some(s),
            _ => None,
        }
    }

    /// Every symbol name occurring anywhere in the expression.
    pub fn symbols(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_symbols(&mut out);
        out
    }

    fn collect_symbols(&self, out: &mut BTreeSet<String>) {
        for mono in self.terms.keys() {
            for atom in mono {
                match atom {
                    Atom::Symbol(s) => {
                        out.insert(s.clone());
                    }
                    Atom::FloorDiv(a, b) | Atom::Max(a, b) | Atom::Min(a, b) => {
                        a.collect_symbols(out);
                        b.collect_symbols(out);
                    }
                }
            }
        }
    }

    pub fn neg(&self) -> Result<Self, SymError> {
        self.scale(-1)
    }

    pub fn scale(&self, k: i64) -> Result<Self, SymError> {
        if k == 0 {
            return Ok(Self::zero());
        }
        let mut terms = BTreeMap::new();
        for (m, c) in &self.terms {
            terms.insert(m.clone(), c.checked_mul(k).ok_or(SymError::Overflow)?);
        }
        Ok(SymExpr { terms })
    }

    pub fn add(&self, other: &Self) -> Result<Self, SymError> {
        let mut terms = self.terms.clone();
        for (m, c) in &other.terms {
            let entry = terms.entry(m.clone()).or_insert(0);
            *entry = entry.checked_add(*c).ok_or(SymError::Overflow)?;
            if *entry == 0 {
                terms.remove(m);
            }
        }
        Ok(SymExpr { terms })
    }

    pub fn sub(&self, other: &Self) -> Result<Self, SymError> {
        self.add(&other.neg()?)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, SymError> {
        let mut terms: BTreeMap<Vec<Atom>, i64> = BTreeMap::new();
        for (m1, c1) in &self.terms {
            for (m2, c2) in &other.terms {
                let mut m: Vec<Atom> = m1.iter().chain(m2.iter()).cloned().collect();
                m.sort();
                let c = c1.checked_mul(*c2).ok_or(SymError::Overflow)?;
                let entry = terms.entry(m).or_insert(0);
                *entry = entry.checked_add(c).ok_or(SymError::Overflow)?;
            }
        }
        terms.retain(|_, c| *c != 0);
        Ok(SymExpr { terms })
    }

    /// Floor division. Folds literals and exact division by a single-term
    /// divisor; anything else becomes an opaque atom.
    pub fn floor_div(&self, other: &Self) -> Result<Self, SymError> {
        if other.is_zero() {
            return Err(SymError::DivisionByZero);
        }
        if let (Some(a), Some(b)) = (self.as_literal(), other.as_literal()) {
            return Ok(Self::lit(floor_div_i64(a, b)?));
        }
        if other.as_literal() == Some(1) {
            return Ok(self.clone());
        }
        if self.is_zero() {
            return Ok(Self::zero());
        }
        if let Some(q) = self.exact_div_single_term(other) {
            return Ok(q);
        }
        Ok(Self::atom(Atom::FloorDiv(
            Box::new(self.clone()),
            Box::new(other.clone()),
        )))
    }

    fn exact_div_single_term(&self, other: &Self) -> Option<Self> {
        if other.terms.len() != 1 {
            return None;
        }
        let (dm, dc) = other.terms.iter().next()?;
        let mut terms = BTreeMap::new();
        for (m, c) in &self.terms {
            if c % dc != 0 {
                return None;
            }
            let mut rest = m.clone();
            for atom in dm {
                let pos = rest.iter().position(|a| a == atom)?;
                rest.remove(pos);
            }
            terms.insert(rest, c / dc);
        }
        Some(SymExpr { terms })
    }

    pub fn maximum(&self, other: &Self) -> Result<Self, SymError> {
        self.extremum(other, true)
    }

    pub fn minimum(&self, other: &Self) -> Result<Self, SymError> {
        self.extremum(other, false)
    }

    fn extremum(&self, other: &Self, is_max: bool) -> Result<Self, SymError> {
        if let (Some(a), Some(b)) = (self.as_literal(), other.as_literal()) {
            return Ok(Self::lit(if is_max { a.max(b) } else { a.min(b) }));
        }
        if self == other {
            return Ok(self.clone());
        }
        match self.sub(other)?.compare_sign() {
            Sign::AlwaysNonnegative => {
                return Ok(if is_max { self.clone() } else { other.clone() });
            }
            Sign::AlwaysNonpositive => {
                return Ok(if is_max { other.clone() } else { self.clone() });
            }
            Sign::Indeterminate => {}
        }
        let (lo, hi) = if self <= other {
            (self.clone(), other.clone())
        } else {
            (other.clone(), self.clone())
        };
        let atom = if is_max {
            Atom::Max(Box::new(lo), Box::new(hi))
        } else {
            Atom::Min(Box::new(lo), Box::new(hi))
        };
        Ok(Self::atom(atom))
    }

    pub fn apply(op: ArithOp, a: &Self, b: &Self) -> Result<Self, SymError> {
        match op {
            ArithOp::Add => a.add(b),
            ArithOp::Sub => a.sub(b),
            ArithOp::Mul => a.mul(b),
            ArithOp::FloorDiv => a.floor_div(b),
            ArithOp::Max => a.maximum(b),
            ArithOp::Min => a.minimum(b),
        }
    }

    /// Exact integer value under `env`. Floor division rounds toward
    /// negative infinity.
    pub fn evaluate(&self, env: &Env) -> Result<i64, SymError> {
        let mut total: i64 = 0;
        for (mono, coef) in &self.terms {
            let mut v = *coef;
            for atom in mono {
                let a = atom.evaluate(env)?;
                v = v.checked_mul(a).ok_or(SymError::Overflow)?;
            }
            total = total.checked_add(v).ok_or(SymError::Overflow)?;
        }
        Ok(total)
    }

    /// Replace symbols with expressions and renormalise.
    pub fn substitute(&self, bindings: &BTreeMap<String, SymExpr>) -> Result<Self, SymError> {
        let mut out = Self::zero();
        for (mono, coef) in &self.terms {
            let mut term = Self::lit(*coef);
            for atom in mono {
                let a = match atom {
                    Atom::Symbol(s) => match bindings.get(s) {
                        Some(e) => e.clone(),
                        None => Self::symbol(s.clone()),
                    },
                    Atom::FloorDiv(a, b) => a.substitute(bindings)?.floor_div(&b.substitute(bindings)?)?,
                    Atom::Max(a, b) => SymExpr::maximum(&a.substitute(bindings)?, &b.substitute(bindings)?)?,
                    Atom::Min(a, b) => SymExpr::minimum(&a.substitute(bindings)?, &b.substitute(bindings)?)?,
                };
                term = term.mul(&a)?;
            }
            out = out.add(&term)?;
        }
        Ok(out)
    }

    /// Sound sign classification assuming every symbol is `>= 1`.
    ///
    /// Each symbol `s` is rewritten as `1 + y_s` with `y_s >= 0`; opaque atoms
    /// of known sign become fresh nonnegative variables. If the expanded
    /// polynomial has coefficients of one sign the result is decided.
    pub fn compare_sign(&self) -> Sign {
        if self.is_zero() {
            return Sign::AlwaysNonnegative;
        }
        match self.shifted_polynomial() {
            Some(poly) => {
                let nonneg = poly.values().all(|c| *c >= 0);
                let nonpos = poly.values().all(|c| *c <= 0);
                if nonneg {
                    Sign::AlwaysNonnegative
                } else if nonpos {
                    Sign::AlwaysNonpositive
                } else {
                    Sign::Indeterminate
                }
            }
            None => Sign::Indeterminate,
        }
    }

    fn shifted_polynomial(&self) -> Option<BTreeMap<Vec<usize>, i128>> {
        const TERM_LIMIT: usize = 4096;
        // variable ids: shifted symbols and sign-normalised opaque atoms
        let mut var_ids: BTreeMap<Atom, usize> = BTreeMap::new();
        let mut poly: BTreeMap<Vec<usize>, i128> = BTreeMap::new();
        for (mono, coef) in &self.terms {
            let mut partial: BTreeMap<Vec<usize>, i128> = BTreeMap::new();
            partial.insert(Vec::new(), *coef as i128);
            for atom in mono {
                let next_id = var_ids.len();
                let id = *var_ids.entry(atom.clone()).or_insert(next_id);
                let factor: Vec<(Option<usize>, i128)> = match atom {
                    Atom::Symbol(_) => vec![(None, 1), (Some(id), 1)],
                    other => match other.sign() {
                        Sign::AlwaysNonnegative => vec![(Some(id), 1)],
                        Sign::AlwaysNonpositive => vec![(Some(id), -1)],
                        Sign::Indeterminate => return None,
                    },
                };
                let mut next: BTreeMap<Vec<usize>, i128> = BTreeMap::new();
                for (m, c) in &partial {
                    for (v, k) in &factor {
                        let mut nm = m.clone();
                        if let Some(v) = v {
                            nm.push(*v);
                            nm.sort_unstable();
                        }
                        *next.entry(nm).or_insert(0) += c.checked_mul(*k)?;
                    }
                }
                if next.len() > TERM_LIMIT {
                    return None;
                }
                partial = next;
            }
            for (m, c) in partial {
                *poly.entry(m).or_insert(0) += c;
            }
            if poly.len() > TERM_LIMIT {
                return None;
            }
        }
        poly.retain(|_, c| *c != 0);
        Some(poly)
    }

    fn render_term(mono: &[Atom], coef: i64) -> String {
        let mut factors: Vec<String> = Vec::new();
        if coef != 1 || mono.is_empty() {
            factors.push(coef.to_string());
        }
        factors.extend(mono.iter().map(|a| a.to_string()));
        let mut it = factors.into_iter();
        let first = it.next().unwrap_or_default();
        it.fold(first, |acc, f| format!("({acc}*{f})"))
    }

    /// Parse the infix grammar used by graph files and reports.
    pub fn parse(input: &str) -> Result<Self, SymError> {
        let mut p = Parser {
            src: input,
            pos: 0,
        };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != input.len() {
            return Err(p.error("trailing input"));
        }
        Ok(e)
    }
}

impl Atom {
    fn evaluate(&self, env: &Env) -> Result<i64, SymError> {
        match self {
            Atom::Symbol(s) => env.get(s).copied().ok_or_else(|| SymError::Unbound(s.clone())),
            Atom::FloorDiv(a, b) => floor_div_i64(a.evaluate(env)?, b.evaluate(env)?),
            Atom::Max(a, b) => Ok(a.evaluate(env)?.max(b.evaluate(env)?)),
            Atom::Min(a, b) => Ok(a.evaluate(env)?.min(b.evaluate(env)?)),
        }
    }

    fn sign(&self) -> Sign {
        use Sign::*;
        match self {
            Atom::Symbol(_) => AlwaysNonnegative,
            Atom::FloorDiv(a, b) => match (a.compare_sign(), b.compare_sign()) {
                (AlwaysNonnegative, AlwaysNonnegative) => AlwaysNonnegative,
                (AlwaysNonpositive, AlwaysNonnegative) => AlwaysNonpositive,
                _ => Indeterminate,
            },
            Atom::Max(a, b) => match (a.compare_sign(), b.compare_sign()) {
                (AlwaysNonnegative, _) | (_, AlwaysNonnegative) => AlwaysNonnegative,
                (AlwaysNonpositive, AlwaysNonpositive) => AlwaysNonpositive,
                _ => Indeterminate,
            },
            Atom::Min(a, b) => match (a.compare_sign(), b.compare_sign()) {
                (AlwaysNonpositive, _) | (_, AlwaysNonpositive) => AlwaysNonpositive,
                (AlwaysNonnegative, AlwaysNonnegative) => AlwaysNonnegative,
                _ => Indeterminate,
            },
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Symbol(s) => write!(f, "{s}"),
            Atom::FloorDiv(a, b) => write!(f, "({a}//{b})"),
            Atom::Max(a, b) => write!(f, "max({a},{b})"),
            Atom::Min(a, b) => write!(f, "min({a},{b})"),
        }
    }
}

impl fmt::Display for SymExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        // non-constant terms first, constant last
        let ordered = self
            .terms
            .iter()
            .filter(|(m, _)| !m.is_empty())
            .chain(self.terms.iter().filter(|(m, _)| m.is_empty()));
        let mut acc: Option<String> = None;
        for (mono, coef) in ordered {
            let body = Self::render_term(mono, coef.abs());
            acc = Some(match (acc, *coef < 0) {
                (None, false) => body,
                (None, true) => format!("(0-{body})"),
                (Some(a), false) => format!("({a}+{body})"),
                (Some(a), true) => format!("({a}-{body})"),
            });
        }
        write!(f, "{}", acc.unwrap_or_default())
    }
}

impl Serialize for SymExpr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SymExpr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        SymExpr::parse(&s).map_err(serde::de::Error::custom)
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn error(&self, msg: &str) -> SymError {
        SymError::Parse {
            input: self.src.to_string(),
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, tok: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(tok) {
            self.pos += tok.len();
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<SymExpr, SymError> {
        let mut acc = self.term()?;
        loop {
            if self.eat("+") {
                acc = acc.add(&self.term()?)?;
            } else if self.eat("-") {
                acc = acc.sub(&self.term()?)?;
            } else {
                return Ok(acc);
            }
        }
    }

    fn term(&mut self) -> Result<SymExpr, SymError> {
        let mut acc = self.factor()?;
        loop {
            if self.eat("//") {
                acc = acc.floor_div(&self.factor()?)?;
            } else if self.eat("*") {
                acc = acc.mul(&self.factor()?)?;
            } else {
                return Ok(acc);
            }
        }
    }

    fn factor(&mut self) -> Result<SymExpr, SymError> {
        self.skip_ws();
        if self.eat("(") {
            let e = self.expr()?;
            if !self.eat(")") {
                return Err(self.error("expected `)`"));
            }
            return Ok(e);
        }
        if self.eat("-") {
            return self.factor()?.neg();
        }
        match self.peek() {
            Some(c) if c.is_ascii_digit() => {
                let start = self.pos;
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
                let v: i64 = self.src[start..self.pos]
                    .parse()
                    .map_err(|_| self.error("integer literal out of range"))?;
                Ok(SymExpr::lit(v))
            }
            Some(c) if is_ident_start(c) => {
                let start = self.pos;
                while self.peek().is_some_and(is_ident_char) {
                    self.pos += 1;
                }
                let name = &self.src[start..self.pos];
                if (name == "max" || name == "min") && self.eat("(") {
                    let a = self.expr()?;
                    if !self.eat(",") {
                        return Err(self.error("expected `,`"));
                    }
                    let b = self.expr()?;
                    if !self.eat(")") {
                        return Err(self.error("expected `)`"));
                    }
                    return if name == "max" { SymExpr::maximum(&a, &b) } else { SymExpr::minimum(&a, &b) };
                }
                Ok(SymExpr::symbol(name))
            }
            _ => Err(self.error("expected expression")),
        }
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '$'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '$' || c == '.'
}

/// One lattice element: `Undef` is top, `Nac` is bottom.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DimValue {
    Undef,
    Known(i64),
    Sym(SymExpr),
    Nac,
}

impl DimValue {
    /// Wrap an expression, folding literal-only expressions to `Known`.
    pub fn from_expr(e: SymExpr) -> Self {
        match e.as_literal() {
            Some(v) => DimValue::Known(v),
            None => DimValue::Sym(e),
        }
    }

    pub fn symbol(name: impl Into<String>) -> Self {
        DimValue::Sym(SymExpr::symbol(name))
    }

    /// The expression form of a `Known` or `Sym` value.
    pub fn as_expr(&self) -> Option<SymExpr> {
        match self {
            DimValue::Known(v) => Some(SymExpr::lit(*v)),
            DimValue::Sym(e) => Some(e.clone()),
            _ => None,
        }
    }

    pub fn as_known(&self) -> Option<i64> {
        match self {
            DimValue::Known(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_undef(&self) -> bool {
        matches!(self, DimValue::Undef)
    }

    pub fn is_nac(&self) -> bool {
        matches!(self, DimValue::Nac)
    }

    /// `Known` or `Sym`.
    pub fn is_resolved(&self) -> bool {
        matches!(self, DimValue::Known(_) | DimValue::Sym(_))
    }

    /// Height in the lattice: 2 for top, 0 for bottom.
    pub fn height(&self) -> u32 {
        match self {
            DimValue::Undef => 2,
            DimValue::Known(_) | DimValue::Sym(_) => 1,
            DimValue::Nac => 0,
        }
    }

    pub fn meet(&self, other: &Self) -> Self {
        match (self, other) {
            (DimValue::Undef, x) | (x, DimValue::Undef) => x.clone(),
            (DimValue::Nac, _) | (_, DimValue::Nac) => DimValue::Nac,
            (a, b) if a == b => a.clone(),
            _ => DimValue::Nac,
        }
    }

    /// Lattice order: `self <= other`.
    pub fn le(&self, other: &Self) -> bool {
        self.meet(other) == *self
    }

    /// Arithmetic lifted to the lattice. `Nac` dominates `Undef`.
    pub fn apply(op: ArithOp, a: &Self, b: &Self) -> Result<Self, SymError> {
        if a.is_nac() || b.is_nac() {
            return Ok(DimValue::Nac);
        }
        if a.is_undef() || b.is_undef() {
            return Ok(DimValue::Undef);
        }
        let (ea, eb) = (a.as_expr().unwrap_or_default(), b.as_expr().unwrap_or_default());
        Ok(DimValue::from_expr(SymExpr::apply(op, &ea, &eb)?))
    }

    /// Concrete value under `env`; `None` for `Undef`/`Nac`.
    pub fn evaluate(&self, env: &Env) -> Result<Option<i64>, SymError> {
        match self {
            DimValue::Known(v) => Ok(Some(*v)),
            DimValue::Sym(e) => e.evaluate(env).map(Some),
            _ => Ok(None),
        }
    }

    pub fn symbols(&self) -> BTreeSet<String> {
        match self {
            DimValue::Sym(e) => e.symbols(),
            _ => BTreeSet::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, SymError> {
        match text.trim() {
            "undef" => Ok(DimValue::Undef),
            "nac" => Ok(DimValue::Nac),
            t => SymExpr::parse(t).map(DimValue::from_expr),
        }
    }
}

impl From<i64> for DimValue {
    fn from(v: i64) -> Self {
        DimValue::Known(v)
    }
}

impl fmt::Display for DimValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DimValue::Undef => write!(f, "undef"),
            DimValue::Known(v) => write!(f, "{v}"),
            DimValue::Sym(e) => write!(f, "{e}"),
            DimValue::Nac => write!(f, "nac"),
        }
    }
}

impl Serialize for DimValue {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for DimValue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        DimValue::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "kebab-case")]
pub enum SymbolRole {
    Input,
    /// Element `index` of the value produced at `output` of `node`.
    Generated {
        node: String,
        output: usize,
        index: usize,
    },
}

/// Symbol namespace for one analysis.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolTable {
    symbols: BTreeMap<String, SymbolRole>,
    #[serde(skip)]
    next_fresh: u64,
}

impl SymbolTable {
    pub fn with_inputs<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut t = SymbolTable::default();
        for n in names {
            t.symbols.insert(n.into(), SymbolRole::Input);
        }
        t
    }

    pub fn contains(&self, name: &str) -> bool {
        self.symbols.contains_key(name)
    }

    pub fn role(&self, name: &str) -> Option<&SymbolRole> {
        self.symbols.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &SymbolRole)> {
        self.symbols.iter()
    }

    /// Deterministic name for element `index` of a node's value,
    /// `$<node>_<index>`.
    pub fn generated(&mut self, node: &str, output: usize, index: usize) -> String {
        let clean: String = node
            .chars()
            .map(|c| if is_ident_char(c) && c != '.' { c } else { '_' })
            .collect();
        let name = if output == 0 {
            format!("${clean}_{index}")
        } else {
            format!("${clean}.{output}_{index}")
        };
        self.symbols.entry(name.clone()).or_insert(SymbolRole::Generated {
            node: node.to_string(),
            output,
            index,
        });
        name
    }

    /// A name that collides with nothing declared so far.
    pub fn fresh(&mut self, hint: &str) -> String {
        loop {
            let name = format!("${hint}#{}", self.next_fresh);
            self.next_fresh += 1;
            if !self.symbols.contains_key(&name) {
                self.symbols.insert(
                    name.clone(),
                    SymbolRole::Generated {
                        node: hint.to_string(),
                        output: 0,
                        index: self.next_fresh as usize - 1,
                    },
                );
                return name;
            }
        }
    }
}
