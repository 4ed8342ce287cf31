//! Design matrices for linear predictors.
//!
//! A formula is a list of terms (intercept, linear, polynomial, cubic or cyclic
//! P-spline, random intercept). Assembling it against a covariate table gives
//! the fixed-effect matrix `X`, the random-effect matrix `R` and one penalty
//! block per penalized term. The term encoders keep everything needed to
//! rebuild rows for new covariate values (knots, centering, factor levels).
//!
//! Formula grammar (whitespace insensitive):
//!
//! ```text
//! formula := term ("+" term)*
//! term    := "intercept" | "1" | "0" | cov | "linear(" cov ")" | "poly(" cov "," int ")"
//!          | "spline(" cov ["," "k=" int] ")" | "cyclic(" cov ["," "k=" int] "," "period=" num ")"
//!          | "re(" cov ")" | "state" int "(" term ")"
//! cov     := ident | "lag(" ident ["," int] ")"
//! ```
//!
//! The intercept is implicit unless `0` appears.

use std::fmt;
use std::ops::Range;

use indexmap::IndexMap;
use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::{Column, Dataset};
use crate::error::{Error, Result};

/// Default spline basis dimension.
pub const DEFAULT_K: usize = 10;

/// Relative size of the ridge added to spline penalties.
pub const SHRINKAGE: f64 = 1e-4;

/// A covariate reference, optionally lagged within each series.
#[derive(Debug, Clone, PartialEq)]
pub struct CovRef {
    pub name: String,
    pub lag: usize,
}

impl CovRef {
    pub fn new(name: &str) -> Self {
        CovRef { name: name.to_string(), lag: 0 }
    }

    pub fn lagged(name: &str, lag: usize) -> Self {
        CovRef { name: name.to_string(), lag }
    }
}

impl fmt::Display for CovRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.lag {
            0 => write!(f, "{}", self.name),
            1 => write!(f, "lag({})", self.name),
            n => write!(f, "lag({}, {n})", self.name),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TermKind {
    Intercept,
    Linear(CovRef),
    Poly(CovRef, usize),
    Spline { cov: CovRef, k: usize },
    Cyclic { cov: CovRef, k: usize, period: f64 },
    RandomIntercept(CovRef),
}

/// One formula term, optionally restricted to a single state (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub kind: TermKind,
    pub state: Option<usize>,
}

impl Term {
    pub fn new(kind: TermKind) -> Self {
        Term { kind, state: None }
    }

    pub fn is_random(&self) -> bool {
        matches!(
            self.kind,
            TermKind::Spline { .. } | TermKind::Cyclic { .. } | TermKind::RandomIntercept(_)
        )
    }

    pub fn covariate(&self) -> Option<&CovRef> {
        match &self.kind {
            TermKind::Intercept => None,
            TermKind::Linear(c) | TermKind::Poly(c, _) | TermKind::RandomIntercept(c) => Some(c),
            TermKind::Spline { cov, .. } | TermKind::Cyclic { cov, .. } => Some(cov),
        }
    }

    /// Label used in parameter names, e.g. `s(x)` for penalized terms.
    pub fn label(&self) -> String {
        match &self.kind {
            TermKind::Intercept => "(Intercept)".into(),
            TermKind::Linear(c) => c.to_string(),
            TermKind::Poly(c, d) => format!("poly({c},{d})"),
            TermKind::Spline { cov, .. } | TermKind::Cyclic { cov, .. } | TermKind::RandomIntercept(cov) => {
                format!("s({cov})")
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match &self.kind {
            TermKind::Poly(_, d) if *d < 1 => Err(Error::Design("poly degree must be at least 1".into())),
            TermKind::Spline { k, .. } | TermKind::Cyclic { k, .. } if *k < 3 => {
                Err(Error::Design(format!("spline basis dimension k must be at least 3, got {k}")))
            }
            TermKind::Cyclic { period, .. } if !(period.is_finite() && *period > 0.0) => {
                Err(Error::Design(format!("cyclic period must be positive, got {period}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(s) = self.state {
            write!(f, "state{}(", s + 1)?;
        }
        match &self.kind {
            TermKind::Intercept => write!(f, "intercept")?,
            TermKind::Linear(c) => write!(f, "linear({c})")?,
            TermKind::Poly(c, d) => write!(f, "poly({c}, {d})")?,
            TermKind::Spline { cov, k } => write!(f, "spline({cov}, k={k})")?,
            TermKind::Cyclic { cov, k, period } => write!(f, "cyclic({cov}, k={k}, period={period})")?,
            TermKind::RandomIntercept(c) => write!(f, "re({c})")?,
        }
        if self.state.is_some() {
            write!(f, ")")?;
        }
        Ok(())
    }
}

/// An ordered term list for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Formula {
    pub terms: Vec<Term>,
}

impl Formula {
    pub fn intercept_only() -> Self {
        Formula { terms: vec![Term::new(TermKind::Intercept)] }
    }

    pub fn new(terms: Vec<Term>) -> Result<Self> {
        let f = Formula { terms };
        f.validate()?;
        Ok(f)
    }

    pub fn parse(s: &str) -> Result<Self> {
        Parser::new(s)?.formula()
    }

    pub fn has_intercept(&self) -> bool {
        self.terms.iter().any(|t| t.kind == TermKind::Intercept)
    }

    pub fn has_random(&self) -> bool {
        self.terms.iter().any(Term::is_random)
    }

    /// Terms that apply to state `state` (unscoped terms apply to every state).
    pub fn for_state(&self, state: usize) -> Formula {
        Formula {
            terms: self
                .terms
                .iter()
                .filter(|t| t.state.is_none_or(|s| s == state))
                .map(|t| Term { kind: t.kind.clone(), state: None })
                .collect(),
        }
    }

    /// Highest state index referenced by a scoped term.
    pub fn max_state(&self) -> Option<usize> {
        self.terms.iter().filter_map(|t| t.state).max()
    }

    pub fn covariates(&self) -> Vec<&CovRef> {
        self.terms.iter().filter_map(Term::covariate).collect()
    }

    fn validate(&self) -> Result<()> {
        let n_int = self.terms.iter().filter(|t| t.kind == TermKind::Intercept).count();
        if n_int > 1 {
            return Err(Error::Design("duplicate intercept".into()));
        }
        for (i, t) in self.terms.iter().enumerate() {
            t.validate()?;
            if t.kind == TermKind::Intercept && t.state.is_some() {
                return Err(Error::Design("the intercept cannot be restricted to one state".into()));
            }
            for u in &self.terms[..i] {
                if u.state == t.state && u.label() == t.label() {
                    return Err(Error::Design(format!("duplicate term '{t}'")));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        if self.has_intercept() {
            parts.push("intercept".into());
        } else {
            parts.push("0".into());
        }
        parts.extend(self.terms.iter().filter(|t| t.kind != TermKind::Intercept).map(|t| t.to_string()));
        f.write_str(&parts.join(" + "))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(String),
    LParen,
    RParen,
    Comma,
    Eq,
    Plus,
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
    src: String,
}

impl Parser {
    fn new(s: &str) -> Result<Self> {
        let mut toks = Vec::new();
        let chars: Vec<char> = s.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            match c {
                c if c.is_whitespace() => i += 1,
                '(' => {
                    toks.push(Tok::LParen);
                    i += 1
                }
                ')' => {
                    toks.push(Tok::RParen);
                    i += 1
                }
                ',' => {
                    toks.push(Tok::Comma);
                    i += 1
                }
                '=' => {
                    toks.push(Tok::Eq);
                    i += 1
                }
                '+' => {
                    toks.push(Tok::Plus);
                    i += 1
                }
                c if c.is_ascii_digit() || c == '.' || c == '-' => {
                    let start = i;
                    i += 1;
                    while i < chars.len()
                        && (chars[i].is_ascii_alphanumeric() || chars[i] == '.' || ((chars[i] == '-' || chars[i] == '+') && matches!(chars[i - 1], 'e' | 'E')))
                    {
                        i += 1;
                    }
                    toks.push(Tok::Num(chars[start..i].iter().collect()));
                }
                c if c.is_alphabetic() || c == '_' => {
                    let start = i;
                    while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                        i += 1;
                    }
                    toks.push(Tok::Ident(chars[start..i].iter().collect()));
                }
                other => return Err(Error::Spec(format!("unexpected character '{other}' in formula '{s}'"))),
            }
        }
        Ok(Parser { toks, pos: 0, src: s.to_string() })
    }

    fn err(&self, msg: &str) -> Error {
        Error::Spec(format!("{msg} in formula '{}'", self.src))
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, t: Tok) -> Result<()> {
        match self.next() {
            Some(ref got) if *got == t => Ok(()),
            _ => Err(self.err(&format!("expected {t:?}"))),
        }
    }

    fn formula(&mut self) -> Result<Formula> {
        let mut terms = Vec::new();
        let mut intercept = true;
        let mut explicit_intercept = 0;
        if self.peek().is_none() {
            return Err(self.err("empty formula"));
        }
        loop {
            match self.term()? {
                None => intercept = false,
                Some(t) if t.kind == TermKind::Intercept => explicit_intercept += 1,
                Some(t) => terms.push(t),
            }
            match self.next() {
                None => break,
                Some(Tok::Plus) => continue,
                Some(_) => return Err(self.err("expected '+'")),
            }
        }
        if explicit_intercept > 1 {
            return Err(Error::Design("duplicate intercept".into()));
        }
        if explicit_intercept > 0 && !intercept {
            return Err(self.err("formula both adds and removes the intercept"));
        }
        if intercept {
            terms.insert(0, Term::new(TermKind::Intercept));
        }
        Formula::new(terms)
    }

    /// `None` stands for the `0` (no intercept) marker.
    fn term(&mut self) -> Result<Option<Term>> {
        match self.next() {
            Some(Tok::Num(n)) if n == "1" => Ok(Some(Term::new(TermKind::Intercept))),
            Some(Tok::Num(n)) if n == "0" => Ok(None),
            Some(Tok::Ident(name)) => {
                if self.peek() != Some(&Tok::LParen) {
                    if name == "intercept" {
                        return Ok(Some(Term::new(TermKind::Intercept)));
                    }
                    return Ok(Some(Term::new(TermKind::Linear(CovRef::new(&name)))));
                }
                self.expect(Tok::LParen)?;
                let term = if let Some(idx) = name.strip_prefix("state").and_then(|s| s.parse::<usize>().ok()) {
                    if idx == 0 {
                        return Err(self.err("states are numbered from 1"));
                    }
                    let inner = self.term()?.ok_or_else(|| self.err("state scoping needs a term"))?;
                    if inner.state.is_some() {
                        return Err(self.err("nested state scoping"));
                    }
                    Term { kind: inner.kind, state: Some(idx - 1) }
                } else {
                    match name.as_str() {
                        "linear" => Term::new(TermKind::Linear(self.cov()?)),
                        "lag" => {
                            self.pos -= 2;
                            Term::new(TermKind::Linear(self.cov()?))
                        }
                        "poly" => {
                            let cov = self.cov()?;
                            self.expect(Tok::Comma)?;
                            let d = self.int()?;
                            Term::new(TermKind::Poly(cov, d))
                        }
                        "re" => Term::new(TermKind::RandomIntercept(self.cov()?)),
                        "spline" | "cyclic" => {
                            let cov = self.cov()?;
                            let mut k = DEFAULT_K;
                            let mut period = None;
                            while self.peek() == Some(&Tok::Comma) {
                                self.next();
                                let key = match self.next() {
                                    Some(Tok::Ident(key)) => key,
                                    _ => return Err(self.err("expected an option name")),
                                };
                                self.expect(Tok::Eq)?;
                                match key.as_str() {
                                    "k" => k = self.int()?,
                                    "period" if name == "cyclic" => period = Some(self.num()?),
                                    other => return Err(self.err(&format!("unknown option '{other}'"))),
                                }
                            }
                            if name == "spline" {
                                Term::new(TermKind::Spline { cov, k })
                            } else {
                                let period = period.ok_or_else(|| self.err("cyclic() needs period="))?;
                                Term::new(TermKind::Cyclic { cov, k, period })
                            }
                        }
                        other => return Err(self.err(&format!("unknown term '{other}'"))),
                    }
                };
                if name != "lag" {
                    self.expect(Tok::RParen)?;
                }
                Ok(Some(term))
            }
            _ => Err(self.err("expected a term")),
        }
    }

    fn cov(&mut self) -> Result<CovRef> {
        match self.next() {
            Some(Tok::Ident(name)) if name == "lag" && self.peek() == Some(&Tok::LParen) => {
                self.next();
                let inner = match self.next() {
                    Some(Tok::Ident(n)) => n,
                    _ => return Err(self.err("lag() needs a variable name")),
                };
                let mut lag = 1;
                if self.peek() == Some(&Tok::Comma) {
                    self.next();
                    lag = self.int()?;
                    if lag == 0 {
                        return Err(self.err("lag must be at least 1"));
                    }
                }
                self.expect(Tok::RParen)?;
                Ok(CovRef::lagged(&inner, lag))
            }
            Some(Tok::Ident(name)) => Ok(CovRef::new(&name)),
            _ => Err(self.err("expected a covariate name")),
        }
    }

    fn int(&mut self) -> Result<usize> {
        match self.next() {
            Some(Tok::Num(n)) => n.parse().map_err(|_| self.err(&format!("'{n}' is not a whole number"))),
            _ => Err(self.err("expected a number")),
        }
    }

    fn num(&mut self) -> Result<f64> {
        match self.next() {
            Some(Tok::Num(n)) => n.parse().map_err(|_| self.err(&format!("'{n}' is not a number"))),
            _ => Err(self.err("expected a number")),
        }
    }
}

// ---------------------------------------------------------------------------
// Covariate access

/// Columns a design reads, resolved from a dataset. Responses are included so
/// lagged terms can refer to them; the simulator updates them row by row.
#[derive(Debug, Clone)]
pub struct CovTable {
    n: usize,
    series_start: Vec<usize>,
    columns: IndexMap<String, Column>,
    responses: Vec<String>,
}

impl CovTable {
    pub fn from_dataset(d: &Dataset) -> Self {
        let n = d.n_rows();
        let mut series_start = vec![0; n];
        for r in d.series_ranges() {
            for row in r.clone() {
                series_start[row] = r.start;
            }
        }
        let mut columns: IndexMap<String, Column> = d.covariates().clone();
        if !columns.contains_key(crate::data::ID_COLUMN) {
            if let Ok(c) = d.covariate(crate::data::ID_COLUMN) {
                columns.insert(crate::data::ID_COLUMN.to_string(), c);
            }
        }
        let mut responses = Vec::new();
        for (name, v) in d.responses() {
            columns.insert(name.clone(), Column::Numeric(v.clone()));
            responses.push(name.clone());
        }
        CovTable { n, series_start, columns, responses }
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn is_response(&self, name: &str) -> bool {
        self.responses.iter().any(|r| r == name)
    }

    /// Overwrite one numeric cell (used when simulating autoregressive models).
    pub fn set(&mut self, name: &str, row: usize, value: Option<f64>) {
        if let Some(Column::Numeric(v)) = self.columns.get_mut(name) {
            v[row] = value;
        }
    }

    fn column(&self, cov: &CovRef) -> Result<&Column> {
        if cov.lag == 0 && self.is_response(&cov.name) {
            return Err(Error::Design(format!(
                "response '{}' can only enter a formula lagged, as lag({})",
                cov.name, cov.name
            )));
        }
        self.columns
            .get(&cov.name)
            .ok_or_else(|| Error::Design(format!("unknown covariate '{}'", cov.name)))
    }

    fn lag_row(&self, cov: &CovRef, row: usize) -> Option<usize> {
        if row < self.series_start[row] + cov.lag {
            None
        } else {
            Some(row - cov.lag)
        }
    }

    /// Numeric value of `cov` at `row`. Lagged values before the start of a
    /// series, or pointing at a missing cell, are 0.
    pub fn numeric(&self, cov: &CovRef, row: usize) -> Result<f64> {
        match self.column(cov)? {
            Column::Numeric(v) => {
                if cov.lag == 0 {
                    v[row].ok_or_else(|| {
                        Error::Design(format!("covariate '{}' is missing at data row {}", cov.name, row + 1))
                    })
                } else {
                    Ok(self.lag_row(cov, row).and_then(|r| v[r]).unwrap_or(0.0))
                }
            }
            Column::Categorical { .. } => Err(Error::Design(format!(
                "covariate '{}' is categorical but used as numeric",
                cov.name
            ))),
        }
    }

    /// Level name of a categorical `cov` at `row`.
    pub fn level(&self, cov: &CovRef, row: usize) -> Result<&str> {
        match self.column(cov)? {
            Column::Categorical { levels, codes } => {
                let r = if cov.lag == 0 { Some(row) } else { self.lag_row(cov, row) };
                let code = r.and_then(|r| codes[r]).ok_or_else(|| {
                    Error::Design(format!("covariate '{}' has no value at data row {}", cov.name, row + 1))
                })?;
                Ok(&levels[code])
            }
            Column::Numeric(_) => Err(Error::Design(format!("covariate '{}' is not categorical", cov.name))),
        }
    }

    pub fn is_categorical(&self, cov: &CovRef) -> Result<bool> {
        Ok(matches!(self.column(cov)?, Column::Categorical { .. }))
    }

    /// Sorted level names present in a categorical column.
    fn levels(&self, cov: &CovRef) -> Result<Vec<String>> {
        match self.column(cov)? {
            Column::Categorical { levels, .. } => Ok(levels.clone()),
            Column::Numeric(_) => Err(Error::Design(format!(
                "random effect covariate '{}' must be declared categorical",
                cov.name
            ))),
        }
    }

    fn numeric_column(&self, cov: &CovRef) -> Result<Vec<f64>> {
        (0..self.n).map(|r| self.numeric(cov, r)).collect()
    }
}

// ---------------------------------------------------------------------------
// Spline bases

/// A P-spline basis: cubic B-splines on quantile knots, or periodic cubic
/// B-splines on equally spaced knots, with the second-difference penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    /// Number of basis functions before centering.
    pub k: usize,
    pub cyclic: bool,
    pub period: Option<f64>,
    /// Full knot vector (non-cyclic) or the knot spacing grid (cyclic).
    pub knots: Vec<f64>,
    pub order: usize,
    /// Column means removed when centering; the last column is then dropped.
    pub center: Option<Vec<f64>>,
    penalty: DMatrix<f64>,
}

impl SplineBasis {
    /// Build a basis for covariate values `x`. With `center`, columns are
    /// centered over `x` and the last one dropped.
    pub fn new(x: &[f64], k: usize, cyclic: bool, period: Option<f64>, center: bool) -> Result<Self> {
        if k < 3 {
            return Err(Error::Design(format!("spline basis dimension k must be at least 3, got {k}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Design("spline covariate has non-finite values".into()));
        }
        let mut uniq: Vec<f64> = x.to_vec();
        uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
        uniq.dedup();
        if uniq.len() < k {
            return Err(Error::Design(format!(
                "spline with k = {k} needs at least {k} distinct covariate values, found {}",
                uniq.len()
            )));
        }
        let (knots, order, d) = if cyclic {
            let p = period.ok_or_else(|| Error::Design("cyclic spline needs a period".into()))?;
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::Design(format!("cyclic period must be positive, got {p}")));
            }
            let h = p / k as f64;
            let knots = (0..=k).map(|i| i as f64 * h).collect();
            let mut d = DMatrix::zeros(k, k);
            for i in 0..k {
                d[(i, (i + k - 1) % k)] += 1.0;
                d[(i, i)] -= 2.0;
                d[(i, (i + 1) % k)] += 1.0;
            }
            (knots, 4, d)
        } else {
            let order = k.min(4);
            let n_int = k - order;
            let lo = uniq[0];
            let hi = *uniq.last().unwrap();
            let mut knots = vec![lo; order];
            for j in 1..=n_int {
                knots.push(crate::util::quantile_sorted(&uniq, j as f64 / (n_int + 1) as f64));
            }
            knots.extend(std::iter::repeat_n(hi, order));
            let mut d = DMatrix::zeros(k - 2, k);
            for i in 0..k - 2 {
                d[(i, i)] = 1.0;
                d[(i, i + 1)] = -2.0;
                d[(i, i + 2)] = 1.0;
            }
            (knots, order, d)
        };
        let mut basis = SplineBasis {
            k,
            cyclic,
            period: if cyclic { period } else { None },
            knots,
            order,
            center: None,
            penalty: DMatrix::zeros(0, 0),
        };
        let full_pen = d.transpose() * &d;
        let pen = if center {
            let mut means = vec![0.0; k];
            for &xi in x {
                for (m, b) in means.iter_mut().zip(basis.raw(xi)) {
                    *m += b;
                }
            }
            for m in &mut means {
                *m /= x.len() as f64;
            }
            basis.center = Some(means);
            full_pen.view((0, 0), (k - 1, k - 1)).into_owned()
        } else {
            full_pen
        };
        basis.penalty = add_shrinkage(pen);
        Ok(basis)
    }

    /// Number of design columns.
    pub fn n_cols(&self) -> usize {
        if self.center.is_some() {
            self.k - 1
        } else {
            self.k
        }
    }

    /// Penalty matrix matching [`SplineBasis::n_cols`], shrinkage included.
    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.penalty
    }

    /// Lower and upper end of the fitted range (non-cyclic).
    pub fn range(&self) -> (f64, f64) {
        (self.knots[0], *self.knots.last().unwrap())
    }

    /// Whether `x` lies outside the knot range and would be extrapolated.
    pub fn is_outside(&self, x: f64) -> bool {
        if self.cyclic {
            return false;
        }
        let (lo, hi) = self.range();
        x < lo || x > hi
    }

    /// Uncentered basis values (length `k`).
    fn raw(&self, x: f64) -> Vec<f64> {
        if self.cyclic {
            return cyclic_basis(x, self.k, self.period.unwrap());
        }
        let (lo, hi) = self.range();
        if x < lo || x > hi {
            // linear extrapolation from the nearest boundary
            let b = if x < lo { lo } else { hi };
            let v = bspline_values(&self.knots, self.order, b);
            let dv = bspline_derivs(&self.knots, self.order, b);
            return v.iter().zip(&dv).map(|(v, d)| v + d * (x - b)).collect();
        }
        bspline_values(&self.knots, self.order, x)
    }

    /// Design row for one covariate value.
    pub fn row(&self, x: f64) -> Vec<f64> {
        let mut v = self.raw(x);
        if let Some(m) = &self.center {
            for (vi, mi) in v.iter_mut().zip(m) {
                *vi -= mi;
            }
            v.pop();
        }
        v
    }

    /// Design matrix for covariate values `x`.
    pub fn design(&self, x: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.len(), self.n_cols());
        for (i, &xi) in x.iter().enumerate() {
            for (j, v) in self.row(xi).into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }
}

fn add_shrinkage(mut s: DMatrix<f64>) -> DMatrix<f64> {
    let max_eig = SymmetricEigen::new(s.clone()).eigenvalues.max();
    let eps = SHRINKAGE * max_eig.max(f64::MIN_POSITIVE);
    for i in 0..s.nrows() {
        s[(i, i)] += eps;
    }
    s
}

/// Cox-de Boor table: values of all order-`order` B-splines on `knots` at `x`.
fn bspline_table(knots: &[f64], order: usize, x: f64) -> Vec<Vec<f64>> {
    let m = knots.len();
    let lo = knots[0];
    let hi = knots[m - 1];
    // span index: last i with knots[i] <= x < knots[i+1], clamped into the valid range
    let mut span = 0;
    if x >= hi {
        for i in (0..m - 1).rev() {
            if knots[i] < knots[i + 1] {
                span = i;
                break;
            }
        }
    } else {
        let x = x.max(lo);
        for i in 0..m - 1 {
            if knots[i] <= x && x < knots[i + 1] {
                span = i;
            }
        }
    }
    let mut table = Vec::with_capacity(order);
    let mut cur = vec![0.0; m - 1];
    cur[span] = 1.0;
    table.push(cur.clone());
    for p in 2..=order {
        let mut next = vec![0.0; m - p];
        for (i, nx) in next.iter_mut().enumerate() {
            let mut v = 0.0;
            let d1 = knots[i + p - 1] - knots[i];
            if d1 > 0.0 {
                v += (x - knots[i]) / d1 * cur[i];
            }
            let d2 = knots[i + p] - knots[i + 1];
            if d2 > 0.0 {
                v += (knots[i + p] - x) / d2 * cur[i + 1];
            }
            *nx = v;
        }
        table.push(next.clone());
        cur = next;
    }
    table
}

fn bspline_values(knots: &[f64], order: usize, x: f64) -> Vec<f64> {
    bspline_table(knots, order, x).pop().unwrap()
}

fn bspline_derivs(knots: &[f64], order: usize, x: f64) -> Vec<f64> {
    let table = bspline_table(knots, order, x);
    let lower = &table[order - 2];
    let nb = knots.len() - order;
    let p = (order - 1) as f64;
    (0..nb)
        .map(|i| {
            let mut d = 0.0;
            let d1 = knots[i + order - 1] - knots[i];
            if d1 > 0.0 {
                d += p * lower[i] / d1;
            }
            let d2 = knots[i + order] - knots[i + 1];
            if d2 > 0.0 {
                d -= p * lower[i + 1] / d2;
            }
            d
        })
        .collect()
}

/// Uniform cubic B-spline on [0, 4).
fn uniform_cubic(s: f64) -> f64 {
    if !(0.0..4.0).contains(&s) {
        0.0
    } else if s < 1.0 {
        s * s * s / 6.0
    } else if s < 2.0 {
        (-3.0 * s * s * s + 12.0 * s * s - 12.0 * s + 4.0) / 6.0
    } else if s < 3.0 {
        (3.0 * s * s * s - 24.0 * s * s + 60.0 * s - 44.0) / 6.0
    } else {
        let t = 4.0 - s;
        t * t * t / 6.0
    }
}

fn cyclic_basis(x: f64, k: usize, period: f64) -> Vec<f64> {
    let h = period / k as f64;
    let u = x.rem_euclid(period) / h;
    let kf = k as f64;
    (0..k)
        .map(|j| {
            let mut v = 0.0;
            let mut s = (u - j as f64).rem_euclid(kf);
            while s < 4.0 {
                v += uniform_cubic(s);
                s += kf;
            }
            v
        })
        .collect()
}

/// Cubic (or cyclic) P-spline basis centered over `x` with one column
/// dropped, and its penalty.
pub fn build_spline_basis(x: &[f64], k: usize, cyclic: bool, period: Option<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let b = SplineBasis::new(x, k, cyclic, period, true)?;
    Ok((b.design(x), b.penalty().clone()))
}

/// Indicator matrix of a factor with `n_levels` levels and the identity penalty.
pub fn build_random_intercept(codes: &[usize], n_levels: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if n_levels < 2 {
        return Err(Error::Design("a random effect needs a factor with at least 2 levels".into()));
    }
    let mut r = DMatrix::zeros(codes.len(), n_levels);
    for (i, &c) in codes.iter().enumerate() {
        if c >= n_levels {
            return Err(Error::Design(format!("level code {c} out of range")));
        }
        r[(i, c)] = 1.0;
    }
    Ok((r, DMatrix::identity(n_levels, n_levels)))
}

// ---------------------------------------------------------------------------
// Assembly

/// How one term turns covariate values into design columns.
#[derive(Debug, Clone)]
pub enum Encoder {
    Intercept,
    Linear(CovRef),
    /// Treatment-coded dummies for every level after the first.
    Dummies { cov: CovRef, levels: Vec<String> },
    Poly { cov: CovRef, degree: usize },
    Spline { cov: CovRef, basis: SplineBasis },
    RandomIntercept { cov: CovRef, levels: Vec<String> },
}

impl Encoder {
    fn n_cols(&self) -> usize {
        match self {
            Encoder::Intercept | Encoder::Linear(_) => 1,
            Encoder::Dummies { levels, .. } => levels.len() - 1,
            Encoder::Poly { degree, .. } => *degree,
            Encoder::Spline { basis, .. } => basis.n_cols(),
            Encoder::RandomIntercept { levels, .. } => levels.len(),
        }
    }

    fn is_random(&self) -> bool {
        matches!(self, Encoder::Spline { .. } | Encoder::RandomIntercept { .. })
    }

    fn fill(&self, table: &CovTable, row: usize, out: &mut [f64], notes: &mut EncodeNotes) -> Result<()> {
        match self {
            Encoder::Intercept => out[0] = 1.0,
            Encoder::Linear(c) => out[0] = table.numeric(c, row)?,
            Encoder::Dummies { cov, levels } => {
                let l = table.level(cov, row)?;
                let idx = levels
                    .iter()
                    .position(|x| x == l)
                    .ok_or_else(|| Error::Design(format!("unknown level '{l}' of covariate '{}'", cov.name)))?;
                out.fill(0.0);
                if idx > 0 {
                    out[idx - 1] = 1.0;
                }
            }
            Encoder::Poly { cov, degree } => {
                let x = table.numeric(cov, row)?;
                let mut p = 1.0;
                for o in out.iter_mut().take(*degree) {
                    p *= x;
                    *o = p;
                }
            }
            Encoder::Spline { cov, basis } => {
                let x = table.numeric(cov, row)?;
                if basis.is_outside(x) {
                    notes.extrapolated += 1;
                }
                out.copy_from_slice(&basis.row(x));
            }
            Encoder::RandomIntercept { cov, levels } => {
                out.fill(0.0);
                let l = table.level(cov, row)?;
                match levels.iter().position(|x| x == l) {
                    Some(idx) => out[idx] = 1.0,
                    None => notes.unknown_levels += 1,
                }
            }
        }
        Ok(())
    }

    fn coef_names(&self, term: &Term) -> Vec<String> {
        match self {
            Encoder::Intercept => vec!["(Intercept)".into()],
            Encoder::Linear(c) => vec![c.to_string()],
            Encoder::Dummies { cov, levels } => levels[1..].iter().map(|l| format!("{cov}{l}")).collect(),
            Encoder::Poly { degree, .. } => (1..=*degree).map(|i| format!("{}{i}", term.label())).collect(),
            Encoder::Spline { basis, .. } => (1..=basis.n_cols()).map(|i| format!("{}.{i}", term.label())).collect(),
            Encoder::RandomIntercept { levels, .. } => levels.iter().map(|l| format!("{}.{l}", term.label())).collect(),
        }
    }
}

/// Counters for conditions that are tolerated but worth a warning.
#[derive(Debug, Default, Clone, Copy)]
pub struct EncodeNotes {
    pub extrapolated: usize,
    pub unknown_levels: usize,
}

impl EncodeNotes {
    pub fn warn(&self, what: &str) {
        if self.extrapolated > 0 {
            log::warn!(
                "{what}: {} covariate values outside the spline knot range were extrapolated linearly",
                self.extrapolated
            );
        }
        if self.unknown_levels > 0 {
            log::warn!(
                "{what}: {} rows have random-effect levels not seen in fitting; their random effect is set to 0",
                self.unknown_levels
            );
        }
    }
}

/// One penalized block of `R`.
#[derive(Debug, Clone)]
pub struct PenaltyBlock {
    /// Term label, e.g. `s(x)`.
    pub label: String,
    pub cols: Range<usize>,
    pub s: DMatrix<f64>,
    /// `log det S`.
    pub log_det: f64,
}

/// Columns contributed by one term.
#[derive(Debug, Clone)]
pub struct TermColumns {
    pub term: Term,
    pub random: bool,
    pub cols: Range<usize>,
}

/// Design for one linear predictor.
#[derive(Debug, Clone)]
pub struct DesignBundle {
    pub x: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub penalty_blocks: Vec<PenaltyBlock>,
    pub column_map: Vec<TermColumns>,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    encoders: Vec<Encoder>,
    /// Nonzero entries of each column of `R` as `(row, value)`.
    r_nonzero: Vec<Vec<(usize, f64)>>,
}

impl DesignBundle {
    pub fn n_fixed(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_random(&self) -> usize {
        self.r.ncols()
    }

    pub fn r_column(&self, c: usize) -> &[(usize, f64)] {
        &self.r_nonzero[c]
    }

    /// `X alpha + R beta` over all rows.
    pub fn eta(&self, alpha: &[f64], beta: &[f64]) -> Vec<f64> {
        let n = self.x.nrows();
        let mut out = vec![0.0; n];
        for (j, a) in alpha.iter().enumerate() {
            if *a == 0.0 {
                continue;
            }
            for (o, x) in out.iter_mut().zip(self.x.column(j).iter()) {
                *o += a * x;
            }
        }
        for (c, b) in beta.iter().enumerate() {
            for &(row, v) in &self.r_nonzero[c] {
                out[row] += b * v;
            }
        }
        out
    }

    /// Fixed and random design rows for `row` of `table`, with this design's encoders.
    pub fn encode_row(&self, table: &CovTable, row: usize, notes: &mut EncodeNotes) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut xf = vec![0.0; self.n_fixed()];
        let mut xr = vec![0.0; self.n_random()];
        for (enc, tc) in self.encoders.iter().zip(&self.column_map) {
            let out = if tc.random { &mut xr[tc.cols.clone()] } else { &mut xf[tc.cols.clone()] };
            enc.fill(table, row, out, notes)?;
        }
        Ok((xf, xr))
    }

    /// Linear predictor at `row` of `table`.
    pub fn eta_row(&self, table: &CovTable, row: usize, alpha: &[f64], beta: &[f64], notes: &mut EncodeNotes) -> Result<f64> {
        let (xf, xr) = self.encode_row(table, row, notes)?;
        Ok(xf.iter().zip(alpha).map(|(a, b)| a * b).sum::<f64>() + xr.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>())
    }

    /// Rebuild `X` and `R` for a new covariate table using the stored encoders.
    pub fn encode(&self, table: &CovTable) -> Result<(DMatrix<f64>, DMatrix<f64>, EncodeNotes)> {
        let n = table.n_rows();
        let mut x = DMatrix::zeros(n, self.n_fixed());
        let mut r = DMatrix::zeros(n, self.n_random());
        let mut notes = EncodeNotes::default();
        for row in 0..n {
            let (xf, xr) = self.encode_row(table, row, &mut notes)?;
            for (j, v) in xf.into_iter().enumerate() {
                x[(row, j)] = v;
            }
            for (j, v) in xr.into_iter().enumerate() {
                r[(row, j)] = v;
            }
        }
        Ok((x, r, notes))
    }

    /// Swap in re-encoded matrices (same encoders, new covariate values).
    pub fn replace_matrices(&mut self, x: DMatrix<f64>, r: DMatrix<f64>) {
        self.r_nonzero = nonzero_columns(&r);
        self.x = x;
        self.r = r;
    }

    /// Whether any term reads a lagged value.
    pub fn uses_lags(&self) -> bool {
        self.column_map.iter().any(|t| t.term.covariate().is_some_and(|c| c.lag > 0))
    }
}

/// Build the design of `formula` on `table`.
///
/// `X` holds the intercept first and then linear and polynomial terms in
/// declaration order; `R` holds one block per penalized term in declaration order.
pub fn assemble(formula: &Formula, table: &CovTable) -> Result<DesignBundle> {
    formula.validate()?;
    let has_intercept = formula.has_intercept();
    let mut ordered: Vec<&Term> = formula.terms.iter().filter(|t| t.kind == TermKind::Intercept).collect();
    ordered.extend(formula.terms.iter().filter(|t| t.kind != TermKind::Intercept && !t.is_random()));
    ordered.extend(formula.terms.iter().filter(|t| t.is_random()));

    let mut encoders = Vec::new();
    let mut column_map = Vec::new();
    let mut penalty_blocks = Vec::new();
    let mut fixed_names = Vec::new();
    let mut random_names = Vec::new();
    let (mut nf, mut nr) = (0, 0);
    for term in ordered {
        let enc = match &term.kind {
            TermKind::Intercept => Encoder::Intercept,
            TermKind::Linear(c) => {
                if table.is_categorical(c)? {
                    let levels = table.levels(c)?;
                    if levels.len() < 2 {
                        return Err(Error::Design(format!("factor '{}' has a single level", c.name)));
                    }
                    Encoder::Dummies { cov: c.clone(), levels }
                } else {
                    table.numeric_column(c)?;
                    Encoder::Linear(c.clone())
                }
            }
            TermKind::Poly(c, d) => {
                table.numeric_column(c)?;
                Encoder::Poly { cov: c.clone(), degree: *d }
            }
            TermKind::Spline { cov, k } => {
                let x = table.numeric_column(cov)?;
                Encoder::Spline { cov: cov.clone(), basis: SplineBasis::new(&x, *k, false, None, has_intercept)? }
            }
            TermKind::Cyclic { cov, k, period } => {
                let x = table.numeric_column(cov)?;
                Encoder::Spline {
                    cov: cov.clone(),
                    basis: SplineBasis::new(&x, *k, true, Some(*period), has_intercept)?,
                }
            }
            TermKind::RandomIntercept(c) => {
                let levels = table.levels(c)?;
                if levels.len() < 2 {
                    return Err(Error::Design(format!(
                        "random effect on '{}' needs at least 2 levels (a single level is unidentifiable)",
                        c.name
                    )));
                }
                Encoder::RandomIntercept { cov: c.clone(), levels }
            }
        };
        let width = enc.n_cols();
        let names = enc.coef_names(term);
        if enc.is_random() {
            let cols = nr..nr + width;
            let s = match &enc {
                Encoder::Spline { basis, .. } => basis.penalty().clone(),
                _ => DMatrix::identity(width, width),
            };
            let log_det = log_det_spd(&s)?;
            penalty_blocks.push(PenaltyBlock { label: term.label(), cols: cols.clone(), s, log_det });
            column_map.push(TermColumns { term: term.clone(), random: true, cols });
            random_names.extend(names);
            nr += width;
        } else {
            column_map.push(TermColumns { term: term.clone(), random: false, cols: nf..nf + width });
            fixed_names.extend(names);
            nf += width;
        }
        encoders.push(enc);
    }

    let mut bundle = DesignBundle {
        x: DMatrix::zeros(0, nf),
        r: DMatrix::zeros(0, nr),
        penalty_blocks,
        column_map,
        fixed_names,
        random_names,
        encoders,
        r_nonzero: Vec::new(),
    };
    let (x, r, notes) = bundle.encode(table)?;
    notes.warn("design");
    bundle.replace_matrices(x, r);
    Ok(bundle)
}

fn nonzero_columns(r: &DMatrix<f64>) -> Vec<Vec<(usize, f64)>> {
    (0..r.ncols())
        .map(|c| {
            r.column(c)
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect()
        })
        .collect()
}

/// `log det` of a symmetric positive definite matrix.
pub fn log_det_spd(s: &DMatrix<f64>) -> Result<f64> {
    if s.nrows() == 0 {
        return Ok(0.0);
    }
    let chol = nalgebra::Cholesky::new(s.clone())
        .ok_or_else(|| Error::Numerical("penalty matrix is not positive definite".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Column;

    fn table(cols: Vec<(&str, Column)>) -> CovTable {
        let covs: IndexMap<String, Column> = cols.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let n = covs.values().next().unwrap().len();
        CovTable::from_dataset(&Dataset::with_rows(n, None, IndexMap::new(), covs, None).unwrap())
    }

    fn numeric(v: &[f64]) -> Column {
        Column::Numeric(v.iter().map(|x| Some(*x)).collect())
    }

    fn grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn formula_round_trip() {
        for s in [
            "intercept",
            "0",
            "intercept + linear(x)",
            "intercept + re(ID) + spline(d2c, k=10)",
            "0 + cyclic(hour, k=8, period=24)",
            "intercept + poly(x, 2) + state2(linear(lag(z)))",
            "intercept + linear(lag(z, 2))",
        ] {
            let f = Formula::parse(s).unwrap();
            assert_eq!(f.to_string(), s);
            assert_eq!(Formula::parse(&f.to_string()).unwrap(), f);
        }
        let f = Formula::parse("x + spline(y)").unwrap();
        assert_eq!(f.to_string(), "intercept + linear(x) + spline(y, k=10)");
        let f = Formula::parse("1 + lag(z)").unwrap();
        assert_eq!(f.to_string(), "intercept + linear(lag(z))");
    }

    #[test]
    fn formula_errors() {
        assert!(Formula::parse("intercept + 1").is_err());
        assert!(Formula::parse("spline(x, k=2)").is_err());
        assert!(Formula::parse("cyclic(x, k=5)").is_err());
        assert!(Formula::parse("poly(x, 0)").is_err());
        assert!(Formula::parse("foo(x)").is_err());
        assert!(Formula::parse("x + x").is_err());
        assert!(Formula::parse("").is_err());
        assert!(Formula::parse("state0(x)").is_err());
    }

    #[test]
    fn spline_constant_is_representable_with_zero_penalty() {
        let x = grid(200, -1.0, 1.0);
        let b = SplineBasis::new(&x, 10, false, None, false).unwrap();
        let m = b.design(&x);
        for i in 0..x.len() {
            let s: f64 = m.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // second differences of the all-ones coefficient vector vanish
        let ones = nalgebra::DVector::from_element(10, 1.0);
        let mut d = DMatrix::zeros(8, 10);
        for i in 0..8 {
            d[(i, i)] = 1.0;
            d[(i, i + 1)] = -2.0;
            d[(i, i + 2)] = 1.0;
        }
        assert!((&d * &ones).norm() < 1e-15);
    }

    #[test]
    fn centered_cubic_has_k_minus_one_full_rank_columns() {
        let x: Vec<f64> = (0..5000).map(|i| ((i as f64) * 0.7071).sin()).collect();
        let (m, s) = build_spline_basis(&x, 10, false, None).unwrap();
        assert_eq!(m.ncols(), 9);
        assert_eq!(s.nrows(), 9);
        let svd = m.clone().svd(false, false);
        let smax = svd.singular_values.max();
        assert!(svd.singular_values.iter().all(|v| *v > 1e-8 * smax), "rank deficient");
        for j in 0..9 {
            assert!(m.column(j).mean().abs() < 1e-10);
        }
    }

    #[test]
    fn penalties_are_symmetric_psd() {
        let x = grid(300, 0.0, 24.0 - 1e-9);
        for (cyc, center) in [(false, false), (false, true), (true, false), (true, true)] {
            let b = SplineBasis::new(&x, 8, cyc, Some(24.0), center).unwrap();
            let s = b.penalty();
            assert!((s - s.transpose()).amax() < 1e-14);
            let eig = SymmetricEigen::new(s.clone()).eigenvalues;
            assert!(eig.iter().all(|e| *e > 0.0), "shrinkage keeps full rank");
        }
    }

    #[test]
    fn cyclic_basis_is_periodic() {
        let x = grid(100, 0.0, 23.9);
        let b = SplineBasis::new(&x, 10, true, Some(24.0), false).unwrap();
        let a = b.row(0.0);
        let c = b.row(24.0 - 1e-12);
        for (u, v) in a.iter().zip(&c) {
            assert!((u - v).abs() < 1e-8);
        }
        let s: f64 = b.row(5.3).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn basis_is_continuous_inside_and_at_boundaries() {
        let x = grid(50, -1.0, 1.0);
        let b = SplineBasis::new(&x, 7, false, None, true).unwrap();
        let mut z = -1.2;
        while z < 1.2 {
            let h = 1e-7;
            let l = b.row(z - h);
            let r = b.row(z + h);
            for (u, v) in l.iter().zip(&r) {
                assert!((u - v).abs() < 1e-5, "jump at {z}");
            }
            z += 0.0137;
        }
    }

    #[test]
    fn small_k_uses_lower_order() {
        let x = grid(20, 0.0, 1.0);
        let b = SplineBasis::new(&x, 3, false, None, true).unwrap();
        assert_eq!(b.n_cols(), 2);
        assert!(SplineBasis::new(&[1.0, 2.0, 2.0, 1.0], 3, false, None, true).is_err());
        assert!(SplineBasis::new(&[1.0, f64::NAN, 3.0, 4.0], 3, false, None, true).is_err());
    }

    #[test]
    fn random_intercept_examples() {
        let (r, s) = build_random_intercept(&[0, 0, 1], 2).unwrap();
        assert_eq!(r, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
        assert_eq!(s, DMatrix::identity(2, 2));
        assert!(build_random_intercept(&[0, 0], 1).is_err());
        let codes: Vec<usize> = (0..10000).map(|i| i / 500).collect();
        let (r, s) = build_random_intercept(&codes, 20).unwrap();
        assert_eq!(r.shape(), (10000, 20));
        assert!(r.row_iter().all(|row| row.sum() == 1.0));
        assert!(r.column_iter().all(|c| c.sum() == 500.0));
        assert!(SymmetricEigen::new(s).eigenvalues.iter().all(|e| (*e - 1.0).abs() < 1e-15));
    }

    #[test]
    fn assemble_examples() {
        let x = grid(40, 0.0, 1.0);
        let t = table(vec![("x", numeric(&x))]);
        let d = assemble(&Formula::intercept_only(), &t).unwrap();
        assert_eq!(d.x, DMatrix::from_element(40, 1, 1.0));
        assert_eq!(d.n_random(), 0);
        assert!(d.penalty_blocks.is_empty());

        let d = assemble(&Formula::parse("linear(x)").unwrap(), &t).unwrap();
        assert_eq!(d.x.column(1).iter().copied().collect::<Vec<_>>(), x);
        assert_eq!(d.fixed_names, vec!["(Intercept)", "x"]);

        let ids: Vec<String> = (0..40).map(|i| format!("{}", i / 2)).collect();
        let ds = Dataset::with_rows(
            40,
            Some(ids),
            IndexMap::new(),
            [("d2c".to_string(), numeric(&x))].into_iter().collect(),
            None,
        )
        .unwrap();
        let t = CovTable::from_dataset(&ds);
        let d = assemble(&Formula::parse("re(ID) + spline(d2c, k=10)").unwrap(), &t).unwrap();
        assert_eq!(d.n_random(), 20 + 9);
        assert_eq!(d.penalty_blocks.len(), 2);
        assert_eq!(d.penalty_blocks[0].cols, 0..20);
        assert_eq!(d.penalty_blocks[1].cols, 20..29);
        assert_eq!(d.random_names[0], "s(ID).0");
        assert_eq!(d.random_names[20], "s(d2c).1");
    }

    #[test]
    fn assemble_errors() {
        let t = table(vec![("x", numeric(&grid(10, 0.0, 1.0)))]);
        assert!(assemble(&Formula::parse("linear(y)").unwrap(), &t).is_err());
        assert!(assemble(&Formula::parse("re(x)").unwrap(), &t).is_err());
        let mut f = Formula::intercept_only();
        f.terms.push(Term::new(TermKind::Intercept));
        assert!(assemble(&f, &t).is_err());
    }

    #[test]
    fn prediction_rows_match_training_rows() {
        let x: Vec<f64> = (0..300).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let t = table(vec![("x", numeric(&x))]);
        let d = assemble(&Formula::parse("spline(x, k=8) + poly(x, 2)").unwrap(), &t).unwrap();
        let alpha: Vec<f64> = (0..d.n_fixed()).map(|i| 0.3 * i as f64 - 0.1).collect();
        let beta: Vec<f64> = (0..d.n_random()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let eta = d.eta(&alpha, &beta);
        let new = table(vec![("x", numeric(&x[100..110]))]);
        let mut notes = EncodeNotes::default();
        for i in 0..10 {
            let v = d.eta_row(&new, i, &alpha, &beta, &mut notes).unwrap();
            assert!((v - eta[100 + i]).abs() < 1e-10);
        }
    }

    #[test]
    fn lagged_covariates_start_at_zero() {
        let mut responses = IndexMap::new();
        responses.insert("z".to_string(), vec![Some(1.0), Some(2.0), None, Some(4.0)]);
        let ds = Dataset::with_rows(4, None, responses, IndexMap::new(), None).unwrap();
        let t = CovTable::from_dataset(&ds);
        let lag = CovRef::lagged("z", 1);
        let v: Vec<f64> = (0..4).map(|r| t.numeric(&lag, r).unwrap()).collect();
        assert_eq!(v, vec![0.0, 1.0, 2.0, 0.0]);
        assert!(t.numeric(&CovRef::new("z"), 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn penalty_quadratic_form_is_nonnegative(coefs in proptest::collection::vec(-5.0f64..5.0, 9)) {
            let x = grid(60, 0.0, 1.0);
            let b = SplineBasis::new(&x, 10, false, None, true).unwrap();
            let v = nalgebra::DVector::from_vec(coefs);
            let q = (v.transpose() * b.penalty() * &v)[(0, 0)];
            proptest::prop_assert!(q >= 0.0);
        }
    }
}
