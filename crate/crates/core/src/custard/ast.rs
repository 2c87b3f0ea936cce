//! Tensor index notation: `X(i,j) = B(i,k) * C(k,j)`.
//!
//! Products bind tighter than sums; parentheses group. Index variables that
//! appear on the right but not on the left are summed over.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at column {col}: {msg}")]
    SyntaxError { col: usize, msg: String },
    #[error("index `{var}` repeats in access {tensor}")]
    RepeatedIndexInAccess { tensor: String, var: String },
    #[error("output index `{0}` does not appear on the right-hand side")]
    UnboundOutputVar(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Access {
    pub tensor: String,
    pub vars: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Access(Access),
    /// n-ary product.
    Mul(Vec<Expr>),
    /// n-ary signed sum.
    Sum(Vec<(Sign, Expr)>),
}

impl Expr {
    /// Accesses in left-to-right order.
    pub fn accesses(&self) -> Vec<&Access> {
        let mut out = Vec::new();
        self.visit(&mut |a| out.push(a));
        out
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Access)) {
        match self {
            Expr::Access(a) => f(a),
            Expr::Mul(xs) => xs.iter().for_each(|x| x.visit(f)),
            Expr::Sum(xs) => xs.iter().for_each(|(_, x)| x.visit(f)),
        }
    }

    pub fn vars(&self) -> BTreeSet<String> {
        self.accesses().into_iter().flat_map(|a| a.vars.iter().cloned()).collect()
    }

    pub fn children(&self) -> Vec<&Expr> {
        match self {
            Expr::Access(_) => vec![],
            Expr::Mul(xs) => xs.iter().collect(),
            Expr::Sum(xs) => xs.iter().map(|(_, x)| x).collect(),
        }
    }

    pub fn uses(&self, var: &str) -> bool {
        self.accesses().iter().any(|a| a.vars.iter().any(|v| v == var))
    }

    /// Subexpression at a path of child indices.
    pub fn at(&self, path: &[usize]) -> &Expr {
        path.iter().fold(self, |e, &k| e.children()[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub output: Access,
    pub rhs: Expr,
}

impl Assignment {
    /// Every index variable: output variables first, then reduced ones in
    /// order of first appearance.
    pub fn vars(&self) -> Vec<String> {
        let mut out = self.output.vars.clone();
        for a in self.rhs.accesses() {
            for v in &a.vars {
                if !out.contains(v) {
                    out.push(v.clone());
                }
            }
        }
        out
    }

    pub fn reduced_vars(&self) -> Vec<String> {
        self.vars().into_iter().filter(|v| !self.output.vars.contains(v)).collect()
    }

    /// Path to the subexpression a reduced variable is summed over: the
    /// smallest one containing every access that uses it. Output variables
    /// range over the whole right-hand side.
    pub fn scope_of(&self, var: &str) -> Vec<usize> {
        let mut path = Vec::new();
        if self.output.vars.iter().any(|v| v == var) {
            return path;
        }
        let mut e = &self.rhs;
        loop {
            let users: Vec<usize> = e.children().iter().enumerate().filter(|(_, c)| c.uses(var)).map(|(k, _)| k).collect();
            match users.as_slice() {
                [k] => {
                    path.push(*k);
                    e = e.children()[*k];
                }
                _ => return path,
            }
        }
    }

    /// Input tensor names, deduplicated, in order of first appearance.
    pub fn inputs(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for a in self.rhs.accesses() {
            if !out.contains(&a.tensor) {
                out.push(a.tensor.clone());
            }
        }
        out
    }
}

impl fmt::Display for Access {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.vars.is_empty() {
            write!(f, "{}", self.tensor)
        } else {
            write!(f, "{}({})", self.tensor, self.vars.join(","))
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Access(a) => write!(f, "{a}"),
            Expr::Mul(xs) => {
                for (k, x) in xs.iter().enumerate() {
                    if k > 0 {
                        write!(f, " * ")?;
                    }
                    match x {
                        Expr::Sum(_) => write!(f, "({x})")?,
                        _ => write!(f, "{x}")?,
                    }
                }
                Ok(())
            }
            Expr::Sum(xs) => {
                for (k, (s, x)) in xs.iter().enumerate() {
                    match (k, s) {
                        (0, Sign::Plus) => {}
                        (0, Sign::Minus) => write!(f, "-")?,
                        (_, Sign::Plus) => write!(f, " + ")?,
                        (_, Sign::Minus) => write!(f, " - ")?,
                    }
                    match x {
                        Expr::Sum(_) => write!(f, "({x})")?,
                        _ => write!(f, "{x}")?,
                    }
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}", self.output, self.rhs)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Sym(char),
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
    end: usize,
}

impl Parser {
    fn err(&self, msg: impl Into<String>) -> ParseError {
        let col = self.toks.get(self.at).map_or(self.end, |t| t.0);
        ParseError::SyntaxError { col, msg: msg.into() }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|t| &t.1)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.at += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{c}`")))
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.at += 1;
                Ok(s)
            }
            _ => Err(self.err("expected a name")),
        }
    }

    fn access(&mut self) -> Result<Access, ParseError> {
        let tensor = self.ident()?;
        let mut vars: Vec<String> = Vec::new();
        if self.eat('(') {
            if !self.eat(')') {
                loop {
                    let v = self.ident()?;
                    if vars.contains(&v) {
                        return Err(ParseError::RepeatedIndexInAccess { tensor, var: v });
                    }
                    vars.push(v);
                    if self.eat(')') {
                        break;
                    }
                    self.expect(',')?;
                }
            }
        }
        Ok(Access { tensor, vars })
    }

    fn sum(&mut self) -> Result<Expr, ParseError> {
        let mut terms = Vec::new();
        let mut sign = if self.eat('-') { Sign::Minus } else { Sign::Plus };
        loop {
            match self.product()? {
                // flatten nested sums, propagating the sign
                Expr::Sum(inner) if sign == Sign::Plus => terms.extend(inner),
                Expr::Sum(inner) => terms.extend(inner.into_iter().map(|(s, x)| {
                    (if s == Sign::Plus { Sign::Minus } else { Sign::Plus }, x)
                })),
                x => terms.push((sign, x)),
            }
            sign = if self.eat('+') {
                Sign::Plus
            } else if self.eat('-') {
                Sign::Minus
            } else {
                break;
            };
        }
        Ok(if terms.len() == 1 && terms[0].0 == Sign::Plus { terms.pop().unwrap().1 } else { Expr::Sum(terms) })
    }

    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut factors = Vec::new();
        loop {
            let f = if self.eat('(') {
                let e = self.sum()?;
                self.expect(')')?;
                e
            } else {
                Expr::Access(self.access()?)
            };
            match f {
                Expr::Mul(inner) => factors.extend(inner),
                f => factors.push(f),
            }
            if !self.eat('*') {
                break;
            }
        }
        Ok(if factors.len() == 1 { factors.pop().unwrap() } else { Expr::Mul(factors) })
    }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_alphanumeric() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((start + 1, Tok::Ident(chars[start..i].iter().collect())));
        } else if "()=,+-*".contains(c) {
            out.push((i + 1, Tok::Sym(c)));
            i += 1;
        } else {
            return Err(ParseError::SyntaxError { col: i + 1, msg: format!("unexpected character `{c}`") });
        }
    }
    Ok(out)
}

/// Parses an assignment such as `x(i) = B(i,j) * c(j)`.
pub fn parse_einsum(text: &str) -> Result<Assignment, ParseError> {
    let toks = lex(text)?;
    let mut p = Parser { toks, at: 0, end: text.chars().count() + 1 };
    let output = p.access()?;
    p.expect('=')?;
    let rhs = p.sum()?;
    if p.at != p.toks.len() {
        return Err(p.err("unexpected trailing input"));
    }
    let vars = rhs.vars();
    if let Some(v) = output.vars.iter().find(|v| !vars.contains(*v)) {
        return Err(ParseError::UnboundOutputVar(v.clone()));
    }
    Ok(Assignment { output, rhs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_prints() {
        let a = parse_einsum("x(i) = B(i,j) * c(j)").unwrap();
        assert_eq!(a.output.vars, vec!["i"]);
        assert_eq!(a.reduced_vars(), vec!["j"]);
        assert_eq!(a.to_string(), "x(i) = B(i,j) * c(j)");
        let a = parse_einsum("x(i) = alpha * B(j,i) * c(j) + beta * d(i)").unwrap();
        assert!(matches!(&a.rhs, Expr::Sum(t) if t.len() == 2));
        assert_eq!(a.inputs(), vec!["alpha", "B", "c", "beta", "d"]);
        assert_eq!(a.scope_of("j"), vec![0]);
        assert_eq!(a.scope_of("i"), Vec::<usize>::new());
        let a = parse_einsum("x(i) = b(i) - C(i,j) * d(j) + E(i,k)").unwrap();
        assert_eq!(a.scope_of("j"), vec![1]);
        assert_eq!(a.scope_of("k"), vec![2]);
        let a = parse_einsum("x = b(i) * c(i)").unwrap();
        assert!(a.output.vars.is_empty());
        let a = parse_einsum("x() = b(i)*(c(i)*d(i))").unwrap();
        assert!(matches!(&a.rhs, Expr::Mul(f) if f.len() == 3));
        let a = parse_einsum("x(i) = b(i) - (c(i) - d(i))").unwrap();
        assert_eq!(a.to_string(), "x(i) = b(i) - c(i) + d(i)");
    }

    #[test]
    fn errors() {
        assert!(matches!(parse_einsum("x(i) = B(i,i)"), Err(ParseError::RepeatedIndexInAccess { .. })));
        assert_eq!(parse_einsum("x(i,k) = B(i,j)"), Err(ParseError::UnboundOutputVar("k".into())));
        assert!(matches!(parse_einsum("x(i) = B(i,j"), Err(ParseError::SyntaxError { .. })));
        assert!(matches!(parse_einsum("x(i) = B(i) $"), Err(ParseError::SyntaxError { col: 13, .. })));
        assert!(matches!(parse_einsum("x(i) B(i)"), Err(ParseError::SyntaxError { .. })));
    }
}
