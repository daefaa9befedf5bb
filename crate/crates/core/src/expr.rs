//! Arithmetic expressions over the variables `x1, x2, …`.
//!
//! Grammar:
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := base ('^' factor)?
//! base   := number | 'pi' | var | func '(' expr (',' expr)* ')' | '(' expr ')' | '-' base
//! var    := 'x' digits
//! ```
//!
//! Unary minus binds tighter than `^`, so `-x1^2` is `(-x1)^2`.

use std::f64::consts::PI;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Abs,
    Sqrt,
    Min,
    Max,
    Mod1,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "min" => Func::Min,
            "max" => Func::Max,
            "mod1" => Func::Mod1,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Min => "min",
            Func::Max => "max",
            Func::Mod1 => "mod1",
        }
    }

    fn variadic(self) -> bool {
        matches!(self, Func::Min | Func::Max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Pi,
    /// Zero-based variable index: `x1` is `Var(0)`.
    Var(usize),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Affine form `offset + Σ coeffs[i]·x_{i+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub coeffs: Vec<f64>,
    pub offset: f64,
}

impl Affine {
    fn constant(nvars: usize, c: f64) -> Self {
        Affine {
            coeffs: vec![0.0; nvars],
            offset: c,
        }
    }

    fn is_constant(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    fn scale(mut self, s: f64) -> Self {
        self.coeffs.iter_mut().for_each(|c| *c *= s);
        self.offset *= s;
        self
    }

    fn combine(mut self, other: Affine, sign: f64) -> Self {
        for (a, b) in self.coeffs.iter_mut().zip(other.coeffs) {
            *a += sign * b;
        }
        self.offset += sign * other.offset;
        self
    }
}

impl Expr {
    pub fn parse(text: &str) -> Result<Expr> {
        Self::parse_at(text, 1, 1)
    }

    /// Parse with error positions reported relative to `line`/`column`.
    pub fn parse_at(text: &str, line: usize, column: usize) -> Result<Expr> {
        let tokens = lex(text, line, column)?;
        let mut p = Parser {
            tokens,
            pos: 0,
            line,
        };
        let e = p.expr()?;
        match p.peek() {
            Tok::End => Ok(e),
            t => Err(p.error(format!("unexpected {}", t.describe()))),
        }
    }

    /// Largest variable number appearing (`x3` → 3), 0 if none.
    pub fn max_var(&self) -> usize {
        match self {
            Expr::Num(_) | Expr::Pi => 0,
            Expr::Var(i) => i + 1,
            Expr::Neg(a) => a.max_var(),
            Expr::Bin(_, a, b) => a.max_var().max(b.max_var()),
            Expr::Call(_, args) => args.iter().map(Expr::max_var).max().unwrap_or(0),
        }
    }

    pub fn is_constant(&self) -> bool {
        self.max_var() == 0
    }

    pub fn eval(&self, vars: &[f64]) -> Result<f64> {
        let v = self.eval_raw(vars)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Eval(format!("{self} is not finite at {vars:?}")))
        }
    }

    fn eval_raw(&self, vars: &[f64]) -> Result<f64> {
        Ok(match self {
            Expr::Num(c) => *c,
            Expr::Pi => PI,
            Expr::Var(i) => *vars.get(*i).ok_or_else(|| {
                Error::Eval(format!("variable x{} unbound ({} given)", i + 1, vars.len()))
            })?,
            Expr::Neg(a) => -a.eval_raw(vars)?,
            Expr::Bin(op, a, b) => {
                let x = a.eval_raw(vars)?;
                let y = b.eval_raw(vars)?;
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => {
                        if y == 0.0 {
                            return Err(Error::Eval(format!("division by zero in {self}")));
                        }
                        x / y
                    }
                    BinOp::Pow => {
                        let r = if y == 2.0 { x * x } else { x.powf(y) };
                        if r.is_nan() {
                            return Err(Error::Eval(format!("{x}^{y} is undefined")));
                        }
                        r
                    }
                }
            }
            Expr::Call(f, args) => {
                let x = args[0].eval_raw(vars)?;
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Tan => x.tan(),
                    Func::Exp => x.exp(),
                    Func::Log => {
                        if x <= 0.0 {
                            return Err(Error::Eval(format!("log of nonpositive value {x}")));
                        }
                        x.ln()
                    }
                    Func::Abs => x.abs(),
                    Func::Sqrt => {
                        if x < 0.0 {
                            return Err(Error::Eval(format!("sqrt of negative value {x}")));
                        }
                        x.sqrt()
                    }
                    Func::Mod1 => x - x.floor(),
                    Func::Min | Func::Max => {
                        let mut acc = x;
                        for a in &args[1..] {
                            let y = a.eval_raw(vars)?;
                            acc = if *f == Func::Min { acc.min(y) } else { acc.max(y) };
                        }
                        acc
                    }
                }
            }
        })
    }

    /// Affine form over `nvars` variables, if the expression is affine.
    /// Variable-free subtrees are folded to constants.
    pub fn affine(&self, nvars: usize) -> Option<Affine> {
        if self.max_var() > nvars {
            return None;
        }
        if self.is_constant() {
            return self.eval(&[]).ok().map(|c| Affine::constant(nvars, c));
        }
        match self {
            Expr::Num(_) | Expr::Pi => unreachable!("constants handled above"),
            Expr::Var(i) => {
                let mut a = Affine::constant(nvars, 0.0);
                a.coeffs[*i] = 1.0;
                Some(a)
            }
            Expr::Neg(a) => Some(a.affine(nvars)?.scale(-1.0)),
            Expr::Bin(op, a, b) => {
                let x = a.affine(nvars)?;
                let y = b.affine(nvars)?;
                match op {
                    BinOp::Add => Some(x.combine(y, 1.0)),
                    BinOp::Sub => Some(x.combine(y, -1.0)),
                    BinOp::Mul if y.is_constant() => Some(x.scale(y.offset)),
                    BinOp::Mul if x.is_constant() => Some(y.scale(x.offset)),
                    BinOp::Div if y.is_constant() && y.offset != 0.0 => {
                        Some(x.scale(1.0 / y.offset))
                    }
                    BinOp::Pow if y.is_constant() && y.offset == 1.0 => Some(x),
                    _ => None,
                }
            }
            Expr::Call(..) => None,
        }
    }
}

fn write_num(f: &mut fmt::Formatter<'_>, c: f64) -> fmt::Result {
    if c < 0.0 {
        write!(f, "(-{:?})", -c)
    } else {
        write!(f, "{c:?}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(c) => write_num(f, *c),
            Expr::Pi => write!(f, "pi"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (k, a) in args.iter().enumerate() {
                    if k > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Var(usize),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(c) => format!("number {c}"),
            Tok::Ident(s) => format!("identifier '{s}'"),
            Tok::Var(i) => format!("variable x{}", i + 1),
            Tok::Op(c) => format!("'{c}'"),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Comma => "','".into(),
            Tok::End => "end of expression".into(),
        }
    }
}

fn lex(text: &str, line: usize, column: usize) -> Result<Vec<(Tok, usize)>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |col: usize, message: String| Error::Syntax {
        line,
        column: col,
        message,
    };
    while i < chars.len() {
        let c = chars[i];
        let col = column + i;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v: f64 = s
                .parse()
                .map_err(|_| err(col, format!("malformed number '{s}'")))?;
            out.push((Tok::Num(v), col));
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            let tok = match s.strip_prefix('x') {
                Some(digits) if !digits.is_empty() && digits.chars().all(|d| d.is_ascii_digit()) => {
                    let n: usize = digits
                        .parse()
                        .map_err(|_| err(col, format!("bad variable '{s}'")))?;
                    if n == 0 {
                        return Err(err(col, "variables are numbered from x1".into()));
                    }
                    Tok::Var(n - 1)
                }
                _ => Tok::Ident(s),
            };
            out.push((tok, col));
            continue;
        }
        let tok = match c {
            '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ',' => Tok::Comma,
            _ => return Err(err(col, format!("unexpected character '{c}'"))),
        };
        out.push((tok, col));
        i += 1;
    }
    out.push((Tok::End, column + chars.len()));
    Ok(out)
}

struct Parser {
    tokens: Vec<(Tok, usize)>,
    pos: usize,
    line: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.tokens[self.pos].0.clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, message: String) -> Error {
        Error::Syntax {
            line: self.line,
            column: self.tokens[self.pos].1,
            message,
        }
    }

    fn expect(&mut self, want: Tok) -> Result<()> {
        if *self.peek() == want {
            self.bump();
            Ok(())
        } else {
            Err(self.error(format!(
                "expected {}, found {}",
                want.describe(),
                self.peek().describe()
            )))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.peek() {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.factor()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn factor(&mut self) -> Result<Expr> {
        let base = self.base()?;
        if *self.peek() == Tok::Op('^') {
            self.bump();
            let exp = self.factor()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn base(&mut self) -> Result<Expr> {
        match self.peek().clone() {
            Tok::Num(c) => {
                self.bump();
                Ok(Expr::Num(c))
            }
            Tok::Var(i) => {
                self.bump();
                Ok(Expr::Var(i))
            }
            Tok::Op('-') => {
                self.bump();
                Ok(Expr::Neg(Box::new(self.base()?)))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(name) if name == "pi" => {
                self.bump();
                Ok(Expr::Pi)
            }
            Tok::Ident(name) => {
                let func = Func::from_name(&name)
                    .ok_or_else(|| self.error(format!("unknown name '{name}'")))?;
                self.bump();
                self.expect(Tok::LParen)?;
                let mut args = vec![self.expr()?];
                while *self.peek() == Tok::Comma {
                    self.bump();
                    args.push(self.expr()?);
                }
                if func.variadic() && args.len() < 2 {
                    return Err(self.error(format!("{name} needs at least two arguments")));
                }
                if !func.variadic() && args.len() != 1 {
                    return Err(self.error(format!("{name} takes one argument")));
                }
                self.expect(Tok::RParen)?;
                Ok(Expr::Call(func, args))
            }
            t => Err(self.error(format!("unexpected {}", t.describe()))),
        }
    }
}
