//! Arithmetic expressions over exact rationals.

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedDiv, CheckedMul, CheckedSub};

pub type Rational = Ratio<i128>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

impl Op {
    pub const ALL: [Op; 4] = [Op::Add, Op::Sub, Op::Mul, Op::Div];

    pub fn apply(self, a: Rational, b: Rational) -> Option<Rational> {
        match self {
            Op::Add => a.checked_add(&b),
            Op::Sub => a.checked_sub(&b),
            Op::Mul => a.checked_mul(&b),
            Op::Div => {
                if b == Rational::from_integer(0) {
                    None
                } else {
                    a.checked_div(&b)
                }
            }
        }
    }
}

/// How operators are written. The disjoint set shares no symbol with the
/// arithmetic-chain family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyphs {
    #[default]
    Standard,
    Disjoint,
}

impl Glyphs {
    pub fn symbol(self, op: Op) -> char {
        match (self, op) {
            (Glyphs::Standard, Op::Add) => '+',
            (Glyphs::Standard, Op::Sub) => '-',
            (Glyphs::Standard, Op::Mul) => '*',
            (Glyphs::Standard, Op::Div) => '/',
            (Glyphs::Disjoint, Op::Add) => '&',
            (Glyphs::Disjoint, Op::Sub) => '~',
            (Glyphs::Disjoint, Op::Mul) => '#',
            (Glyphs::Disjoint, Op::Div) => '|',
        }
    }

    fn op_of(c: char) -> Option<Op> {
        [Glyphs::Standard, Glyphs::Disjoint]
            .into_iter()
            .flat_map(|g| Op::ALL.into_iter().map(move |op| (g.symbol(op), op)))
            .find(|&(s, _)| s == c)
            .map(|(_, op)| op)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Num(i64),
    Bin(Op, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn eval(&self) -> Option<Rational> {
        match self {
            Expr::Num(n) => Some(Rational::from_integer(*n as i128)),
            Expr::Bin(op, a, b) => op.apply(a.eval()?, b.eval()?),
        }
    }

    pub fn numbers(&self, out: &mut Vec<i64>) {
        match self {
            Expr::Num(n) => out.push(*n),
            Expr::Bin(_, a, b) => {
                a.numbers(out);
                b.numbers(out);
            }
        }
    }

    /// Fully parenthesized rendering without outer parentheses.
    pub fn render(&self, glyphs: Glyphs) -> String {
        fn go(e: &Expr, g: Glyphs, top: bool, out: &mut String) {
            match e {
                Expr::Num(n) => out.push_str(&n.to_string()),
                Expr::Bin(op, a, b) => {
                    if !top {
                        out.push('(');
                    }
                    go(a, g, false, out);
                    out.push(g.symbol(*op));
                    go(b, g, false, out);
                    if !top {
                        out.push(')');
                    }
                }
            }
        }
        let mut s = String::new();
        go(self, glyphs, true, &mut s);
        s
    }

    /// Post-order evaluation steps, e.g. `2*3=6 6*4=24`.
    pub fn steps(&self, glyphs: Glyphs) -> Option<String> {
        fn go(e: &Expr, g: Glyphs, out: &mut Vec<String>) -> Option<Rational> {
            match e {
                Expr::Num(n) => Some(Rational::from_integer(*n as i128)),
                Expr::Bin(op, a, b) => {
                    let x = go(a, g, out)?;
                    let y = go(b, g, out)?;
                    let z = op.apply(x, y)?;
                    out.push(format!("{}{}{}={}", fmt_rat(x), g.symbol(*op), fmt_rat(y), fmt_rat(z)));
                    Some(z)
                }
            }
        }
        let mut parts = Vec::new();
        go(self, glyphs, &mut parts)?;
        Some(parts.join(" "))
    }
}

pub fn fmt_rat(r: Rational) -> String {
    if r.is_integer() {
        r.to_integer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// Recursive-descent parser for `+ - * /` (either glyph set) with the usual
/// precedence, left associativity and parentheses. Whitespace between
/// tokens is ignored.
pub fn parse_expr(text: &str) -> Option<Expr> {
    // Drop whitespace but keep it as a separator so `2 3` is not read as 23.
    let mut chars = Vec::new();
    let mut gap = false;
    for c in text.chars() {
        if c.is_whitespace() {
            gap = true;
            continue;
        }
        if gap && c.is_ascii_digit() && chars.last().is_some_and(|p: &char| p.is_ascii_digit()) {
            return None;
        }
        gap = false;
        chars.push(c);
    }
    let mut p = Parser { chars, pos: 0 };
    let e = p.sum()?;
    (p.pos == p.chars.len()).then_some(e)
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn peek_op(&self, allowed: [Op; 2]) -> Option<Op> {
        let op = Glyphs::op_of(*self.chars.get(self.pos)?)?;
        allowed.contains(&op).then_some(op)
    }

    fn sum(&mut self) -> Option<Expr> {
        let mut lhs = self.product()?;
        while let Some(op) = self.peek_op([Op::Add, Op::Sub]) {
            self.pos += 1;
            let rhs = self.product()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Some(lhs)
    }

    fn product(&mut self) -> Option<Expr> {
        let mut lhs = self.atom()?;
        while let Some(op) = self.peek_op([Op::Mul, Op::Div]) {
            self.pos += 1;
            let rhs = self.atom()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Some(lhs)
    }

    fn atom(&mut self) -> Option<Expr> {
        match self.chars.get(self.pos)? {
            '(' => {
                self.pos += 1;
                let e = self.sum()?;
                if self.chars.get(self.pos) != Some(&')') {
                    return None;
                }
                self.pos += 1;
                Some(e)
            }
            c if c.is_ascii_digit() => {
                let start = self.pos;
                while self.chars.get(self.pos).is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
                let s: String = self.chars[start..self.pos].iter().collect();
                s.parse().ok().map(Expr::Num)
            }
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_associativity() {
        let e = parse_expr("2+3*4-10/5").unwrap();
        assert_eq!(e.eval(), Some(Rational::from_integer(12)));
        let e = parse_expr("8-3-2").unwrap();
        assert_eq!(e.eval(), Some(Rational::from_integer(3)));
        let e = parse_expr("(1+2)/4").unwrap();
        assert_eq!(e.eval(), Some(Rational::new(3, 4)));
    }

    #[test]
    fn rejects_garbage() {
        for s in ["", "2+", "(2*3", "2**3", "a+1", "2 3", "()"] {
            assert!(parse_expr(s).is_none(), "{s:?}");
        }
        assert_eq!(parse_expr("1/0").unwrap().eval(), None);
    }

    #[test]
    fn render_round_trips() {
        let e = parse_expr("((2*3)-4)/(1+1)").unwrap();
        let s = e.render(Glyphs::Standard);
        assert_eq!(s, "((2*3)-4)/(1+1)");
        assert_eq!(parse_expr(&s).unwrap(), e);
        let alt = e.render(Glyphs::Disjoint);
        assert_eq!(alt, "((2#3)~4)|(1&1)");
        assert_eq!(parse_expr(&alt).unwrap(), e);
        assert_eq!(e.steps(Glyphs::Standard).unwrap(), "2*3=6 6-4=2 1+1=2 2/2=1");
    }
}
