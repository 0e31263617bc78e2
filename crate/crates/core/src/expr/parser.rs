//! Recursive-descent parser for the expression language.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | 't' | ident | ident '[' int ']' | ident '@' ident
//!         | ident '(' args ')' | '(' expr ')'
//! ```
//!
//! `^` binds tighter than unary minus, so `-x^2` is `-(x^2)`.

use thiserror::Error;

use super::{BinOp, Builtin, Expr, VarRef};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("{line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("{line}:{col}: unknown function `{name}`")]
    UnknownFunction { line: usize, col: usize, name: String },
}

impl ParseError {
    pub fn position(&self) -> (usize, usize) {
        match self {
            ParseError::Syntax { line, col, .. } | ParseError::UnknownFunction { line, col, .. } => {
                (*line, *col)
            }
        }
    }

    /// Shift the reported position, for expressions embedded in a larger file.
    pub fn offset(self, line: usize, col: usize) -> ParseError {
        let shift = |l: usize, c: usize| {
            if l == 1 {
                (line, col + c - 1)
            } else {
                (line + l - 1, c)
            }
        };
        match self {
            ParseError::Syntax { line: l, col: c, msg } => {
                let (line, col) = shift(l, c);
                ParseError::Syntax { line, col, msg }
            }
            ParseError::UnknownFunction { line: l, col: c, name } => {
                let (line, col) = shift(l, c);
                ParseError::UnknownFunction { line, col, name }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    End,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut line, mut col) = (1, 1);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        if c == '\n' {
            line += 1;
            col = 1;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
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
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                line: tl,
                col: tc,
                msg: format!("malformed number `{text}`"),
            })?;
            col += i - start;
            out.push(Token { tok: Tok::Num(v), line: tl, col: tc });
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - start;
            out.push(Token {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                line: tl,
                col: tc,
            });
            continue;
        }
        if "+-*/^()[],@".contains(c) {
            out.push(Token { tok: Tok::Op(c), line: tl, col: tc });
            i += 1;
            col += 1;
            continue;
        }
        return Err(ParseError::Syntax {
            line: tl,
            col: tc,
            msg: format!("unexpected character `{c}`"),
        });
    }
    out.push(Token { tok: Tok::End, line, col });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, tok: &Token, msg: impl Into<String>) -> ParseError {
        ParseError::Syntax {
            line: tok.line,
            col: tok.col,
            msg: msg.into(),
        }
    }

    fn describe(tok: &Tok) -> String {
        match tok {
            Tok::Num(v) => format!("number `{v}`"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Op(c) => format!("`{c}`"),
            Tok::End => "end of input".into(),
        }
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek().tok == Tok::Op(c) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            let t = self.peek().clone();
            Err(self.error(&t, format!("expected `{c}`, found {}", Self::describe(&t.tok))))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().tok {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().tok {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.eat('^') {
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let tok = self.bump();
        match tok.tok.clone() {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::Op('(') => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if self.eat('(') {
                    let f = Builtin::from_name(&name).ok_or(ParseError::UnknownFunction {
                        line: tok.line,
                        col: tok.col,
                        name: name.clone(),
                    })?;
                    let mut args = vec![self.expr()?];
                    while self.eat(',') {
                        args.push(self.expr()?);
                    }
                    self.expect(')')?;
                    if args.len() != f.arity() {
                        return Err(self.error(
                            &tok,
                            format!("`{name}` takes {} argument(s), got {}", f.arity(), args.len()),
                        ));
                    }
                    return Ok(Expr::Call(f, args));
                }
                let mut full = name;
                if self.eat('[') {
                    let idx = self.bump();
                    match idx.tok.clone() {
                        Tok::Num(v) if v.fract() == 0.0 && v >= 1.0 => {
                            full = format!("{full}[{}]", v as usize)
                        }
                        other => {
                            return Err(self.error(
                                &idx,
                                format!("expected a positive index, found {}", Self::describe(&other)),
                            ))
                        }
                    }
                    self.expect(']')?;
                }
                if self.eat('@') {
                    let d = self.bump();
                    return match d.tok.clone() {
                        Tok::Ident(delay) => Ok(Expr::Delayed {
                            var: VarRef::unresolved(full),
                            delay: VarRef::unresolved(delay),
                        }),
                        other => Err(self.error(
                            &d,
                            format!("expected a delay name after `@`, found {}", Self::describe(&other)),
                        )),
                    };
                }
                if full == "t" {
                    return Ok(Expr::Time);
                }
                Ok(Expr::Var(VarRef::unresolved(full)))
            }
            other => Err(self.error(&tok, format!("unexpected {}", Self::describe(&other)))),
        }
    }
}

/// Parse an infix expression.
pub fn parse_expression(text: &str) -> Result<Expr, ParseError> {
    let mut p = Parser { toks: lex(text)?, pos: 0 };
    let e = p.expr()?;
    let end = p.peek().clone();
    if end.tok != Tok::End {
        return Err(p.error(&end, format!("unexpected {}", Parser::describe(&end.tok))));
    }
    Ok(e)
}
