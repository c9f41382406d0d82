use super::lexer::{tokenize, Spanned, Token};
use super::{BinOp, Constant, DerivKey, Expr, Func, ParseError, VarConfig, INDEPENDENT_LETTERS};

pub(crate) fn parse_expr(source: &str, config: &VarConfig) -> Result<Expr, ParseError> {
    let tokens = tokenize(source)?;
    if tokens.len() == 1 {
        return Err(ParseError::Empty);
    }
    let mut p = Parser { tokens, at: 0, config };
    let expr = p.expr()?;
    let tail = p.peek();
    if tail.token != Token::End {
        return Err(ParseError::Syntax {
            position: tail.pos,
            message: format!("unexpected {} after complete expression", tail.token.describe()),
        });
    }
    Ok(expr)
}

struct Parser<'a> {
    tokens: Vec<Spanned>,
    at: usize,
    config: &'a VarConfig,
}

impl Parser<'_> {
    fn peek(&self) -> &Spanned {
        &self.tokens[self.at]
    }

    fn bump(&mut self) -> Spanned {
        let t = self.tokens[self.at].clone();
        if t.token != Token::End {
            self.at += 1;
        }
        t
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().token {
                Token::Plus => BinOp::Add,
                Token::Minus => BinOp::Sub,
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
            let op = match self.peek().token {
                Token::Star => BinOp::Mul,
                Token::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek().token == Token::Minus {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if self.peek().token == Token::Caret {
            self.bump();
            let exponent = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let Spanned { token, pos } = self.bump();
        match token {
            Token::Num(v) => Ok(Expr::Num(v)),
            Token::LParen => {
                let inner = self.expr()?;
                self.expect_close(pos)?;
                Ok(inner)
            }
            Token::Ident(name) => self.identifier(&name, pos),
            other => Err(ParseError::Syntax {
                position: pos,
                message: format!("expected an operand, found {}", other.describe()),
            }),
        }
    }

    fn expect_close(&mut self, open: usize) -> Result<(), ParseError> {
        let t = self.bump();
        if t.token == Token::RParen {
            Ok(())
        } else {
            Err(ParseError::Syntax {
                position: t.pos,
                message: format!("expected ')' to close '(' at column {}, found {}", open + 1, t.token.describe()),
            })
        }
    }

    fn identifier(&mut self, name: &str, pos: usize) -> Result<Expr, ParseError> {
        if let Some(f) = Func::from_name(name) {
            let open = self.bump();
            if open.token != Token::LParen {
                return Err(ParseError::Syntax {
                    position: open.pos,
                    message: format!("expected '(' after function {name}"),
                });
            }
            let arg = self.expr()?;
            self.expect_close(open.pos)?;
            return Ok(Expr::Func(f, Box::new(arg)));
        }
        match name {
            "pi" => return Ok(Expr::Const(Constant::Pi)),
            "e" => return Ok(Expr::Const(Constant::E)),
            _ => {}
        }
        if let Some(i) = self.config.independent_index(name) {
            return Ok(Expr::Coord(i));
        }
        if let Some(key) = self.derivative(name, pos)? {
            return Ok(Expr::Deriv(key));
        }
        if INDEPENDENT_LETTERS.contains(&name) {
            return Err(ParseError::UndeclaredVariable { position: pos, name: name.to_string() });
        }
        Err(ParseError::Lexical { position: pos, message: format!("unknown identifier '{name}'") })
    }

    /// Resolves `name` as a dependent variable followed by differentiation
    /// letters, trying the longest dependent-variable prefix first.
    fn derivative(&self, name: &str, pos: usize) -> Result<Option<DerivKey>, ParseError> {
        let mut candidates: Vec<(usize, &String)> =
            self.config.dependent().iter().enumerate().filter(|(_, d)| name.starts_with(d.as_str())).collect();
        candidates.sort_by_key(|(_, d)| std::cmp::Reverse(d.len()));
        for (var, dep) in candidates {
            let suffix = &name[dep.len()..];
            if !suffix.chars().all(|c| INDEPENDENT_LETTERS.iter().any(|l| l.starts_with(c))) {
                continue;
            }
            let mut partials = Vec::with_capacity(suffix.len());
            for c in suffix.chars() {
                let letter = c.to_string();
                match self.config.independent_index(&letter) {
                    Some(i) => partials.push(i),
                    None => {
                        return Err(ParseError::UndeclaredVariable { position: pos, name: letter });
                    }
                }
            }
            let cap = self.config.caps()[var];
            if partials.len() > cap {
                return Err(ParseError::OrderCap { position: pos, variable: dep.clone(), order: partials.len(), cap });
            }
            return Ok(Some(DerivKey::new(var, partials)));
        }
        Ok(None)
    }
}
