//! Parser for the loss mini-language used on the command line.
//!
//! ```text
//! loss  := term ( '+' term )*
//! term  := [ number '*' ] atom
//! atom  := name '(' args ')'
//! args  := arg ( ',' arg )*
//! arg   := ident '=' (number | ident) | ident | set
//! set   := 'ball' '(' p=2, r=R ')' | 'orthant' | 'fix' '(' j=J, c=C ')' | 'mean0'
//! ```
//!
//! Examples: `nested_h(k=3) + 0.01*l2(f) + 0.01*l2(g)`, `logloss(k=4)`,
//! `svm(d=3, lambda=0.1)`, `fdiv(u=kl, k=2)`,
//! `constrain(f, ball(p=2, r=1))`. Unknown atoms are rejected. `h` and
//! `nested_h` denote the corresponding scores negated, i.e. losses to be
//! minimized. Coordinate indices in `fix` are 1-based, matching the
//! `f1,...,fk` feature CSV headers.

use thiserror::Error;

use super::{
    ConstraintKind, ConvexScalarMap, FeatureSide, LossExpr, NormPenalty, PairDistance,
};

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("unexpected character {0:?} at offset {1}")]
    BadChar(char, usize),
    #[error("unexpected end of input")]
    UnexpectedEnd,
    #[error("expected {expected}, found {found}")]
    Expected { expected: String, found: String },
    #[error("unknown atom {0:?}")]
    UnknownAtom(String),
    #[error("unknown argument {arg:?} for atom {atom:?}")]
    UnknownArgument { atom: String, arg: String },
    #[error("atom {atom:?} is missing required argument {arg:?}")]
    MissingArgument { atom: String, arg: String },
    #[error("bad value for {arg:?}: {message}")]
    BadValue { arg: String, message: String },
    #[error("negative term weight {0}")]
    NegativeWeight(f64),
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Number(f64),
    Plus,
    Star,
    LParen,
    RParen,
    Comma,
    Eq,
}

fn tokenize(text: &str) -> Result<Vec<Token>, ParseError> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push(Token::Plus);
                i += 1;
            }
            '*' => {
                out.push(Token::Star);
                i += 1;
            }
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            ',' => {
                out.push(Token::Comma);
                i += 1;
            }
            '=' => {
                out.push(Token::Eq);
                i += 1;
            }
            _ if c.is_ascii_digit() || c == '.' || c == '-' => {
                let start = i;
                i += 1;
                while i < chars.len()
                    && (chars[i].is_ascii_digit()
                        || chars[i] == '.'
                        || chars[i] == 'e'
                        || chars[i] == 'E'
                        || ((chars[i] == '-' || chars[i] == '+')
                            && matches!(chars[i - 1], 'e' | 'E')))
                {
                    i += 1;
                }
                let s: String = chars[start..i].iter().collect();
                let v = s.parse::<f64>().map_err(|_| ParseError::BadValue {
                    arg: "number".into(),
                    message: format!("{s:?} is not a number"),
                })?;
                out.push(Token::Number(v));
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Token::Ident(chars[start..i].iter().collect()));
            }
            _ => return Err(ParseError::BadChar(c, i)),
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Result<Token, ParseError> {
        let t = self.tokens.get(self.pos).cloned().ok_or(ParseError::UnexpectedEnd)?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, token: Token, what: &str) -> Result<(), ParseError> {
        let t = self.next()?;
        if t != token {
            return Err(ParseError::Expected {
                expected: what.into(),
                found: format!("{t:?}"),
            });
        }
        Ok(())
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.next()? {
            Token::Ident(s) => Ok(s),
            t => Err(ParseError::Expected {
                expected: "identifier".into(),
                found: format!("{t:?}"),
            }),
        }
    }
}

/// One parsed key/value or bare argument.
#[derive(Debug)]
enum Arg {
    Num(String, f64),
    Word(String, String),
    Bare(String),
    Set(ConstraintKind),
}

/// Parses a loss expression; see the module docs for the grammar.
pub fn parse_loss(text: &str) -> Result<LossExpr, ParseError> {
    let mut p = Parser {
        tokens: tokenize(text)?,
        pos: 0,
    };
    let mut terms: Vec<(f64, LossExpr)> = Vec::new();
    loop {
        let weight = match p.peek() {
            Some(Token::Number(v)) => {
                let v = *v;
                p.next()?;
                p.expect(Token::Star, "'*'")?;
                if v < 0.0 {
                    return Err(ParseError::NegativeWeight(v));
                }
                v
            }
            _ => 1.0,
        };
        let atom = parse_atom(&mut p)?;
        terms.push((weight, atom));
        match p.peek() {
            Some(Token::Plus) => {
                p.next()?;
            }
            None => break,
            Some(t) => {
                return Err(ParseError::Expected {
                    expected: "'+' or end of input".into(),
                    found: format!("{t:?}"),
                })
            }
        }
    }
    if terms.len() == 1 && terms[0].0 == 1.0 {
        Ok(terms.remove(0).1)
    } else {
        Ok(LossExpr::Aggregate { terms })
    }
}

fn parse_atom(p: &mut Parser) -> Result<LossExpr, ParseError> {
    let name = p.ident()?;
    p.expect(Token::LParen, "'('")?;
    let mut args = Vec::new();
    if p.peek() != Some(&Token::RParen) {
        loop {
            args.push(parse_arg(p)?);
            match p.next()? {
                Token::Comma => continue,
                Token::RParen => break,
                t => {
                    return Err(ParseError::Expected {
                        expected: "',' or ')'".into(),
                        found: format!("{t:?}"),
                    })
                }
            }
        }
    } else {
        p.next()?;
    }
    build_atom(&name, args)
}

fn parse_arg(p: &mut Parser) -> Result<Arg, ParseError> {
    match p.next()? {
        Token::Ident(key) => match p.peek() {
            Some(Token::Eq) => {
                p.next()?;
                match p.next()? {
                    Token::Number(v) => Ok(Arg::Num(key, v)),
                    Token::Ident(w) => Ok(Arg::Word(key, w)),
                    t => Err(ParseError::Expected {
                        expected: "number or identifier".into(),
                        found: format!("{t:?}"),
                    }),
                }
            }
            Some(Token::LParen) => {
                // Nested set expression such as ball(p=2, r=1).
                p.next()?;
                let mut kw = Vec::new();
                if p.peek() != Some(&Token::RParen) {
                    loop {
                        let k = p.ident()?;
                        p.expect(Token::Eq, "'='")?;
                        match p.next()? {
                            Token::Number(v) => kw.push((k, v)),
                            t => {
                                return Err(ParseError::Expected {
                                    expected: "number".into(),
                                    found: format!("{t:?}"),
                                })
                            }
                        }
                        match p.next()? {
                            Token::Comma => continue,
                            Token::RParen => break,
                            t => {
                                return Err(ParseError::Expected {
                                    expected: "',' or ')'".into(),
                                    found: format!("{t:?}"),
                                })
                            }
                        }
                    }
                } else {
                    p.next()?;
                }
                Ok(Arg::Set(build_set(&key, &kw)?))
            }
            _ => match key.as_str() {
                "orthant" => Ok(Arg::Set(ConstraintKind::NonnegativeOrthant)),
                "mean0" => Ok(Arg::Set(ConstraintKind::ZeroMean)),
                _ => Ok(Arg::Bare(key)),
            },
        },
        t => Err(ParseError::Expected {
            expected: "argument".into(),
            found: format!("{t:?}"),
        }),
    }
}

fn build_set(name: &str, kw: &[(String, f64)]) -> Result<ConstraintKind, ParseError> {
    let get = |key: &str| kw.iter().find(|(k, _)| k == key).map(|(_, v)| *v);
    match name {
        "ball" => {
            let p = get("p").unwrap_or(2.0);
            if p != 2.0 {
                return Err(ParseError::BadValue {
                    arg: "p".into(),
                    message: "only the Euclidean ball (p=2) is projectable".into(),
                });
            }
            let r = get("r").ok_or(ParseError::MissingArgument {
                atom: "ball".into(),
                arg: "r".into(),
            })?;
            if r <= 0.0 {
                return Err(ParseError::BadValue {
                    arg: "r".into(),
                    message: "radius must be positive".into(),
                });
            }
            Ok(ConstraintKind::Ball2 { radius: r })
        }
        "fix" => {
            let j = get("j").ok_or(ParseError::MissingArgument {
                atom: "fix".into(),
                arg: "j".into(),
            })?;
            let c = get("c").ok_or(ParseError::MissingArgument {
                atom: "fix".into(),
                arg: "c".into(),
            })?;
            if j < 1.0 || j.fract() != 0.0 {
                return Err(ParseError::BadValue {
                    arg: "j".into(),
                    message: "coordinate index must be a positive integer".into(),
                });
            }
            Ok(ConstraintKind::FixedCoordinate {
                index: j as usize - 1,
                value: c,
            })
        }
        _ => Err(ParseError::UnknownAtom(name.into())),
    }
}

fn build_atom(name: &str, args: Vec<Arg>) -> Result<LossExpr, ParseError> {
    let mut k: Option<usize> = None;
    let mut p: Option<f64> = None;
    let mut d: Option<usize> = None;
    let mut lambda: Option<f64> = None;
    let mut u: Option<ConvexScalarMap> = None;
    let mut side: Option<FeatureSide> = None;
    let mut set: Option<ConstraintKind> = None;
    for arg in args {
        match arg {
            Arg::Num(key, v) => match key.as_str() {
                "k" => k = Some(positive_int(&key, v)?),
                "d" => d = Some(positive_int(&key, v)?),
                "p" => p = Some(v),
                "lambda" => lambda = Some(v),
                _ => {
                    return Err(ParseError::UnknownArgument {
                        atom: name.into(),
                        arg: key,
                    })
                }
            },
            Arg::Word(key, w) => match (key.as_str(), w.as_str()) {
                ("u", "square") => u = Some(ConvexScalarMap::Square),
                ("u", "exp") => u = Some(ConvexScalarMap::Exp),
                ("u", "softplus") => u = Some(ConvexScalarMap::Softplus),
                ("u", "kl") => u = Some(ConvexScalarMap::KlConjugate),
                ("u", "chi2") => u = Some(ConvexScalarMap::Chi2Conjugate),
                ("u", other) => {
                    return Err(ParseError::BadValue {
                        arg: "u".into(),
                        message: format!("unknown convex map {other:?}"),
                    })
                }
                _ => {
                    return Err(ParseError::UnknownArgument {
                        atom: name.into(),
                        arg: key,
                    })
                }
            },
            Arg::Bare(word) => match word.as_str() {
                "f" => side = Some(FeatureSide::F),
                "g" => side = Some(FeatureSide::G),
                _ => {
                    return Err(ParseError::UnknownArgument {
                        atom: name.into(),
                        arg: word,
                    })
                }
            },
            Arg::Set(s) => set = Some(s),
        }
    }
    let need_k = || {
        k.ok_or(ParseError::MissingArgument {
            atom: name.into(),
            arg: "k".into(),
        })
    };
    let need_side = || {
        side.ok_or(ParseError::MissingArgument {
            atom: name.into(),
            arg: "f or g".into(),
        })
    };
    let need_p = || {
        let v = p.ok_or(ParseError::MissingArgument {
            atom: name.into(),
            arg: "p".into(),
        })?;
        if v < 1.0 {
            return Err(ParseError::BadValue {
                arg: "p".into(),
                message: "p-norms need p >= 1".into(),
            });
        }
        Ok(v)
    };
    match name {
        "h" => Ok(LossExpr::HScore {
            k: need_k()?,
            negated: true,
        }),
        "nested_h" => Ok(LossExpr::neg_nested_h_score(need_k()?)),
        "logloss" => Ok(LossExpr::LogLoss { k: need_k()? }),
        "svm" => {
            let d = d.ok_or(ParseError::MissingArgument {
                atom: name.into(),
                arg: "d".into(),
            })?;
            let lambda = lambda.unwrap_or(0.0);
            if lambda < 0.0 {
                return Err(ParseError::BadValue {
                    arg: "lambda".into(),
                    message: "lambda must be nonnegative".into(),
                });
            }
            Ok(LossExpr::Svm { d, lambda })
        }
        "fdiv" => Ok(LossExpr::FDiv {
            k: need_k()?,
            u: u.ok_or(ParseError::MissingArgument {
                atom: name.into(),
                arg: "u".into(),
            })?,
        }),
        "dist2" => Ok(LossExpr::PairwiseJoint {
            k: need_k()?,
            map: PairDistance::Squared,
        }),
        "distp" => Ok(LossExpr::PairwiseJoint {
            k: need_k()?,
            map: PairDistance::PNorm(need_p()?),
        }),
        "dist2_prod" => Ok(LossExpr::PairwiseProduct {
            k: need_k()?,
            map: PairDistance::Squared,
        }),
        "distp_prod" => Ok(LossExpr::PairwiseProduct {
            k: need_k()?,
            map: PairDistance::PNorm(need_p()?),
        }),
        "l2" => Ok(LossExpr::NormReg {
            side: need_side()?,
            weight: 1.0,
            penalty: NormPenalty::SquaredL2,
        }),
        "lp" => Ok(LossExpr::NormReg {
            side: need_side()?,
            weight: 1.0,
            penalty: NormPenalty::PNorm(need_p()?),
        }),
        "constrain" => Ok(LossExpr::Constraint {
            side: need_side()?,
            set: set.ok_or(ParseError::MissingArgument {
                atom: name.into(),
                arg: "constraint set".into(),
            })?,
        }),
        "raw_index" => Ok(LossExpr::RawIndexProbe { k: need_k()? }),
        _ => Err(ParseError::UnknownAtom(name.into())),
    }
}

fn positive_int(arg: &str, v: f64) -> Result<usize, ParseError> {
    if v < 1.0 || v.fract() != 0.0 {
        return Err(ParseError::BadValue {
            arg: arg.into(),
            message: format!("{v} is not a positive integer"),
        });
    }
    Ok(v as usize)
}
