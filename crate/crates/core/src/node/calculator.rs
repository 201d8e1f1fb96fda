//! Arithmetic over any `num_traits::Num` scalar.
//!
//! Grammar, with the usual precedence and left associativity:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := ('+' | '-') factor | integer | '(' expr ')'
//! ```
//!
//! `−`, `×` and `÷` are accepted as spellings of `-`, `*` and `/`.

use std::fmt::Display;
use std::marker::PhantomData;
use std::ops::Neg;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Num;
use thiserror::Error;

const MAX_DEPTH: usize = 200;
const MAX_INPUT_LEN: usize = 16 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CalcError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("expression too long or too deeply nested")]
    TooComplex,
}

/// Scalars the calculator can evaluate over.
pub trait Scalar: Num + Neg<Output = Self> + Clone + Display {
    fn from_digits(digits: &str) -> Option<Self>;
}

impl Scalar for BigRational {
    fn from_digits(digits: &str) -> Option<Self> {
        digits.parse::<BigInt>().ok().map(BigRational::from_integer)
    }
}

impl Scalar for f64 {
    fn from_digits(digits: &str) -> Option<Self> {
        digits.parse().ok()
    }
}

impl Scalar for f32 {
    fn from_digits(digits: &str) -> Option<Self> {
        digits.parse().ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Token {
    Num(usize, usize),
    Plus,
    Minus,
    Star,
    Slash,
    Open,
    Close,
}

fn tokenize(input: &str) -> Result<Vec<(usize, Token)>, CalcError> {
    let mut tokens = Vec::new();
    let mut chars = input.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let token = match c {
            c if c.is_whitespace() => continue,
            '0'..='9' => {
                let mut end = i + 1;
                while let Some(&(j, d)) = chars.peek() {
                    if !d.is_ascii_digit() {
                        break;
                    }
                    end = j + 1;
                    chars.next();
                }
                Token::Num(i, end)
            }
            '+' => Token::Plus,
            '-' | '\u{2212}' => Token::Minus,
            '*' | '\u{00d7}' => Token::Star,
            '/' | '\u{00f7}' => Token::Slash,
            '(' => Token::Open,
            ')' => Token::Close,
            other => {
                return Err(CalcError::Syntax {
                    offset: i,
                    message: format!("unexpected character {other:?}"),
                })
            }
        };
        tokens.push((i, token));
    }
    Ok(tokens)
}

struct Parser<'a, T> {
    input: &'a str,
    tokens: Vec<(usize, Token)>,
    pos: usize,
    depth: usize,
    _scalar: PhantomData<T>,
}

impl<T: Scalar> Parser<'_, T> {
    fn peek(&self) -> Option<Token> {
        self.tokens.get(self.pos).map(|t| t.1)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.input.len(), |t| t.0)
    }

    fn syntax(&self, message: &str) -> CalcError {
        CalcError::Syntax {
            offset: self.offset(),
            message: message.to_owned(),
        }
    }

    fn expr(&mut self) -> Result<T, CalcError> {
        let mut acc = self.term()?;
        while let Some(op @ (Token::Plus | Token::Minus)) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            acc = if op == Token::Plus { acc + rhs } else { acc - rhs };
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<T, CalcError> {
        let mut acc = self.factor()?;
        while let Some(op @ (Token::Star | Token::Slash)) = self.peek() {
            self.pos += 1;
            let rhs = self.factor()?;
            acc = if op == Token::Star {
                acc * rhs
            } else if rhs.is_zero() {
                return Err(CalcError::DivisionByZero);
            } else {
                acc / rhs
            };
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<T, CalcError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(CalcError::TooComplex);
        }
        let value = match self.peek() {
            Some(Token::Plus) => {
                self.pos += 1;
                self.factor()?
            }
            Some(Token::Minus) => {
                self.pos += 1;
                -self.factor()?
            }
            Some(Token::Num(start, end)) => {
                self.pos += 1;
                T::from_digits(&self.input[start..end])
                    .ok_or_else(|| self.syntax("number out of range"))?
            }
            Some(Token::Open) => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(Token::Close) {
                    return Err(self.syntax("expected ')'"));
                }
                self.pos += 1;
                inner
            }
            Some(_) => return Err(self.syntax("expected a number or '('")),
            None => return Err(self.syntax("unexpected end of expression")),
        };
        self.depth -= 1;
        Ok(value)
    }
}

/// Evaluates expressions over the scalar type `T`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Calculator<T>(PhantomData<T>);

impl<T: Scalar> Calculator<T> {
    pub fn new() -> Self {
        Calculator(PhantomData)
    }

    pub fn evaluate(&self, input: &str) -> Result<T, CalcError> {
        if input.len() > MAX_INPUT_LEN {
            return Err(CalcError::TooComplex);
        }
        let mut parser = Parser {
            input,
            tokens: tokenize(input)?,
            pos: 0,
            depth: 0,
            _scalar: PhantomData,
        };
        let value = parser.expr()?;
        if parser.pos != parser.tokens.len() {
            return Err(parser.syntax("trailing input"));
        }
        Ok(value)
    }

    /// Evaluates and renders the result (`7/2` for non-integer rationals).
    pub fn evaluate_to_string(&self, input: &str) -> Result<String, CalcError> {
        self.evaluate(input).map(|v| v.to_string())
    }
}
