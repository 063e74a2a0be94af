//! Dilation schedules in the compact `(1,1)+(1,2)+4*(1,4)+7*(1,14)` notation.
//!
//! Grammar (whitespace allowed between tokens):
//!
//! ```text
//! schedule := term ('+' term)*
//! term     := [count '*'] '(' rate (',' rate)* ')'
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Dilation rates of one block, one entry per parallel branch.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Dilations(Vec<usize>);

impl Dilations {
    pub fn new(rates: Vec<usize>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::Value("a dilation tuple needs at least one rate".into()));
        }
        if rates.contains(&0) {
            return Err(Error::Value("dilation rates must be >= 1".into()));
        }
        Ok(Dilations(rates))
    }

    /// Single-branch, undilated.
    pub fn unit() -> Self {
        Dilations(vec![1])
    }

    pub fn rates(&self) -> &[usize] {
        &self.0
    }

    pub fn branches(&self) -> usize {
        self.0.len()
    }

    pub fn max(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(1)
    }

    pub fn is_uniform(&self) -> bool {
        self.0.windows(2).all(|w| w[0] == w[1])
    }
}

impl fmt::Display for Dilations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// Per-block dilation tuples, in block order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DilationSchedule {
    blocks: Vec<Dilations>,
}

/// The default backbone's schedule.
pub const DEFAULT_SCHEDULE: &str = "(1,1)+(1,2)+4*(1,4)+7*(1,14)";

impl DilationSchedule {
    pub fn new(blocks: Vec<Dilations>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Value("schedule must contain at least one block".into()));
        }
        Ok(DilationSchedule { blocks })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Parser::new(text).schedule()
    }

    pub fn default_backbone() -> Self {
        Self::parse(DEFAULT_SCHEDULE).expect("default schedule parses")
    }

    /// `len` copies of one tuple.
    pub fn uniform(len: usize, rates: &[usize]) -> Result<Self> {
        let d = Dilations::new(rates.to_vec())?;
        Self::new(vec![d; len])
    }

    pub fn blocks(&self) -> &[Dilations] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

impl FromStr for DilationSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

/// Canonical form: runs of equal tuples collapse to `n*(...)`, runs of one
/// print bare, terms joined by `+` without spaces.
impl fmt::Display for DilationSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        let mut i = 0;
        while i < self.blocks.len() {
            let run = self.blocks[i..].iter().take_while(|d| **d == self.blocks[i]).count();
            if !first {
                f.write_str("+")?;
            }
            first = false;
            if run > 1 {
                write!(f, "{run}*")?;
            }
            write!(f, "{}", self.blocks[i])?;
            i += run;
        }
        Ok(())
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser {
            src: text.as_bytes(),
            pos: 0,
        }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Syntax {
            position: self.pos,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, byte: u8) -> Result<()> {
        match self.peek() {
            Some(b) if b == byte => {
                self.pos += 1;
                Ok(())
            }
            Some(b) => Err(self.err(format!("expected '{}', found '{}'", byte as char, b as char))),
            None => Err(self.err(format!("expected '{}', found end of input", byte as char))),
        }
    }

    /// Unsigned integer; a leading '-' is reported as a value error.
    fn integer(&mut self) -> Result<usize> {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&b'-') {
            return Err(Error::Value(format!("negative number at position {}", self.pos)));
        }
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected a number"));
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Syntax {
                position: start,
                message: "number out of range".into(),
            })
    }

    fn tuple(&mut self) -> Result<Dilations> {
        self.expect(b'(')?;
        let mut rates = Vec::new();
        loop {
            let at = self.pos;
            let r = self.integer()?;
            if r == 0 {
                return Err(Error::Value(format!("zero dilation rate at position {at}")));
            }
            rates.push(r);
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b')') => {
                    self.pos += 1;
                    return Dilations::new(rates);
                }
                Some(_) => return Err(self.err("expected ',' or ')'")),
                None => return Err(self.err("unterminated tuple")),
            }
        }
    }

    fn term(&mut self, out: &mut Vec<Dilations>) -> Result<()> {
        let count = if self.peek() == Some(b'(') {
            1
        } else {
            let at = self.pos;
            let n = self.integer()?;
            if n == 0 {
                return Err(Error::Value(format!("zero repeat count at position {at}")));
            }
            self.expect(b'*')?;
            n
        };
        let d = self.tuple()?;
        out.extend(std::iter::repeat_n(d, count));
        Ok(())
    }

    fn schedule(mut self) -> Result<DilationSchedule> {
        let mut blocks = Vec::new();
        self.term(&mut blocks)?;
        while let Some(b) = self.peek() {
            if b != b'+' {
                return Err(self.err(format!("unexpected '{}'", b as char)));
            }
            self.pos += 1;
            self.term(&mut blocks)?;
        }
        DilationSchedule::new(blocks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dilation columns of the backbone ablation table, rows 1-9.
    const ABLATION_ROWS: [&str; 9] = [
        "(1,1)+(1,2)+4*(1,4)+7*(1,14)",
        "(1,1)+(1,2)+(1,4)+(1,6)+(1,8)+(1,10)+7*(1,12)",
        "(1,1)+(1,2)+(1,4)+(1,6)+(1,8)+(1,10)+7*(1,3,6,12)",
        "(1,1)+(1,2)+(1,4)+(1,6)+(1,8)+8*(1,10)",
        "(1,1)+(1,2)+6*(1,4)+5*(1,6,12,18)",
        "(1,1)+(1,2)+(1,4)+10*(1,6)",
        "(1,1)+(1,2)+(1,4)+(1,6)+(1,8)+(1,10)+(1,12)+6*(1,14)",
        "5*(1,4)+8*(1,10)",
        "(1,1)+(1,2)+(1,4)+(1,6)+(1,8)+(1,10)+7*(1,4,8,12)",
    ];

    #[test]
    fn default_expands_to_thirteen() {
        let s = DilationSchedule::parse(DEFAULT_SCHEDULE).unwrap();
        let rates: Vec<Vec<usize>> = s.blocks().iter().map(|d| d.rates().to_vec()).collect();
        let mut want = vec![vec![1, 1], vec![1, 2]];
        want.extend(std::iter::repeat_n(vec![1, 4], 4));
        want.extend(std::iter::repeat_n(vec![1, 14], 7));
        assert_eq!(rates, want);
    }

    #[test]
    fn four_branch_tuple() {
        let s = DilationSchedule::parse("(1,6,12,18)").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.blocks()[0].rates(), &[1, 6, 12, 18]);
        assert_eq!(s.blocks()[0].max(), 18);
    }

    #[test]
    fn every_ablation_row_is_thirteen_blocks_and_round_trips() {
        for row in ABLATION_ROWS {
            let s = DilationSchedule::parse(row).unwrap();
            assert_eq!(s.len(), 13, "{row}");
            assert_eq!(s.to_string(), row);
        }
    }

    #[test]
    fn canonicalizes_spacing_and_runs() {
        let s = DilationSchedule::parse(" 1*(1, 2) + (1,2)+(3)").unwrap();
        assert_eq!(s.to_string(), "2*(1,2)+(3)");
    }

    #[test]
    fn syntax_errors_carry_position() {
        match DilationSchedule::parse("(1,1)+(1,2").unwrap_err() {
            Error::Syntax { position, .. } => assert_eq!(position, 10),
            e => panic!("unexpected {e:?}"),
        }
        match DilationSchedule::parse("(1,1)x").unwrap_err() {
            Error::Syntax { position, .. } => assert_eq!(position, 5),
            e => panic!("unexpected {e:?}"),
        }
        assert!(matches!(DilationSchedule::parse(""), Err(Error::Syntax { .. })));
        assert!(matches!(DilationSchedule::parse("4(1,2)"), Err(Error::Syntax { .. })));
        assert!(matches!(DilationSchedule::parse("()"), Err(Error::Syntax { .. })));
    }

    #[test]
    fn zero_or_negative_rates_are_value_errors() {
        assert!(matches!(DilationSchedule::parse("(1,0)"), Err(Error::Value(_))));
        assert!(matches!(DilationSchedule::parse("(1,-2)"), Err(Error::Value(_))));
        assert!(matches!(DilationSchedule::parse("0*(1,2)"), Err(Error::Value(_))));
    }
}
