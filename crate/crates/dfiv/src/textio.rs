//! Whitespace-token reader/writer shared by the plain-text checkpoint and
//! MDP formats. Floats are written in shortest round-trip form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

pub(crate) struct Tokens<'a> {
    iter: std::str::SplitWhitespace<'a>,
}

impl<'a> Tokens<'a> {
    pub fn new(text: &'a str) -> Self {
        Self {
            iter: text.split_whitespace(),
        }
    }

    pub fn next_token(&mut self) -> Result<&'a str> {
        self.iter
            .next()
            .ok_or_else(|| Error::Parse("unexpected end of input".into()))
    }

    pub fn expect(&mut self, keyword: &str) -> Result<()> {
        let tok = self.next_token()?;
        if tok == keyword {
            Ok(())
        } else {
            Err(Error::Parse(format!("expected `{keyword}`, found `{tok}`")))
        }
    }

    pub fn parse<T: FromStr>(&mut self) -> Result<T> {
        let tok = self.next_token()?;
        tok.parse()
            .map_err(|_| Error::Parse(format!("cannot parse `{tok}`")))
    }

    pub fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.parse::<f64>()).collect()
    }

    pub fn finish(mut self) -> Result<()> {
        match self.iter.next() {
            None => Ok(()),
            Some(t) => Err(Error::Parse(format!("trailing token `{t}`"))),
        }
    }
}

pub(crate) fn push_floats(out: &mut String, label: &str, values: &[f64]) {
    out.push_str(label);
    for v in values {
        let _ = write!(out, " {v:e}");
    }
    out.push('\n');
}
