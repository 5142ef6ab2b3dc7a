//! Scheme and dimension strings.
//!
//! ```text
//! scheme := "frame"
//!         | "keydetail:" k
//!         | "cube:" kt "," kh "," kw
//!         | "multiscale:" t "," h "," w (";" t "," h "," w)*
//! dims   := t "," h "," w "," c
//! ```
//!
//! Integers are unsigned decimal without sign or whitespace.

use videoar_core::{Dims, Scale, UnitScheme};

use crate::error::{Error, Result};

struct Cursor<'a> {
    input: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, offset: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            input: self.input.to_string(),
            offset,
            msg: msg.into(),
        })
    }

    fn rest(&self) -> &'a str {
        &self.input[self.pos..]
    }

    fn eat(&mut self, s: &str) -> bool {
        if self.rest().starts_with(s) {
            self.pos += s.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, s: &str) -> Result<()> {
        if self.eat(s) {
            Ok(())
        } else {
            self.err(self.pos, format!("expected {s:?}"))
        }
    }

    /// Unsigned integer with its start offset.
    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        let start = self.pos;
        let digits = self.rest().bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return self.err(start, format!("expected an integer for {what}"));
        }
        self.pos += digits;
        let v: usize = match self.input[start..self.pos].parse() {
            Ok(v) => v,
            Err(_) => return self.err(start, format!("{what} is out of range")),
        };
        Ok((v, start))
    }

    fn positive(&mut self, what: &str) -> Result<(usize, usize)> {
        let (v, start) = self.number(what)?;
        if v == 0 {
            return self.err(start, format!("{what} must be positive"));
        }
        Ok((v, start))
    }

    fn list(&mut self, names: &[&str]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if i > 0 {
                self.expect(",")?;
            }
            out.push(self.positive(name)?.0);
        }
        Ok(out)
    }

    fn end(&self) -> Result<()> {
        if self.pos != self.input.len() {
            return self.err(self.pos, format!("unexpected trailing input {:?}", self.rest()));
        }
        Ok(())
    }
}

pub fn parse_scheme(input: &str) -> Result<UnitScheme> {
    let mut c = Cursor { input, pos: 0 };
    let scheme = if c.eat("frame") {
        UnitScheme::Frame
    } else if c.eat("keydetail:") {
        let (k, at) = c.number("k")?;
        if k < 2 {
            return c.err(at, format!("keydetail interval must be >= 2, got {k}"));
        }
        UnitScheme::KeyDetail { k }
    } else if c.eat("cube:") {
        let v = c.list(&["kt", "kh", "kw"])?;
        UnitScheme::Cube { kt: v[0], kh: v[1], kw: v[2] }
    } else if c.eat("multiscale:") {
        let mut scales = Vec::new();
        loop {
            let v = c.list(&["scale t", "scale h", "scale w"])?;
            scales.push(Scale::new(v[0], v[1], v[2]));
            if !c.eat(";") {
                break;
            }
        }
        UnitScheme::Multiscale(scales)
    } else {
        return c.err(0, "unknown scheme; expected frame, keydetail:k, cube:kt,kh,kw or multiscale:t,h,w;...");
    };
    c.end()?;
    Ok(scheme)
}

pub fn parse_dims(input: &str) -> Result<Dims> {
    let mut c = Cursor { input, pos: 0 };
    let v = c.list(&["t", "h", "w", "c"])?;
    c.end()?;
    Ok(Dims::new(v[0], v[1], v[2], v[3]))
}

/// Inverse of [`parse_scheme`].
pub fn format_scheme(scheme: &UnitScheme) -> String {
    match scheme {
        UnitScheme::Frame => "frame".into(),
        UnitScheme::KeyDetail { k } => format!("keydetail:{k}"),
        UnitScheme::Cube { kt, kh, kw } => format!("cube:{kt},{kh},{kw}"),
        UnitScheme::Multiscale(scales) => {
            let parts: Vec<String> = scales.iter().map(|s| format!("{},{},{}", s.t, s.h, s.w)).collect();
            format!("multiscale:{}", parts.join(";"))
        }
    }
}

pub fn format_dims(d: Dims) -> String {
    format!("{},{},{},{}", d.t, d.h, d.w, d.c)
}
