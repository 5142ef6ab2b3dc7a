//! Line-delimited report records, as `kind key=value ...` text or JSON
//! objects with the same fields.

use std::io::{self, Write};

use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub kind: &'static str,
    pub fields: Vec<(&'static str, Value)>,
}

impl Record {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, fields: Vec::new() }
    }

    pub fn with(mut self, key: &'static str, value: impl Into<Value>) -> Self {
        self.fields.push((key, value.into()));
        self
    }

    pub fn text(&self) -> String {
        let mut s = self.kind.to_string();
        for (k, v) in &self.fields {
            let v = match v {
                Value::String(s) => s.clone(),
                Value::Null => "nan".into(),
                other => other.to_string(),
            };
            s.push_str(&format!(" {k}={v}"));
        }
        s
    }

    pub fn json(&self) -> String {
        let mut m = Map::new();
        m.insert("record".into(), Value::String(self.kind.into()));
        for (k, v) in &self.fields {
            m.insert((*k).into(), v.clone());
        }
        Value::Object(m).to_string()
    }
}

pub struct Emitter<W: Write> {
    pub json: bool,
    out: W,
}

impl<W: Write> Emitter<W> {
    pub fn new(out: W, json: bool) -> Self {
        Self { json, out }
    }

    pub fn emit(&mut self, r: &Record) -> io::Result<()> {
        let line = if self.json { r.json() } else { r.text() };
        writeln!(self.out, "{line}")
    }

    pub fn raw(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.out.write_all(bytes)
    }

    pub fn raw_writer(&mut self) -> &mut W {
        &mut self.out
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_and_json_carry_the_same_fields() {
        let r = Record::new("demo").with("a", 1).with("b", "x").with("c", 0.5);
        assert_eq!(r.text(), "demo a=1 b=x c=0.5");
        assert_eq!(r.json(), r#"{"record":"demo","a":1,"b":"x","c":0.5}"#);
    }

    #[test]
    fn nan_is_null() {
        let r = Record::new("demo").with("v", f64::NAN);
        assert_eq!(r.text(), "demo v=nan");
        assert_eq!(r.json(), r#"{"record":"demo","v":null}"#);
    }
}
