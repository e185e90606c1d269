//! Versioned structured-text artifact format.
//!
//! Every persisted artifact (demonstrations, policy weights, prompt
//! libraries, traces) is a line-oriented text file: a `<kind> v<N>` header,
//! `key value` scalar lines, and named arrays. Floats are written with 17
//! significant digits, which round-trips every finite f64 bit-exactly, so
//! save -> load -> save reproduces the file byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Format one float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub struct TextWriter {
    buf: String,
}

impl TextWriter {
    pub fn new(kind: &str, version: u32) -> Self {
        let mut buf = String::new();
        let _ = writeln!(buf, "{kind} v{version}");
        Self { buf }
    }

    pub fn kv(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.buf, "{key} {value}");
        self
    }

    pub fn kv_f64(&mut self, key: &str, value: f64) -> &mut Self {
        let _ = writeln!(self.buf, "{key} {}", fmt_f64(value));
        self
    }

    /// Named rows x cols float array, one row per line.
    pub fn floats(&mut self, name: &str, rows: usize, cols: usize, data: &[f64]) -> &mut Self {
        assert_eq!(data.len(), rows * cols, "array shape mismatch for {name}");
        let _ = writeln!(self.buf, "array {name} {rows} {cols}");
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let line: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
            let _ = writeln!(self.buf, "{}", line.join(" "));
        }
        self
    }

    /// Named integer list on a single line.
    pub fn ints(&mut self, name: &str, data: &[i64]) -> &mut Self {
        let _ = write!(self.buf, "ints {name} {}", data.len());
        for v in data {
            let _ = write!(self.buf, " {v}");
        }
        let _ = writeln!(self.buf);
        self
    }

    pub fn finish(self) -> String {
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        std::fs::write(path, self.buf)?;
        Ok(())
    }
}

/// Strict sequential reader for the format above.
pub struct TextReader {
    path: String,
    lines: Vec<String>,
    pos: usize,
}

impl TextReader {
    pub fn from_string(label: &str, content: &str) -> Self {
        Self {
            path: label.to_string(),
            lines: content.lines().map(str::to_string).collect(),
            pos: 0,
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        Ok(Self::from_string(&path.display().to_string(), &content))
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            reason: reason.into(),
        }
    }

    fn next_line(&mut self) -> Result<&str> {
        let line = self
            .lines
            .get(self.pos)
            .ok_or_else(|| Error::Parse {
                path: self.path.clone(),
                reason: "unexpected end of file".into(),
            })?;
        self.pos += 1;
        Ok(line)
    }

    /// Consume the `<kind> v<version>` header, failing on any other tag.
    pub fn expect_header(&mut self, kind: &str, version: u32) -> Result<()> {
        let expected = format!("{kind} v{version}");
        let line = self.next_line()?.to_string();
        if line.trim() != expected {
            return Err(Error::VersionMismatch {
                path: self.path.clone(),
                expected,
                found: line,
            });
        }
        Ok(())
    }

    /// Consume a `key value...` line, returning the value tokens.
    pub fn kv(&mut self, key: &str) -> Result<Vec<String>> {
        let line = self.next_line()?.to_string();
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some(k) if k == key => Ok(toks.map(str::to_string).collect()),
            other => Err(self.err(format!(
                "expected key `{key}`, found `{}`",
                other.unwrap_or("<empty>")
            ))),
        }
    }

    pub fn kv_parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let vals = self.kv(key)?;
        let tok = vals
            .first()
            .ok_or_else(|| self.err(format!("key `{key}` has no value")))?;
        tok.parse()
            .map_err(|_| self.err(format!("cannot parse `{tok}` for key `{key}`")))
    }

    /// Consume a named float array, returning (rows, cols, data).
    pub fn floats(&mut self, name: &str) -> Result<(usize, usize, Vec<f64>)> {
        let line = self.next_line()?.to_string();
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 || toks[0] != "array" || toks[1] != name {
            return Err(self.err(format!("expected `array {name} <rows> <cols>`, found `{line}`")));
        }
        let rows: usize = toks[2]
            .parse()
            .map_err(|_| self.err("bad row count"))?;
        let cols: usize = toks[3]
            .parse()
            .map_err(|_| self.err("bad col count"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row = self.next_line()?.to_string();
            for tok in row.split_whitespace() {
                let x: f64 = tok
                    .parse()
                    .map_err(|_| self.err(format!("bad float `{tok}` in array {name}")))?;
                data.push(x);
            }
        }
        if data.len() != rows * cols {
            return Err(self.err(format!(
                "array {name}: expected {} values, found {}",
                rows * cols,
                data.len()
            )));
        }
        Ok((rows, cols, data))
    }

    /// Consume a named integer list.
    pub fn ints(&mut self, name: &str) -> Result<Vec<i64>> {
        let line = self.next_line()?.to_string();
        let mut toks = line.split_whitespace();
        match (toks.next(), toks.next()) {
            (Some("ints"), Some(n)) if n == name => {}
            _ => return Err(self.err(format!("expected `ints {name} ...`, found `{line}`"))),
        }
        let count: usize = toks
            .next()
            .ok_or_else(|| self.err("missing int count"))?
            .parse()
            .map_err(|_| self.err("bad int count"))?;
        let vals: Vec<i64> = toks
            .map(|t| {
                t.parse()
                    .map_err(|_| self.err(format!("bad int `{t}` in {name}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != count {
            return Err(self.err(format!(
                "ints {name}: expected {count} values, found {}",
                vals.len()
            )));
        }
        Ok(vals)
    }

    pub fn at_end(&self) -> bool {
        self.pos >= self.lines.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_roundtrip_bit_exact() {
        let xs = vec![
            0.1,
            -1.0 / 3.0,
            1e-300,
            std::f64::consts::PI,
            -0.0,
            4.9e-324,
        ];
        let mut w = TextWriter::new("t", 1);
        w.floats("x", 2, 3, &xs);
        let s = w.finish();
        let mut r = TextReader::from_string("mem", &s);
        r.expect_header("t", 1).unwrap();
        let (rows, cols, ys) = r.floats("x").unwrap();
        assert_eq!((rows, cols), (2, 3));
        for (a, b) in xs.iter().zip(&ys) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_mismatch_is_version_error() {
        let mut r = TextReader::from_string("mem", "demo v9\n");
        match r.expect_header("demo", 1) {
            Err(Error::VersionMismatch { .. }) => {}
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn kv_and_ints() {
        let mut w = TextWriter::new("t", 1);
        w.kv("n", 3_usize);
        w.ints("labels", &[1, 2, -1]);
        let s = w.finish();
        let mut r = TextReader::from_string("mem", &s);
        r.expect_header("t", 1).unwrap();
        assert_eq!(r.kv_parse::<usize>("n").unwrap(), 3);
        assert_eq!(r.ints("labels").unwrap(), vec![1, 2, -1]);
        assert!(r.at_end());
    }
}
