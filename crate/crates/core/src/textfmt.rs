//! Line-oriented structured text used by every persisted artifact.
//!
//! ```text
//! CAUMAX-MODEL v1
//! config_hash = 3f2a...
//! gcn_hidden = 32
//! @real gcn1.weight 9 32
//! 0.125 -0.5 ...
//! @end
//! @int source_ids 1 45
//! 0 3 17 ...
//! @end
//! ```
//!
//! Reals are written with Rust's shortest round-trip formatting, so a write
//! followed by a read reproduces every `f64` bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum BlockData {
    Real(Vec<f64>),
    Int(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: BlockData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Document {
    pub magic: String,
    pub meta: Vec<(String, String)>,
    pub blocks: Vec<Block>,
}

impl Document {
    pub fn new(magic: &str) -> Self {
        Document { magic: magic.to_string(), ..Default::default() }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        debug_assert!(!value.contains('\n'));
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Parse { line: 0, message: format!("missing key `{key}`") })
    }

    pub fn parse_key<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| Error::Parse { line: 0, message: format!("bad value for `{key}`: {raw}") })
    }

    pub fn push_real(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) {
        assert_eq!(rows * cols, data.len(), "block {name} shape");
        self.blocks.push(Block { name: name.to_string(), rows, cols, data: BlockData::Real(data) });
    }

    pub fn push_matrix(&mut self, name: &str, m: &Array2<f64>) {
        let (r, c) = m.dim();
        self.push_real(name, r, c, m.iter().copied().collect());
    }

    pub fn push_ints(&mut self, name: &str, rows: usize, cols: usize, data: Vec<u64>) {
        assert_eq!(rows * cols, data.len(), "block {name} shape");
        self.blocks.push(Block { name: name.to_string(), rows, cols, data: BlockData::Int(data) });
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Parse { line: 0, message: format!("missing block `{name}`") })
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let b = self.block(name)?;
        match &b.data {
            BlockData::Real(v) => Ok(Array2::from_shape_vec((b.rows, b.cols), v.clone()).expect("validated at parse")),
            BlockData::Int(_) => Err(Error::Parse { line: 0, message: format!("block `{name}` is not real-valued") }),
        }
    }

    pub fn ints(&self, name: &str) -> Result<(usize, usize, &[u64])> {
        let b = self.block(name)?;
        match &b.data {
            BlockData::Int(v) => Ok((b.rows, b.cols, v)),
            BlockData::Real(_) => Err(Error::Parse { line: 0, message: format!("block `{name}` is not integer-valued") }),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.magic);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "{k} = {v}");
        }
        for b in &self.blocks {
            let kind = match b.data {
                BlockData::Real(_) => "real",
                BlockData::Int(_) => "int",
            };
            let _ = writeln!(out, "@{kind} {} {} {}", b.name, b.rows, b.cols);
            for r in 0..b.rows {
                let range = r * b.cols..(r + 1) * b.cols;
                let mut first = true;
                match &b.data {
                    BlockData::Real(v) => {
                        for x in &v[range] {
                            if !first {
                                out.push(' ');
                            }
                            first = false;
                            let _ = write!(out, "{x:?}");
                        }
                    }
                    BlockData::Int(v) => {
                        for x in &v[range] {
                            if !first {
                                out.push(' ');
                            }
                            first = false;
                            let _ = write!(out, "{x}");
                        }
                    }
                }
                out.push('\n');
            }
            out.push_str("@end\n");
        }
        out
    }

    pub fn parse(text: &str, expected_magic: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let first = lines.next().map(|(_, l)| l.trim_end()).unwrap_or("");
        if first != expected_magic {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header \"{expected_magic}\", found \"{first}\""),
            });
        }
        let mut doc = Document::new(expected_magic);
        while let Some((idx, line)) = lines.next() {
            let lineno = idx + 1;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('@') {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 4 {
                    return Err(Error::Parse { line: lineno, message: format!("bad block header `{line}`") });
                }
                let bad = |what: &str| Error::Parse { line: lineno, message: format!("bad {what} in `{line}`") };
                let rows: usize = parts[2].parse().map_err(|_| bad("row count"))?;
                let cols: usize = parts[3].parse().map_err(|_| bad("column count"))?;
                let mut reals = Vec::new();
                let mut ints = Vec::new();
                let is_real = match parts[0] {
                    "real" => true,
                    "int" => false,
                    _ => return Err(bad("block kind")),
                };
                let mut seen_rows = 0;
                loop {
                    let (ridx, row) = lines.next().ok_or_else(|| Error::Parse {
                        line: lineno,
                        message: format!("block `{}` not terminated", parts[1]),
                    })?;
                    let row = row.trim_end();
                    if row == "@end" {
                        break;
                    }
                    let before = if is_real { reals.len() } else { ints.len() };
                    for tok in row.split_whitespace() {
                        if is_real {
                            reals.push(tok.parse::<f64>().map_err(|_| Error::Parse {
                                line: ridx + 1,
                                message: format!("bad real `{tok}`"),
                            })?);
                        } else {
                            ints.push(tok.parse::<u64>().map_err(|_| Error::Parse {
                                line: ridx + 1,
                                message: format!("bad integer `{tok}`"),
                            })?);
                        }
                    }
                    let after = if is_real { reals.len() } else { ints.len() };
                    if after - before != cols {
                        return Err(Error::Parse {
                            line: ridx + 1,
                            message: format!("expected {cols} values, found {}", after - before),
                        });
                    }
                    seen_rows += 1;
                }
                if seen_rows != rows {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("block `{}` declares {rows} rows, found {seen_rows}", parts[1]),
                    });
                }
                let data = if is_real { BlockData::Real(reals) } else { BlockData::Int(ints) };
                doc.blocks.push(Block { name: parts[1].to_string(), rows, cols, data });
            } else if let Some((k, v)) = line.split_once(" = ") {
                doc.meta.push((k.trim().to_string(), v.to_string()));
            } else {
                return Err(Error::Parse { line: lineno, message: format!("unrecognized line `{line}`") });
            }
        }
        Ok(doc)
    }

    pub fn read(path: &Path, expected_magic: &str) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Document::parse(&text, expected_magic).map_err(|e| Error::artifact(path, e.to_string()))
    }

    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.render().as_bytes())
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wrong_magic_names_expected_header() {
        let err = Document::parse("CAUMAX-DATA v1\n", "CAUMAX-MODEL v1").unwrap_err();
        assert!(err.to_string().contains("CAUMAX-MODEL v1"));
    }

    #[test]
    fn short_row_is_rejected() {
        let text = "M v1\n@real x 1 3\n1 2\n@end\n";
        assert!(matches!(Document::parse(text, "M v1"), Err(Error::Parse { line: 3, .. })));
    }

    proptest! {
        #[test]
        fn reals_round_trip_bit_exactly(vals in proptest::collection::vec(
            proptest::num::f64::POSITIVE | proptest::num::f64::NEGATIVE | proptest::num::f64::NORMAL
                | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO | proptest::num::f64::INFINITE,
            1..40,
        )) {
            let mut doc = Document::new("M v1");
            doc.set("k", "v w");
            let n = vals.len();
            doc.push_real("x", 1, n, vals.clone());
            doc.push_ints("ids", n, 1, (0..n as u64).collect());
            let back = Document::parse(&doc.render(), "M v1").unwrap();
            let BlockData::Real(got) = &back.block("x").unwrap().data else { panic!() };
            for (a, b) in vals.iter().zip(got) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back.get("k"), Some("v w"));
            prop_assert_eq!(back.ints("ids").unwrap().2.len(), n);
        }
    }
}
