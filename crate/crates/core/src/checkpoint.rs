//! Lossless text checkpoints.
//!
//! ```text
//! hydra-peft-checkpoint 1
//! meta <key> <value>
//! tensor <name> <rows> <cols>
//! <cols space-separated values, one line per row>
//! end
//! ```
//!
//! Each value is the 16 lowercase hex digits of the IEEE-754 binary64
//! little-endian bytes, so a save/load round trip is bit-exact. Lines end
//! with `\n`. Meta entries come first, then tensors, both sorted by name.
//! Adapters are stored under an attachment point `P`: meta
//! `adapter.P.scheme` and `adapter.P.alpha` (hex-encoded like tensor
//! values) plus tensors `P.<local>` as named by [`Adapter::tensors`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::adapters::{Adapter, Scheme};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &str = "hydra-peft-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Attachment point used for a standalone adapter file.
pub const STANDALONE_POINT: &str = "layer0.proj";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Matrix>,
}

pub fn encode_f64(v: f64) -> String {
    hex::encode(v.to_le_bytes())
}

pub fn decode_f64(s: &str) -> Option<f64> {
    let mut bytes = [0u8; 8];
    if s.len() != 16 {
        return None;
    }
    hex::decode_to_slice(s, &mut bytes).ok()?;
    Some(f64::from_le_bytes(bytes))
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn insert_adapter(&mut self, point: &str, adapter: &Adapter) {
        self.set_meta(format!("adapter.{point}.scheme"), adapter.scheme().as_str());
        self.set_meta(
            format!("adapter.{point}.alpha"),
            encode_f64(adapter.alpha()),
        );
        for (local, t) in adapter.tensors() {
            self.tensors.insert(format!("{point}.{local}"), t.clone());
        }
    }

    /// Attachment points that carry an adapter, in name order.
    pub fn adapter_points(&self) -> Vec<String> {
        self.meta
            .keys()
            .filter_map(|k| {
                k.strip_prefix("adapter.")?
                    .strip_suffix(".scheme")
                    .map(str::to_string)
            })
            .collect()
    }

    pub fn adapter(&self, point: &str) -> Result<Adapter> {
        let scheme: Scheme = self
            .meta
            .get(&format!("adapter.{point}.scheme"))
            .ok_or_else(|| Error::usage(format!("checkpoint has no adapter at {point:?}")))?
            .parse()?;
        let alpha = self
            .meta
            .get(&format!("adapter.{point}.alpha"))
            .and_then(|s| decode_f64(s))
            .ok_or_else(|| Error::usage(format!("adapter {point:?} has no valid alpha")))?;
        Adapter::from_tensors(scheme, alpha, |local| {
            self.tensors.get(&format!("{point}.{local}")).cloned()
        })
    }

    pub fn adapters(&self) -> Result<Vec<(String, Adapter)>> {
        self.adapter_points()
            .into_iter()
            .map(|p| self.adapter(&p).map(|a| (p, a)))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {FORMAT_VERSION}\n");
        for (k, v) in &self.meta {
            debug_assert!(valid_token(k) && !v.contains('\n'));
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, m) in &self.tensors {
            let _ = writeln!(out, "tensor {name} {} {}", m.rows(), m.cols());
            for r in 0..m.rows() {
                let row: Vec<String> = m.row(r).iter().map(|&v| encode_f64(v)).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Checkpoint> {
        let mut lines = Lines { text, pos: 0 };
        let perr = |offset: usize, message: String| Error::Parse { offset, message };

        let (off, header) = lines
            .next()
            .ok_or_else(|| perr(0, "empty checkpoint".into()))?;
        let version = header
            .strip_prefix(MAGIC)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| perr(off, format!("missing {MAGIC:?} header")))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::Version {
                found: version.to_string(),
                expected: FORMAT_VERSION,
            });
        }

        let mut ckpt = Checkpoint::new();
        loop {
            let (off, line) = lines
                .next()
                .ok_or_else(|| perr(text.len(), "truncated checkpoint (no end marker)".into()))?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                if !valid_token(k) {
                    return Err(perr(off, "bad meta key".into()));
                }
                ckpt.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                let [name, rows, cols] = parts[..] else {
                    return Err(perr(off, format!("bad tensor header {line:?}")));
                };
                let rows: usize = rows
                    .parse()
                    .map_err(|_| perr(off, format!("bad row count {rows:?}")))?;
                let cols: usize = cols
                    .parse()
                    .map_err(|_| perr(off, format!("bad column count {cols:?}")))?;
                if rows == 0 || cols == 0 {
                    return Err(perr(off, format!("tensor {name} has a zero dimension")));
                }
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (roff, row) = lines
                        .next()
                        .ok_or_else(|| perr(text.len(), format!("truncated tensor {name}")))?;
                    let mut col_off = roff;
                    let mut count = 0;
                    for tok in row.split(' ') {
                        let v = decode_f64(tok)
                            .ok_or_else(|| perr(col_off, format!("bad value {tok:?}")))?;
                        if !v.is_finite() {
                            return Err(perr(col_off, "non-finite value".into()));
                        }
                        data.push(v);
                        col_off += tok.len() + 1;
                        count += 1;
                    }
                    if count != cols {
                        return Err(perr(
                            roff,
                            format!("expected {cols} values in a row of {name}, found {count}"),
                        ));
                    }
                }
                let m = Matrix::new(rows, cols, data).map_err(|e| perr(off, e.to_string()))?;
                if ckpt.tensors.insert(name.to_string(), m).is_some() {
                    return Err(perr(off, format!("duplicate tensor {name}")));
                }
            } else {
                return Err(perr(off, format!("unexpected line {line:?}")));
            }
        }
        if let Some((off, _)) = lines.next() {
            return Err(perr(off, "trailing data after end marker".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
            offset: e.valid_up_to(),
            message: "checkpoint is not UTF-8".into(),
        })?;
        Checkpoint::parse(text)
    }
}

/// Single-adapter checkpoint text.
pub fn adapter_to_text(adapter: &Adapter) -> String {
    let mut c = Checkpoint::new();
    c.insert_adapter(STANDALONE_POINT, adapter);
    c.to_text()
}

pub fn adapter_from_text(text: &str) -> Result<Adapter> {
    let c = Checkpoint::parse(text)?;
    match c.adapter_points().as_slice() {
        [only] => c.adapter(only),
        points => Err(Error::usage(format!(
            "expected one adapter, checkpoint has {}",
            points.len()
        ))),
    }
}

pub fn save_adapter(path: impl AsRef<Path>, adapter: &Adapter) -> Result<()> {
    fs::write(path, adapter_to_text(adapter))?;
    Ok(())
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<Adapter> {
    adapter_from_text(&fs::read_to_string(path)?)
}

struct Lines<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Iterator for Lines<'a> {
    /// (byte offset of line start, line without terminator)
    type Item = (usize, &'a str);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.text.len() {
            return None;
        }
        let start = self.pos;
        let rest = &self.text[start..];
        let end = rest.find('\n').unwrap_or(rest.len());
        self.pos = start + end + 1;
        Some((start, &rest[..end]))
    }
}
