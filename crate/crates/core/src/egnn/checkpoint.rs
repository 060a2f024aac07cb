//! Versioned plain-text container for model, optimizer and RNG state.
//!
//! ```text
//! ead-checkpoint 1
//! meta <key> <value>
//! group <name>
//! tensor <name> <rows> <cols>
//! <cols values>        (one line per row)
//! end
//! ```
//!
//! Values are written in shortest round-trip form, so save then load is
//! bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: u32 = 1;
const MAGIC: &str = "ead-checkpoint";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub groups: BTreeMap<String, Vec<(String, Array2<f64>)>>,
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("line {line}: {msg}"))
}

impl Checkpoint {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        debug_assert!(!key.contains(char::is_whitespace) && !value.contains('\n'));
        self.meta.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing field `{key}`")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("field `{key}` has invalid value `{raw}`")))
    }

    pub fn group(&self, name: &str) -> Result<&[(String, Array2<f64>)]> {
        self.groups
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor group `{name}`")))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {CHECKPOINT_FORMAT}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (g, tensors) in &self.groups {
            let _ = writeln!(out, "group {g}");
            for (name, t) in tensors {
                let _ = writeln!(out, "tensor {name} {} {}", t.nrows(), t.ncols());
                for row in t.rows() {
                    let mut first = true;
                    for v in row {
                        if !first {
                            out.push(' ');
                        }
                        first = false;
                        let _ = write!(out, "{v:e}");
                    }
                    out.push('\n');
                }
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, head)) => {
                let mut parts = head.split_whitespace();
                if parts.next() != Some(MAGIC) {
                    return Err(bad(1, "not a checkpoint file"));
                }
                let version: u32 = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(1, "missing format version"))?;
                if version != CHECKPOINT_FORMAT {
                    return Err(bad(1, format!("unsupported format version {version}")));
                }
            }
            None => return Err(bad(1, "empty file")),
        }
        let mut ck = Checkpoint::default();
        let mut current: Option<String> = None;
        while let Some((no, line)) = lines.next() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| bad(no, "meta without key"))?;
                    let rest = line
                        .trim_start()
                        .strip_prefix("meta")
                        .map(str::trim_start)
                        .and_then(|r| r.strip_prefix(key))
                        .map(str::trim)
                        .unwrap_or("");
                    ck.meta.insert(key.to_string(), rest.to_string());
                }
                Some("group") => {
                    let name = parts.next().ok_or_else(|| bad(no, "group without name"))?;
                    ck.groups.entry(name.to_string()).or_default();
                    current = Some(name.to_string());
                }
                Some("tensor") => {
                    let group = current.clone().ok_or_else(|| bad(no, "tensor outside a group"))?;
                    let name = parts.next().ok_or_else(|| bad(no, "tensor without name"))?;
                    let dims: Vec<usize> = parts
                        .map(|p| p.parse().map_err(|_| bad(no, format!("bad dimension `{p}`"))))
                        .collect::<Result<_>>()?;
                    let [rows, cols] = dims[..] else {
                        return Err(bad(no, "tensor needs two dimensions"));
                    };
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (rno, row) = lines.next().ok_or_else(|| bad(no, "truncated tensor"))?;
                        let before = data.len();
                        for tok in row.split_whitespace() {
                            let v: f64 = tok
                                .parse()
                                .map_err(|_| bad(rno, format!("bad value `{tok}`")))?;
                            data.push(v);
                        }
                        if data.len() - before != cols {
                            return Err(bad(rno, format!("expected {cols} values")));
                        }
                    }
                    let t = Array2::from_shape_vec((rows, cols), data)
                        .map_err(|e| bad(no, e))?;
                    ck.groups.get_mut(&group).expect("group exists").push((name.to_string(), t));
                }
                Some("end") => return Ok(ck),
                Some(other) => return Err(bad(no, format!("unexpected record `{other}`"))),
                None => {}
            }
        }
        Err(Error::Checkpoint("truncated checkpoint (missing `end`)".into()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_text()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_is_exact() {
        let mut ck = Checkpoint::default();
        ck.set("layers", 4);
        ck.set("rng", "1 2 3");
        ck.groups.insert(
            "model".into(),
            vec![
                ("a".into(), array![[0.1, -1e-300], [f64::MAX, 1.0 / 3.0]]),
                ("b".into(), Array2::zeros((0, 3))),
            ],
        );
        let back = Checkpoint::parse(&ck.to_text()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.get("rng").unwrap(), "1 2 3");
        assert_eq!(back.get_parsed::<usize>("layers").unwrap(), 4);
    }

    #[test]
    fn rejects_malformed() {
        assert!(Checkpoint::parse("").is_err());
        assert!(Checkpoint::parse("ead-checkpoint 2\nend\n").is_err());
        assert!(Checkpoint::parse("ead-checkpoint 1\ngroup g\ntensor a 1 2\n1\nend\n").is_err());
        assert!(Checkpoint::parse("ead-checkpoint 1\ngroup g\n").is_err());
        assert!(Checkpoint::parse("ead-checkpoint 1\nend\n").unwrap().get("x").is_err());
    }
}
