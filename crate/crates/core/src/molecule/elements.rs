use std::collections::BTreeMap;

use super::AtomType;
use crate::error::{Error, Result};

const BUNDLED: &str = include_str!("../../data/elements.txt");

#[derive(Debug, Clone, PartialEq)]
pub struct AtomSpec {
    pub symbol: String,
    pub valence: u32,
    pub covalent_radius: f64,
}

/// Per-element valence and covalent radius, keyed by atom type.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementTable {
    specs: BTreeMap<AtomType, AtomSpec>,
}

impl ElementTable {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED).expect("bundled element table is well formed")
    }

    /// Parses `symbol valence radius` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut specs = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::parse(n + 1, "expected `symbol valence radius`"));
            }
            let ty = AtomType::from_symbol(fields[0])
                .ok_or_else(|| Error::parse(n + 1, format!("unknown element `{}`", fields[0])))?;
            let valence: u32 = fields[1]
                .parse()
                .map_err(|_| Error::parse(n + 1, "valence is not an integer"))?;
            let covalent_radius: f64 = fields[2]
                .parse()
                .map_err(|_| Error::parse(n + 1, "radius is not a number"))?;
            if valence < 1 || !(covalent_radius > 0.0) {
                return Err(Error::parse(n + 1, "valence must be >= 1 and radius > 0"));
            }
            specs.insert(
                ty,
                AtomSpec {
                    symbol: fields[0].to_string(),
                    valence,
                    covalent_radius,
                },
            );
        }
        for ty in AtomType::ELEMENTS {
            if !specs.contains_key(&ty) {
                return Err(Error::parse(0, format!("element table lacks {ty}")));
            }
        }
        Ok(ElementTable { specs })
    }

    pub fn get(&self, ty: AtomType) -> Option<&AtomSpec> {
        self.specs.get(&ty)
    }

    pub fn valence(&self, ty: AtomType) -> Option<u32> {
        self.get(ty).map(|s| s.valence)
    }
}
