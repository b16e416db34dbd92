//! Lossless structure-preserving grid description.
//!
//! Buses are stored generators first (ascending id), then loads (ascending
//! id). Lines are kept in a canonical edge order sorted by `(lower id, higher
//! id)` and every edge is oriented from the lower to the higher bus id, so
//! all edge-indexed vectors share one sign convention.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Maximum tolerated `|Σ P_k|` for a grid to admit an equilibrium.
pub const BALANCE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    #[serde(alias = "Generator", alias = "gen")]
    Generator,
    #[serde(alias = "Load")]
    Load,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bus {
    pub id: i64,
    pub kind: BusKind,
    /// Inertia `m_k`; present iff the bus is a generator.
    pub inertia: Option<f64>,
    /// Damping `d_k` (load frequency coefficient for load buses).
    pub damping: f64,
    /// Net injection `P_k` (mechanical power for generators, `-P0_d` for loads).
    pub injection: f64,
    pub voltage: f64,
}

/// An edge of the grid graph, oriented from the lower to the higher bus id.
#[derive(Clone, Debug, PartialEq)]
pub struct Line {
    /// Internal index of the lower-id endpoint.
    pub from: usize,
    /// Internal index of the higher-id endpoint.
    pub to: usize,
    pub susceptance: f64,
    /// `a_kj = V_k V_j B_kj`.
    pub coupling: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridModel {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    n_gen: usize,
}

/// On-disk JSON layout of a grid.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridDocument {
    pub buses: Vec<BusRecord>,
    pub lines: Vec<LineRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: i64,
    pub kind: BusKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    pub d: f64,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "V", default = "unit_voltage")]
    pub v: f64,
}

fn unit_voltage() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LineRecord {
    pub from: i64,
    pub to: i64,
    #[serde(rename = "B")]
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// `|Σ P_k|` exceeds [`BALANCE_TOLERANCE`].
    Imbalance { total: f64 },
    /// A load bus with `d_k <= 0`, which makes `D2` singular.
    SingularD2 { bus: i64 },
    NonPositiveDamping { bus: i64 },
    Disconnected { components: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Imbalance { total } => write!(f, "power imbalance {total:e}"),
            Violation::SingularD2 { bus } => write!(f, "singular D2 (load bus {bus} has d <= 0)"),
            Violation::NonPositiveDamping { bus } => {
                write!(f, "non-positive damping on generator bus {bus}")
            }
            Violation::Disconnected { components } => {
                write!(f, "disconnected graph ({components} components)")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl GridModel {
    /// Builds a grid from records, checking structure but not connectivity,
    /// damping or balance (see [`GridModel::validate`]).
    pub fn from_records(buses: &[BusRecord], lines: &[LineRecord]) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for b in buses {
            if !seen.insert(b.id) {
                return Err(Error::Malformed(format!("duplicate bus id {}", b.id)));
            }
            for (name, value) in [("d", b.d), ("P", b.p), ("V", b.v)] {
                if !value.is_finite() {
                    return Err(Error::Malformed(format!("bus {}: {name} is not finite", b.id)));
                }
            }
            if b.v <= 0.0 {
                return Err(Error::NonPositive(format!("bus {}: V = {}", b.id, b.v)));
            }
            if b.d < 0.0 {
                return Err(Error::NonPositive(format!("bus {}: d = {}", b.id, b.d)));
            }
            match (b.kind, b.m) {
                (BusKind::Generator, Some(m)) if m.is_finite() && m > 0.0 => {}
                (BusKind::Generator, Some(m)) => {
                    return Err(Error::NonPositive(format!("bus {}: m = {m}", b.id)))
                }
                (BusKind::Generator, None) => {
                    return Err(Error::Malformed(format!("generator bus {} has no inertia", b.id)))
                }
                (BusKind::Load, Some(_)) => {
                    return Err(Error::Malformed(format!("load bus {} has an inertia", b.id)))
                }
                (BusKind::Load, None) => {}
            }
        }

        let mut ordered: Vec<Bus> = buses
            .iter()
            .map(|b| Bus {
                id: b.id,
                kind: b.kind,
                inertia: b.m,
                damping: b.d,
                injection: b.p,
                voltage: b.v,
            })
            .collect();
        ordered.sort_by_key(|b| (b.kind == BusKind::Load, b.id));
        let n_gen = ordered.iter().filter(|b| b.kind == BusKind::Generator).count();
        if n_gen == 0 {
            return Err(Error::InvalidGrid("grid has no generator".into()));
        }
        let index: BTreeMap<i64, usize> =
            ordered.iter().enumerate().map(|(i, b)| (b.id, i)).collect();

        let mut pairs = BTreeMap::new();
        for l in lines {
            if !l.b.is_finite() {
                return Err(Error::Malformed(format!("line {}-{}: B is not finite", l.from, l.to)));
            }
            if l.from == l.to {
                return Err(Error::Malformed(format!("self-loop on bus {}", l.from)));
            }
            for id in [l.from, l.to] {
                if !index.contains_key(&id) {
                    return Err(Error::UnknownBus(id));
                }
            }
            if l.b <= 0.0 {
                return Err(Error::NonPositive(format!("line {}-{}: B = {}", l.from, l.to, l.b)));
            }
            let key = (l.from.min(l.to), l.from.max(l.to));
            if pairs.insert(key, l.b).is_some() {
                return Err(Error::DuplicateLine(key.0, key.1));
            }
        }
        let lines = pairs
            .into_iter()
            .map(|((lo, hi), b)| {
                let (from, to) = (index[&lo], index[&hi]);
                Line {
                    from,
                    to,
                    susceptance: b,
                    coupling: ordered[from].voltage * ordered[to].voltage * b,
                }
            })
            .collect();

        Ok(GridModel { buses: ordered, lines, n_gen })
    }

    pub fn from_document(doc: &GridDocument) -> Result<Self> {
        let g = Self::from_records(&doc.buses, &doc.lines)?;
        let components = g.components();
        if components != 1 || g.lines.is_empty() {
            return Err(Error::Disconnected { components: components.max(2) });
        }
        Ok(g)
    }

    pub fn to_document(&self) -> GridDocument {
        GridDocument {
            buses: self
                .buses
                .iter()
                .map(|b| BusRecord {
                    id: b.id,
                    kind: b.kind,
                    m: b.inertia,
                    d: b.damping,
                    p: b.injection,
                    v: b.voltage,
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| LineRecord {
                    from: self.buses[l.from].id,
                    to: self.buses[l.to].id,
                    b: l.susceptance,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("grid document serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(&self.to_document()).expect("grid serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    /// Number of buses `n`.
    pub fn n(&self) -> usize {
        self.buses.len()
    }

    /// Number of generators `m`.
    pub fn n_gen(&self) -> usize {
        self.n_gen
    }

    pub fn n_load(&self) -> usize {
        self.buses.len() - self.n_gen
    }

    pub fn n_edges(&self) -> usize {
        self.lines.len()
    }

    /// Dimension of the state vector, `n + m`.
    pub fn state_dim(&self) -> usize {
        self.n() + self.n_gen
    }

    pub fn injections(&self) -> Vec<f64> {
        self.buses.iter().map(|b| b.injection).collect()
    }

    pub fn bus_index(&self, id: i64) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Returns a copy with the injection of `slack` adjusted so that the
    /// injections sum to zero.
    pub fn rebalanced(&self, slack: i64) -> Result<Self> {
        let k = self.bus_index(slack).ok_or(Error::UnknownBus(slack))?;
        let total: f64 = self.injections().iter().sum();
        let mut g = self.clone();
        g.buses[k].injection -= total;
        Ok(g)
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let total: f64 = self.injections().iter().sum();
        if total.abs() > BALANCE_TOLERANCE {
            violations.push(Violation::Imbalance { total });
        }
        for b in &self.buses {
            if b.damping <= 0.0 {
                violations.push(match b.kind {
                    BusKind::Load => Violation::SingularD2 { bus: b.id },
                    BusKind::Generator => Violation::NonPositiveDamping { bus: b.id },
                });
            }
        }
        let components = self.components();
        if components != 1 {
            violations.push(Violation::Disconnected { components });
        }
        ValidationReport { violations }
    }

    /// Incidence matrix `E` (`|E| x n`): `+1` at the lower-id endpoint and
    /// `-1` at the higher-id endpoint of every edge.
    pub fn incidence_matrix(&self) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.lines.len(), self.n());
        for (row, l) in self.lines.iter().enumerate() {
            e[(row, l.from)] = 1.0;
            e[(row, l.to)] = -1.0;
        }
        e
    }

    /// Edge differences `δ_k - δ_j` for a vector of bus angles.
    pub fn edge_differences(&self, angles: &[f64]) -> Vec<f64> {
        self.lines.iter().map(|l| angles[l.from] - angles[l.to]).collect()
    }

    fn components(&self) -> usize {
        let n = self.n();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for l in &self.lines {
            let (a, b) = (find(&mut parent, l.from), find(&mut parent, l.to));
            if a != b {
                parent[a] = b;
            }
        }
        (0..n).filter(|&i| find(&mut parent, i) == i).count()
    }
}

/// Parses a grid JSON document.
pub fn parse_grid(text: &str) -> Result<GridModel> {
    let doc: GridDocument =
        serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
    GridModel::from_document(&doc)
}
