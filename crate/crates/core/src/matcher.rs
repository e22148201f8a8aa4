//! Cosine similarity kernels and the multi-token aggregation strategies.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::MultiVector;

/// Below this L2 norm a vector counts as zero and its cosine is 0.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchStrategy {
    /// Largest entry of the match matrix.
    #[default]
    MaxMax,
    /// Sum over query tokens of the row maximum.
    MaxSum,
    /// Mean over query tokens of the row maximum.
    MaxMean,
}

impl MatchStrategy {
    pub const ALL: [MatchStrategy; 3] = [Self::MaxMax, Self::MaxSum, Self::MaxMean];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::MaxMax => "max-max",
            Self::MaxSum => "max-sum",
            Self::MaxMean => "max-mean",
        }
    }

    pub fn score(&self, mm: &MatchMatrix) -> f64 {
        match self {
            Self::MaxMax => sim_max_max(mm),
            Self::MaxSum => sim_max_sum(mm),
            Self::MaxMean => sim_max_mean(mm),
        }
    }
}

impl fmt::Display for MatchStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatchStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown match strategy {s:?}")))
    }
}

fn dot_and_norms<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> (f64, f64, f64) {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y): (f64, f64) = (x.into(), y.into());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na, nb)
}

/// Cosine similarity; 0 when either vector has norm below [`ZERO_NORM`].
///
/// The denominator is `sqrt(|a|² |b|²)`, which makes `cosine(a, a)` exactly 1.
pub fn cosine<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (dot, na, nb) = dot_and_norms(a, b);
    Ok(cosine_from_parts(dot, na, nb))
}

pub(crate) fn cosine_from_parts(dot: f64, na: f64, nb: f64) -> f64 {
    if na.sqrt() < ZERO_NORM || nb.sqrt() < ZERO_NORM {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Pairwise cosines between query tokens (rows) and document tokens (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMatrix {
    m: usize,
    n: usize,
    entries: Vec<f64>,
}

impl MatchMatrix {
    /// Builds a matrix from raw entries; used by tests and the ablation tooling.
    pub fn from_entries(m: usize, n: usize, entries: Vec<f64>) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::Empty("match matrix"));
        }
        if entries.len() != m * n {
            return Err(Error::DimensionMismatch {
                expected: m * n,
                actual: entries.len(),
            });
        }
        Ok(MatchMatrix { m, n, entries })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

pub fn match_matrix<A, T>(q: &[A], d: &[A]) -> Result<MatchMatrix>
where
    A: AsRef<[T]>,
    T: Copy + Into<f64>,
{
    if q.is_empty() || d.is_empty() {
        return Err(Error::Empty("match matrix operand"));
    }
    let mut entries = Vec::with_capacity(q.len() * d.len());
    for qi in q {
        for dj in d {
            entries.push(cosine(qi.as_ref(), dj.as_ref())?);
        }
    }
    MatchMatrix::from_entries(q.len(), d.len(), entries)
}

/// First index of the maximum (ties go to the lowest index).
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn sim_max_max(mm: &MatchMatrix) -> f64 {
    mm.entries[argmax(&mm.entries)]
}

fn row_maxima(mm: &MatchMatrix) -> impl Iterator<Item = f64> + '_ {
    (0..mm.m).map(|i| {
        let row = mm.row(i);
        row[argmax(row)]
    })
}

pub fn sim_max_sum(mm: &MatchMatrix) -> f64 {
    row_maxima(mm).sum()
}

pub fn sim_max_mean(mm: &MatchMatrix) -> f64 {
    sim_max_sum(mm) / mm.m as f64
}

/// Late-interaction score: Σ over query tokens of the best cosine to any
/// document token. Lies in `[-M, M]`.
pub fn unirank_score(q: &MultiVector, d: &MultiVector) -> Result<f64> {
    if q.dim() != d.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            actual: d.dim(),
        });
    }
    let dnorms: Vec<f64> = d.tokens().map(|t| dot_and_norms(t, t).1).collect();
    let mut total = 0.0;
    for qt in q.tokens() {
        let qn = dot_and_norms(qt, qt).1;
        let mut best = f64::NEG_INFINITY;
        for (dt, &dn) in d.tokens().zip(&dnorms) {
            let dot = dot_and_norms(qt, dt).0;
            let c = cosine_from_parts(dot, qn, dn);
            if c > best {
                best = c;
            }
        }
        total += best;
    }
    Ok(total)
}
