//! Triplet constraints and their sparse embedding.
//!
//! A triplet `{i, j, k}` asks that anchor `i` be more similar to `j` (same
//! class) than to `k` (different class). All triplets are folded into one
//! sparse `n × n` matrix `C`: column `i` holds `−1` at every positive and
//! `+1` at every negative of anchor `i`, so that column `i` of `Y·C` is
//! `Σ (y_k − y_j)` over the anchor's triplets. The diagonal `T` with
//! `T_ii = 1/(|T_i| + 1)` turns those sums into means.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector, SparseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn new(anchor: usize, positive: usize, negative: usize) -> Self {
        Triplet {
            anchor,
            positive,
            negative,
        }
    }

    fn is_degenerate(&self) -> bool {
        self.anchor == self.positive || self.anchor == self.negative || self.positive == self.negative
    }

    fn max_index(&self) -> usize {
        self.anchor.max(self.positive).max(self.negative)
    }
}

/// A list of triplets together with their partition by anchor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletSet {
    triplets: Vec<Triplet>,
    per_anchor: BTreeMap<usize, Vec<usize>>,
}

impl TripletSet {
    /// Rejects degenerate triplets (repeated indices).
    pub fn new(triplets: Vec<Triplet>) -> Result<Self> {
        if let Some(t) = triplets.iter().find(|t| t.is_degenerate()) {
            return Err(Error::InvalidInput(format!(
                "degenerate triplet {{{}, {}, {}}}",
                t.anchor, t.positive, t.negative
            )));
        }
        let mut per_anchor: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (pos, t) in triplets.iter().enumerate() {
            per_anchor.entry(t.anchor).or_default().push(pos);
        }
        Ok(TripletSet {
            triplets,
            per_anchor,
        })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn iter(&self) -> impl Iterator<Item = &Triplet> {
        self.triplets.iter()
    }

    /// Triplets anchored at `anchor`.
    pub fn anchored_at(&self, anchor: usize) -> impl Iterator<Item = &Triplet> {
        self.per_anchor
            .get(&anchor)
            .into_iter()
            .flatten()
            .map(move |&pos| &self.triplets[pos])
    }

    pub fn anchor_count(&self, anchor: usize) -> usize {
        self.per_anchor.get(&anchor).map_or(0, Vec::len)
    }

    /// Anchors that own at least one triplet, ascending.
    pub fn anchors(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_anchor.keys().copied()
    }

    /// One past the largest sample index referenced, or 0 when empty.
    pub fn index_bound(&self) -> usize {
        self.triplets.iter().map(|t| t.max_index() + 1).max().unwrap_or(0)
    }
}

/// Draws `per_sample` random triplets for every sample.
///
/// Positives come uniformly from the anchor's class (excluding the anchor),
/// negatives uniformly from all other classes. Draws are independent, so the
/// same triplet may appear more than once.
pub fn generate_triplets(labels: &[i64], per_sample: usize, seed: u64) -> Result<TripletSet> {
    let mut classes: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    if let Some((&label, _)) = classes.iter().find(|(_, members)| members.len() < 2) {
        return Err(Error::InsufficientClass { label });
    }
    if classes.len() < 2 {
        return Err(Error::NoNegatives);
    }

    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets = Vec::with_capacity(n * per_sample);
    for (anchor, label) in labels.iter().enumerate() {
        let members = &classes[label];
        for _ in 0..per_sample {
            // Draw from the class minus the anchor by skipping over its slot.
            let slot = rng.random_range(0..members.len() - 1);
            let own = members.binary_search(&anchor).expect("anchor is in its own class");
            let positive = members[if slot >= own { slot + 1 } else { slot }];
            let negative = loop {
                let k = rng.random_range(0..n);
                if labels[k] != *label {
                    break k;
                }
            };
            triplets.push(Triplet::new(anchor, positive, negative));
        }
    }
    TripletSet::new(triplets)
}

/// Sparse constraint matrix `C` and diagonal normalizer `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMatrices {
    pub c: SparseMatrix,
    pub t_diag: DenseVector,
}

impl ConstraintMatrices {
    pub fn n(&self) -> usize {
        self.t_diag.len()
    }
}

pub fn build_constraint_matrices(triplets: &TripletSet, n: usize) -> Result<ConstraintMatrices> {
    if let Some(t) = triplets.iter().find(|t| t.max_index() >= n) {
        return Err(Error::IndexOutOfRange {
            index: t.max_index(),
            n,
        });
    }
    let entries = triplets
        .iter()
        .flat_map(|t| [(t.positive, t.anchor, -1.0), (t.negative, t.anchor, 1.0)]);
    let c = SparseMatrix::from_triplets(n, n, entries)?;
    let t_diag = DenseVector::from_fn(n, |i, _| 1.0 / (triplets.anchor_count(i) as f64 + 1.0));
    Ok(ConstraintMatrices { c, t_diag })
}

/// Per-anchor scores `z_i = y_iᵀ Σ (y_k − y_j) / (|T_i| + 1)`, summed triplet
/// by triplet without going through `C`.
pub fn anchor_scores_oracle(y: &DenseMatrix, triplets: &TripletSet) -> DenseVector {
    let mut z = DenseVector::zeros(y.ncols());
    for anchor in triplets.anchors() {
        let yi = y.column(anchor);
        let sum: f64 = triplets
            .anchored_at(anchor)
            .map(|t| yi.dot(&y.column(t.negative)) - yi.dot(&y.column(t.positive)))
            .sum();
        z[anchor] = sum / (triplets.anchor_count(anchor) as f64 + 1.0);
    }
    z
}

/// Keeps only the triplets whose three indices all belong to `samples`, and
/// re-indexes them into positions of `samples`.
pub fn restrict_to_samples(triplets: &TripletSet, samples: &[usize]) -> Result<TripletSet> {
    let local: HashMap<usize, usize> = samples.iter().enumerate().map(|(p, &s)| (s, p)).collect();
    let kept = triplets
        .iter()
        .filter_map(|t| {
            Some(Triplet::new(
                *local.get(&t.anchor)?,
                *local.get(&t.positive)?,
                *local.get(&t.negative)?,
            ))
        })
        .collect();
    TripletSet::new(kept)
}

/// Reads a triplet file: one `i j k` per line, zero-based, `#` starts a comment.
pub fn read_triplets(path: impl AsRef<Path>) -> Result<TripletSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut triplets = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<usize> = line
            .split_whitespace()
            .map(|tok| tok.parse::<usize>().map_err(|e| parse_err(format!("bad index {tok:?}: {e}"))))
            .collect::<Result<_>>()?;
        let [i, j, k] = fields[..] else {
            return Err(parse_err(format!("expected 3 indices, found {}", fields.len())));
        };
        let t = Triplet::new(i, j, k);
        if t.is_degenerate() {
            return Err(parse_err(format!("degenerate triplet {i} {j} {k}")));
        }
        triplets.push(t);
    }
    TripletSet::new(triplets)
}

pub fn write_triplets(path: impl AsRef<Path>, triplets: &TripletSet) -> Result<()> {
    let mut out = String::with_capacity(triplets.len() * 16);
    out.push_str("# anchor positive negative\n");
    for t in triplets.iter() {
        writeln!(out, "{} {} {}", t.anchor, t.positive, t.negative).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}
