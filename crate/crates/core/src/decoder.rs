//! Legality-constrained Viterbi and list-Viterbi top-K decoding.
//!
//! Illegal transitions are masked out of the DP entirely; there is no trained
//! transition matrix. Ties between equal-scoring paths are broken towards the
//! smaller label id at the latest position where the paths differ, which makes
//! both decoders agree with a brute-force sort over all legal sequences.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::tagspace::{LabelId, LabelScheme, LabelSequence};
use crate::{Error, Result};

/// Per-position scores over the label vocabulary, row-major `n x width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagLattice {
    n: usize,
    width: usize,
    scores: Vec<f64>,
}

impl TagLattice {
    /// Builds a lattice from arbitrary finite scores.
    pub fn new(n: usize, width: usize, scores: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("lattice has no positions".into()));
        }
        if width == 0 || scores.len() != n * width {
            return Err(Error::InvalidArgument(format!(
                "lattice of {n}x{width} given {} scores",
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("lattice scores".into()));
        }
        Ok(TagLattice { n, width, scores })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidArgument("ragged lattice rows".into()));
        }
        Self::new(rows.len(), width, rows.concat())
    }

    /// Like [`new`](Self::new) but also requires every row to be a
    /// log-softmax output.
    pub fn from_log_probs(n: usize, width: usize, scores: Vec<f64>) -> Result<Self> {
        let lattice = Self::new(n, width, scores)?;
        if !lattice.is_normalized(1e-6) {
            return Err(Error::InvalidArgument(
                "lattice rows are not log-probability distributions".into(),
            ));
        }
        Ok(lattice)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.width..(i + 1) * self.width]
    }

    #[inline]
    pub fn get(&self, i: usize, label: LabelId) -> f64 {
        self.scores[i * self.width + label.index()]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.scores.chunks(self.width)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        self.rows().all(|r| logsumexp(r).abs() <= tol)
    }

    /// Sum of the selected entries.
    pub fn path_score(&self, seq: &[LabelId]) -> f64 {
        seq.iter().enumerate().map(|(i, &l)| self.get(i, l)).sum()
    }

    /// Element-wise sum of same-shape lattices.
    pub fn sum<'a>(lattices: impl IntoIterator<Item = &'a TagLattice>) -> Result<TagLattice> {
        let mut iter = lattices.into_iter();
        let mut acc = iter
            .next()
            .ok_or_else(|| Error::Empty("no lattices to sum".into()))?
            .clone();
        for l in iter {
            if l.n != acc.n || l.width != acc.width {
                return Err(Error::InvalidArgument(format!(
                    "cannot sum {}x{} lattice into {}x{}",
                    l.n, l.width, acc.n, acc.width
                )));
            }
            acc.scores.iter_mut().zip(&l.scores).for_each(|(a, b)| *a += b);
        }
        Ok(acc)
    }

    pub fn scaled(&self, factor: f64) -> TagLattice {
        TagLattice {
            n: self.n,
            width: self.width,
            scores: self.scores.iter().map(|s| s * factor).collect(),
        }
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub seq: LabelSequence,
    pub score: f64,
}

/// Precomputed legality masks for one scheme.
struct Legality {
    width: usize,
    allowed: Vec<bool>,
    start: Vec<bool>,
    end: Vec<bool>,
}

impl Legality {
    fn new(scheme: &LabelScheme) -> Result<Self> {
        let width = scheme.len();
        let mut allowed = vec![false; width * width];
        for a in scheme.label_ids() {
            for b in scheme.label_ids() {
                allowed[a.index() * width + b.index()] = scheme.transition_allowed(a, b)?;
            }
        }
        let start = scheme.label_ids().map(|l| scheme.can_start(l)).collect::<Result<_>>()?;
        let end = scheme.label_ids().map(|l| scheme.can_end(l)).collect::<Result<_>>()?;
        Ok(Legality {
            width,
            allowed,
            start,
            end,
        })
    }

    #[inline]
    fn allows(&self, a: usize, b: usize) -> bool {
        self.allowed[a * self.width + b]
    }
}

fn check_shape(lattice: &TagLattice, scheme: &LabelScheme) -> Result<()> {
    if lattice.width() != scheme.len() {
        return Err(Error::SchemeMismatch(format!(
            "lattice width {} but scheme has {} labels",
            lattice.width(),
            scheme.len()
        )));
    }
    Ok(())
}

/// Highest-scoring legal label sequence.
pub fn viterbi(lattice: &TagLattice, scheme: &LabelScheme) -> Result<ScoredSequence> {
    check_shape(lattice, scheme)?;
    let legal = Legality::new(scheme)?;
    let (n, w) = (lattice.len(), lattice.width());

    let mut best: Vec<Option<f64>> = (0..w)
        .map(|y| legal.start[y].then(|| lattice.row(0)[y]))
        .collect();
    let mut back = vec![0usize; n * w];
    for i in 1..n {
        let row = lattice.row(i);
        let mut next = vec![None; w];
        for y in 0..w {
            let mut arg: Option<(f64, usize)> = None;
            // ascending prev label keeps the smaller id on exact ties
            for (prev, s) in best.iter().enumerate() {
                let Some(s) = *s else { continue };
                if !legal.allows(prev, y) {
                    continue;
                }
                if arg.is_none_or(|(bs, _)| s > bs) {
                    arg = Some((s, prev));
                }
            }
            if let Some((s, prev)) = arg {
                next[y] = Some(s + row[y]);
                back[i * w + y] = prev;
            }
        }
        best = next;
    }

    let (score, mut y) = best
        .iter()
        .enumerate()
        .filter(|(y, _)| legal.end[*y])
        .filter_map(|(y, s)| s.map(|s| (s, y)))
        .fold(None, |acc: Option<(f64, usize)>, (s, y)| match acc {
            Some((bs, _)) if s <= bs => acc,
            _ => Some((s, y)),
        })
        .ok_or_else(|| Error::IllegalSequence("no legal sequence exists".into()))?;

    let mut ids = vec![LabelId(0); n];
    for i in (0..n).rev() {
        ids[i] = LabelId(y as u32);
        if i > 0 {
            y = back[i * w + y];
        }
    }
    Ok(ScoredSequence {
        seq: LabelSequence(ids),
        score,
    })
}

#[derive(Clone, Copy, Debug)]
struct Entry {
    score: f64,
    prev_label: usize,
    prev_rank: usize,
}

/// Descending score, then reverse-lexicographic on the path.
fn entry_order(a: &Entry, b: &Entry) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.prev_label.cmp(&b.prev_label))
        .then(a.prev_rank.cmp(&b.prev_rank))
}

/// The `k` best distinct legal sequences in nonincreasing score order.
///
/// Realized as list-Viterbi: every (position, label) state keeps its own
/// sorted list of at most `k` partial paths.
pub fn topk_viterbi(lattice: &TagLattice, scheme: &LabelScheme, k: usize) -> Result<Vec<ScoredSequence>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    check_shape(lattice, scheme)?;
    let legal = Legality::new(scheme)?;
    let (n, w) = (lattice.len(), lattice.width());

    // lists[i][y] = top partial paths ending in label y at position i
    let mut lists: Vec<Vec<Vec<Entry>>> = Vec::with_capacity(n);
    lists.push(
        (0..w)
            .map(|y| {
                if legal.start[y] {
                    vec![Entry {
                        score: lattice.row(0)[y],
                        prev_label: 0,
                        prev_rank: 0,
                    }]
                } else {
                    Vec::new()
                }
            })
            .collect(),
    );
    for i in 1..n {
        let row = lattice.row(i);
        let prev = &lists[i - 1];
        let mut cur = Vec::with_capacity(w);
        for (y, &emit) in row.iter().enumerate() {
            let mut cands: Vec<Entry> = Vec::new();
            for (p, plist) in prev.iter().enumerate() {
                if !legal.allows(p, y) {
                    continue;
                }
                cands.extend(plist.iter().enumerate().map(|(r, e)| Entry {
                    score: e.score + emit,
                    prev_label: p,
                    prev_rank: r,
                }));
            }
            cands.sort_by(entry_order);
            cands.truncate(k);
            cur.push(cands);
        }
        lists.push(cur);
    }

    let mut finals: Vec<Entry> = lists[n - 1]
        .iter()
        .enumerate()
        .filter(|(y, _)| legal.end[*y])
        .flat_map(|(y, l)| {
            l.iter().enumerate().map(move |(r, e)| Entry {
                score: e.score,
                prev_label: y,
                prev_rank: r,
            })
        })
        .collect();
    finals.sort_by(entry_order);
    finals.truncate(k);

    Ok(finals
        .into_iter()
        .map(|f| {
            let mut ids = vec![LabelId(0); n];
            let (mut y, mut r) = (f.prev_label, f.prev_rank);
            for i in (0..n).rev() {
                ids[i] = LabelId(y as u32);
                let e = lists[i][y][r];
                y = e.prev_label;
                r = e.prev_rank;
            }
            ScoredSequence {
                seq: LabelSequence(ids),
                score: f.score,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_type() -> LabelScheme {
        LabelScheme::new(["X"]).unwrap()
    }

    /// Lattice row for the one-type scheme from (O, B, E) scores; I and S
    /// get a very low score.
    fn row(o: f64, b: f64, e: f64) -> Vec<f64> {
        vec![o, b, -20.0, e, -20.0]
    }

    #[test]
    fn two_position_example() {
        let s = one_type();
        let lat = TagLattice::from_rows(&[row(-0.5, -0.1, -9.0), row(-0.1, -9.0, -3.0)]).unwrap();
        let best = viterbi(&lat, &s).unwrap();
        assert_eq!(s.names(&best.seq).unwrap(), ["O", "O"]);
        assert!((best.score + 0.6).abs() < 1e-12);

        let top = topk_viterbi(&lat, &s, 2).unwrap();
        assert_eq!(top.len(), 2);
        assert_eq!(top[0], best);
        assert_eq!(s.names(&top[1].seq).unwrap(), ["B-X", "E-X"]);
        assert!((top[1].score + 3.1).abs() < 1e-12);
    }

    #[test]
    fn single_position() {
        let s = one_type();
        let lat = TagLattice::from_rows(&[vec![-2.0, -0.01, -5.0, -0.05, -0.2]]).unwrap();
        let best = viterbi(&lat, &s).unwrap();
        // B and E cannot stand alone
        assert_eq!(s.names(&best.seq).unwrap(), ["S-X"]);
        assert!((best.score + 0.2).abs() < 1e-12);
    }

    #[test]
    fn dominant_outside() {
        let s = LabelScheme::new(["A", "B"]).unwrap();
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| {
                let mut r = vec![-8.0; s.len()];
                r[0] = -0.001;
                r
            })
            .collect();
        let best = viterbi(&TagLattice::from_rows(&rows).unwrap(), &s).unwrap();
        assert!(best.seq.iter().all(|&l| l == LabelId::OUTSIDE));
    }

    #[test]
    fn exhausts_legal_sequences() {
        let s = LabelScheme::new(["A", "B"]).unwrap();
        let rows = vec![vec![-1.0; s.len()], vec![-1.0; s.len()]];
        let lat = TagLattice::from_rows(&rows).unwrap();
        let all = topk_viterbi(&lat, &s, 50).unwrap();
        // 3 starts that close immediately x 3 legal finishers, plus B-t E-t twice
        assert_eq!(all.len(), 11);
        assert!(all.iter().all(|c| s.is_legal(&c.seq)));
    }

    #[test]
    fn errors() {
        let s = one_type();
        assert!(matches!(TagLattice::new(0, 5, vec![]), Err(Error::Empty(_))));
        let lat = TagLattice::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(viterbi(&lat, &s), Err(Error::SchemeMismatch(_))));
        let lat = TagLattice::from_rows(&[row(-1.0, -1.0, -1.0)]).unwrap();
        assert!(topk_viterbi(&lat, &s, 0).is_err());
        assert!(TagLattice::from_log_probs(1, 2, vec![0.0, 0.0]).is_err());
        assert!(TagLattice::from_log_probs(1, 2, vec![0.5f64.ln(), 0.5f64.ln()]).is_ok());
    }
}
