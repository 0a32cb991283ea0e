//! Entity-level uncertainty sampling.
//!
//! Candidates come either from Monte-Carlo dropout passes or from the top-K
//! legal decodings of the deterministic lattice. The symmetric difference
//! between each candidate's entity set and the provisional entity set gives
//! the uncertain entities; overlapping or touching ones are merged into
//! uncertain components, whose surface text becomes the retrieval query.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::{topk_viterbi, viterbi};
use crate::par::Exec;
use crate::tagger::{Scorer, ScorerMode, Sentence};
use crate::tagspace::{EntitySpan, LabelSequence};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplingMethod {
    #[serde(rename = "mc_dropout", alias = "mc")]
    McDropout,
    #[serde(rename = "topk")]
    TopK,
}

impl SamplingMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingMethod::McDropout => "mc_dropout",
            SamplingMethod::TopK => "topk",
        }
    }
}

impl fmt::Display for SamplingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" | "mc_dropout" => Ok(SamplingMethod::McDropout),
            "topk" | "top_k" => Ok(SamplingMethod::TopK),
            other => Err(Error::Config(format!("unknown sampling method {other:?}"))),
        }
    }
}

/// The deterministic prediction and its entities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProvisionalResult {
    pub x: Sentence,
    pub l_p: LabelSequence,
    pub spans_p: BTreeSet<EntitySpan>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub method: SamplingMethod,
    pub k_requested: usize,
    /// Every decoded candidate, before any filtering.
    pub generated: Vec<LabelSequence>,
    /// Candidates that survived the method's filter.
    pub candidates: Vec<LabelSequence>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UncertainComponent {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl UncertainComponent {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }
}

fn provisional<S: Scorer + ?Sized>(scorer: &S, x: &Sentence) -> Result<ProvisionalResult> {
    let lattice = scorer.score(x, ScorerMode::Deterministic)?;
    let l_p = viterbi(&lattice, scorer.scheme())?.seq;
    let spans_p = scorer.scheme().extract_spans(&l_p)?;
    Ok(ProvisionalResult {
        x: x.clone(),
        l_p,
        spans_p,
    })
}

/// Provisional result plus `k` dropout-active decodings with seeds
/// `base_seed, base_seed + 1, ...`.
pub fn mc_sample<S: Scorer + ?Sized>(
    scorer: &S,
    x: &Sentence,
    k: usize,
    base_seed: u64,
    exec: Exec,
) -> Result<(ProvisionalResult, CandidateSet)> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let prov = provisional(scorer, x)?;
    let generated = exec
        .map_range(0..k, |i| {
            let mode = ScorerMode::Stochastic {
                seed: base_seed.wrapping_add(i as u64),
            };
            let lattice = scorer.score(x, mode)?;
            Ok(viterbi(&lattice, scorer.scheme())?.seq)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let cands = CandidateSet {
        method: SamplingMethod::McDropout,
        k_requested: k,
        candidates: generated.clone(),
        generated,
    };
    Ok((prov, cands))
}

/// Top-K decoding of the deterministic lattice: rank 0 is the provisional
/// result, ranks 1.. are candidates, minus those differing from it in a
/// single position.
pub fn topk_sample<S: Scorer + ?Sized>(
    scorer: &S,
    x: &Sentence,
    k: usize,
) -> Result<(ProvisionalResult, CandidateSet)> {
    if k < 2 {
        return Err(Error::InvalidArgument("top-k sampling needs k >= 2".into()));
    }
    let lattice = scorer.score(x, ScorerMode::Deterministic)?;
    let mut ranked = topk_viterbi(&lattice, scorer.scheme(), k)?.into_iter().map(|s| s.seq);
    let l_p = ranked.next().expect("topk returns at least one sequence");
    let generated: Vec<LabelSequence> = ranked.collect();
    let candidates = generated.iter().filter(|c| c.hamming(&l_p) != 1).cloned().collect();
    let spans_p = scorer.scheme().extract_spans(&l_p)?;
    Ok((
        ProvisionalResult {
            x: x.clone(),
            l_p,
            spans_p,
        },
        CandidateSet {
            method: SamplingMethod::TopK,
            k_requested: k,
            generated,
            candidates,
        },
    ))
}

pub fn sample<S: Scorer + ?Sized>(
    scorer: &S,
    x: &Sentence,
    method: SamplingMethod,
    k: usize,
    base_seed: u64,
    exec: Exec,
) -> Result<(ProvisionalResult, CandidateSet)> {
    match method {
        SamplingMethod::McDropout => mc_sample(scorer, x, k, base_seed, exec),
        SamplingMethod::TopK => topk_sample(scorer, x, k),
    }
}

/// Symmetric difference between the candidate's and the provisional
/// entity sets.
pub fn uncertain_entities(
    scheme: &crate::tagspace::LabelScheme,
    provisional: &ProvisionalResult,
    cand: &LabelSequence,
) -> Result<BTreeSet<EntitySpan>> {
    if cand.len() != provisional.l_p.len() {
        return Err(Error::InvalidArgument(format!(
            "candidate length {} vs provisional length {}",
            cand.len(),
            provisional.l_p.len()
        )));
    }
    let spans = scheme.extract_spans(cand)?;
    Ok(spans.symmetric_difference(&provisional.spans_p).cloned().collect())
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Clusters inclusive ranges that overlap or touch and returns each
/// cluster's covering range, sorted by start.
pub fn merge_ranges(ranges: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut dsu = DisjointSet::new(ranges.len());
    for i in 0..ranges.len() {
        for j in i + 1..ranges.len() {
            let (a, b) = (ranges[i], ranges[j]);
            // gap of zero characters links two ranges
            if a.0 <= b.1 + 1 && b.0 <= a.1 + 1 {
                dsu.union(i, j);
            }
        }
    }
    let mut cover: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for (i, &(s, e)) in ranges.iter().enumerate() {
        let root = dsu.find(i);
        let c = cover.entry(root).or_insert((s, e));
        c.0 = c.0.min(s);
        c.1 = c.1.max(e);
    }
    let mut out: Vec<_> = cover.into_values().collect();
    out.sort_unstable();
    out
}

pub fn merge_components(uncertain: &BTreeSet<EntitySpan>, x: &Sentence) -> Result<Vec<UncertainComponent>> {
    if let Some(bad) = uncertain.iter().find(|s| s.start > s.end || s.end >= x.len()) {
        return Err(Error::InvalidArgument(format!(
            "span {bad} outside sentence of length {}",
            x.len()
        )));
    }
    let ranges: Vec<_> = uncertain.iter().map(|s| (s.start, s.end)).collect();
    Ok(merge_ranges(&ranges)
        .into_iter()
        .map(|(start, end)| UncertainComponent {
            start,
            end,
            text: x.substring(start, end),
        })
        .collect())
}

/// Uncertain components over all candidates of one sentence.
pub fn components(
    scheme: &crate::tagspace::LabelScheme,
    provisional: &ProvisionalResult,
    cands: &CandidateSet,
) -> Result<Vec<UncertainComponent>> {
    let mut all = BTreeSet::new();
    for c in &cands.candidates {
        all.extend(uncertain_entities(scheme, provisional, c)?);
    }
    merge_components(&all, &provisional.x)
}
