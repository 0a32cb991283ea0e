//! Evaluation and diagnostics.
//!
//! Entity scores are micro-averaged over exact `(start, end, type)` matches
//! and every ratio uses the zero-division convention `0 / 0 = 0`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::tagspace::{LabelScheme, LabelSequence};
use crate::uncertainty::{CandidateSet, UncertainComponent};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        Prf {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

/// (tp, fp, fn) of one sentence.
pub fn sentence_counts(scheme: &LabelScheme, pred: &[crate::tagspace::LabelId], gold: &[crate::tagspace::LabelId]) -> Result<(usize, usize, usize)> {
    if pred.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction length {} vs gold length {}",
            pred.len(),
            gold.len()
        )));
    }
    let p = scheme.extract_spans(pred)?;
    let g = scheme.extract_spans(gold)?;
    let tp = p.intersection(&g).count();
    Ok((tp, p.len() - tp, g.len() - tp))
}

pub fn entity_f1(scheme: &LabelScheme, pred: &[LabelSequence], gold: &[LabelSequence]) -> Result<Prf> {
    if pred.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted sentences vs {} gold sentences",
            pred.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let (a, b, c) = sentence_counts(scheme, p, g)?;
        tp += a;
        fp += b;
        fn_ += c;
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// Best corpus F1 reachable by choosing one sequence per sentence among
/// `choices[i]` (element 0 is the provisional result).
///
/// Starts from the provisional choice everywhere and does coordinate ascent
/// on corpus F1, switching a sentence only on strict improvement, so the
/// result is never below the provisional F1.
pub fn oracle_f1(scheme: &LabelScheme, choices: &[Vec<LabelSequence>], gold: &[LabelSequence]) -> Result<f64> {
    if choices.len() != gold.len() {
        return Err(Error::InvalidArgument("choices and gold differ in length".into()));
    }
    let mut counts: Vec<Vec<(usize, usize, usize)>> = Vec::with_capacity(gold.len());
    for (opts, g) in choices.iter().zip(gold) {
        if opts.is_empty() {
            return Err(Error::InvalidArgument("sentence without any choice".into()));
        }
        counts.push(opts.iter().map(|o| sentence_counts(scheme, o, g)).collect::<Result<_>>()?);
    }
    let mut pick = vec![0usize; gold.len()];
    let mut tot = counts.iter().fold((0, 0, 0), |acc, c| add(acc, c[0]));
    let f1 = |t: (usize, usize, usize)| Prf::from_counts(t.0, t.1, t.2).f1;
    loop {
        let mut changed = false;
        for (i, opts) in counts.iter().enumerate() {
            let base = sub(tot, opts[pick[i]]);
            let mut best = (f1(tot), pick[i]);
            for (j, &c) in opts.iter().enumerate() {
                let score = f1(add(base, c));
                if score > best.0 {
                    best = (score, j);
                }
            }
            if best.1 != pick[i] {
                tot = add(base, opts[best.1]);
                pick[i] = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(f1(tot))
}

fn add(a: (usize, usize, usize), b: (usize, usize, usize)) -> (usize, usize, usize) {
    (a.0 + b.0, a.1 + b.1, a.2 + b.2)
}

fn sub(a: (usize, usize, usize), b: (usize, usize, usize)) -> (usize, usize, usize) {
    (a.0 - b.0, a.1 - b.1, a.2 - b.2)
}

/// Position-level accuracy split by membership in an uncertain component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccSplit {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_certain: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_uncertain: Option<f64>,
    pub certain_positions: usize,
    pub uncertain_positions: usize,
    pub overall: f64,
}

pub fn acc_split(
    pred: &[LabelSequence],
    gold: &[LabelSequence],
    components: &[Vec<UncertainComponent>],
) -> Result<AccSplit> {
    if pred.len() != gold.len() || pred.len() != components.len() {
        return Err(Error::InvalidArgument("misaligned inputs to acc_split".into()));
    }
    let (mut c_right, mut c_total, mut u_right, mut u_total) = (0usize, 0usize, 0usize, 0usize);
    for ((p, g), comps) in pred.iter().zip(gold).zip(components) {
        if p.len() != g.len() {
            return Err(Error::InvalidArgument("prediction and gold lengths differ".into()));
        }
        for (i, (a, b)) in p.iter().zip(g.iter()).enumerate() {
            let hit = (a == b) as usize;
            if comps.iter().any(|c| c.contains(i)) {
                u_right += hit;
                u_total += 1;
            } else {
                c_right += hit;
                c_total += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(AccSplit {
        acc_certain: ratio(c_right, c_total),
        acc_uncertain: ratio(u_right, u_total),
        certain_positions: c_total,
        uncertain_positions: u_total,
        overall: ratio(c_right + u_right, c_total + u_total).unwrap_or(0.0),
    })
}

/// Sampling acceptance ratio and valuable sampling ratio over a corpus.
///
/// A candidate is accepted when it survived the method's filter and is a
/// distinct sequence different from the provisional result. It is valuable
/// when it is accepted and its sentence-level F1 beats the provisional's.
pub fn sar_vsr(
    scheme: &LabelScheme,
    provisional: &[LabelSequence],
    sets: &[CandidateSet],
    gold: &[LabelSequence],
) -> Result<(f64, f64)> {
    if provisional.len() != sets.len() || sets.len() != gold.len() {
        return Err(Error::InvalidArgument("misaligned inputs to sar_vsr".into()));
    }
    let (mut raw, mut kept, mut valuable) = (0usize, 0usize, 0usize);
    for ((l_p, set), g) in provisional.iter().zip(sets).zip(gold) {
        raw += set.generated.len();
        let distinct: BTreeSet<&LabelSequence> = set.candidates.iter().filter(|c| *c != l_p).collect();
        kept += distinct.len();
        let (tp, fp, fn_) = sentence_counts(scheme, l_p, g)?;
        let base = Prf::from_counts(tp, fp, fn_).f1;
        for c in distinct {
            let (tp, fp, fn_) = sentence_counts(scheme, c, g)?;
            if Prf::from_counts(tp, fp, fn_).f1 > base {
                valuable += 1;
            }
        }
    }
    let ratio = |a: usize| if raw == 0 { 0.0 } else { a as f64 / raw as f64 };
    Ok((ratio(kept), ratio(valuable)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub k: f64,
    pub beta: f64,
    pub gamma: f64,
    pub unit_cost: f64,
    pub cost_mc: f64,
    pub cost_topk: f64,
}

/// Extra compute of both sampling methods in units of one base-model pass:
/// MC dropout pays `k` passes plus the fusion pass on the longer input,
/// top-K pays only the latter.
pub fn cost_model(k: f64, beta: f64, gamma: f64, unit_cost: f64) -> Result<CostEstimate> {
    if [k, beta, gamma, unit_cost].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument("cost model inputs must be nonnegative".into()));
    }
    let grown = 1.0 + gamma;
    let fusion = beta * (grown * grown);
    Ok(CostEstimate {
        k,
        beta,
        gamma,
        unit_cost,
        cost_mc: (k + fusion) * unit_cost,
        cost_topk: fusion * unit_cost,
    })
}

/// (sentences with at least one component, total components).
pub fn uncertainty_stats(components: &[Vec<UncertainComponent>]) -> (usize, usize) {
    (
        components.iter().filter(|c| !c.is_empty()).count(),
        components.iter().map(Vec::len).sum(),
    )
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sentences: usize,
    pub base: Prf,
    pub retagged: Prf,
    pub oracle_f1: f64,
    pub base_acc: AccSplit,
    pub retagged_acc: AccSplit,
    pub sar: f64,
    pub vsr: f64,
    pub size_u: usize,
    pub num_uc: usize,
    pub cost: CostEstimate,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub breakdown: BTreeMap<String, MetricsReport>,
}

/// One row of a sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dropout: f64,
    pub k: usize,
    pub alpha: f64,
    pub report: MetricsReport,
}

/// Parameter grid of a sweep. Rows are produced dropout-major, then k,
/// then alpha.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub dropout: Vec<f64>,
    pub k: Vec<usize>,
    pub alpha: Vec<f64>,
}

impl SweepGrid {
    pub fn points(&self) -> Vec<(f64, usize, f64)> {
        let mut out = Vec::new();
        for &p in &self.dropout {
            for &k in &self.k {
                for &a in &self.alpha {
                    out.push((p, k, a));
                }
            }
        }
        out
    }
}

/// Evaluates `run` at every grid point, in grid order.
pub fn sweep(
    grid: &SweepGrid,
    mut run: impl FnMut(f64, usize, f64) -> Result<MetricsReport>,
) -> Result<Vec<SweepRow>> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    points
        .into_iter()
        .map(|(dropout, k, alpha)| {
            Ok(SweepRow {
                dropout,
                k,
                alpha,
                report: run(dropout, k, alpha)?,
            })
        })
        .collect()
}

/// Aligned plain-text rendering of a sweep: parameters, SAR, VSR, F1.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>8} {:>4} {:>6} {:>8} {:>8} {:>8} {:>8}",
        "dropout", "k", "alpha", "SAR", "VSR", "base_F1", "F1"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:>8.3} {:>4} {:>6.2} {:>8.4} {:>8.4} {:>8.2} {:>8.2}",
            r.dropout,
            r.k,
            r.alpha,
            r.report.sar,
            r.report.vsr,
            100.0 * r.report.base.f1,
            100.0 * r.report.retagged.f1
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::SamplingMethod;

    fn scheme() -> LabelScheme {
        LabelScheme::new(["X", "Y"]).unwrap()
    }

    fn seq(names: &[&str]) -> LabelSequence {
        scheme().parse_sequence(names).unwrap()
    }

    fn comp(start: usize, end: usize) -> UncertainComponent {
        UncertainComponent {
            start,
            end,
            text: String::new(),
        }
    }

    #[test]
    fn f1_cases() {
        let s = scheme();
        let gold = vec![seq(&["B-X", "E-X", "O", "S-Y"])];
        let same = entity_f1(&s, &gold, &gold).unwrap();
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));

        let none = entity_f1(&s, &[seq(&["O", "O", "O", "O"])], &gold).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));

        // tp = 1, fp = 0, fn = 1
        let part = entity_f1(&s, &[seq(&["B-X", "E-X", "O", "O"])], &gold).unwrap();
        assert_eq!(part.precision, 1.0);
        assert_eq!(part.recall, 0.5);
        assert!((part.f1 - 2.0 / 3.0).abs() < 1e-12);

        assert!(entity_f1(&s, &[], &gold).is_err());
        assert!(entity_f1(&s, &[seq(&["O"])], &gold).is_err());
    }

    #[test]
    fn oracle_cases() {
        let s = scheme();
        let gold = vec![seq(&["S-X", "O"]), seq(&["O", "S-Y"]), seq(&["B-X", "E-X"])];
        let prov = vec![seq(&["S-X", "O"]), seq(&["O", "S-X"]), seq(&["O", "O"])];
        let base = entity_f1(&s, &prov, &gold).unwrap().f1;

        let same: Vec<Vec<_>> = prov.iter().map(|p| vec![p.clone(), p.clone()]).collect();
        assert_eq!(oracle_f1(&s, &same, &gold).unwrap(), base);

        // one candidate fixes the type error in sentence 2
        let mut fixing = same.clone();
        fixing[1].push(seq(&["O", "S-Y"]));
        // tp 2 of 3 gold, no fp
        assert!((oracle_f1(&s, &fixing, &gold).unwrap() - 0.8).abs() < 1e-12);
        assert!(oracle_f1(&s, &fixing, &gold).unwrap() > base);

        let with_gold: Vec<Vec<_>> = prov.iter().zip(&gold).map(|(p, g)| vec![p.clone(), g.clone()]).collect();
        assert_eq!(oracle_f1(&s, &with_gold, &gold).unwrap(), 1.0);
    }

    #[test]
    fn oracle_never_below_provisional() {
        // dropping both entities raises tp - fp but lowers corpus F1
        let s = scheme();
        let gold = vec![
            seq(&["S-X", "O", "O"]),
            seq(&["S-Y", "O", "O"]),
            seq(&["S-Y", "O", "S-X"]),
        ];
        let prov = vec![seq(&["S-X", "S-Y", "S-Y"]), seq(&["O", "O", "O"]), seq(&["O", "O", "O"])];
        let base = entity_f1(&s, &prov, &gold).unwrap().f1;
        let choices = vec![
            vec![prov[0].clone(), seq(&["O", "O", "O"])],
            vec![prov[1].clone()],
            vec![prov[2].clone()],
        ];
        assert!(oracle_f1(&s, &choices, &gold).unwrap() >= base);
    }

    #[test]
    fn accuracy_split() {
        let gold: Vec<LabelSequence> = vec![seq(&["O"; 10])];
        let mut pred = gold.clone();
        assert_eq!(
            acc_split(&pred, &gold, &[vec![]]).unwrap().acc_uncertain,
            None
        );
        let all = acc_split(&pred, &gold, &[vec![comp(3, 4)]]).unwrap();
        assert_eq!((all.acc_certain, all.acc_uncertain), (Some(1.0), Some(1.0)));
        pred[0].0[4] = s_x();
        let split = acc_split(&pred, &gold, &[vec![comp(3, 4)]]).unwrap();
        assert_eq!(split.acc_uncertain, Some(0.5));
        assert_eq!(split.acc_certain, Some(1.0));
        assert!((split.overall - 0.9).abs() < 1e-12);
    }

    fn s_x() -> crate::tagspace::LabelId {
        scheme().parse_label("S-X").unwrap()
    }

    #[test]
    fn sampling_ratios() {
        let s = scheme();
        let l_p = seq(&["O", "O", "S-X"]);
        let gold = seq(&["O", "O", "S-X"]);
        let other = seq(&["S-Y", "O", "S-X"]);
        let mut generated = vec![l_p.clone(); 6];
        generated.push(other.clone());
        generated.push(other.clone());
        let set = CandidateSet {
            method: SamplingMethod::McDropout,
            k_requested: 8,
            candidates: generated.clone(),
            generated,
        };
        let (sar, vsr) = sar_vsr(&s, std::slice::from_ref(&l_p), std::slice::from_ref(&set), std::slice::from_ref(&gold)).unwrap();
        // duplicates collapse: one distinct non-provisional candidate out of 8
        assert_eq!(sar, 1.0 / 8.0);
        assert_eq!(vsr, 0.0);
        let mut with_two = set;
        with_two.candidates.push(seq(&["O", "S-Y", "S-X"]));
        let (sar, _) = sar_vsr(&s, &[l_p], &[with_two], &[gold]).unwrap();
        assert_eq!(sar, 2.0 / 8.0);
    }

    #[test]
    fn costs() {
        let c = cost_model(8.0, 0.05, 3.0, 1.0).unwrap();
        assert!((c.cost_mc - 8.8).abs() < 1e-12);
        assert!((c.cost_topk - 0.8).abs() < 1e-12);
        let c = cost_model(4.0, 0.0, 3.0, 2.0).unwrap();
        assert_eq!((c.cost_topk, c.cost_mc), (0.0, 8.0));
        let c = cost_model(1.0, 0.5, 0.0, 1.0).unwrap();
        assert_eq!(c.cost_topk, 0.5);
        assert!(cost_model(-1.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn stats() {
        assert_eq!(uncertainty_stats(&[vec![], vec![]]), (0, 0));
        assert_eq!(
            uncertainty_stats(&[vec![comp(0, 0)], vec![comp(0, 0), comp(2, 2), comp(4, 4)], vec![]]),
            (2, 4)
        );
    }
}
