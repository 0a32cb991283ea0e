//! BIESO label scheme and the span <-> label-sequence algebra.
//!
//! Label ids are dense: `O` is always id 0, followed by `B-t, I-t, E-t, S-t`
//! for each entity type `t` in declaration order.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelId(pub u32);

impl LabelId {
    pub const OUTSIDE: LabelId = LabelId(0);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Decoded form of a label id. The payload is the entity type index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag {
    Outside,
    Begin(usize),
    Inside(usize),
    End(usize),
    Single(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemeRepr", into = "SchemeRepr")]
pub struct LabelScheme {
    entity_types: Vec<String>,
    labels: Vec<String>,
    index: HashMap<String, LabelId>,
}

#[derive(Serialize, Deserialize)]
struct SchemeRepr {
    entity_types: Vec<String>,
}

impl TryFrom<SchemeRepr> for LabelScheme {
    type Error = Error;

    fn try_from(repr: SchemeRepr) -> Result<Self> {
        LabelScheme::new(repr.entity_types)
    }
}

impl From<LabelScheme> for SchemeRepr {
    fn from(scheme: LabelScheme) -> Self {
        SchemeRepr {
            entity_types: scheme.entity_types,
        }
    }
}

impl LabelScheme {
    pub fn new<S: Into<String>>(entity_types: impl IntoIterator<Item = S>) -> Result<Self> {
        let entity_types: Vec<String> = entity_types.into_iter().map(Into::into).collect();
        let mut seen = BTreeSet::new();
        for t in &entity_types {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid entity type name {t:?}")));
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::Config(format!("duplicate entity type {t:?}")));
            }
        }
        let mut labels = vec!["O".to_string()];
        for t in &entity_types {
            for prefix in ["B", "I", "E", "S"] {
                labels.push(format!("{prefix}-{t}"));
            }
        }
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), LabelId(i as u32)))
            .collect();
        Ok(LabelScheme {
            entity_types,
            labels,
            index,
        })
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_ids(&self) -> impl Iterator<Item = LabelId> {
        (0..self.labels.len() as u32).map(LabelId)
    }

    pub fn parse_label(&self, name: &str) -> Result<LabelId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::SchemeMismatch(format!("unknown label {name:?}")))
    }

    pub fn label_name(&self, id: LabelId) -> Result<&str> {
        self.labels
            .get(id.index())
            .map(String::as_str)
            .ok_or_else(|| self.bad_id(id))
    }

    pub fn type_index(&self, etype: &str) -> Option<usize> {
        self.entity_types.iter().position(|t| t == etype)
    }

    pub fn tag(&self, id: LabelId) -> Result<Tag> {
        if id.index() >= self.labels.len() {
            return Err(self.bad_id(id));
        }
        Ok(match id.0 {
            0 => Tag::Outside,
            k => {
                let t = (k as usize - 1) / 4;
                match (k - 1) % 4 {
                    0 => Tag::Begin(t),
                    1 => Tag::Inside(t),
                    2 => Tag::End(t),
                    _ => Tag::Single(t),
                }
            }
        })
    }

    pub fn id_of(&self, tag: Tag) -> LabelId {
        let (t, k) = match tag {
            Tag::Outside => return LabelId::OUTSIDE,
            Tag::Begin(t) => (t, 0),
            Tag::Inside(t) => (t, 1),
            Tag::End(t) => (t, 2),
            Tag::Single(t) => (t, 3),
        };
        LabelId((1 + 4 * t + k) as u32)
    }

    fn bad_id(&self, id: LabelId) -> Error {
        Error::SchemeMismatch(format!(
            "label id {} outside scheme of {} labels",
            id.0,
            self.labels.len()
        ))
    }

    /// Whether label `b` may directly follow label `a`.
    pub fn transition_allowed(&self, a: LabelId, b: LabelId) -> Result<bool> {
        let (a, b) = (self.tag(a)?, self.tag(b)?);
        Ok(match a {
            Tag::Outside | Tag::End(_) | Tag::Single(_) => {
                matches!(b, Tag::Outside | Tag::Begin(_) | Tag::Single(_))
            }
            Tag::Begin(t) | Tag::Inside(t) => {
                matches!(b, Tag::Inside(u) | Tag::End(u) if u == t)
            }
        })
    }

    pub fn can_start(&self, id: LabelId) -> Result<bool> {
        Ok(matches!(
            self.tag(id)?,
            Tag::Outside | Tag::Begin(_) | Tag::Single(_)
        ))
    }

    pub fn can_end(&self, id: LabelId) -> Result<bool> {
        Ok(matches!(
            self.tag(id)?,
            Tag::Outside | Tag::End(_) | Tag::Single(_)
        ))
    }

    /// Checks ids, start/end rules and every adjacent transition.
    pub fn check_legal(&self, seq: &[LabelId]) -> Result<()> {
        let (Some(&first), Some(&last)) = (seq.first(), seq.last()) else {
            return Ok(());
        };
        if !self.can_start(first)? {
            return Err(Error::IllegalSequence(format!(
                "sequence starts with {}",
                self.label_name(first)?
            )));
        }
        for (i, pair) in seq.windows(2).enumerate() {
            if !self.transition_allowed(pair[0], pair[1])? {
                return Err(Error::IllegalSequence(format!(
                    "{} -> {} at position {}",
                    self.label_name(pair[0])?,
                    self.label_name(pair[1])?,
                    i + 1
                )));
            }
        }
        if !self.can_end(last)? {
            return Err(Error::IllegalSequence(format!(
                "sequence ends with {}",
                self.label_name(last)?
            )));
        }
        Ok(())
    }

    pub fn is_legal(&self, seq: &[LabelId]) -> bool {
        self.check_legal(seq).is_ok()
    }

    /// Reads the entity spans of a legal sequence.
    pub fn extract_spans(&self, seq: &[LabelId]) -> Result<BTreeSet<EntitySpan>> {
        self.check_legal(seq)?;
        let mut spans = BTreeSet::new();
        let mut open: Option<usize> = None;
        for (i, &id) in seq.iter().enumerate() {
            match self.tag(id)? {
                Tag::Begin(_) => open = Some(i),
                Tag::End(t) => {
                    // legality guarantees a matching Begin
                    let start = open.take().unwrap_or(i);
                    spans.insert(EntitySpan::new(start, i, &self.entity_types[t]));
                }
                Tag::Single(t) => {
                    spans.insert(EntitySpan::new(i, i, &self.entity_types[t]));
                }
                Tag::Outside | Tag::Inside(_) => {}
            }
        }
        Ok(spans)
    }

    /// Inverse of [`extract_spans`](Self::extract_spans).
    pub fn spans_to_labels<'a>(
        &self,
        spans: impl IntoIterator<Item = &'a EntitySpan>,
        n: usize,
    ) -> Result<LabelSequence> {
        let mut ids = vec![LabelId::OUTSIDE; n];
        let mut taken = vec![false; n];
        for span in spans {
            if span.start > span.end || span.end >= n {
                return Err(Error::InvalidArgument(format!(
                    "span {span} outside sequence of length {n}"
                )));
            }
            let t = self
                .type_index(&span.etype)
                .ok_or_else(|| Error::SchemeMismatch(format!("unknown entity type {:?}", span.etype)))?;
            if taken[span.start..=span.end].iter().any(|&x| x) {
                return Err(Error::OverlappingSpans(format!("{span}")));
            }
            taken[span.start..=span.end].iter_mut().for_each(|x| *x = true);
            if span.start == span.end {
                ids[span.start] = self.id_of(Tag::Single(t));
            } else {
                ids[span.start] = self.id_of(Tag::Begin(t));
                for id in &mut ids[span.start + 1..span.end] {
                    *id = self.id_of(Tag::Inside(t));
                }
                ids[span.end] = self.id_of(Tag::End(t));
            }
        }
        Ok(LabelSequence(ids))
    }

    pub fn parse_sequence<S: AsRef<str>>(&self, names: &[S]) -> Result<LabelSequence> {
        names
            .iter()
            .map(|n| self.parse_label(n.as_ref()))
            .collect::<Result<Vec<_>>>()
            .map(LabelSequence)
    }

    pub fn names(&self, seq: &[LabelId]) -> Result<Vec<String>> {
        seq.iter()
            .map(|&id| self.label_name(id).map(str::to_string))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSequence(pub Vec<LabelId>);

impl LabelSequence {
    pub fn into_inner(self) -> Vec<LabelId> {
        self.0
    }

    /// Number of positions at which two equal-length sequences differ.
    pub fn hamming(&self, other: &LabelSequence) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

impl Deref for LabelSequence {
    type Target = [LabelId];

    fn deref(&self) -> &[LabelId] {
        &self.0
    }
}

impl From<Vec<LabelId>> for LabelSequence {
    fn from(ids: Vec<LabelId>) -> Self {
        LabelSequence(ids)
    }
}

/// An entity occupying characters `start..=end`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub etype: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, etype: impl Into<String>) -> Self {
        EntitySpan {
            start,
            end,
            etype: etype.into(),
        }
    }

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

impl fmt::Display for EntitySpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.start, self.end, self.etype)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scheme() -> LabelScheme {
        LabelScheme::new(["PER", "LOC", "X", "Y"]).unwrap()
    }

    fn seq(s: &LabelScheme, names: &[&str]) -> LabelSequence {
        s.parse_sequence(names).unwrap()
    }

    #[test]
    fn label_layout() {
        let s = scheme();
        assert_eq!(s.len(), 4 * 4 + 1);
        assert_eq!(s.parse_label("O").unwrap(), LabelId(0));
        assert_eq!(s.parse_label("B-PER").unwrap(), LabelId(1));
        assert_eq!(s.parse_label("S-LOC").unwrap(), LabelId(8));
        for id in s.label_ids() {
            assert_eq!(s.id_of(s.tag(id).unwrap()), id);
        }
    }

    #[test]
    fn transitions() {
        let s = scheme();
        let l = |n| s.parse_label(n).unwrap();
        assert!(s.transition_allowed(l("O"), l("B-PER")).unwrap());
        assert!(!s.transition_allowed(l("B-PER"), l("I-LOC")).unwrap());
        assert!(!s.transition_allowed(l("E-PER"), l("I-PER")).unwrap());
        assert!(s.transition_allowed(l("I-PER"), l("E-PER")).unwrap());
        assert!(s.transition_allowed(l("S-PER"), l("S-PER")).unwrap());
        assert!(!s.transition_allowed(l("B-PER"), l("O")).unwrap());
        assert!(matches!(
            s.transition_allowed(LabelId(0), LabelId(99)),
            Err(Error::SchemeMismatch(_))
        ));
    }

    #[test]
    fn extract() {
        let s = scheme();
        let spans = s.extract_spans(&seq(&s, &["B-X", "E-X", "O", "S-Y"])).unwrap();
        let want: BTreeSet<_> = [EntitySpan::new(0, 1, "X"), EntitySpan::new(3, 3, "Y")].into();
        assert_eq!(spans, want);
        assert!(s.extract_spans(&seq(&s, &["O", "O", "O"])).unwrap().is_empty());
        let spans = s.extract_spans(&seq(&s, &["S-X", "S-X"])).unwrap();
        let want: BTreeSet<_> = [EntitySpan::new(0, 0, "X"), EntitySpan::new(1, 1, "X")].into();
        assert_eq!(spans, want);
    }

    #[test]
    fn extract_rejects_illegal() {
        let s = scheme();
        for bad in [&["I-X", "E-X"][..], &["B-X", "O"], &["B-X"], &["O", "E-X"]] {
            assert!(matches!(
                s.extract_spans(&seq(&s, bad)),
                Err(Error::IllegalSequence(_))
            ));
        }
    }

    #[test]
    fn to_labels() {
        let s = scheme();
        let names = |spans: &[EntitySpan], n| s.names(&s.spans_to_labels(spans, n).unwrap()).unwrap();
        assert_eq!(names(&[EntitySpan::new(0, 1, "X")], 3), ["B-X", "E-X", "O"]);
        assert_eq!(names(&[], 2), ["O", "O"]);
        assert_eq!(names(&[EntitySpan::new(1, 1, "Y")], 2), ["O", "S-Y"]);
        assert_eq!(
            names(&[EntitySpan::new(0, 3, "PER")], 4),
            ["B-PER", "I-PER", "I-PER", "E-PER"]
        );
        let overlapping = [EntitySpan::new(0, 2, "X"), EntitySpan::new(2, 3, "Y")];
        assert!(matches!(
            s.spans_to_labels(&overlapping, 5),
            Err(Error::OverlappingSpans(_))
        ));
        assert!(s.spans_to_labels(&[EntitySpan::new(1, 4, "X")], 4).is_err());
        assert!(matches!(
            s.spans_to_labels(&[EntitySpan::new(0, 0, "ZZZ")], 1),
            Err(Error::SchemeMismatch(_))
        ));
    }

    #[test]
    fn scheme_serde() {
        let s = scheme();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"entity_types":["PER","LOC","X","Y"]}"#);
        let back: LabelScheme = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert!(LabelScheme::new(["A", "A"]).is_err());
    }

    /// Disjoint spans from a random segmentation of `0..n`.
    fn arb_spans() -> impl Strategy<Value = (BTreeSet<EntitySpan>, usize)> {
        (1usize..24)
            .prop_flat_map(|n| (Just(n), proptest::collection::vec((0u8..3, 1usize..5, 0usize..4), 0..12)))
            .prop_map(|(n, pieces)| {
                let types = ["PER", "LOC", "X", "Y"];
                let mut spans = BTreeSet::new();
                let mut at = 0;
                for (gap, len, t) in pieces {
                    let start = at + gap as usize;
                    let end = start + len - 1;
                    if end >= n {
                        break;
                    }
                    spans.insert(EntitySpan::new(start, end, types[t]));
                    at = end + 1;
                }
                (spans, n)
            })
    }

    proptest! {
        #[test]
        fn round_trip((spans, n) in arb_spans()) {
            let s = scheme();
            let labels = s.spans_to_labels(&spans, n).unwrap();
            prop_assert!(s.is_legal(&labels));
            prop_assert_eq!(s.extract_spans(&labels).unwrap(), spans);
        }
    }
}
