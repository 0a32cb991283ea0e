//! Knowledge sources for uncertain components.
//!
//! Two backends are supported: an offline knowledge base built from
//! (subject, predicate, object) triplets and ranked with Okapi BM25 over
//! character bigrams, and a replayable search cache keyed by exact query
//! string. Either result is flattened into a single knowledge text of at most
//! [`KNOWLEDGE_LIMIT`] characters.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Maximum characters of content kept per search item.
pub const ITEM_CONTENT_LIMIT: usize = 50;
/// Maximum characters of assembled knowledge.
pub const KNOWLEDGE_LIMIT: usize = 400;
pub const DEFAULT_TOP_N: usize = 3;
pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl Triplet {
    pub fn new(subject: impl Into<String>, predicate: impl Into<String>, object: impl Into<String>) -> Self {
        Triplet {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        }
    }
}

/// Reads JSONL triplets; blank lines are skipped.
pub fn read_triplets(reader: impl BufRead, source_name: &str) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Triplet = serde_json::from_str(&line).map_err(|e| Error::format(source_name, i + 1, e.to_string()))?;
        if t.subject.is_empty() || t.predicate.is_empty() || t.object.is_empty() {
            return Err(Error::format(source_name, i + 1, "triplet has an empty field"));
        }
        out.push(t);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeDoc {
    pub subject: String,
    pub body: String,
}

/// BM25 terms: overlapping character bigrams, or the lone character of a
/// one-character text.
pub fn terms(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    match chars.len() {
        0 => Vec::new(),
        1 => vec![chars[0].to_string()],
        _ => chars.windows(2).map(|w| w.iter().collect()).collect(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Bm25Index {
    /// term -> (doc, term frequency), docs ascending
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    doc_len: Vec<u32>,
    avg_len: f64,
}

impl Bm25Index {
    fn build(docs: &[KnowledgeDoc]) -> Self {
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(docs.len());
        for (d, doc) in docs.iter().enumerate() {
            let ts = terms(&doc.body);
            doc_len.push(ts.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in ts {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((d as u32, n));
            }
        }
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            doc_len.iter().map(|&l| l as f64).sum::<f64>() / docs.len() as f64
        };
        Bm25Index {
            postings,
            doc_len,
            avg_len,
        }
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_len.len() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Score of every doc; distinct query terms each contribute once.
    fn scores(&self, query: &str) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_len.len()];
        let mut qterms = terms(query);
        qterms.sort();
        qterms.dedup();
        for t in qterms {
            let Some(post) = self.postings.get(&t) else { continue };
            let idf = self.idf(post.len());
            for &(d, tf) in post {
                let tf = tf as f64;
                let norm = 1.0 - BM25_B + BM25_B * self.doc_len[d as usize] as f64 / self.avg_len;
                scores[d as usize] += idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm);
            }
        }
        scores
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    docs: Vec<KnowledgeDoc>,
    index: Bm25Index,
}

/// One document per subject: `subject。` followed by `predicate:object。`
/// clauses sorted by predicate then object.
pub fn build_kb(triplets: impl IntoIterator<Item = Triplet>) -> KnowledgeBase {
    let mut by_subject: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    for t in triplets {
        by_subject.entry(t.subject).or_default().push((t.predicate, t.object));
    }
    let docs = by_subject
        .into_iter()
        .map(|(subject, mut facts)| {
            facts.sort();
            let mut body = format!("{subject}。");
            for (p, o) in facts {
                body.push_str(&p);
                body.push(':');
                body.push_str(&o);
                body.push('。');
            }
            KnowledgeDoc { subject, body }
        })
        .collect();
    KnowledgeBase::from_docs(docs)
}

impl KnowledgeBase {
    /// Indexes arbitrary documents; they are ordered by subject.
    pub fn from_docs(mut docs: Vec<KnowledgeDoc>) -> Self {
        docs.sort_by(|a, b| a.subject.cmp(&b.subject));
        let index = Bm25Index::build(&docs);
        KnowledgeBase { docs, index }
    }

    pub fn docs(&self) -> &[KnowledgeDoc] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Every document with its BM25 score, best first; ties by subject.
    pub fn rank_all(&self, query: &str) -> Vec<(&KnowledgeDoc, f64)> {
        let scores = self.index.scores(query);
        let mut ranked: Vec<_> = self.docs.iter().zip(scores).collect();
        // docs are already subject-sorted, so a stable sort keeps ties in order
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        ranked
    }

    /// The `top_n` best documents with a positive score.
    pub fn bm25_query(&self, query: &str, top_n: usize) -> Vec<(&KnowledgeDoc, f64)> {
        self.rank_all(query)
            .into_iter()
            .filter(|(_, s)| *s > 0.0)
            .take(top_n)
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("kb.json"), serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("kb.json");
        let text = std::fs::read_to_string(&path)?;
        let kb: KnowledgeBase =
            serde_json::from_str(&text).map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
        if kb.index.doc_len.len() != kb.docs.len() {
            return Err(Error::Model(format!("{}: index does not match documents", path.display())));
        }
        Ok(kb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Encyclopedia,
    Other,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchItem {
    pub title: String,
    pub content: String,
    pub category: Category,
}

#[derive(Deserialize)]
struct CacheLine {
    query: String,
    items: Vec<SearchItem>,
}

/// Search results replayed from a fixture file.
#[derive(Debug, Default)]
pub struct SearchCache {
    entries: HashMap<String, Vec<SearchItem>>,
    misses: AtomicU64,
}

impl SearchCache {
    /// Reads JSONL `{"query", "items"}` lines; a repeated query keeps its
    /// last entry.
    pub fn from_reader(reader: impl BufRead, source_name: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CacheLine =
                serde_json::from_str(&line).map_err(|e| Error::format(source_name, i + 1, e.to_string()))?;
            entries.insert(entry.query, entry.items);
        }
        Ok(SearchCache {
            entries,
            misses: AtomicU64::new(0),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(file), &path.display().to_string())
    }

    pub fn insert(&mut self, query: impl Into<String>, items: Vec<SearchItem>) {
        self.entries.insert(query.into(), items);
    }

    pub fn cache_lookup(&self, query: &str) -> &[SearchItem] {
        match self.entries.get(query) {
            Some(items) => items,
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                &[]
            }
        }
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Retrieved knowledge, at most [`KNOWLEDGE_LIMIT`] characters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KnowledgeText(String);

impl KnowledgeText {
    pub fn new(text: &str) -> Self {
        KnowledgeText(truncate_chars(text, KNOWLEDGE_LIMIT))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn chars(&self) -> Vec<char> {
        self.0.chars().collect()
    }

    pub fn char_len(&self) -> usize {
        self.0.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn truncate_chars(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

/// Encyclopedia items first, all other order preserved; each item rendered
/// as `title:content` with content cut to [`ITEM_CONTENT_LIMIT`] characters
/// (bare `title` when there is no content); items joined by `|`.
pub fn assemble_search(items: &[SearchItem]) -> KnowledgeText {
    let (ency, other): (Vec<&SearchItem>, Vec<&SearchItem>) =
        items.iter().partition(|i| i.category == Category::Encyclopedia);
    let rendered: Vec<String> = ency
        .into_iter()
        .chain(other)
        .map(|i| {
            if i.content.is_empty() {
                i.title.clone()
            } else {
                format!("{}:{}", i.title, truncate_chars(&i.content, ITEM_CONTENT_LIMIT))
            }
        })
        .collect();
    KnowledgeText::new(&rendered.join("|"))
}

pub fn assemble_docs<'a>(docs: impl IntoIterator<Item = &'a KnowledgeDoc>) -> KnowledgeText {
    let bodies: Vec<&str> = docs.into_iter().map(|d| d.body.as_str()).collect();
    KnowledgeText::new(&bodies.join("|"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    #[default]
    Kb,
    Cache,
    /// Cache first, knowledge base when the cache has nothing.
    Both,
}

/// Combines the configured sources behind one query call.
#[derive(Debug, Default)]
pub struct Retriever {
    pub mode: RetrievalMode,
    pub kb: Option<KnowledgeBase>,
    pub cache: Option<SearchCache>,
    pub top_n: usize,
}

impl Retriever {
    pub fn new(mode: RetrievalMode, kb: Option<KnowledgeBase>, cache: Option<SearchCache>, top_n: usize) -> Result<Self> {
        let need_kb = matches!(mode, RetrievalMode::Kb);
        let need_cache = matches!(mode, RetrievalMode::Cache);
        if need_kb && kb.is_none() {
            return Err(Error::Config("retrieval mode kb needs a knowledge base".into()));
        }
        if need_cache && cache.is_none() {
            return Err(Error::Config("retrieval mode cache needs a search cache".into()));
        }
        if mode == RetrievalMode::Both && kb.is_none() && cache.is_none() {
            return Err(Error::Config("retrieval mode both needs a knowledge base or a cache".into()));
        }
        Ok(Retriever { mode, kb, cache, top_n })
    }

    /// A retriever that never finds anything.
    pub fn none() -> Self {
        Retriever {
            mode: RetrievalMode::Both,
            kb: None,
            cache: None,
            top_n: DEFAULT_TOP_N,
        }
    }

    fn kb_text(&self, query: &str) -> KnowledgeText {
        match &self.kb {
            Some(kb) => assemble_docs(kb.bm25_query(query, self.top_n).into_iter().map(|(d, _)| d)),
            None => KnowledgeText::default(),
        }
    }

    fn cache_text(&self, query: &str) -> KnowledgeText {
        match &self.cache {
            Some(c) => assemble_search(c.cache_lookup(query)),
            None => KnowledgeText::default(),
        }
    }

    /// Knowledge for one query; a miss yields empty text.
    pub fn retrieve(&self, query: &str) -> KnowledgeText {
        match self.mode {
            RetrievalMode::Kb => self.kb_text(query),
            RetrievalMode::Cache => self.cache_text(query),
            RetrievalMode::Both => {
                let hit = self.cache_text(query);
                if hit.is_empty() {
                    self.kb_text(query)
                } else {
                    hit
                }
            }
        }
    }
}
