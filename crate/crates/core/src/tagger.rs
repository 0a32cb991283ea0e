//! Base tagger: a concatenated character-embedding window feeding one ReLU
//! hidden layer and a per-position softmax.
//!
//! Dropout is inverted dropout on the embedding window and on the hidden
//! activations. In [`ScorerMode::Stochastic`] the dropout masks are drawn from
//! a ChaCha stream seeded only by the given seed, so repeated calls with the
//! same seed give identical lattices.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{viterbi, TagLattice};
use crate::evalkit::entity_f1;
use crate::nn::{self, ParamVisitor};
use crate::tagspace::{LabelScheme, LabelSequence};
use crate::{Error, Result};

/// A sentence as a sequence of unicode scalar values.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    chars: Vec<char>,
}

impl Sentence {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        if chars.is_empty() {
            return Err(Error::Empty("sentence has no characters".into()));
        }
        Ok(Sentence { chars })
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn text(&self) -> String {
        self.chars.iter().collect()
    }

    /// Characters `start..=end`.
    pub fn substring(&self, start: usize, end: usize) -> String {
        self.chars[start..=end].iter().collect()
    }
}

impl std::str::FromStr for Sentence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Sentence::new(s.chars().collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerMode {
    Deterministic,
    Stochastic { seed: u64 },
}

/// Anything that can turn a sentence into a tag lattice. The pipeline only
/// depends on this trait, so other backends can drive it.
pub trait Scorer: Sync {
    fn scheme(&self) -> &LabelScheme;

    fn score(&self, x: &Sentence, mode: ScorerMode) -> Result<TagLattice>;
}

pub(crate) const PAD_ID: usize = 0;
pub(crate) const UNK_ID: usize = 1;

/// Character vocabulary with reserved PAD and UNK ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<char>", into = "Vec<char>")]
pub struct CharVocab {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
    reserved: usize,
}

impl CharVocab {
    /// Characters occurring at least `min_count` times, sorted, after
    /// `reserved` special ids.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a [char]>,
        min_count: usize,
        reserved: usize,
    ) -> Self {
        let mut counts: BTreeMap<char, usize> = BTreeMap::new();
        for t in texts {
            for &c in t {
                *counts.entry(c).or_default() += 1;
            }
        }
        let chars = counts
            .into_iter()
            .filter(|&(_, n)| n >= min_count.max(1))
            .map(|(c, _)| c)
            .collect();
        Self::with_reserved(chars, reserved)
    }

    pub fn with_reserved(chars: Vec<char>, reserved: usize) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + reserved)).collect();
        CharVocab {
            chars,
            index,
            reserved,
        }
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK_ID)
    }

    /// Total ids including reserved ones.
    pub fn size(&self) -> usize {
        self.chars.len() + self.reserved
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }
}

impl From<Vec<char>> for CharVocab {
    fn from(chars: Vec<char>) -> Self {
        CharVocab::with_reserved(chars, 2)
    }
}

impl From<CharVocab> for Vec<char> {
    fn from(v: CharVocab) -> Self {
        v.chars
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaggerParams {
    pub emb: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl TaggerParams {
    fn zeros_like(&self) -> Self {
        TaggerParams {
            emb: Array2::zeros(self.emb.raw_dim()),
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }
}

impl ParamVisitor for TaggerParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("emb", self.emb.as_slice().expect("standard layout"));
        f("w1", self.w1.as_slice().expect("standard layout"));
        f("b1", self.b1.as_slice().expect("standard layout"));
        f("w2", self.w2.as_slice().expect("standard layout"));
        f("b2", self.b2.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("emb", self.emb.as_slice_mut().expect("standard layout"));
        f("w1", self.w1.as_slice_mut().expect("standard layout"));
        f("b1", self.b1.as_slice_mut().expect("standard layout"));
        f("w2", self.w2.as_slice_mut().expect("standard layout"));
        f("b2", self.b2.as_slice_mut().expect("standard layout"));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggerDims {
    pub d_emb: usize,
    pub d_hid: usize,
    /// Window radius; the encoder sees `2 * window + 1` characters.
    pub window: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaggerModel {
    scheme: LabelScheme,
    vocab: CharVocab,
    dims: TaggerDims,
    dropout: f64,
    max_seq_len: usize,
    params: TaggerParams,
}

/// Intermediate values of one forward pass, kept for backprop.
struct Trace {
    ids: Vec<usize>,
    x: Array2<f64>,
    x_mask: Option<Array2<f64>>,
    h_pre: Array2<f64>,
    h_mask: Option<Array2<f64>>,
    h: Array2<f64>,
    log_probs: Array2<f64>,
}

impl TaggerModel {
    /// Randomly initialized model.
    pub fn init(
        scheme: LabelScheme,
        vocab: CharVocab,
        dims: TaggerDims,
        dropout: f64,
        max_seq_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        if dims.d_emb == 0 || dims.d_hid == 0 {
            return Err(Error::Config("tagger dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = (2 * dims.window + 1) * dims.d_emb;
        let labels = scheme.len();
        let params = TaggerParams {
            emb: nn::uniform(&mut rng, vocab.size(), dims.d_emb, 0.5),
            w1: nn::xavier(&mut rng, input, dims.d_hid),
            b1: Array1::zeros(dims.d_hid),
            w2: nn::xavier(&mut rng, dims.d_hid, labels),
            b2: Array1::zeros(labels),
        };
        Ok(TaggerModel {
            scheme,
            vocab,
            dims,
            dropout,
            max_seq_len,
            params,
        })
    }

    pub fn scheme(&self) -> &LabelScheme {
        &self.scheme
    }

    pub fn vocab(&self) -> &CharVocab {
        &self.vocab
    }

    pub fn dims(&self) -> TaggerDims {
        self.dims
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn params(&self) -> &TaggerParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut TaggerParams {
        &mut self.params
    }

    /// Same weights with a different dropout rate for stochastic scoring.
    pub fn with_dropout(&self, p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
        }
        Ok(TaggerModel {
            dropout: p,
            ..self.clone()
        })
    }

    fn char_ids(&self, x: &Sentence) -> Result<Vec<usize>> {
        if x.len() > self.max_seq_len {
            return Err(Error::TooLong {
                len: x.len(),
                max: self.max_seq_len,
            });
        }
        Ok(x.chars().iter().map(|&c| self.vocab.id(c)).collect())
    }

    /// Window matrix: row i holds the embeddings of chars i-w..=i+w.
    fn gather(&self, ids: &[usize]) -> Array2<f64> {
        let (w, d) = (self.dims.window as isize, self.dims.d_emb);
        let n = ids.len() as isize;
        let mut x = Array2::zeros((ids.len(), (2 * w as usize + 1) * d));
        for i in 0..n {
            for (slot, j) in (i - w..=i + w).enumerate() {
                let id = if (0..n).contains(&j) { ids[j as usize] } else { PAD_ID };
                x.slice_mut(s![i as usize, slot * d..(slot + 1) * d])
                    .assign(&self.params.emb.row(id));
            }
        }
        x
    }

    fn forward(&self, x: &Sentence, mode: ScorerMode) -> Result<Trace> {
        let ids = self.char_ids(x)?;
        let n = ids.len();
        let mut rng = match mode {
            ScorerMode::Stochastic { seed } if self.dropout > 0.0 => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        self.forward_with(ids, n, rng.as_mut())
    }

    fn forward_with(&self, ids: Vec<usize>, n: usize, mut rng: Option<&mut ChaCha8Rng>) -> Result<Trace> {
        let mut xin = self.gather(&ids);
        let x_mask = rng.as_deref_mut().map(|r| {
            let m = nn::dropout_mask(r, xin.len(), self.dropout)
                .into_shape_with_order(xin.raw_dim())
                .expect("mask shape");
            xin *= &m;
            m
        });
        let h_pre = xin.dot(&self.params.w1) + &self.params.b1;
        let mut h = h_pre.mapv(|v| v.max(0.0));
        let h_mask = rng.map(|r| {
            let m = nn::dropout_mask(r, h.len(), self.dropout)
                .into_shape_with_order((n, self.dims.d_hid))
                .expect("mask shape");
            h *= &m;
            m
        });
        let logits = h.dot(&self.params.w2) + &self.params.b2;
        let log_probs = nn::log_softmax_rows(&logits);
        Ok(Trace {
            ids,
            x: xin,
            x_mask,
            h_pre,
            h_mask,
            h,
            log_probs,
        })
    }

    /// Hidden pre-activations for one pass; exposed for dropout diagnostics.
    pub fn hidden_preactivations(&self, x: &Sentence, mode: ScorerMode) -> Result<Array2<f64>> {
        Ok(self.forward(x, mode)?.h_pre)
    }

    /// Accumulates d(sum_i w_i * -log p_i(gold_i)) into `grads`.
    fn backward(&self, t: &Trace, gold: &[usize], weight: f64, grads: &mut TaggerParams) {
        let mut dz = t.log_probs.mapv(f64::exp);
        for (i, &g) in gold.iter().enumerate() {
            dz[[i, g]] -= 1.0;
        }
        dz *= weight;
        grads.w2 += &t.h.t().dot(&dz);
        grads.b2 += &dz.sum_axis(Axis(0));
        let mut dh = dz.dot(&self.params.w2.t());
        if let Some(m) = &t.h_mask {
            dh *= m;
        }
        dh.zip_mut_with(&t.h_pre, |g, &pre| {
            if pre <= 0.0 {
                *g = 0.0
            }
        });
        grads.w1 += &t.x.t().dot(&dh);
        grads.b1 += &dh.sum_axis(Axis(0));
        let mut dx = dh.dot(&self.params.w1.t());
        if let Some(m) = &t.x_mask {
            dx *= m;
        }
        let (w, d) = (self.dims.window as isize, self.dims.d_emb);
        let n = t.ids.len() as isize;
        for i in 0..n {
            for (slot, j) in (i - w..=i + w).enumerate() {
                let id = if (0..n).contains(&j) { t.ids[j as usize] } else { PAD_ID };
                let mut row = grads.emb.row_mut(id);
                row += &dx.slice(s![i as usize, slot * d..(slot + 1) * d]);
            }
        }
    }

    fn nll(log_probs: &Array2<f64>, gold: &[usize]) -> f64 {
        gold.iter().enumerate().map(|(i, &g)| -log_probs[[i, g]]).sum()
    }

    /// Mean per-position cross-entropy in deterministic mode.
    pub fn loss(&self, x: &Sentence, gold: &LabelSequence) -> Result<f64> {
        let gold = self.gold_ids(x, gold)?;
        let t = self.forward(x, ScorerMode::Deterministic)?;
        Ok(Self::nll(&t.log_probs, &gold) / gold.len() as f64)
    }

    fn gold_ids(&self, x: &Sentence, gold: &LabelSequence) -> Result<Vec<usize>> {
        if gold.len() != x.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} characters",
                gold.len(),
                x.len()
            )));
        }
        gold.iter()
            .map(|&l| {
                if l.index() < self.scheme.len() {
                    Ok(l.index())
                } else {
                    Err(Error::SchemeMismatch(format!("label id {}", l.0)))
                }
            })
            .collect()
    }

    /// Analytic gradient of the mean per-position cross-entropy.
    pub fn gradient(&self, x: &Sentence, gold: &LabelSequence) -> Result<TaggerParams> {
        let ids = self.gold_ids(x, gold)?;
        let t = self.forward(x, ScorerMode::Deterministic)?;
        let mut g = self.params.zeros_like();
        self.backward(&t, &ids, 1.0 / ids.len() as f64, &mut g);
        Ok(g)
    }

    /// Compares analytic gradients with central differences (h = 1e-4) over
    /// every parameter and returns the max relative error.
    pub fn gradient_check(&self, x: &Sentence, gold: &LabelSequence, mode: ScorerMode) -> Result<f64> {
        if mode != ScorerMode::Deterministic {
            return Err(Error::InvalidArgument(
                "gradient check requires deterministic scoring".into(),
            ));
        }
        let analytic = self.gradient(x, gold)?.flat();
        if analytic.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("tagger gradient".into()));
        }
        let mut probe = self.clone();
        Ok(nn::finite_difference_check(&self.params, &analytic, 1e-4, |p| {
            probe.params = p.clone();
            probe.loss(x, gold).unwrap_or(f64::NAN)
        }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: TaggerFile =
            serde_json::from_str(&text).map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
        Self::from_file(file)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    fn to_file(&self) -> TaggerFile {
        let mut params = Vec::new();
        let shapes = self.shapes();
        let mut k = 0;
        self.params.visit(&mut |name, data| {
            params.push(ParamArray {
                name: name.to_string(),
                shape: shapes[k].clone(),
                data: data.to_vec(),
            });
            k += 1;
        });
        TaggerFile {
            version: TAGGER_FILE_VERSION,
            kind: "tagger".into(),
            scheme: self.scheme.clone(),
            char_vocab: self.vocab.clone(),
            w: self.dims.window,
            p: self.dropout,
            max_seq_len: self.max_seq_len,
            dims: self.dims,
            params,
        }
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let p = &self.params;
        vec![
            p.emb.shape().to_vec(),
            p.w1.shape().to_vec(),
            p.b1.shape().to_vec(),
            p.w2.shape().to_vec(),
            p.b2.shape().to_vec(),
        ]
    }

    fn from_file(file: TaggerFile) -> Result<Self> {
        if file.version != TAGGER_FILE_VERSION || file.kind != "tagger" {
            return Err(Error::Model(format!(
                "unsupported tagger file (kind {:?}, version {})",
                file.kind, file.version
            )));
        }
        if file.w != file.dims.window {
            return Err(Error::Model("window radius disagrees with dims".into()));
        }
        let mut model = TaggerModel::init(file.scheme, file.char_vocab, file.dims, file.p, file.max_seq_len, 0)?;
        let shapes = model.shapes();
        if file.params.len() != shapes.len() {
            return Err(Error::Model("wrong number of parameter arrays".into()));
        }
        for (p, shape) in file.params.iter().zip(&shapes) {
            if &p.shape != shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Model(format!("parameter {} has wrong shape", p.name)));
            }
        }
        let mut k = 0;
        model.params.visit_mut(&mut |_, s| {
            s.copy_from_slice(&file.params[k].data);
            k += 1;
        });
        if !model.params.all_finite() {
            return Err(Error::NonFinite("tagger parameters".into()));
        }
        Ok(model)
    }

    /// Token accuracy of deterministic Viterbi decoding.
    pub fn token_accuracy(&self, corpus: &[(Sentence, LabelSequence)]) -> Result<f64> {
        let (mut right, mut total) = (0usize, 0usize);
        for (x, gold) in corpus {
            let pred = viterbi(&self.score(x, ScorerMode::Deterministic)?, &self.scheme)?;
            right += pred.seq.iter().zip(gold.iter()).filter(|(a, b)| a == b).count();
            total += gold.len();
        }
        Ok(if total == 0 { 0.0 } else { right as f64 / total as f64 })
    }

    /// Entity F1 of deterministic Viterbi decoding.
    pub fn corpus_f1(&self, corpus: &[(Sentence, LabelSequence)]) -> Result<f64> {
        let mut preds = Vec::with_capacity(corpus.len());
        for (x, _) in corpus {
            preds.push(viterbi(&self.score(x, ScorerMode::Deterministic)?, &self.scheme)?.seq);
        }
        let gold: Vec<_> = corpus.iter().map(|(_, g)| g.clone()).collect();
        Ok(entity_f1(&self.scheme, &preds, &gold)?.f1)
    }
}

impl Scorer for TaggerModel {
    fn scheme(&self) -> &LabelScheme {
        &self.scheme
    }

    fn score(&self, x: &Sentence, mode: ScorerMode) -> Result<TagLattice> {
        let t = self.forward(x, mode)?;
        let (n, w) = t.log_probs.dim();
        TagLattice::new(n, w, t.log_probs.into_raw_vec_and_offset().0)
    }
}

const TAGGER_FILE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub(crate) struct ParamArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TaggerFile {
    version: u32,
    kind: String,
    scheme: LabelScheme,
    char_vocab: CharVocab,
    w: usize,
    p: f64,
    max_seq_len: usize,
    dims: TaggerDims,
    params: Vec<ParamArray>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub d_emb: usize,
    pub d_hid: usize,
    pub window: usize,
    pub min_char_count: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 0.05,
            dropout: 0.1,
            d_emb: 16,
            d_hid: 64,
            window: 2,
            min_char_count: 2,
            max_seq_len: 128,
            seed: 0,
        }
    }
}

pub struct TrainOutcome {
    /// Best checkpoint by dev F1, or the final one without a dev set.
    pub best: TaggerModel,
    /// The last `keep_last` epoch-end checkpoints, oldest first.
    pub checkpoints: Vec<TaggerModel>,
    pub dev_f1: Vec<f64>,
}

/// Trains with mini-batch gradient descent on mean per-position
/// cross-entropy, dropout active. Fully determined by the inputs.
pub fn train(
    scheme: &LabelScheme,
    corpus: &[(Sentence, LabelSequence)],
    dev: Option<&[(Sentence, LabelSequence)]>,
    cfg: &TrainConfig,
    keep_last: usize,
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    for (i, (x, gold)) in corpus.iter().enumerate() {
        if gold.len() != x.len() {
            return Err(Error::InvalidArgument(format!("sentence {i}: label count mismatch")));
        }
        scheme
            .check_legal(gold)
            .map_err(|e| Error::IllegalSequence(format!("sentence {i}: {e}")))?;
    }
    let vocab = CharVocab::build(corpus.iter().map(|(x, _)| x.chars()), cfg.min_char_count, 2);
    let dims = TaggerDims {
        d_emb: cfg.d_emb,
        d_hid: cfg.d_hid,
        window: cfg.window,
    };
    let mut model = TaggerModel::init(scheme.clone(), vocab, dims, cfg.dropout, cfg.max_seq_len, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7461_6767_6572);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let golds: Vec<Vec<usize>> = corpus
        .iter()
        .map(|(x, g)| model.gold_ids(x, g))
        .collect::<Result<_>>()?;

    let mut best = (f64::NEG_INFINITY, model.clone());
    let mut checkpoints = Vec::new();
    let mut dev_f1 = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let positions: usize = batch.iter().map(|&i| golds[i].len()).sum();
            let mut grads = model.params.zeros_like();
            for &i in batch {
                let ids = model.char_ids(&corpus[i].0)?;
                let n = ids.len();
                let drop = (model.dropout > 0.0).then_some(&mut rng);
                let t = model.forward_with(ids, n, drop)?;
                model.backward(&t, &golds[i], 1.0 / positions as f64, &mut grads);
            }
            nn::sgd_update(&mut model.params, &grads, cfg.lr);
        }
        if !model.params.all_finite() {
            return Err(Error::NonFinite("tagger parameters after update".into()));
        }
        if let Some(dev) = dev {
            let f1 = model.corpus_f1(dev)?;
            dev_f1.push(f1);
            if f1 > best.0 {
                best = (f1, model.clone());
            }
        }
        checkpoints.push(model.clone());
        if checkpoints.len() > keep_last {
            checkpoints.remove(0);
        }
    }
    let best = if dev.is_some() && cfg.epochs > 0 { best.1 } else { model };
    Ok(TrainOutcome {
        best,
        checkpoints,
        dev_f1,
    })
}
