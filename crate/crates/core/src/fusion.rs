//! Knowledge fusion model.
//!
//! The input is the sentence, a separator and the retrieved knowledge text.
//! Every position also carries a label-context token: the provisional label
//! for confident sentence positions, `MASK` inside the uncertain component,
//! and `PAD` on the separator and knowledge positions. Character, label-context
//! and learned positional embeddings are summed and run through a stack of
//! single-head post-LN Transformer encoder layers; only the sentence rows of
//! the output are projected to label log-probabilities.

use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{viterbi, TagLattice};
use crate::evalkit::entity_f1;
use crate::nn::{self, ParamVisitor};
use crate::par::Exec;
use crate::retrieval::KnowledgeText;
use crate::tagger::{CharVocab, ParamArray, Sentence};
use crate::tagspace::{LabelId, LabelScheme, LabelSequence};
use crate::uncertainty::UncertainComponent;
use crate::{Error, Result};

const SEP_ID: usize = 2;
const LN_EPS: f64 = 1e-5;

/// Label context of one input position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LabelCtx {
    Label(LabelId),
    Mask,
    Pad,
}

/// One input token of the knowledge-enhanced sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Char(char),
    Sep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedSample {
    sentence: Sentence,
    knowledge: Vec<char>,
    l_tilde_p: Vec<LabelCtx>,
    components: Vec<UncertainComponent>,
    gold: Option<LabelSequence>,
}

impl FusedSample {
    /// Sentence characters, then the separator, then the knowledge.
    pub fn x_tilde(&self) -> Vec<Token> {
        self.sentence
            .chars()
            .iter()
            .map(|&c| Token::Char(c))
            .chain(std::iter::once(Token::Sep))
            .chain(self.knowledge.iter().map(|&c| Token::Char(c)))
            .collect()
    }

    pub fn l_tilde_p(&self) -> &[LabelCtx] {
        &self.l_tilde_p
    }

    pub fn n(&self) -> usize {
        self.sentence.len()
    }

    pub fn total_len(&self) -> usize {
        self.l_tilde_p.len()
    }

    pub fn sentence(&self) -> &Sentence {
        &self.sentence
    }

    pub fn knowledge(&self) -> &[char] {
        &self.knowledge
    }

    pub fn components(&self) -> &[UncertainComponent] {
        &self.components
    }

    pub fn gold(&self) -> Option<&LabelSequence> {
        self.gold.as_ref()
    }

    pub fn with_gold(mut self, gold: LabelSequence) -> Result<Self> {
        if gold.len() != self.n() {
            return Err(Error::InvalidArgument(format!(
                "{} gold labels for a sentence of {}",
                gold.len(),
                self.n()
            )));
        }
        self.gold = Some(gold);
        Ok(self)
    }

    /// Whether sentence position `i` lies inside one of the components.
    pub fn in_component(&self, i: usize) -> bool {
        self.components.iter().any(|c| c.contains(i))
    }
}

/// Builds the knowledge-enhanced input and the masked provisional labels.
/// Knowledge is cut so the whole sequence fits in `max_seq_len`.
pub fn build_fused_sample(
    x: &Sentence,
    l_p: &LabelSequence,
    components: &[UncertainComponent],
    knowledge: &KnowledgeText,
    max_seq_len: usize,
) -> Result<FusedSample> {
    let n = x.len();
    if l_p.len() != n {
        return Err(Error::InvalidArgument(format!("{} provisional labels for {n} characters", l_p.len())));
    }
    if n >= max_seq_len {
        return Err(Error::TooLong { len: n + 1, max: max_seq_len });
    }
    if let Some(c) = components.iter().find(|c| c.start > c.end || c.end >= n) {
        return Err(Error::InvalidArgument(format!(
            "component {}..={} outside sentence of length {n}",
            c.start, c.end
        )));
    }
    let room = max_seq_len - n - 1;
    let knowledge: Vec<char> = knowledge.as_str().chars().take(room).collect();
    let mut l_tilde_p: Vec<LabelCtx> = (0..n)
        .map(|i| {
            if components.iter().any(|c| c.contains(i)) {
                LabelCtx::Mask
            } else {
                LabelCtx::Label(l_p[i])
            }
        })
        .collect();
    l_tilde_p.extend(std::iter::repeat_n(LabelCtx::Pad, knowledge.len() + 1));
    Ok(FusedSample {
        sentence: x.clone(),
        knowledge,
        l_tilde_p,
        components: components.to_vec(),
        gold: None,
    })
}

/// Per-position loss weights: 1 inside the uncertain component, `alpha`
/// elsewhere in the sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda: Vec<f64>,
}

impl LossWeights {
    pub fn for_sample(sample: &FusedSample, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        let lambda = (0..sample.n())
            .map(|i| if sample.in_component(i) { 1.0 } else { alpha })
            .collect();
        Ok(LossWeights { alpha, lambda })
    }

    /// All weights 1: the plain mean of per-position losses.
    pub fn uniform(n: usize) -> Self {
        LossWeights {
            alpha: 1.0,
            lambda: vec![1.0; n],
        }
    }
}

/// Weighted mean of per-position negative log-likelihoods over the sentence
/// rows. Returns 0 when all weights are 0.
pub fn weighted_loss(lattice: &TagLattice, gold: &LabelSequence, weights: &LossWeights) -> Result<f64> {
    let n = gold.len();
    if lattice.len() < n || weights.lambda.len() != n {
        return Err(Error::InvalidArgument(format!(
            "lattice of {} rows, {} gold labels, {} weights",
            lattice.len(),
            n,
            weights.lambda.len()
        )));
    }
    let total: f64 = weights.lambda.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let num: f64 = (0..n).map(|i| weights.lambda[i] * -lattice.get(i, gold[i])).sum();
    Ok(num / total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionDims {
    pub d_model: usize,
    pub layers: usize,
    pub ffn: usize,
    pub max_seq_len: usize,
}

impl Default for FusionDims {
    fn default() -> Self {
        FusionDims {
            d_model: 32,
            layers: 2,
            ffn: 64,
            max_seq_len: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub c1: Array1<f64>,
    pub w2: Array2<f64>,
    pub c2: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub char_emb: Array2<f64>,
    pub label_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

macro_rules! visit_layer {
    ($l:expr, $f:expr, $i:expr, $as:ident) => {{
        let l = $l;
        let f = $f;
        let i = $i;
        f(&format!("layers.{i}.wq"), l.wq.$as().expect("standard layout"));
        f(&format!("layers.{i}.bq"), l.bq.$as().expect("standard layout"));
        f(&format!("layers.{i}.wk"), l.wk.$as().expect("standard layout"));
        f(&format!("layers.{i}.bk"), l.bk.$as().expect("standard layout"));
        f(&format!("layers.{i}.wv"), l.wv.$as().expect("standard layout"));
        f(&format!("layers.{i}.bv"), l.bv.$as().expect("standard layout"));
        f(&format!("layers.{i}.wo"), l.wo.$as().expect("standard layout"));
        f(&format!("layers.{i}.bo"), l.bo.$as().expect("standard layout"));
        f(&format!("layers.{i}.ln1_g"), l.ln1_g.$as().expect("standard layout"));
        f(&format!("layers.{i}.ln1_b"), l.ln1_b.$as().expect("standard layout"));
        f(&format!("layers.{i}.w1"), l.w1.$as().expect("standard layout"));
        f(&format!("layers.{i}.c1"), l.c1.$as().expect("standard layout"));
        f(&format!("layers.{i}.w2"), l.w2.$as().expect("standard layout"));
        f(&format!("layers.{i}.c2"), l.c2.$as().expect("standard layout"));
        f(&format!("layers.{i}.ln2_g"), l.ln2_g.$as().expect("standard layout"));
        f(&format!("layers.{i}.ln2_b"), l.ln2_b.$as().expect("standard layout"));
    }};
}

impl ParamVisitor for FusionParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("char_emb", self.char_emb.as_slice().expect("standard layout"));
        f("label_emb", self.label_emb.as_slice().expect("standard layout"));
        f("pos_emb", self.pos_emb.as_slice().expect("standard layout"));
        for (i, l) in self.layers.iter().enumerate() {
            visit_layer!(l, &mut *f, i, as_slice);
        }
        f("w_out", self.w_out.as_slice().expect("standard layout"));
        f("b_out", self.b_out.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("char_emb", self.char_emb.as_slice_mut().expect("standard layout"));
        f("label_emb", self.label_emb.as_slice_mut().expect("standard layout"));
        f("pos_emb", self.pos_emb.as_slice_mut().expect("standard layout"));
        for (i, l) in self.layers.iter_mut().enumerate() {
            visit_layer!(l, &mut *f, i, as_slice_mut);
        }
        f("w_out", self.w_out.as_slice_mut().expect("standard layout"));
        f("b_out", self.b_out.as_slice_mut().expect("standard layout"));
    }
}

impl FusionParams {
    fn init(rng: &mut ChaCha8Rng, vocab: usize, labels: usize, dims: FusionDims) -> Self {
        let d = dims.d_model;
        let layer = |rng: &mut ChaCha8Rng| LayerParams {
            wq: nn::xavier(rng, d, d),
            bq: Array1::zeros(d),
            wk: nn::xavier(rng, d, d),
            bk: Array1::zeros(d),
            wv: nn::xavier(rng, d, d),
            bv: Array1::zeros(d),
            wo: nn::xavier(rng, d, d),
            bo: Array1::zeros(d),
            ln1_g: Array1::ones(d),
            ln1_b: Array1::zeros(d),
            w1: nn::xavier(rng, d, dims.ffn),
            c1: Array1::zeros(dims.ffn),
            w2: nn::xavier(rng, dims.ffn, d),
            c2: Array1::zeros(d),
            ln2_g: Array1::ones(d),
            ln2_b: Array1::zeros(d),
        };
        FusionParams {
            char_emb: nn::uniform(rng, vocab, d, 0.5),
            label_emb: nn::uniform(rng, labels + 2, d, 0.5),
            pos_emb: nn::uniform(rng, dims.max_seq_len, d, 0.1),
            layers: (0..dims.layers).map(|_| layer(rng)).collect(),
            w_out: nn::xavier(rng, d, labels),
            b_out: Array1::zeros(labels),
        }
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, s| s.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    fn add_assign(&mut self, other: &FusionParams) {
        let flat = other.flat();
        let mut k = 0;
        self.visit_mut(&mut |_, s| {
            for v in s.iter_mut() {
                *v += flat[k];
                k += 1;
            }
        });
    }

    fn scale(&mut self, factor: f64) {
        self.visit_mut(&mut |_, s| s.iter_mut().for_each(|v| *v *= factor));
    }
}

struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(r: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LayerNormCache) {
    let d = r.ncols() as f64;
    let mean = r.sum_axis(Axis(1)) / d;
    let centered = r - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * g + b;
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns dr; accumulates dg and db.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LayerNormCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
    let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
    let mut dr = dxhat - mean_dxhat.view().insert_axis(Axis(1));
    dr -= &(&cache.xhat * &mean_dxhat_xhat.view().insert_axis(Axis(1)));
    dr * cache.inv_std.view().insert_axis(Axis(1))
}

fn softmax_rows(s: &Array2<f64>) -> Array2<f64> {
    let mut p = s.clone();
    for mut row in p.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
    p
}

struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    p: Array2<f64>,
    a: Array2<f64>,
    ln1: LayerNormCache,
    h1: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
    ln2: LayerNormCache,
}

struct Trace {
    chars: Vec<usize>,
    ctx: Vec<usize>,
    layers: Vec<LayerCache>,
    out: Array2<f64>,
    log_probs: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    scheme: LabelScheme,
    vocab: CharVocab,
    dims: FusionDims,
    params: FusionParams,
}

impl FusionModel {
    pub fn init(scheme: LabelScheme, vocab: CharVocab, dims: FusionDims, seed: u64) -> Result<Self> {
        if dims.d_model == 0 || dims.ffn == 0 || dims.max_seq_len < 2 {
            return Err(Error::Config("invalid fusion dimensions".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = FusionParams::init(&mut rng, vocab.size(), scheme.len(), dims);
        Ok(FusionModel {
            scheme,
            vocab,
            dims,
            params,
        })
    }

    /// Vocabulary over sentence and knowledge characters of the samples.
    pub fn vocab_for(samples: &[FusedSample], min_count: usize) -> CharVocab {
        CharVocab::build(
            samples.iter().flat_map(|s| [s.sentence.chars(), &s.knowledge[..]]),
            min_count,
            3,
        )
    }

    pub fn scheme(&self) -> &LabelScheme {
        &self.scheme
    }

    pub fn dims(&self) -> FusionDims {
        self.dims
    }

    pub fn params(&self) -> &FusionParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut FusionParams {
        &mut self.params
    }

    pub fn mask_id(&self) -> usize {
        self.scheme.len()
    }

    pub fn pad_id(&self) -> usize {
        self.scheme.len() + 1
    }

    fn ids(&self, sample: &FusedSample) -> Result<(Vec<usize>, Vec<usize>)> {
        let t = sample.total_len();
        if t > self.dims.max_seq_len {
            return Err(Error::TooLong {
                len: t,
                max: self.dims.max_seq_len,
            });
        }
        let chars = sample
            .x_tilde()
            .into_iter()
            .map(|tok| match tok {
                Token::Char(c) => self.vocab.id(c),
                Token::Sep => SEP_ID,
            })
            .collect();
        let ctx = sample
            .l_tilde_p
            .iter()
            .map(|c| match *c {
                LabelCtx::Label(l) if l.index() < self.scheme.len() => Ok(l.index()),
                LabelCtx::Label(l) => Err(Error::SchemeMismatch(format!("label id {}", l.0))),
                LabelCtx::Mask => Ok(self.mask_id()),
                LabelCtx::Pad => Ok(self.pad_id()),
            })
            .collect::<Result<_>>()?;
        Ok((chars, ctx))
    }

    fn forward(&self, sample: &FusedSample) -> Result<Trace> {
        let (chars, ctx) = self.ids(sample)?;
        let p = &self.params;
        let (t, d) = (chars.len(), self.dims.d_model);
        let mut x = Array2::zeros((t, d));
        for i in 0..t {
            let mut row = x.row_mut(i);
            row += &p.char_emb.row(chars[i]);
            row += &p.label_emb.row(ctx[i]);
            row += &p.pos_emb.row(i);
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(p.layers.len());
        for l in &p.layers {
            let q = x.dot(&l.wq) + &l.bq;
            let k = x.dot(&l.wk) + &l.bk;
            let v = x.dot(&l.wv) + &l.bv;
            let probs = softmax_rows(&(q.dot(&k.t()) * scale));
            let a = probs.dot(&v);
            let o = a.dot(&l.wo) + &l.bo;
            let (h1, ln1) = layer_norm(&(&x + &o), &l.ln1_g, &l.ln1_b);
            let f1 = h1.dot(&l.w1) + &l.c1;
            let g = f1.mapv(nn::gelu);
            let f2 = g.dot(&l.w2) + &l.c2;
            let (out, ln2) = layer_norm(&(&h1 + &f2), &l.ln2_g, &l.ln2_b);
            layers.push(LayerCache {
                x,
                q,
                k,
                v,
                p: probs,
                a,
                ln1,
                h1,
                f1,
                g,
                ln2,
            });
            x = out;
        }
        let n = sample.n();
        let logits = x.slice(s![0..n, ..]).dot(&p.w_out) + &p.b_out;
        let log_probs = nn::log_softmax_rows(&logits);
        Ok(Trace {
            chars,
            ctx,
            layers,
            out: x,
            log_probs,
        })
    }

    /// Log-probabilities for the sentence positions only.
    pub fn encode(&self, sample: &FusedSample) -> Result<TagLattice> {
        let t = self.forward(sample)?;
        let (n, w) = t.log_probs.dim();
        TagLattice::new(n, w, t.log_probs.into_raw_vec_and_offset().0)
    }

    /// Gradient of the weighted loss of one sample; returns (loss, grads).
    fn loss_and_grad(&self, sample: &FusedSample, weights: &LossWeights) -> Result<(f64, FusionParams)> {
        let gold = sample
            .gold
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("training sample without gold labels".into()))?;
        let tr = self.forward(sample)?;
        let n = sample.n();
        let total: f64 = weights.lambda.iter().sum();
        let mut grads = self.params.zeros_like();
        if weights.lambda.len() != n {
            return Err(Error::InvalidArgument("weights do not match sentence length".into()));
        }
        if total == 0.0 {
            return Ok((0.0, grads));
        }
        let mut loss = 0.0;
        let mut dz = tr.log_probs.mapv(f64::exp);
        for i in 0..n {
            let g = gold[i].index();
            loss += weights.lambda[i] * -tr.log_probs[[i, g]];
            dz[[i, g]] -= 1.0;
            let w = weights.lambda[i] / total;
            dz.row_mut(i).mapv_inplace(|v| v * w);
        }
        loss /= total;

        let p = &self.params;
        let top = tr.out.slice(s![0..n, ..]);
        grads.w_out += &top.t().dot(&dz);
        grads.b_out += &dz.sum_axis(Axis(0));
        let (t, d) = tr.out.dim();
        let mut dx = Array2::<f64>::zeros((t, d));
        dx.slice_mut(s![0..n, ..]).assign(&dz.dot(&p.w_out.t()));

        let scale = 1.0 / (d as f64).sqrt();
        for (li, (l, c)) in p.layers.iter().zip(&tr.layers).enumerate().rev() {
            let gl = &mut grads.layers[li];
            let dr2 = layer_norm_backward(&dx, &c.ln2, &l.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);
            // feed-forward branch
            gl.w2 += &c.g.t().dot(&dr2);
            gl.c2 += &dr2.sum_axis(Axis(0));
            let mut df1 = dr2.dot(&l.w2.t());
            df1.zip_mut_with(&c.f1, |g, &f| *g *= nn::gelu_grad(f));
            gl.w1 += &c.h1.t().dot(&df1);
            gl.c1 += &df1.sum_axis(Axis(0));
            let dh1 = dr2 + df1.dot(&l.w1.t());
            let dr1 = layer_norm_backward(&dh1, &c.ln1, &l.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
            // attention branch
            gl.wo += &c.a.t().dot(&dr1);
            gl.bo += &dr1.sum_axis(Axis(0));
            let da = dr1.dot(&l.wo.t());
            let dp = da.dot(&c.v.t());
            let dv = c.p.t().dot(&da);
            let row_dot = (&dp * &c.p).sum_axis(Axis(1));
            let ds = (&dp - &row_dot.view().insert_axis(Axis(1))) * &c.p * scale;
            let dq = ds.dot(&c.k);
            let dk = ds.t().dot(&c.q);
            gl.wq += &c.x.t().dot(&dq);
            gl.bq += &dq.sum_axis(Axis(0));
            gl.wk += &c.x.t().dot(&dk);
            gl.bk += &dk.sum_axis(Axis(0));
            gl.wv += &c.x.t().dot(&dv);
            gl.bv += &dv.sum_axis(Axis(0));
            dx = dr1 + dq.dot(&l.wq.t()) + dk.dot(&l.wk.t()) + dv.dot(&l.wv.t());
        }
        for i in 0..t {
            let row = dx.row(i);
            let mut r = grads.char_emb.row_mut(tr.chars[i]);
            r += &row;
            let mut r = grads.label_emb.row_mut(tr.ctx[i]);
            r += &row;
            let mut r = grads.pos_emb.row_mut(i);
            r += &row;
        }
        Ok((loss, grads))
    }

    /// Weighted loss computed through [`encode`](Self::encode).
    pub fn loss(&self, sample: &FusedSample, weights: &LossWeights) -> Result<f64> {
        let gold = sample
            .gold
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("sample without gold labels".into()))?;
        weighted_loss(&self.encode(sample)?, gold, weights)
    }

    /// Max relative error between analytic gradients and central differences
    /// (h = 1e-4) over every parameter.
    pub fn gradient_check(&self, sample: &FusedSample, weights: &LossWeights) -> Result<f64> {
        let (_, grads) = self.loss_and_grad(sample, weights)?;
        let analytic = grads.flat();
        if analytic.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("fusion gradient".into()));
        }
        let mut probe = self.clone();
        Ok(nn::finite_difference_check(&self.params, &analytic, 1e-4, |p| {
            probe.params = p.clone();
            probe.loss(sample, weights).unwrap_or(f64::NAN)
        }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut params = Vec::new();
        self.params.visit(&mut |name, data| {
            params.push(ParamArray {
                name: name.to_string(),
                shape: Vec::new(),
                data: data.to_vec(),
            })
        });
        let shapes = self.shapes();
        for (p, shape) in params.iter_mut().zip(shapes) {
            p.shape = shape;
        }
        let file = FusionFile {
            version: FUSION_FILE_VERSION,
            kind: "fusion".into(),
            scheme: self.scheme.clone(),
            char_vocab: self.vocab.chars().to_vec(),
            special_chars: SpecialIds { pad: 0, unk: 1, sep: SEP_ID },
            label_context: SpecialIds2 {
                mask: self.mask_id(),
                pad: self.pad_id(),
            },
            dims: self.dims,
            params,
        };
        Ok(serde_json::to_string(&file)?)
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let p = &self.params;
        let mut out = vec![p.char_emb.shape().to_vec(), p.label_emb.shape().to_vec(), p.pos_emb.shape().to_vec()];
        for l in &p.layers {
            out.extend([
                l.wq.shape().to_vec(),
                l.bq.shape().to_vec(),
                l.wk.shape().to_vec(),
                l.bk.shape().to_vec(),
                l.wv.shape().to_vec(),
                l.bv.shape().to_vec(),
                l.wo.shape().to_vec(),
                l.bo.shape().to_vec(),
                l.ln1_g.shape().to_vec(),
                l.ln1_b.shape().to_vec(),
                l.w1.shape().to_vec(),
                l.c1.shape().to_vec(),
                l.w2.shape().to_vec(),
                l.c2.shape().to_vec(),
                l.ln2_g.shape().to_vec(),
                l.ln2_b.shape().to_vec(),
            ]);
        }
        out.push(p.w_out.shape().to_vec());
        out.push(p.b_out.shape().to_vec());
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(e) => Error::Model(format!("{}: {e}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: FusionFile = serde_json::from_str(text)?;
        if file.version != FUSION_FILE_VERSION || file.kind != "fusion" {
            return Err(Error::Model(format!(
                "unsupported fusion file (kind {:?}, version {})",
                file.kind, file.version
            )));
        }
        let vocab = CharVocab::with_reserved(file.char_vocab, 3);
        let mut model = FusionModel::init(file.scheme, vocab, file.dims, 0)?;
        if file.label_context.mask != model.mask_id() || file.label_context.pad != model.pad_id() {
            return Err(Error::Model("label-context ids disagree with the scheme".into()));
        }
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
            return Err(Error::NonFinite("fusion parameters".into()));
        }
        Ok(model)
    }
}

const FUSION_FILE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SpecialIds {
    pad: usize,
    unk: usize,
    sep: usize,
}

#[derive(Serialize, Deserialize)]
struct SpecialIds2 {
    mask: usize,
    pad: usize,
}

#[derive(Serialize, Deserialize)]
struct FusionFile {
    version: u32,
    kind: String,
    scheme: LabelScheme,
    char_vocab: Vec<char>,
    special_chars: SpecialIds,
    label_context: SpecialIds2,
    dims: FusionDims,
    params: Vec<ParamArray>,
}

/// Sums the lattices of every group (each an independent fused sample with
/// only its own components masked) and decodes the sum.
pub fn fuse_predict(
    model: &FusionModel,
    x: &Sentence,
    l_p: &LabelSequence,
    groups: &[(Vec<UncertainComponent>, KnowledgeText)],
    exec: Exec,
) -> Result<LabelSequence> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("fuse_predict needs at least one group".into()));
    }
    let lattices = exec.try_map(groups, |(comps, knowledge)| {
        let sample = build_fused_sample(x, l_p, comps, knowledge, model.dims.max_seq_len)?;
        model.encode(&sample)
    })?;
    let sum = TagLattice::sum(&lattices)?;
    Ok(viterbi(&sum, &model.scheme)?.seq)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub alpha: f64,
    /// Plain mean over positions instead of the alpha weighting.
    pub unweighted: bool,
    pub dims: FusionDims,
    pub min_char_count: usize,
    pub seed: u64,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        FusionTrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-2,
            optimizer: Optimizer::Adam,
            alpha: 0.1,
            unweighted: false,
            dims: FusionDims::default(),
            min_char_count: 1,
            seed: 0,
        }
    }
}

pub struct FusionOutcome {
    pub model: FusionModel,
    pub dev_f1: Vec<f64>,
    pub train_loss: Vec<f64>,
}

fn sample_f1(model: &FusionModel, samples: &[FusedSample], exec: Exec) -> Result<f64> {
    let preds = exec.try_map(samples, |s| Ok::<_, Error>(viterbi(&model.encode(s)?, &model.scheme)?.seq))?;
    let gold: Vec<LabelSequence> = samples
        .iter()
        .map(|s| s.gold.clone().ok_or_else(|| Error::InvalidArgument("dev sample without gold".into())))
        .collect::<Result<_>>()?;
    Ok(entity_f1(&model.scheme, &preds, &gold)?.f1)
}

/// Mini-batch training on the weighted loss. Per-sample gradients may be
/// computed in parallel; they are summed in sample order, so the result is
/// independent of scheduling.
pub fn train_fusion(
    scheme: &LabelScheme,
    samples: &[FusedSample],
    dev: Option<&[FusedSample]>,
    cfg: &FusionTrainConfig,
    exec: Exec,
) -> Result<FusionOutcome> {
    if samples.is_empty() {
        return Err(Error::Empty("no fusion training samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let weights: Vec<LossWeights> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let gold = s
                .gold
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("sample {i} has no gold labels")))?;
            scheme
                .check_legal(gold)
                .map_err(|e| Error::IllegalSequence(format!("sample {i}: {e}")))?;
            if s.total_len() > cfg.dims.max_seq_len {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has {} positions, model allows {}",
                    s.total_len(),
                    cfg.dims.max_seq_len
                )));
            }
            if cfg.unweighted {
                Ok(LossWeights::uniform(s.n()))
            } else {
                LossWeights::for_sample(s, cfg.alpha)
            }
        })
        .collect::<Result<_>>()?;
    let vocab = FusionModel::vocab_for(samples, cfg.min_char_count);
    let mut model = FusionModel::init(scheme.clone(), vocab, cfg.dims, cfg.seed)?;
    let mut adam = nn::Adam::new(cfg.lr, model.params.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6675_7369_6f6e);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut best: Option<(f64, FusionModel)> = None;
    let mut dev_f1 = Vec::new();
    let mut train_loss = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let parts = exec.try_map(batch, |&i| model.loss_and_grad(&samples[i], &weights[i]))?;
            let mut grads = model.params.zeros_like();
            for (loss, g) in &parts {
                epoch_loss += loss;
                grads.add_assign(g);
            }
            grads.scale(1.0 / batch.len() as f64);
            match cfg.optimizer {
                Optimizer::Adam => adam.update(&mut model.params, &grads),
                Optimizer::Sgd => nn::sgd_update(&mut model.params, &grads, cfg.lr),
            }
        }
        if !model.params.all_finite() {
            return Err(Error::NonFinite("fusion parameters after update".into()));
        }
        train_loss.push(epoch_loss / samples.len() as f64);
        if let Some(dev) = dev.filter(|d| !d.is_empty()) {
            let f1 = sample_f1(&model, dev, exec)?;
            dev_f1.push(f1);
            if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
                best = Some((f1, model.clone()));
            }
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok(FusionOutcome {
        model,
        dev_f1,
        train_loss,
    })
}

/// Trains once per alpha and keeps the model with the best dev F1 (the
/// first alpha on ties).
pub fn search_alpha(
    scheme: &LabelScheme,
    samples: &[FusedSample],
    dev: &[FusedSample],
    cfg: &FusionTrainConfig,
    alphas: &[f64],
    exec: Exec,
) -> Result<(f64, FusionModel)> {
    let mut best: Option<(f64, f64, FusionModel)> = None;
    for &alpha in alphas {
        let run = FusionTrainConfig { alpha, ..cfg.clone() };
        let out = train_fusion(scheme, samples, Some(dev), &run, exec)?;
        let f1 = sample_f1(&out.model, dev, exec)?;
        if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, alpha, out.model));
        }
    }
    best.map(|(_, a, m)| (a, m))
        .ok_or_else(|| Error::Config("alpha search needs at least one value".into()))
}

/// Attention weights of one layer for inspection.
pub fn attention_map(model: &FusionModel, sample: &FusedSample, layer: usize) -> Result<Array2<f64>> {
    let tr = model.forward(sample)?;
    tr.layers
        .get(layer)
        .map(|c| c.p.clone())
        .ok_or_else(|| Error::InvalidArgument(format!("no layer {layer}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scheme() -> LabelScheme {
        LabelScheme::new(["X", "Y"]).unwrap()
    }

    fn comp(start: usize, end: usize, x: &Sentence) -> UncertainComponent {
        UncertainComponent {
            start,
            end,
            text: x.substring(start, end),
        }
    }

    #[test]
    fn masked_labels() {
        let s = scheme();
        let x: Sentence = "abc".parse().unwrap();
        let l_p = s.parse_sequence(&["O", "S-X", "O"]).unwrap();
        let o = LabelCtx::Label(LabelId(0));
        let sample = build_fused_sample(&x, &l_p, &[comp(1, 1, &x)], &KnowledgeText::new("kk"), 512).unwrap();
        assert_eq!(
            sample.l_tilde_p(),
            [o, LabelCtx::Mask, o, LabelCtx::Pad, LabelCtx::Pad, LabelCtx::Pad]
        );
        assert_eq!(sample.x_tilde()[3], Token::Sep);

        let bare = build_fused_sample(&x, &l_p, &[], &KnowledgeText::default(), 512).unwrap();
        assert!(!bare.l_tilde_p().contains(&LabelCtx::Mask));
        assert_eq!(bare.total_len(), 4);

        let cut = build_fused_sample(&x, &l_p, &[], &KnowledgeText::new("kkkkkk"), 6).unwrap();
        assert_eq!(cut.knowledge().len(), 2);
        assert!(build_fused_sample(&x, &l_p, &[], &KnowledgeText::default(), 3).is_err());
    }

    #[test]
    fn loss_arithmetic() {
        let s = scheme();
        let lat = TagLattice::from_rows(&[
            vec![-1.0, -5.0, -5.0, -5.0, -5.0, -5.0, -5.0, -5.0, -5.0],
            vec![-2.0, -5.0, -5.0, -5.0, -5.0, -5.0, -5.0, -5.0, -5.0],
            vec![-3.0, -5.0, -5.0, -5.0, -5.0, -5.0, -5.0, -5.0, -5.0],
        ])
        .unwrap();
        let gold = s.parse_sequence(&["O", "O", "O"]).unwrap();
        let w = LossWeights {
            alpha: 0.1,
            lambda: vec![0.1, 1.0, 0.1],
        };
        assert!((weighted_loss(&lat, &gold, &w).unwrap() - 2.0).abs() < 1e-12);
        assert!((weighted_loss(&lat, &gold, &LossWeights::uniform(3)).unwrap() - 2.0).abs() < 1e-12);
        let all = LossWeights {
            alpha: 0.3,
            lambda: vec![1.0; 3],
        };
        assert_eq!(
            weighted_loss(&lat, &gold, &all).unwrap(),
            weighted_loss(&lat, &gold, &LossWeights::uniform(3)).unwrap()
        );
    }

    fn tiny_model(seed: u64) -> FusionModel {
        let vocab = CharVocab::with_reserved("abcxyz".chars().collect(), 3);
        let dims = FusionDims {
            d_model: 8,
            layers: 1,
            ffn: 12,
            max_seq_len: 10,
        };
        let mut m = FusionModel::init(scheme(), vocab, dims, seed).unwrap();
        // break the symmetry of the zero-initialized biases and LN params
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        m.params.visit_mut(&mut |name, s| {
            if name.contains("ln") || name.ends_with(".b") || name.contains(".b") || name.contains(".c") || name == "b_out" {
                for v in s.iter_mut() {
                    *v += rand::Rng::gen_range(&mut rng, -0.2..0.2);
                }
            }
        });
        m
    }

    fn tiny_sample() -> FusedSample {
        let s = scheme();
        let x: Sentence = "abca".parse().unwrap();
        let l_p = s.parse_sequence(&["O", "B-X", "E-X", "O"]).unwrap();
        build_fused_sample(&x, &l_p, &[comp(1, 2, &x)], &KnowledgeText::new("xyz"), 10)
            .unwrap()
            .with_gold(s.parse_sequence(&["O", "B-Y", "E-Y", "O"]).unwrap())
            .unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let sample = tiny_sample();
        for seed in 0..2 {
            let m = tiny_model(seed);
            let w = LossWeights::for_sample(&sample, 0.1).unwrap();
            let err = m.gradient_check(&sample, &w).unwrap();
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }

    #[test]
    fn zero_attention_output_ignores_knowledge() {
        let mut m = tiny_model(3);
        for l in &mut m.params.layers {
            l.wo.fill(0.0);
        }
        let s = scheme();
        let x: Sentence = "abca".parse().unwrap();
        let l_p = s.parse_sequence(&["O", "B-X", "E-X", "O"]).unwrap();
        let a = build_fused_sample(&x, &l_p, &[comp(1, 2, &x)], &KnowledgeText::new("xyz"), 10).unwrap();
        let b = build_fused_sample(&x, &l_p, &[comp(1, 2, &x)], &KnowledgeText::new("zyx"), 10).unwrap();
        assert_eq!(m.encode(&a).unwrap(), m.encode(&b).unwrap());
        let lat = m.encode(&a).unwrap();
        assert_eq!(lat.len(), 4);
        assert!(lat.is_normalized(1e-6));
    }

    #[test]
    fn file_round_trip() {
        let m = tiny_model(4);
        let json = m.to_json().unwrap();
        let back = FusionModel::from_json(&json).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json().unwrap(), json);
    }
}
