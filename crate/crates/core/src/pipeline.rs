//! End-to-end orchestration: uncertainty sampling, per-component retrieval
//! and knowledge fusion at prediction time, jackknifed stage-two data
//! generation at training time.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evalkit::{
    acc_split, cost_model, entity_f1, oracle_f1, sar_vsr, sweep, uncertainty_stats, MetricsReport, SweepGrid, SweepRow,
};
use crate::fusion::{build_fused_sample, fuse_predict, search_alpha, train_fusion, FusedSample, FusionModel, FusionTrainConfig};
use crate::par::Exec;
use crate::retrieval::{KnowledgeText, RetrievalMode, Retriever, DEFAULT_TOP_N};
use crate::tagger::{self, Sentence, TaggerModel, TrainConfig};
use crate::tagspace::{LabelScheme, LabelSequence};
use crate::uncertainty::{self, CandidateSet, ProvisionalResult, SamplingMethod, UncertainComponent};
use crate::{Error, Result};

/// All knobs of a run. `seed`, `base_max_len`, `fusion_max_len` and `alpha`
/// override the matching fields of the nested model configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub entity_types: Vec<String>,
    pub method: SamplingMethod,
    pub k: usize,
    /// Dropout rate active during MC sampling.
    pub dropout: f64,
    /// Sampling method used while generating stage-two data.
    pub stage2_method: SamplingMethod,
    pub alpha: f64,
    /// Candidate alphas tried when a dev set is available.
    pub alpha_grid: Vec<f64>,
    pub retrieval: RetrievalMode,
    pub kb_top_n: usize,
    pub folds: usize,
    pub checkpoints: usize,
    pub theta: f64,
    pub seed: u64,
    pub base_max_len: usize,
    pub fusion_max_len: usize,
    pub tagger: TrainConfig,
    pub fusion: FusionTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            entity_types: Vec::new(),
            method: SamplingMethod::McDropout,
            k: 8,
            dropout: 0.1,
            stage2_method: SamplingMethod::McDropout,
            alpha: 0.1,
            alpha_grid: vec![0.1, 1.0],
            retrieval: RetrievalMode::Kb,
            kb_top_n: DEFAULT_TOP_N,
            folds: 5,
            checkpoints: 3,
            theta: 0.5,
            seed: 0,
            base_max_len: 128,
            fusion_max_len: 512,
            tagger: TrainConfig::default(),
            fusion: FusionTrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.k == 0 || (self.method == SamplingMethod::TopK && self.k < 2) {
            return bad(format!("k = {} is too small for {}", self.k, self.method));
        }
        if self.stage2_method == SamplingMethod::TopK && self.k < 2 {
            return bad("top-k stage-two sampling needs k >= 2".into());
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return bad(format!("theta {} outside (0, 1]", self.theta));
        }
        if !(0.0..=1.0).contains(&self.alpha) || self.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("alpha outside [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.checkpoints == 0 {
            return bad("checkpoints must be at least 1".into());
        }
        if self.fusion_max_len < 2 || self.base_max_len == 0 {
            return bad("max lengths too small".into());
        }
        Ok(())
    }

    pub fn scheme(&self) -> Result<LabelScheme> {
        LabelScheme::new(self.entity_types.iter().cloned())
    }

    pub fn tagger_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            max_seq_len: self.base_max_len,
            ..self.tagger.clone()
        }
    }

    pub fn fusion_config(&self) -> FusionTrainConfig {
        let mut f = self.fusion.clone();
        f.seed = self.seed;
        f.alpha = self.alpha;
        f.dims.max_seq_len = self.fusion_max_len;
        f
    }
}

/// Jaccard ratio of two inclusive index ranges.
pub fn overlap_ratio(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = (a.1.min(b.1) + 1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0 + 1) + (b.1 - b.0 + 1) - inter;
    inter as f64 / union as f64
}

fn text_seed(x: &Sentence) -> u64 {
    // FNV-1a; stable across platforms and releases
    x.text().bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Everything produced while predicting one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: LabelSequence,
    pub provisional: ProvisionalResult,
    pub candidates: CandidateSet,
    pub components: Vec<UncertainComponent>,
    /// Retrieved knowledge per component, aligned with `components`.
    pub knowledge: Vec<KnowledgeText>,
}

/// The two-stage predictor.
pub struct Retagger<'a> {
    sampler: TaggerModel,
    fusion: Option<&'a FusionModel>,
    retriever: &'a Retriever,
    cfg: &'a RunConfig,
}

impl<'a> Retagger<'a> {
    pub fn new(
        base: &TaggerModel,
        fusion: Option<&'a FusionModel>,
        retriever: &'a Retriever,
        cfg: &'a RunConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if let Some(f) = fusion {
            if f.scheme() != base.scheme() {
                return Err(Error::SchemeMismatch("base and fusion models use different label schemes".into()));
            }
        }
        Ok(Retagger {
            sampler: base.with_dropout(cfg.dropout)?,
            fusion,
            retriever,
            cfg,
        })
    }

    pub fn scheme(&self) -> &LabelScheme {
        self.sampler.scheme()
    }

    /// Sampling stage only: provisional result, candidates and merged
    /// components, without retrieval or fusion.
    pub fn sample(
        &self,
        x: &Sentence,
        exec: Exec,
    ) -> Result<(ProvisionalResult, CandidateSet, Vec<UncertainComponent>)> {
        let (provisional, candidates) =
            uncertainty::sample(&self.sampler, x, self.cfg.method, self.cfg.k, self.cfg.seed ^ text_seed(x), exec)?;
        let components = uncertainty::components(self.scheme(), &provisional, &candidates)?;
        Ok((provisional, candidates, components))
    }

    /// Provisional labels unless some candidate disagrees with them; then
    /// every component is retrieved and fused on its own and the lattices
    /// are summed.
    pub fn predict(&self, x: &Sentence, exec: Exec) -> Result<Prediction> {
        let (provisional, candidates, components) = self.sample(x, exec)?;
        if components.is_empty() {
            return Ok(Prediction {
                labels: provisional.l_p.clone(),
                provisional,
                candidates,
                components,
                knowledge: Vec::new(),
            });
        }
        let fusion = self
            .fusion
            .ok_or_else(|| Error::Model("uncertain components found but no fusion model loaded".into()))?;
        let knowledge: Vec<KnowledgeText> = components.iter().map(|c| self.retriever.retrieve(&c.text)).collect();
        let groups: Vec<(Vec<UncertainComponent>, KnowledgeText)> = components
            .iter()
            .cloned()
            .zip(knowledge.iter().cloned())
            .map(|(c, k)| (vec![c], k))
            .collect();
        let labels = fuse_predict(fusion, x, &provisional.l_p, &groups, exec)?;
        Ok(Prediction {
            labels,
            provisional,
            candidates,
            components,
            knowledge,
        })
    }

    pub fn predict_corpus(&self, xs: &[Sentence], exec: Exec) -> Result<Vec<Prediction>> {
        exec.try_map(xs, |x| self.predict(x, Exec::Sequential))
    }
}

/// Corpus metrics of a prediction run against gold labels.
pub fn evaluate(
    scheme: &LabelScheme,
    preds: &[Prediction],
    gold: &[LabelSequence],
    cfg: &RunConfig,
) -> Result<MetricsReport> {
    if preds.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} gold sentences",
            preds.len(),
            gold.len()
        )));
    }
    let base: Vec<LabelSequence> = preds.iter().map(|p| p.provisional.l_p.clone()).collect();
    let fused_seqs: Vec<LabelSequence> = preds.iter().map(|p| p.labels.clone()).collect();
    let comps: Vec<Vec<UncertainComponent>> = preds.iter().map(|p| p.components.clone()).collect();
    let choices: Vec<Vec<LabelSequence>> = preds
        .iter()
        .map(|p| std::iter::once(p.provisional.l_p.clone()).chain(p.candidates.candidates.iter().cloned()).collect())
        .collect();
    let sets: Vec<CandidateSet> = preds.iter().map(|p| p.candidates.clone()).collect();
    let (sar, vsr) = sar_vsr(scheme, &base, &sets, gold)?;
    let (size_u, num_uc) = uncertainty_stats(&comps);
    let beta = if preds.is_empty() { 0.0 } else { size_u as f64 / preds.len() as f64 };
    let ratios: Vec<f64> = preds
        .iter()
        .flat_map(|p| p.knowledge.iter().map(move |k| k.char_len() as f64 / p.provisional.x.len() as f64))
        .collect();
    let gamma = if ratios.is_empty() { 0.0 } else { ratios.iter().sum::<f64>() / ratios.len() as f64 };
    Ok(MetricsReport {
        sentences: preds.len(),
        base: entity_f1(scheme, &base, gold)?,
        retagged: entity_f1(scheme, &fused_seqs, gold)?,
        oracle_f1: oracle_f1(scheme, &choices, gold)?,
        base_acc: acc_split(&base, gold, &comps)?,
        retagged_acc: acc_split(&fused_seqs, gold, &comps)?,
        sar,
        vsr,
        size_u,
        num_uc,
        cost: cost_model(cfg.k as f64, beta, gamma, 1.0)?,
        breakdown: BTreeMap::new(),
    })
}

/// Deterministic assignment of sentence indices to contiguous folds of a
/// seeded shuffle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JackknifePlan {
    pub folds: Vec<Vec<usize>>,
}

impl JackknifePlan {
    pub fn new(n: usize, folds: usize, seed: u64) -> Result<Self> {
        if folds < 2 {
            return Err(Error::Config("jackknifing needs at least 2 folds".into()));
        }
        if n < folds {
            return Err(Error::Empty(format!("{n} sentences cannot fill {folds} folds")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x6a61_636b));
        let (q, r) = (n / folds, n % folds);
        let mut out = Vec::with_capacity(folds);
        let mut at = 0;
        for f in 0..folds {
            let size = q + usize::from(f < r);
            out.push(order[at..at + size].to_vec());
            at += size;
        }
        Ok(JackknifePlan { folds: out })
    }

    pub fn fold_of(&self, i: usize) -> Option<usize> {
        self.folds.iter().position(|f| f.contains(&i))
    }

    /// Sorted indices of every fold except `fold`.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != fold)
            .flat_map(|(_, ix)| ix.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Group {
    pub start: usize,
    pub end: usize,
    pub text: String,
    /// Index of the checkpoint that produced the component, oldest first.
    pub checkpoint: usize,
    /// Provisional labels of that checkpoint.
    pub provisional: Vec<String>,
    pub knowledge: KnowledgeText,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Record {
    pub sentence_id: usize,
    pub text: String,
    pub gold: Vec<String>,
    pub fold: usize,
    pub groups: Vec<Stage2Group>,
}

impl Stage2Record {
    /// One training sample per group, each masking only its own component.
    pub fn samples(&self, scheme: &LabelScheme, max_seq_len: usize) -> Result<Vec<FusedSample>> {
        let x: Sentence = self.text.parse()?;
        let gold = scheme.parse_sequence(&self.gold)?;
        self.groups
            .iter()
            .map(|g| {
                let l_p = scheme.parse_sequence(&g.provisional)?;
                let comp = UncertainComponent {
                    start: g.start,
                    end: g.end,
                    text: g.text.clone(),
                };
                build_fused_sample(&x, &l_p, &[comp], &g.knowledge, max_seq_len)?.with_gold(gold.clone())
            })
            .collect()
    }
}

/// Stage-two records via N-fold jackknifing: each held-out sentence is
/// sampled with the last `checkpoints` epoch-end models trained on the other
/// folds; later components overlapping a kept one by at least `theta` are
/// dropped. Only sentences with a kept component produce a record.
pub fn gen_stage2(
    scheme: &LabelScheme,
    corpus: &[(Sentence, LabelSequence)],
    retriever: &Retriever,
    cfg: &RunConfig,
    exec: Exec,
) -> Result<(Vec<Stage2Record>, JackknifePlan)> {
    cfg.validate()?;
    let plan = JackknifePlan::new(corpus.len(), cfg.folds, cfg.seed)?;
    let mut records = Vec::new();
    for (fold, held_out) in plan.folds.iter().enumerate() {
        let train: Vec<(Sentence, LabelSequence)> = plan.train_indices(fold).into_iter().map(|i| corpus[i].clone()).collect();
        let tcfg = TrainConfig {
            seed: cfg.seed.wrapping_add(fold as u64 + 1),
            ..cfg.tagger_config()
        };
        let outcome = tagger::train(scheme, &train, None, &tcfg, cfg.checkpoints)?;
        let samplers = outcome
            .checkpoints
            .iter()
            .map(|m| m.with_dropout(cfg.dropout))
            .collect::<Result<Vec<_>>>()?;
        let mut sorted = held_out.clone();
        sorted.sort_unstable();
        let fold_records = exec.try_map(&sorted, |&i| {
            let (x, gold) = &corpus[i];
            let mut groups: Vec<Stage2Group> = Vec::new();
            for (ci, model) in samplers.iter().enumerate() {
                let (prov, cands) =
                    uncertainty::sample(model, x, cfg.stage2_method, cfg.k, cfg.seed ^ text_seed(x), Exec::Sequential)?;
                for comp in uncertainty::components(scheme, &prov, &cands)? {
                    if groups.iter().any(|g| overlap_ratio((g.start, g.end), (comp.start, comp.end)) >= cfg.theta) {
                        continue;
                    }
                    groups.push(Stage2Group {
                        start: comp.start,
                        end: comp.end,
                        knowledge: retriever.retrieve(&comp.text),
                        text: comp.text,
                        checkpoint: ci,
                        provisional: scheme.names(&prov.l_p)?,
                    });
                }
            }
            Ok::<_, Error>((!groups.is_empty()).then(|| -> Result<Stage2Record> {
                Ok(Stage2Record {
                    sentence_id: i,
                    text: x.text(),
                    gold: scheme.names(gold)?,
                    fold,
                    groups,
                })
            }))
        })?;
        for r in fold_records.into_iter().flatten() {
            records.push(r?);
        }
    }
    records.sort_by_key(|r| r.sentence_id);
    Ok((records, plan))
}

pub fn records_to_samples(scheme: &LabelScheme, records: &[Stage2Record], max_seq_len: usize) -> Result<Vec<FusedSample>> {
    let mut out = Vec::new();
    for r in records {
        out.extend(
            r.samples(scheme, max_seq_len)
                .map_err(|e| Error::InvalidArgument(format!("record {}: {e}", r.sentence_id)))?,
        );
    }
    Ok(out)
}

/// Trains the fusion model on stage-two records. With dev records and a
/// nonempty `alpha_grid` the alpha is chosen by dev F1; otherwise `alpha`
/// is used. Returns the chosen alpha and the model.
pub fn train_stage2(
    scheme: &LabelScheme,
    records: &[Stage2Record],
    dev: Option<&[Stage2Record]>,
    cfg: &RunConfig,
    exec: Exec,
) -> Result<(f64, FusionModel)> {
    let fcfg = cfg.fusion_config();
    let samples = records_to_samples(scheme, records, fcfg.dims.max_seq_len)?;
    match dev {
        Some(dev) if !dev.is_empty() && !cfg.alpha_grid.is_empty() => {
            let dev = records_to_samples(scheme, dev, fcfg.dims.max_seq_len)?;
            search_alpha(scheme, &samples, &dev, &fcfg, &cfg.alpha_grid, exec)
        }
        _ => Ok((cfg.alpha, train_fusion(scheme, &samples, None, &fcfg, exec)?.model)),
    }
}

/// Runs prediction and evaluation over a {dropout, k, alpha} grid. Sampling
/// parameters act at inference; the fusion model is retrained once per
/// distinct alpha on the fixed stage-two records.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    scheme: &LabelScheme,
    base: &TaggerModel,
    records: &[Stage2Record],
    retriever: &Retriever,
    test: &[(Sentence, LabelSequence)],
    grid: &SweepGrid,
    cfg: &RunConfig,
    exec: Exec,
) -> Result<Vec<SweepRow>> {
    let samples = records_to_samples(scheme, records, cfg.fusion_max_len)?;
    let mut models: BTreeMap<u64, FusionModel> = BTreeMap::new();
    let xs: Vec<Sentence> = test.iter().map(|(x, _)| x.clone()).collect();
    let gold: Vec<LabelSequence> = test.iter().map(|(_, g)| g.clone()).collect();
    sweep(grid, |dropout, k, alpha| {
        let point = RunConfig {
            dropout,
            k,
            alpha,
            ..cfg.clone()
        };
        point.validate()?;
        let key = alpha.to_bits();
        if let std::collections::btree_map::Entry::Vacant(e) = models.entry(key) {
            let m = if samples.is_empty() {
                None
            } else {
                Some(train_fusion(scheme, &samples, None, &point.fusion_config(), exec)?.model)
            };
            if let Some(m) = m {
                e.insert(m);
            }
        }
        let retagger = Retagger::new(base, models.get(&key), retriever, &point)?;
        let preds = retagger.predict_corpus(&xs, exec)?;
        evaluate(scheme, &preds, &gold, &point)
    })
}
