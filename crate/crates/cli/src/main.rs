use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use retag_core::corpus::{self, RawSentence};
use retag_core::evalkit::{entity_f1, sweep_table, Prf, SweepGrid};
use retag_core::fusion::FusionModel;
use retag_core::par::Exec;
use retag_core::pipeline::{evaluate, gen_stage2, run_sweep, train_stage2, RunConfig, Stage2Record, Retagger};
use retag_core::retrieval::{build_kb, read_triplets, KnowledgeBase, RetrievalMode, Retriever, SearchCache};
use retag_core::tagger::{self, Sentence, TaggerModel};
use retag_core::tagspace::{LabelScheme, LabelSequence};
use retag_core::uncertainty::{SamplingMethod, UncertainComponent};
use retag_core::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "retag", version, about = "Character-level NER with uncertainty-triggered knowledge retrieval")]
struct Cli {
    /// Run configuration file (JSON); flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads; 1 keeps all work on the calling thread.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base tagger.
    TrainBase(TrainBaseArgs),
    /// Generate stage-two records by jackknifing.
    GenStage2(GenStage2Args),
    /// Train the knowledge fusion model on stage-two records.
    TrainFusion(TrainFusionArgs),
    /// Build a knowledge base directory from triplets.
    KbBuild(KbBuildArgs),
    /// Rank knowledge base documents for a query.
    KbQuery(KbQueryArgs),
    /// Write candidates and uncertain components for each sentence.
    Sample(SampleArgs),
    /// Label a corpus.
    Predict(PredictArgs),
    /// Score predictions against gold labels.
    Evaluate(EvaluateArgs),
    /// Evaluate a grid of sampling and loss settings.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SamplingFlags {
    #[arg(long, value_parser = parse_method)]
    method: Option<SamplingMethod>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args)]
struct RetrievalFlags {
    /// Knowledge base directory.
    #[arg(long, value_name = "DIR")]
    kb: Option<PathBuf>,
    /// Recorded search results (JSONL).
    #[arg(long, value_name = "FILE")]
    cache: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    retrieval: Option<RetrievalMode>,
    #[arg(long)]
    top_n: Option<usize>,
}

#[derive(Args)]
struct TrainBaseArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args)]
struct GenStage2Args {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    checkpoints: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
    #[command(flatten)]
    sampling: SamplingFlags,
    #[command(flatten)]
    retrieval: RetrievalFlags,
}

#[derive(Args)]
struct TrainFusionArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    dev_records: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct KbBuildArgs {
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct KbQueryArgs {
    #[arg(long, value_name = "DIR")]
    kb: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long, alias = "top")]
    top_n: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    sampling: SamplingFlags,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    fusion: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-sentence provisional labels, components and knowledge (JSONL).
    #[arg(long)]
    details: Option<PathBuf>,
    /// Metrics against the input labels (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    sampling: SamplingFlags,
    #[command(flatten)]
    retrieval: RetrievalFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    retrieval: RetrievalFlags,
}

enum Fail {
    Usage(String),
    Core(Error),
}

impl<E: Into<Error>> From<E> for Fail {
    fn from(e: E) -> Self {
        Fail::Core(e.into())
    }
}

type Res<T> = Result<T, Fail>;

fn parse_method(s: &str) -> Result<SamplingMethod, String> {
    match s {
        "mc" => Ok(SamplingMethod::McDropout),
        "topk" => Ok(SamplingMethod::TopK),
        other => other.parse().map_err(|e: Error| e.to_string()),
    }
}

fn parse_mode(s: &str) -> Result<RetrievalMode, String> {
    match s {
        "kb" => Ok(RetrievalMode::Kb),
        "cache" => Ok(RetrievalMode::Cache),
        "both" => Ok(RetrievalMode::Both),
        _ => Err(format!("unknown retrieval mode {s:?} (kb, cache, both)")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Fail::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(status(&e))
        }
    }
}

fn status(e: &Error) -> u8 {
    match e {
        Error::SchemeMismatch(_) | Error::Config(_) | Error::Model(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Res<()> {
    let exec = match cli.jobs {
        Some(0) => return Err(Fail::Usage("--jobs must be at least 1".into())),
        Some(1) => Exec::Sequential,
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Fail::Usage(e.to_string()))?;
            Exec::Parallel
        }
        None => Exec::Parallel,
    };
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::TrainBase(a) => train_base(a, &mut cfg),
        Command::GenStage2(a) => stage2(a, &mut cfg, exec),
        Command::TrainFusion(a) => train_fusion(a, &mut cfg, exec),
        Command::KbBuild(a) => kb_build(a),
        Command::KbQuery(a) => kb_query(a, &cfg),
        Command::Sample(a) => sample(a, &mut cfg, exec),
        Command::Predict(a) => predict(a, &mut cfg, exec),
        Command::Evaluate(a) => evaluate_files(a, &cfg),
        Command::Sweep(a) => sweep(a, &mut cfg, exec),
    }
}

fn load_config(path: Option<&Path>) -> Res<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn apply_sampling(cfg: &mut RunConfig, f: &SamplingFlags) {
    if let Some(m) = f.method {
        cfg.method = m;
        cfg.stage2_method = m;
    }
    if let Some(k) = f.k {
        cfg.k = k;
    }
    if let Some(p) = f.dropout {
        cfg.dropout = p;
    }
}

fn read_raw(path: &Path) -> Res<Vec<RawSentence>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(corpus::read_raw(BufReader::new(file), &path.display().to_string())?)
}

/// Entity types named by the labels of a corpus, sorted.
fn infer_types(raw: &[RawSentence], source: &Path) -> Res<BTreeSet<String>> {
    let mut types = BTreeSet::new();
    for r in raw {
        for (i, label) in r.labels.iter().enumerate() {
            if label == "O" {
                continue;
            }
            match label.split_once('-') {
                Some(("B" | "I" | "E" | "S", t)) if !t.is_empty() => {
                    types.insert(t.to_string());
                }
                _ => {
                    return Err(Error::Format {
                        source_name: source.display().to_string(),
                        line: r.line + i,
                        message: format!("malformed label {label:?}"),
                    }
                    .into())
                }
            }
        }
    }
    Ok(types)
}

/// The configured scheme, or one inferred from the corpus when the config
/// names no entity types.
fn scheme_for(cfg: &mut RunConfig, raw: &[RawSentence], source: &Path) -> Res<LabelScheme> {
    let found = infer_types(raw, source)?;
    if cfg.entity_types.is_empty() {
        cfg.entity_types = found.into_iter().collect();
    }
    Ok(cfg.scheme()?)
}

fn load_corpus(path: &Path, scheme: &LabelScheme) -> Res<Vec<(Sentence, LabelSequence)>> {
    let raw = read_raw(path)?;
    Ok(corpus::resolve(raw, scheme, &path.display().to_string())?)
}

fn check_model_scheme(cfg: &RunConfig, scheme: &LabelScheme) -> Res<()> {
    if !cfg.entity_types.is_empty() && cfg.entity_types != scheme.entity_types() {
        return Err(Error::SchemeMismatch(format!(
            "config names entity types {:?}, model has {:?}",
            cfg.entity_types,
            scheme.entity_types()
        ))
        .into());
    }
    Ok(())
}

fn retriever(cfg: &RunConfig, f: &RetrievalFlags) -> Res<Retriever> {
    let kb = f.kb.as_deref().map(KnowledgeBase::load).transpose()?;
    let cache = f.cache.as_deref().map(SearchCache::load).transpose()?;
    let mode = f.retrieval.unwrap_or(match (&kb, &cache) {
        (None, Some(_)) => RetrievalMode::Cache,
        (Some(_), Some(_)) => RetrievalMode::Both,
        _ => cfg.retrieval,
    });
    Ok(Retriever::new(mode, kb, cache, f.top_n.unwrap_or(cfg.kb_top_n))?)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Res<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, &r)?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Res<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Res<Vec<T>> {
    let name = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            source_name: name.clone(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn train_base(a: TrainBaseArgs, cfg: &mut RunConfig) -> Res<()> {
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.tagger.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.tagger.lr = lr;
    }
    if let Some(p) = a.dropout {
        cfg.tagger.dropout = p;
    }
    let raw = read_raw(&a.train)?;
    let scheme = scheme_for(cfg, &raw, &a.train)?;
    let train = corpus::resolve(raw, &scheme, &a.train.display().to_string())?;
    let dev = a.dev.as_deref().map(|p| load_corpus(p, &scheme)).transpose()?;
    let out = tagger::train(&scheme, &train, dev.as_deref(), &cfg.tagger_config(), 1)?;
    out.best.save(&a.out)?;
    Ok(())
}

fn stage2(a: GenStage2Args, cfg: &mut RunConfig, exec: Exec) -> Res<()> {
    cfg.seed = a.seed;
    apply_sampling(cfg, &a.sampling);
    if let Some(v) = a.folds {
        cfg.folds = v;
    }
    if let Some(v) = a.checkpoints {
        cfg.checkpoints = v;
    }
    if let Some(v) = a.theta {
        cfg.theta = v;
    }
    let raw = read_raw(&a.train)?;
    let scheme = scheme_for(cfg, &raw, &a.train)?;
    let train = corpus::resolve(raw, &scheme, &a.train.display().to_string())?;
    let r = retriever(cfg, &a.retrieval)?;
    let (records, _) = gen_stage2(&scheme, &train, &r, cfg, exec)?;
    write_jsonl(&a.out, &records)
}

fn record_types(records: &[Stage2Record]) -> Vec<String> {
    let labels = records
        .iter()
        .flat_map(|r| r.gold.iter().chain(r.groups.iter().flat_map(|g| g.provisional.iter())));
    let types: BTreeSet<String> = labels.filter_map(|l| l.split_once('-').map(|(_, t)| t.to_string())).collect();
    types.into_iter().collect()
}

fn train_fusion(a: TrainFusionArgs, cfg: &mut RunConfig, exec: Exec) -> Res<()> {
    cfg.seed = a.seed;
    if let Some(v) = a.alpha {
        cfg.alpha = v;
        cfg.alpha_grid = vec![v];
    }
    if let Some(v) = a.epochs {
        cfg.fusion.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.fusion.lr = v;
    }
    cfg.validate()?;
    let records: Vec<Stage2Record> = read_jsonl(&a.records)?;
    let dev: Option<Vec<Stage2Record>> = a.dev_records.as_deref().map(read_jsonl).transpose()?;
    if cfg.entity_types.is_empty() {
        cfg.entity_types = record_types(&records);
    }
    let scheme = cfg.scheme()?;
    let (alpha, model) = train_stage2(&scheme, &records, dev.as_deref(), cfg, exec)?;
    model.save(&a.out)?;
    println!("alpha {alpha}");
    Ok(())
}

fn kb_build(a: KbBuildArgs) -> Res<()> {
    let file = std::fs::File::open(&a.triplets)?;
    let triplets = read_triplets(BufReader::new(file), &a.triplets.display().to_string())?;
    build_kb(triplets).save(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct Hit<'a> {
    subject: &'a str,
    score: f64,
    body: &'a str,
}

fn kb_query(a: KbQueryArgs, cfg: &RunConfig) -> Res<()> {
    let kb = KnowledgeBase::load(&a.kb)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (doc, score) in kb.bm25_query(&a.query, a.top_n.unwrap_or(cfg.kb_top_n)) {
        let hit = Hit {
            subject: &doc.subject,
            score,
            body: &doc.body,
        };
        serde_json::to_writer(&mut out, &hit)?;
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SampleRow {
    text: String,
    method: SamplingMethod,
    provisional: Vec<String>,
    generated: Vec<Vec<String>>,
    candidates: Vec<Vec<String>>,
    components: Vec<UncertainComponent>,
}

fn sample(a: SampleArgs, cfg: &mut RunConfig, exec: Exec) -> Res<()> {
    apply_sampling(cfg, &a.sampling);
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let base = TaggerModel::load(&a.model)?;
    check_model_scheme(cfg, base.scheme())?;
    let scheme = base.scheme().clone();
    let data = load_corpus(&a.input, &scheme)?;
    let none = Retriever::none();
    let retagger = Retagger::new(&base, None, &none, cfg)?;
    let rows = exec.try_map(&data, |(x, _)| {
        let (prov, cands, components) = retagger.sample(x, Exec::Sequential)?;
        let names = |s: &LabelSequence| scheme.names(s);
        Ok::<_, Error>(SampleRow {
            text: x.text(),
            method: cands.method,
            provisional: names(&prov.l_p)?,
            generated: cands.generated.iter().map(names).collect::<Result<_, _>>()?,
            candidates: cands.candidates.iter().map(names).collect::<Result<_, _>>()?,
            components,
        })
    })?;
    write_jsonl(&a.out, &rows)
}

#[derive(Serialize)]
struct DetailRow<'a> {
    text: String,
    labels: Vec<String>,
    provisional: Vec<String>,
    components: &'a [UncertainComponent],
    knowledge: Vec<&'a str>,
}

fn predict(a: PredictArgs, cfg: &mut RunConfig, exec: Exec) -> Res<()> {
    apply_sampling(cfg, &a.sampling);
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let base = TaggerModel::load(&a.base)?;
    check_model_scheme(cfg, base.scheme())?;
    let scheme = base.scheme().clone();
    let fusion = a.fusion.as_deref().map(FusionModel::load).transpose()?;
    let r = match (&a.retrieval.kb, &a.retrieval.cache) {
        (None, None) => Retriever::none(),
        _ => retriever(cfg, &a.retrieval)?,
    };
    let data = load_corpus(&a.input, &scheme)?;
    let retagger = Retagger::new(&base, fusion.as_ref(), &r, cfg)?;
    let xs: Vec<Sentence> = data.iter().map(|(x, _)| x.clone()).collect();
    let preds = retagger.predict_corpus(&xs, exec)?;
    let mut buf = Vec::new();
    corpus::write(&mut buf, &scheme, xs.iter().zip(&preds).map(|(x, p)| (x.chars(), &p.labels[..])))?;
    std::fs::write(&a.out, buf)?;
    if let Some(path) = &a.details {
        let rows = preds
            .iter()
            .zip(&xs)
            .map(|(p, x)| {
                Ok(DetailRow {
                    text: x.text(),
                    labels: scheme.names(&p.labels)?,
                    provisional: scheme.names(&p.provisional.l_p)?,
                    components: &p.components,
                    knowledge: p.knowledge.iter().map(|k| k.as_str()).collect(),
                })
            })
            .collect::<Result<Vec<_>, Error>>()?;
        write_jsonl(path, rows)?;
    }
    if let Some(path) = &a.report {
        let gold: Vec<LabelSequence> = data.into_iter().map(|(_, g)| g).collect();
        write_json(path, &evaluate(&scheme, &preds, &gold, cfg)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    sentences: usize,
    overall: Prf,
    by_type: BTreeMap<String, Prf>,
}

fn evaluate_files(a: EvaluateArgs, cfg: &RunConfig) -> Res<()> {
    let (pred_raw, gold_raw) = (read_raw(&a.pred)?, read_raw(&a.gold)?);
    let mut cfg = cfg.clone();
    if cfg.entity_types.is_empty() {
        let mut types = infer_types(&gold_raw, &a.gold)?;
        types.extend(infer_types(&pred_raw, &a.pred)?);
        cfg.entity_types = types.into_iter().collect();
    }
    let scheme = cfg.scheme()?;
    let pred = corpus::resolve(pred_raw, &scheme, &a.pred.display().to_string())?;
    let gold = corpus::resolve(gold_raw, &scheme, &a.gold.display().to_string())?;
    if pred.len() != gold.len() {
        return Err(Error::InvalidArgument(format!("{} predicted vs {} gold sentences", pred.len(), gold.len())).into());
    }
    if let Some(i) = pred.iter().zip(&gold).position(|((p, _), (g, _))| p != g) {
        return Err(Error::InvalidArgument(format!("sentence {} differs between prediction and gold", i + 1)).into());
    }
    let p: Vec<LabelSequence> = pred.into_iter().map(|(_, l)| l).collect();
    let g: Vec<LabelSequence> = gold.into_iter().map(|(_, l)| l).collect();
    let mut by_type = BTreeMap::new();
    for t in scheme.entity_types() {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (ps, gs) in p.iter().zip(&g) {
            let keep = |s: &LabelSequence| -> Result<BTreeSet<_>, Error> {
                Ok(scheme.extract_spans(s)?.into_iter().filter(|e| &e.etype == t).collect())
            };
            let (ps, gs) = (keep(ps)?, keep(gs)?);
            let hit = ps.intersection(&gs).count();
            tp += hit;
            fp += ps.len() - hit;
            fn_ += gs.len() - hit;
        }
        by_type.insert(t.clone(), Prf::from_counts(tp, fp, fn_));
    }
    let report = EvalReport {
        sentences: p.len(),
        overall: entity_f1(&scheme, &p, &g)?,
        by_type,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    Ok(())
}

fn sweep(a: SweepArgs, cfg: &mut RunConfig, exec: Exec) -> Res<()> {
    cfg.seed = a.seed;
    let base = TaggerModel::load(&a.base)?;
    check_model_scheme(cfg, base.scheme())?;
    let scheme = base.scheme().clone();
    cfg.entity_types = scheme.entity_types().to_vec();
    let grid: SweepGrid = serde_json::from_str(&std::fs::read_to_string(&a.grid)?)
        .map_err(|e| Error::Config(format!("{}: {e}", a.grid.display())))?;
    let records: Vec<Stage2Record> = read_jsonl(&a.records)?;
    let test = load_corpus(&a.input, &scheme)?;
    let r = retriever(cfg, &a.retrieval)?;
    let rows = run_sweep(&scheme, &base, &records, &r, &test, &grid, cfg, exec)?;
    write_json(&a.out, &rows)?;
    print!("{}", sweep_table(&rows));
    Ok(())
}

