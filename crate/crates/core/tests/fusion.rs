use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retag_core::decoder::{viterbi, TagLattice};
use retag_core::fusion::{
    build_fused_sample, fuse_predict, train_fusion, FusedSample, FusionDims, FusionModel, FusionTrainConfig,
};
use retag_core::par::Exec;
use retag_core::retrieval::KnowledgeText;
use retag_core::tagger::{CharVocab, Sentence};
use retag_core::tagspace::{EntitySpan, LabelScheme, LabelSequence};
use retag_core::uncertainty::UncertainComponent;

const POOL: &str = "安宝北成川达东丰福刚光海和弘华辉吉佳江金锦康乐丽林龙茂美宁鹏平庆瑞森盛泰通伟文祥兴旭阳耀益永友宇源远云泽振正志中卓";
const FRAMES: [(&str, &str); 4] = [("我们去了", "。"), ("听说", "很好。"), ("关于", "的事"), ("", "有消息。")];

fn scheme() -> LabelScheme {
    LabelScheme::new(["ORG", "LOC"]).unwrap()
}

/// A masked two-character mention whose type is stated only in the
/// knowledge text.
fn disambiguation(rng: &mut ChaCha8Rng, count: usize) -> Vec<FusedSample> {
    let scheme = scheme();
    let pool: Vec<char> = POOL.chars().collect();
    (0..count)
        .map(|_| {
            let name: String = pool.choose_multiple(rng, 2).collect();
            let (pre, post) = FRAMES.choose(rng).unwrap();
            let etype = if rng.gen_bool(0.5) { "ORG" } else { "LOC" };
            let kind = if etype == "ORG" { "机构" } else { "地点" };
            let x: Sentence = format!("{pre}{name}{post}").parse().unwrap();
            let start = pre.chars().count();
            let span = EntitySpan::new(start, start + 1, etype);
            let gold = scheme.spans_to_labels([&span], x.len()).unwrap();
            let l_p = LabelSequence(vec![retag_core::tagspace::LabelId(0); x.len()]);
            let comp = UncertainComponent { start, end: start + 1, text: name.clone() };
            let k = KnowledgeText::new(&format!("{name}。类别:{kind}。"));
            build_fused_sample(&x, &l_p, &[comp], &k, 64).unwrap().with_gold(gold).unwrap()
        })
        .collect()
}

fn small() -> FusionTrainConfig {
    FusionTrainConfig {
        epochs: 12,
        batch_size: 16,
        dims: FusionDims { max_seq_len: 64, ..FusionDims::default() },
        seed: 4,
        ..FusionTrainConfig::default()
    }
}

#[test]
fn reads_the_type_from_knowledge() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let train = disambiguation(&mut rng, 480);
    let test = disambiguation(&mut rng, 200);
    let model = train_fusion(&scheme(), &train, None, &small(), Exec::Parallel).unwrap().model;
    let (mut hit, mut total) = (0, 0);
    for s in &test {
        let pred = viterbi(&model.encode(s).unwrap(), &scheme()).unwrap().seq;
        let gold = s.gold().unwrap();
        for i in (0..s.n()).filter(|&i| s.in_component(i)) {
            total += 1;
            hit += (pred[i] == gold[i]) as usize;
        }
    }
    let acc = hit as f64 / total as f64;
    assert!(acc >= 0.9, "masked-position accuracy {acc}");
}

#[test]
fn alpha_one_equals_unweighted_and_modes_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let train = disambiguation(&mut rng, 40);
    let cfg = FusionTrainConfig { epochs: 2, alpha: 1.0, ..small() };
    let a = train_fusion(&scheme(), &train, None, &cfg, Exec::Parallel).unwrap().model;
    let plain = FusionTrainConfig { unweighted: true, alpha: 0.3, ..cfg.clone() };
    let b = train_fusion(&scheme(), &train, None, &plain, Exec::Sequential).unwrap().model;
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let c = train_fusion(&scheme(), &train, None, &cfg, Exec::Sequential).unwrap().model;
    assert_eq!(a.to_json().unwrap(), c.to_json().unwrap());
    let back = FusionModel::from_json(&a.to_json().unwrap()).unwrap();
    assert_eq!(back.encode(&train[0]).unwrap(), a.encode(&train[0]).unwrap());
}

fn untrained() -> (FusionModel, Sentence, LabelSequence) {
    let x: Sentence = "我们去了东海。".parse().unwrap();
    let vocab = CharVocab::with_reserved("我们去了东海。类别机构地点编号:".chars().collect(), 3);
    let model = FusionModel::init(scheme(), vocab, FusionDims { max_seq_len: 64, ..FusionDims::default() }, 8).unwrap();
    let l_p = scheme().parse_sequence(&["O", "O", "O", "O", "B-LOC", "E-LOC", "O"]).unwrap();
    (model, x, l_p)
}

#[test]
fn knowledge_order_matters() {
    let (model, x, l_p) = untrained();
    let comp = [UncertainComponent { start: 4, end: 5, text: "东海".into() }];
    let enc = |k: &str| {
        let s = build_fused_sample(&x, &l_p, &comp, &KnowledgeText::new(k), 64).unwrap();
        model.encode(&s).unwrap()
    };
    assert_ne!(enc("类别:机构。编号:地点"), enc("编号:地点。类别:机构"));
    assert_eq!(enc("类别:机构"), enc("类别:机构"));
}

#[test]
fn group_fusion_is_viterbi_of_the_mean() {
    let (model, x, l_p) = untrained();
    let g1 = (vec![UncertainComponent { start: 4, end: 5, text: "东海".into() }], KnowledgeText::new("东海。类别:机构。"));
    let g2 = (vec![UncertainComponent { start: 0, end: 1, text: "我们".into() }], KnowledgeText::new("编号:地点"));
    let one = fuse_predict(&model, &x, &l_p, std::slice::from_ref(&g1), Exec::Sequential).unwrap();
    let twice = fuse_predict(&model, &x, &l_p, &[g1.clone(), g1.clone()], Exec::Parallel).unwrap();
    assert_eq!(one, twice);

    let groups = [g1, g2];
    let lattices: Vec<TagLattice> = groups
        .iter()
        .map(|(c, k)| model.encode(&build_fused_sample(&x, &l_p, c, k, 64).unwrap()).unwrap())
        .collect();
    let mean = TagLattice::sum(&lattices).unwrap().scaled(0.5);
    let want = viterbi(&mean, &scheme()).unwrap().seq;
    assert_eq!(fuse_predict(&model, &x, &l_p, &groups, Exec::Parallel).unwrap(), want);
    assert!(fuse_predict(&model, &x, &l_p, &[], Exec::Parallel).is_err());
}
