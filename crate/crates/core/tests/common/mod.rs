#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retag_core::retrieval::Triplet;
use retag_core::tagger::Sentence;
use retag_core::tagspace::{EntitySpan, LabelScheme, LabelSequence};

const NAME_POOL: &str = "安宝北成川达东丰福刚光海和弘华辉吉佳江金锦康乐丽林龙茂美宁鹏平庆瑞森盛泰通伟文祥兴旭阳耀益永友宇源远云泽振正志中卓";
const SURNAMES: &str = "王李张刘陈杨赵黄周吴";
const GIVEN: &str = "甲乙丙丁戊己庚辛壬癸";
const MENTION_TEMPLATES: [&str; 6] = [
    "我们昨日去了@。",
    "@最近很热闹。",
    "听说@有新消息。",
    "他在@待了三日。",
    "关于@的报道很多。",
    "#先生说@不错。",
];
const PERSON_TEMPLATES: [&str; 4] = ["#先生说今日下雨。", "我见到了#女士。", "#女士在读书。", "昨日#先生来过。"];
const PLAIN: [&str; 5] = ["今日下雨。", "大家都在休息。", "我们读了一本书。", "他说不错。", "这里很热闹。"];

pub struct Synthetic {
    pub scheme: LabelScheme,
    pub train: Vec<(Sentence, LabelSequence)>,
    pub test: Vec<(Sentence, LabelSequence)>,
    pub triplets: Vec<Triplet>,
}

/// Names drawn from one character pool, no two sharing a bigram.
fn names(rng: &mut ChaCha8Rng, count: usize) -> Vec<String> {
    let pool: Vec<char> = NAME_POOL.chars().collect();
    let mut seen: BTreeSet<(char, char)> = BTreeSet::new();
    let mut out = Vec::new();
    while out.len() < count {
        let len = rng.gen_range(2..=3);
        let cs: Vec<char> = (0..len).map(|_| *pool.choose(rng).unwrap()).collect();
        let bigrams: Vec<(char, char)> = cs.windows(2).map(|w| (w[0], w[1])).collect();
        if bigrams.iter().any(|b| seen.contains(b)) || cs.windows(2).any(|w| w[0] == w[1]) {
            continue;
        }
        seen.extend(bigrams);
        out.push(cs.into_iter().collect());
    }
    out
}

fn render(
    scheme: &LabelScheme,
    template: &str,
    mention: Option<(&str, &str)>,
    person: Option<String>,
) -> (Sentence, LabelSequence) {
    let mut chars = Vec::new();
    let mut spans = Vec::new();
    for c in template.chars() {
        let (text, etype) = match c {
            '@' => mention.unwrap(),
            '#' => (person.as_deref().unwrap(), "PER"),
            _ => {
                chars.push(c);
                continue;
            }
        };
        let start = chars.len();
        chars.extend(text.chars());
        spans.push(EntitySpan::new(start, chars.len() - 1, etype));
    }
    let labels = scheme.spans_to_labels(spans.iter(), chars.len()).unwrap();
    (Sentence::new(chars).unwrap(), labels)
}

/// About 20% of sentences mention an ORG or LOC name whose type is a coin
/// flip recorded only in the triplet KB; names in the test split never occur
/// in training.
pub fn synthetic(seed: u64, train_len: usize, test_len: usize) -> Synthetic {
    let scheme = LabelScheme::new(["PER", "ORG", "LOC"]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = names(&mut rng, 200);
    let types: Vec<&str> = names.iter().map(|_| if rng.gen_bool(0.5) { "ORG" } else { "LOC" }).collect();
    let mut triplets = Vec::new();
    for (i, (n, t)) in names.iter().zip(&types).enumerate() {
        let kind = if *t == "ORG" { "机构" } else { "地点" };
        triplets.push(Triplet::new(n.clone(), "类别", kind));
        triplets.push(Triplet::new(n.clone(), "编号", format!("{i:03}")));
    }
    let surnames: Vec<char> = SURNAMES.chars().collect();
    let given: Vec<char> = GIVEN.chars().collect();
    let make = |pool: std::ops::Range<usize>, count: usize, rng: &mut ChaCha8Rng| {
        (0..count)
            .map(|_| {
                let person: String = [*surnames.choose(rng).unwrap(), *given.choose(rng).unwrap()].iter().collect();
                let r: f64 = rng.gen();
                if r < 0.2 {
                    let i = rng.gen_range(pool.clone());
                    let t = MENTION_TEMPLATES.choose(rng).unwrap();
                    render(&scheme, t, Some((&names[i], types[i])), Some(person))
                } else if r < 0.6 {
                    render(&scheme, PERSON_TEMPLATES.choose(rng).unwrap(), None, Some(person))
                } else {
                    render(&scheme, PLAIN.choose(rng).unwrap(), None, None)
                }
            })
            .collect::<Vec<_>>()
    };
    let train = make(0..150, train_len, &mut rng);
    let test = make(150..200, test_len, &mut rng);
    Synthetic {
        scheme,
        train,
        test,
        triplets,
    }
}

/// Sentences where every character has a fixed label given by a lookup
/// table.
pub fn lookup_corpus(seed: u64, count: usize) -> (LabelScheme, Vec<(Sentence, LabelSequence)>) {
    let scheme = LabelScheme::new(["X"]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entity: Vec<char> = "甲乙丙丁".chars().collect();
    let other: Vec<char> = "的了是在有人这中大为".chars().collect();
    let data = (0..count)
        .map(|_| {
            let n = rng.gen_range(4..12);
            let chars: Vec<char> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        *entity.choose(&mut rng).unwrap()
                    } else {
                        *other.choose(&mut rng).unwrap()
                    }
                })
                .collect();
            let names: Vec<&str> = chars.iter().map(|c| if entity.contains(c) { "S-X" } else { "O" }).collect();
            (Sentence::new(chars).unwrap(), scheme.parse_sequence(&names).unwrap())
        })
        .collect();
    (scheme, data)
}

pub fn random_log_probs(rng: &mut impl Rng, n: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * width);
    for _ in 0..n {
        let row: Vec<f64> = (0..width).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}
