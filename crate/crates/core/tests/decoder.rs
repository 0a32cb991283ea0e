use proptest::prelude::*;
use retag_core::decoder::{topk_viterbi, viterbi, TagLattice};
use retag_core::tagspace::{LabelId, LabelScheme};

fn all_legal(scheme: &LabelScheme, n: usize) -> Vec<Vec<LabelId>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p: Vec<LabelId>| {
                scheme.label_ids().map(move |l| {
                    let mut q = p.clone();
                    q.push(l);
                    q
                })
            })
            .collect();
    }
    out.retain(|s| scheme.is_legal(s));
    out
}

fn case() -> impl Strategy<Value = (LabelScheme, TagLattice)> {
    (1..=2usize, 1..=4usize).prop_flat_map(|(types, n)| {
        let scheme = LabelScheme::new(["A", "B"].into_iter().take(types)).unwrap();
        let w = scheme.len();
        prop::collection::vec(-6.0..0.0f64, n * w)
            .prop_map(move |scores| (scheme.clone(), TagLattice::new(n, w, scores).unwrap()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn viterbi_is_the_legal_maximum((scheme, lat) in case()) {
        let best = viterbi(&lat, &scheme).unwrap();
        prop_assert!(scheme.is_legal(&best.seq));
        let max = all_legal(&scheme, lat.len()).iter().map(|s| lat.path_score(s)).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((best.score - max).abs() < 1e-9);
        prop_assert!((lat.path_score(&best.seq) - best.score).abs() < 1e-9);
    }

    #[test]
    fn topk_matches_enumeration((scheme, lat) in case(), k in 1..12usize) {
        let got = topk_viterbi(&lat, &scheme, k).unwrap();
        let mut want: Vec<f64> = all_legal(&scheme, lat.len()).iter().map(|s| lat.path_score(s)).collect();
        want.sort_by(|a, b| b.partial_cmp(a).unwrap());
        want.truncate(k);
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g.score - w).abs() < 1e-9);
            prop_assert!(scheme.is_legal(&g.seq));
        }
        for i in 0..got.len() {
            for j in i + 1..got.len() {
                prop_assert_ne!(&got[i].seq, &got[j].seq);
            }
        }
        prop_assert_eq!(&got[0], &viterbi(&lat, &scheme).unwrap());
    }

    #[test]
    fn topk_lists_extend_as_prefixes((scheme, lat) in case(), k in 1..6usize, extra in 1..6usize) {
        let short = topk_viterbi(&lat, &scheme, k).unwrap();
        let long = topk_viterbi(&lat, &scheme, k + extra).unwrap();
        prop_assert!(long.len() >= short.len());
        for (a, b) in short.iter().zip(&long) {
            prop_assert!((a.score - b.score).abs() < 1e-9);
        }
        for w in long.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn spans_round_trip_through_labels((scheme, lat) in case()) {
        for seq in all_legal(&scheme, lat.len()) {
            let spans = scheme.extract_spans(&seq).unwrap();
            let back = scheme.spans_to_labels(spans.iter(), seq.len()).unwrap();
            prop_assert_eq!(&back.0, &seq);
        }
    }
}

#[test]
fn shape_and_k_errors() {
    let scheme = LabelScheme::new(["X"]).unwrap();
    let lat = TagLattice::new(2, 3, vec![0.0; 6]).unwrap();
    assert!(viterbi(&lat, &scheme).is_err());
    let lat = TagLattice::new(2, 5, vec![0.0; 10]).unwrap();
    assert!(topk_viterbi(&lat, &scheme, 0).is_err());
    // all legal sequences of length 2 over one type: OO, OS, SO, SS, BE
    assert_eq!(topk_viterbi(&lat, &scheme, 50).unwrap().len(), 5);
}
