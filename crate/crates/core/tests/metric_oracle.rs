//! Evaluator metrics against brute-force per-item counting with exact
//! rational arithmetic.

use num_rational::Ratio;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relqa_core::bench::{Benchmark, BenchmarkItem, GtLabel, Subset};
use relqa_core::eval::{score, ResponseRecord};

const ANSWERS: [&str; 6] = ["Yes.", "yes, it is", "No.", "no", "I think yes", "unclear"];

fn said_yes(answer: &str) -> bool {
    matches!(answer, "Yes." | "yes, it is" | "I think yes")
}

fn random_case(rng: &mut ChaCha8Rng) -> (Benchmark, Vec<ResponseRecord>) {
    let n = rng.random_range(0..=200);
    let subsets = [Subset::Positive, Subset::Category, Subset::Attribute, Subset::Relation];
    let mut items = Vec::new();
    let mut responses = Vec::new();
    for i in 0..n {
        let subset = subsets[rng.random_range(0..4)];
        items.push(BenchmarkItem {
            item_id: format!("i{i}"),
            image_id: "img".into(),
            question: "q?".into(),
            gt_label: if subset == Subset::Positive { GtLabel::Yes } else { GtLabel::No },
            subset,
        });
        responses.push(ResponseRecord {
            item_id: format!("i{i}"),
            response_text: ANSWERS[rng.random_range(0..ANSWERS.len())].into(),
        });
    }
    (Benchmark { name: "r".into(), seed: 0, items }, responses)
}

fn q(num: i64, den: i64) -> Ratio<i64> {
    if den == 0 {
        Ratio::from_integer(0)
    } else {
        Ratio::new(num, den)
    }
}

fn to_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[test]
fn thousand_random_pairs_match_counting_oracle() {
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let (bench, responses) = random_case(&mut rng);
        let report = score(&bench, &responses, "m").unwrap();
        let (mut tp, mut fp, mut tn, mut fn_) = (0i64, 0i64, 0i64, 0i64);
        let mut per: std::collections::BTreeMap<Subset, (i64, i64)> = Default::default();
        for (item, r) in bench.items.iter().zip(&responses) {
            let yes = said_yes(&r.response_text);
            match (item.gt_label, yes) {
                (GtLabel::Yes, true) => tp += 1,
                (GtLabel::Yes, false) => fn_ += 1,
                (GtLabel::No, true) => fp += 1,
                (GtLabel::No, false) => tn += 1,
            }
            let e = per.entry(item.subset).or_default();
            e.0 += i64::from(yes);
            e.1 += 1;
        }
        let p = q(tp, tp + fp);
        let rec = q(tp, tp + fn_);
        let f1 = if p + rec == Ratio::from_integer(0) { p } else { Ratio::from_integer(2) * p * rec / (p + rec) };
        assert_eq!(
            (report.counts.tp, report.counts.fp, report.counts.tn, report.counts.fn_),
            (tp as u64, fp as u64, tn as u64, fn_ as u64)
        );
        assert!((report.precision - to_f64(p)).abs() < 1e-12);
        assert!((report.recall - to_f64(rec)).abs() < 1e-12);
        assert!((report.f1 - to_f64(f1)).abs() < 1e-12);
        for s in [Subset::Category, Subset::Attribute, Subset::Relation] {
            let (yes, n) = per.get(&s).copied().unwrap_or((0, 0));
            assert!((report.per_subset_fp[&s] - to_f64(q(yes, n))).abs() < 1e-12);
        }
    }
    assert!(started.elapsed().as_secs_f64() < 5.0);
}

proptest! {
    #[test]
    fn permutation_and_relabeling_do_not_change_the_report(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bench, mut responses) = random_case(&mut rng);
        let base = score(&bench, &responses, "m").unwrap();
        responses.shuffle(&mut rng);
        prop_assert_eq!(&score(&bench, &responses, "m").unwrap(), &base);

        let relabel = |id: &str| format!("x-{}", id.len() * 7919 % 1000 + id.len()) + id;
        let bench2 = Benchmark {
            items: bench.items.iter().map(|i| BenchmarkItem { item_id: relabel(&i.item_id), ..i.clone() }).collect(),
            ..bench.clone()
        };
        let responses2: Vec<_> = responses
            .iter()
            .map(|r| ResponseRecord { item_id: relabel(&r.item_id), ..r.clone() })
            .collect();
        prop_assert_eq!(score(&bench2, &responses2, "m").unwrap().f1, base.f1);
    }

    #[test]
    fn rates_stay_in_unit_interval(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bench, responses) = random_case(&mut rng);
        let r = score(&bench, &responses, "m").unwrap();
        for v in [r.precision, r.recall, r.f1].into_iter().chain(r.per_subset_fp.values().copied()) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(r.counts.total() as usize, bench.items.len());
    }

    #[test]
    fn constant_responders_hit_analytic_extremes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut bench, _) = random_case(&mut rng);
        // Every subset present at least once.
        for (k, s) in [Subset::Positive, Subset::Category, Subset::Attribute, Subset::Relation].into_iter().enumerate() {
            bench.items.push(BenchmarkItem {
                item_id: format!("pad{k}"),
                image_id: "img".into(),
                question: "q?".into(),
                gt_label: if s == Subset::Positive { GtLabel::Yes } else { GtLabel::No },
                subset: s,
            });
        }
        let all = |text: &str| -> Vec<ResponseRecord> {
            bench.items.iter().map(|i| ResponseRecord { item_id: i.item_id.clone(), response_text: text.into() }).collect()
        };
        let yes = score(&bench, &all("Yes"), "m").unwrap();
        prop_assert_eq!(yes.recall, 1.0);
        prop_assert!(yes.per_subset_fp.values().all(|&v| v == 1.0));
        let no = score(&bench, &all("No"), "m").unwrap();
        prop_assert_eq!(no.recall, 0.0);
        prop_assert!(no.per_subset_fp.values().all(|&v| v == 0.0));
    }
}
