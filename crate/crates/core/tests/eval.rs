use fdylka_core::eval::{
    decode, event_f1, median_filter, median_root, runs, DecodeConfig, EventAnnotation, Matching, MetricConfig,
};
use fdylka_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn classes(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

fn column(values: &[f64]) -> Vec<Vec<f64>> {
    values.iter().map(|&v| vec![v]).collect()
}

fn ev(clip: &str, label: &str, on: f64, off: f64) -> EventAnnotation {
    EventAnnotation::new(clip, label, on, off)
}

#[test]
fn constant_activity_is_one_clip_long_event() {
    let got = decode("a", &column(&[0.8; 250]), &classes(1), &DecodeConfig::default()).unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!((got[0].onset, got[0].offset), (0.0, 10.0));
}

#[test]
fn isolated_frame_is_removed() {
    let mut p = vec![0.0; 250];
    p[120] = 0.9;
    assert!(decode("a", &column(&p), &classes(1), &DecodeConfig::default())
        .unwrap()
        .is_empty());
}

#[test]
fn block_of_frames_maps_to_seconds() {
    let p: Vec<f64> = (0..250).map(|i| if (100..150).contains(&i) { 0.9 } else { 0.0 }).collect();
    let got = decode("a", &column(&p), &classes(1), &DecodeConfig::default()).unwrap();
    assert_eq!(got.len(), 1);
    assert!((got[0].onset - 4.0).abs() < 1e-12 && (got[0].offset - 6.0).abs() < 1e-12);
}

#[test]
fn threshold_is_strict() {
    let got = decode("a", &column(&[0.5; 250]), &classes(1), &DecodeConfig::default()).unwrap();
    assert!(got.is_empty());
}

#[test]
fn decode_config_validation() {
    let even = DecodeConfig {
        median_window: 4,
        ..DecodeConfig::default()
    };
    assert!(matches!(even.validate(), Err(Error::Config(_))));
    assert!(DecodeConfig::default().validate().is_ok());
}

fn filter_oracle(x: &[bool], window: usize) -> Vec<bool> {
    let h = window / 2;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let (mut ones, mut total) = (0, 0);
        for j in i.saturating_sub(h)..=(i + h) {
            if j < x.len() {
                total += 1;
                ones += x[j] as usize;
            }
        }
        out.push(2 * ones > total);
    }
    out
}

#[test]
fn median_matches_loop_oracle_and_root_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..1000 {
        let len = rng.gen_range(1..300);
        let density = rng.gen_range(0.05..0.95);
        let x: Vec<bool> = (0..len).map(|_| rng.gen_bool(density)).collect();
        let window = [1, 3, 5, 7, 9][case % 5];
        assert_eq!(median_filter(&x, window), filter_oracle(&x, window));
        let root = median_root(&x, window);
        assert_eq!(filter_oracle(&root, window), root, "case {case}");
        assert_eq!(median_root(&root, window), root);
    }
}

#[test]
fn decode_is_idempotent_on_binary_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = DecodeConfig::default();
    for _ in 0..1000 {
        let x: Vec<f64> = (0..250).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();
        let once = decode("a", &column(&x), &classes(1), &cfg).unwrap();
        let mut grid = vec![0.0; 250];
        for e in &once {
            let (s, t) = ((e.onset / 0.04).round() as usize, (e.offset / 0.04).round() as usize);
            grid[s..t].iter_mut().for_each(|v| *v = 1.0);
        }
        assert_eq!(decode("a", &column(&grid), &classes(1), &cfg).unwrap(), once);
    }
}

proptest! {
    #[test]
    fn decoded_events_are_disjoint_and_in_bounds(
        grid in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 3), 250),
    ) {
        let events = decode("a", &grid, &classes(3), &DecodeConfig::default()).unwrap();
        for e in &events {
            prop_assert!(0.0 <= e.onset && e.onset < e.offset && e.offset <= 10.0 + 1e-9);
        }
        for (i, a) in events.iter().enumerate() {
            for b in &events[i + 1..] {
                if a.label == b.label {
                    prop_assert!(a.offset <= b.onset || b.offset <= a.onset);
                }
            }
        }
    }
}

#[test]
fn runs_oracle() {
    assert_eq!(runs(&[false, true, true, false, false, true]), vec![(1, 3), (5, 6)]);
}

#[test]
fn identical_lists_score_one() {
    let r = vec![ev("a", "Dog", 1.0, 3.0), ev("a", "Cat", 2.0, 2.5), ev("b", "Dog", 0.0, 10.0)];
    let rep = event_f1(&r, &r, &MetricConfig::default()).unwrap();
    assert_eq!(rep.macro_f1, 1.0);
    assert_eq!(rep.per_class["Dog"].tp, 2);
}

#[test]
fn empty_estimate_scores_zero() {
    let r = vec![ev("a", "Dog", 1.0, 3.0)];
    let rep = event_f1(&r, &[], &MetricConfig::default()).unwrap();
    assert_eq!(rep.macro_f1, 0.0);
    assert_eq!(rep.per_class["Dog"].fn_, 1);
}

#[test]
fn both_empty_scores_one() {
    assert_eq!(event_f1(&[], &[], &MetricConfig::default()).unwrap().macro_f1, 1.0);
}

#[test]
fn collar_arithmetic() {
    let cfg = MetricConfig::default();
    let r = vec![ev("a", "Dog", 1.0, 3.0)];
    // Onset 0.15 off, offset 0.1 off, offset collar max(0.2, 0.4).
    assert_eq!(event_f1(&r, &[ev("a", "Dog", 1.15, 3.1)], &cfg).unwrap().macro_f1, 1.0);
    // Offset 0.35 off: inside the 0.4 duration collar.
    assert_eq!(event_f1(&r, &[ev("a", "Dog", 1.0, 3.35)], &cfg).unwrap().macro_f1, 1.0);
    // Offset 0.45 off: outside.
    assert_eq!(event_f1(&r, &[ev("a", "Dog", 1.0, 3.45)], &cfg).unwrap().macro_f1, 0.0);
    // Onset exactly on the collar counts.
    assert_eq!(event_f1(&r, &[ev("a", "Dog", 1.2, 3.0)], &cfg).unwrap().macro_f1, 1.0);
    // Onset 0.25 off fails.
    assert_eq!(event_f1(&r, &[ev("a", "Dog", 1.25, 3.0)], &cfg).unwrap().macro_f1, 0.0);
    // Short reference: the 0.2 s floor applies.
    let short = vec![ev("a", "Dog", 1.0, 1.5)];
    assert_eq!(event_f1(&short, &[ev("a", "Dog", 1.0, 1.69)], &cfg).unwrap().macro_f1, 1.0);
    assert_eq!(event_f1(&short, &[ev("a", "Dog", 1.0, 1.75)], &cfg).unwrap().macro_f1, 0.0);
}

#[test]
fn partial_credit_and_macro_average() {
    let cfg = MetricConfig::default();
    let r = vec![ev("a", "Dog", 1.0, 2.0), ev("a", "Dog", 5.0, 6.0), ev("a", "Cat", 0.0, 1.0)];
    let e = vec![ev("a", "Dog", 1.0, 2.0), ev("a", "Cat", 7.0, 8.0), ev("b", "Dog", 1.0, 2.0)];
    let rep = event_f1(&r, &e, &cfg).unwrap();
    let dog = &rep.per_class["Dog"];
    assert_eq!((dog.tp, dog.fp, dog.fn_), (1, 1, 1));
    assert!((dog.f1 - 0.5).abs() < 1e-12);
    assert_eq!(rep.per_class["Cat"].f1, 0.0);
    assert!((rep.macro_f1 - 0.25).abs() < 1e-12);
    let table = rep.table();
    assert!(table.contains("Dog") && table.contains("macro"));
}

#[test]
fn matching_is_one_to_one() {
    let r = vec![ev("a", "Dog", 1.0, 2.0)];
    let e = vec![ev("a", "Dog", 1.0, 2.0), ev("a", "Dog", 1.05, 2.0)];
    let d = &event_f1(&r, &e, &MetricConfig::default()).unwrap().per_class["Dog"];
    assert_eq!((d.tp, d.fp, d.fn_), (1, 1, 0));
}

#[test]
fn greedy_can_lose_to_bipartite() {
    // The first reference grabs the estimate the second one needed.
    let r = vec![ev("a", "Dog", 1.0, 3.0), ev("a", "Dog", 1.15, 2.9)];
    let e = vec![ev("a", "Dog", 1.1, 2.8), ev("a", "Dog", 1.2, 3.3)];
    let greedy = event_f1(&r, &e, &MetricConfig::default()).unwrap();
    let bip = event_f1(
        &r,
        &e,
        &MetricConfig {
            matching: Matching::Bipartite,
            ..MetricConfig::default()
        },
    )
    .unwrap();
    assert_eq!(greedy.per_class["Dog"].tp, 1);
    assert_eq!(bip.per_class["Dog"].tp, 2);
}

#[test]
fn malformed_event_is_input_error() {
    let bad = vec![ev("a", "Dog", 2.0, 2.0)];
    assert!(matches!(event_f1(&bad, &[], &MetricConfig::default()), Err(Error::Input(_))));
    assert!(matches!(event_f1(&[], &bad, &MetricConfig::default()), Err(Error::Input(_))));
}

fn random_events(rng: &mut ChaCha8Rng, n: usize) -> Vec<EventAnnotation> {
    (0..n)
        .map(|_| {
            let on = (rng.gen_range(0.0..9.0f64) * 20.0).round() / 20.0;
            let dur = (rng.gen_range(0.25..1.0f64) * 20.0).round() / 20.0;
            ev(
                ["a", "b"][rng.gen_range(0..2)],
                ["Dog", "Cat"][rng.gen_range(0..2)],
                on,
                on + dur,
            )
        })
        .collect()
}

#[test]
fn swapping_ref_and_est_swaps_precision_and_recall() {
    // With events no longer than 1 s the offset collar is the fixed 0.2 s,
    // so the hit relation is symmetric; bipartite matching then makes the
    // match count independent of which side is the reference.
    let cfg = MetricConfig {
        matching: Matching::Bipartite,
        ..MetricConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..300 {
        let (n, m) = (rng.gen_range(0..8), rng.gen_range(0..8));
        let a = random_events(&mut rng, n);
        let mut b = random_events(&mut rng, m);
        // Nudge some estimates close to references so matches happen.
        for (x, y) in a.iter().zip(b.iter_mut()) {
            if rng.gen_bool(0.6) {
                *y = ev(&x.clip_id, &x.label, x.onset + 0.1, x.offset - 0.05);
            }
        }
        let ab = event_f1(&a, &b, &cfg).unwrap();
        let ba = event_f1(&b, &a, &cfg).unwrap();
        for (k, s) in &ab.per_class {
            let t = &ba.per_class[k];
            assert_eq!((s.tp, s.fp, s.fn_), (t.tp, t.fn_, t.fp));
            assert_eq!(s.precision, t.recall);
            assert_eq!(s.f1, t.f1);
        }
    }
}
