use proptest::collection::vec;
use proptest::prelude::*;

use simulstream::align::{contextual_align, loglik_matrix, AlignmentMap, PlantedStepScorer};
use simulstream::codec::TokenGrid;
use simulstream::inference::sample_token;
use simulstream::metrics::{corpus_bleu, laal, quantile_labels, sentence_bleu, LatencyInputs};
use simulstream::pipeline::{insert_silences, smooth_spikes, TimedTranscript, TimedWord};
use simulstream::streams::{apply_acoustic_delay, remove_acoustic_delay};

fn grid() -> impl Strategy<Value = TokenGrid> {
    (1usize..30, 1usize..9).prop_flat_map(|(f, q)| {
        vec(1u16..500, f * q).prop_map(move |t| TokenGrid::new(f, q, t).unwrap())
    })
}

fn sorted_times() -> impl Strategy<Value = Vec<f64>> {
    vec(0.0f64..20.0, 1..15).prop_map(|mut v| {
        v.sort_by(f64::total_cmp);
        v
    })
}

fn transcript_from_gaps(gaps: &[(f64, f64)]) -> TimedTranscript {
    let mut t = 0.0;
    let words = gaps
        .iter()
        .enumerate()
        .map(|(i, &(gap, dur))| {
            let start = t + gap;
            t = start + dur;
            TimedWord { text: format!("w{i}"), start, end: t }
        })
        .collect();
    TimedTranscript::new(words).unwrap()
}

fn transcript() -> impl Strategy<Value = TimedTranscript> {
    vec((0.0f64..1.0, 0.05f64..1.0), 1..12).prop_map(|g| transcript_from_gaps(&g))
}

proptest! {
    #[test]
    fn delay_round_trip(g in grid(), d in 0usize..6) {
        let back = remove_acoustic_delay(&apply_acoustic_delay(&g, d), d);
        for t in 0..g.frames {
            prop_assert_eq!(back.get(t, 0), g.get(t, 0));
            if t + d < g.frames {
                prop_assert_eq!(back.row(t), g.row(t));
            }
        }
    }

    #[test]
    fn token_grid_io_round_trip(g in grid()) {
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        prop_assert_eq!(TokenGrid::read_from(&mut buf.as_slice()).unwrap(), g);
    }

    #[test]
    fn laal_is_homogeneous(d in sorted_times(), src in 0.5f64..20.0, n_ref in 1usize..15, c in 0.1f64..10.0) {
        let base = laal(&LatencyInputs { emit_times: d.clone(), source_duration: src, n_ref }).unwrap();
        let scaled = laal(&LatencyInputs { emit_times: d.iter().map(|x| x * c).collect(), source_duration: src * c, n_ref }).unwrap();
        prop_assert!((scaled - c * base).abs() <= 1e-9 * (1.0 + scaled.abs()));
    }

    #[test]
    fn laal_shifts_with_early_output(d in sorted_times(), margin in 0.01f64..5.0, n_ref in 1usize..15, shift in 0.0f64..5.0) {
        // With every word before the source end, delaying all words by s adds exactly s.
        let src = d.last().unwrap() + shift + margin;
        let base = laal(&LatencyInputs { emit_times: d.clone(), source_duration: src, n_ref }).unwrap();
        let later = laal(&LatencyInputs { emit_times: d.iter().map(|x| x + shift).collect(), source_duration: src, n_ref }).unwrap();
        prop_assert!((later - base - shift).abs() <= 1e-9 * (1.0 + later.abs()), "{later} vs {base} + {shift}");
    }

    #[test]
    fn quantile_labels_ignore_monotone_rescaling(scores in vec(-5.0f64..5.0, 5..60), a in 0.1f64..10.0, b in -3.0f64..3.0) {
        let mapped: Vec<f64> = scores.iter().map(|s| a * s.exp() + b).collect();
        let l1 = quantile_labels(&[scores]).unwrap();
        let l2 = quantile_labels(&[mapped]).unwrap();
        prop_assert_eq!(l1, l2);
    }

    #[test]
    fn bleu_bounds(h in vec(0u8..6, 0..12), r in vec(0u8..6, 1..12)) {
        let h: Vec<String> = h.iter().map(|x| format!("w{x}")).collect();
        let r: Vec<String> = r.iter().map(|x| format!("w{x}")).collect();
        let b = sentence_bleu(&h, &r).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
        if r.len() >= 4 {
            prop_assert!((sentence_bleu(&r, &r).unwrap() - 100.0).abs() < 1e-9);
        }
        let c = corpus_bleu(&[(h.clone(), r.clone())]).unwrap();
        prop_assert!((c - b).abs() < 1e-9);
    }

    #[test]
    fn planted_alignment_recovered(n in 1usize..13, planted in vec(1usize..13, 1..13)) {
        let planted: Vec<usize> = planted.into_iter().map(|a| (a - 1) % n + 1).collect();
        let src: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let tgt: Vec<String> = (0..planted.len()).map(|i| format!("t{i}")).collect();
        let table = loglik_matrix(&PlantedStepScorer::new(planted.clone()), &src, &tgt).unwrap();
        prop_assert_eq!(contextual_align(&table).a, planted);
    }

    #[test]
    fn silence_insertion_is_causal_and_idempotent(
        source in transcript(),
        target in transcript(),
        picks in vec(0usize..100, 12),
        lag in 0.0f64..3.0,
    ) {
        let a = AlignmentMap::from_indices((0..target.len()).map(|j| picks[j] % source.len() + 1).collect());
        let out = insert_silences(&target, &source, &a, lag).unwrap();
        for (j, (w, orig)) in out.words.iter().zip(&target.words).enumerate() {
            prop_assert!(w.start >= source.words[a.a[j] - 1].end + lag);
            prop_assert!(w.start >= orig.start);
            prop_assert!(((w.end - w.start) - (orig.end - orig.start)).abs() < 1e-9);
        }
        let again = insert_silences(&out, &source, &a, lag).unwrap();
        for (x, y) in again.words.iter().zip(&out.words) {
            prop_assert!((x.start - y.start).abs() < 1e-9 && (x.end - y.end).abs() < 1e-9);
        }
    }

    #[test]
    fn smoothing_only_pulls_back(source in transcript(), picks in vec(0usize..100, 1..12)) {
        let a = AlignmentMap::from_indices(picks.iter().map(|p| p % source.len() + 1).collect());
        let s = smooth_spikes(&a, &source, 5, 0.25).unwrap();
        for (x, y) in s.a.iter().zip(&a.a) {
            prop_assert!(x <= y && *x >= 1);
        }
        prop_assert_eq!(smooth_spikes(&s, &source, 5, 0.25).unwrap().a, s.a);
    }

    #[test]
    fn zero_temperature_is_argmax(logits in vec(-50.0f64..50.0, 1..40), seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let first_max = logits.iter().enumerate().fold(0, |b, (i, &l)| if l > logits[b] { i } else { b });
        prop_assert_eq!(sample_token(&logits, 0.0, 10, &mut rng), first_max);
        prop_assert_eq!(sample_token(&logits, 1.0, 1, &mut rng), first_max);
        let k = 3.min(logits.len());
        let drawn = sample_token(&logits, 1.0, k, &mut rng);
        let above = logits.iter().filter(|&&l| l > logits[drawn]).count();
        prop_assert!(above < k);
    }
}
