use super::*;
use crate::signal::{Waveform, SAMPLE_RATE_HZ};
use crate::victim::{synth_corpus, Vocabulary};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Walks every edit path and keeps the lexicographically smallest
/// (cost, insertions + deletions), returning (S, I, D).
fn enumerate_paths(r: &[usize], h: &[usize]) -> (usize, usize, usize) {
    fn walk(r: &[usize], h: &[usize], s: usize, i: usize, d: usize, best: &mut Option<(usize, usize, usize, usize, usize)>) {
        if r.is_empty() && h.is_empty() {
            let key = (s + i + d, i + d, s, i, d);
            if best.map_or(true, |b| (key.0, key.1) < (b.0, b.1)) {
                *best = Some(key);
            }
            return;
        }
        if !r.is_empty() && !h.is_empty() {
            let sub = usize::from(r[0] != h[0]);
            walk(&r[1..], &h[1..], s + sub, i, d, best);
        }
        if !r.is_empty() {
            walk(&r[1..], h, s, i, d + 1, best);
        }
        if !h.is_empty() {
            walk(r, &h[1..], s, i + 1, d, best);
        }
    }
    let mut best = None;
    walk(r, h, 0, 0, 0, &mut best);
    let b = best.unwrap();
    (b.2, b.3, b.4)
}

fn all_sequences(max_len: usize, alphabet: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for a in 0..alphabet {
                let mut t: Vec<usize> = s.clone();
                t.push(a);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn t(v: &[usize]) -> Transcript {
    Transcript(v.to_vec())
}

#[test]
fn wer_matches_enumeration_up_to_four_tokens() {
    // The five-token sweep runs in the acceptance suite.
    let seqs = all_sequences(4, 3);
    for r in seqs.iter().filter(|s| !s.is_empty()) {
        for h in &seqs {
            let c = wer(&t(r), &t(h)).unwrap();
            let (s, i, d) = enumerate_paths(r, h);
            assert_eq!((c.substitutions, c.insertions, c.deletions), (s, i, d), "{r:?} vs {h:?}");
            assert!((c.pct - (s + i + d) as f64 / r.len() as f64 * 100.0).abs() < 1e-12);
        }
    }
}

#[test]
fn wer_examples() {
    assert_eq!(wer(&t(&[0, 1, 2]), &t(&[0, 1, 2])).unwrap().pct, 0.0);
    let c = wer(&t(&[0, 1, 2]), &t(&[0, 3, 2])).unwrap();
    assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 0, 0));
    assert!((c.pct - 33.333333333333336).abs() < 1e-9);
    let c = wer(&t(&[0]), &t(&[0, 1, 2])).unwrap();
    assert_eq!((c.substitutions, c.insertions, c.deletions), (0, 2, 0));
    assert_eq!(c.pct, 200.0);
    assert!(matches!(wer(&t(&[]), &t(&[1])), Err(Error::UndefinedWer)));
}

#[test]
fn sla_examples() {
    let a = t(&[0, 1]);
    let b = t(&[1, 0]);
    assert_eq!(sla(&[(a.clone(), a.clone()), (b.clone(), b.clone())]).unwrap(), 100.0);
    assert_eq!(sla(&[(a.clone(), b.clone()), (b.clone(), a.clone())]).unwrap(), 0.0);
    let three_of_four = vec![
        (a.clone(), a.clone()),
        (a.clone(), b.clone()),
        (b.clone(), b.clone()),
        (a.clone(), a.clone()),
    ];
    assert_eq!(sla(&three_of_four).unwrap(), 75.0);
    assert!(sla(&[]).is_err());
}

#[test]
fn report_aggregates_counts() {
    let rows = vec![(t(&[0, 1, 2]), t(&[0, 1, 2])), (t(&[0, 3]), t(&[0, 1, 2]))];
    let r = MetricsReport::from_transcripts(&rows, Some(10.0), None).unwrap();
    assert_eq!(r.sla_pct, 50.0);
    assert_eq!((r.n_correct, r.n_total), (1, 2));
    assert_eq!((r.substitutions, r.insertions, r.deletions), (1, 0, 1));
    assert!((r.wer_pct - (0.0 + 200.0 / 3.0) / 2.0).abs() < 1e-12);
    assert_eq!(r.n_phrases, N_PHRASES);
}

fn speech() -> Waveform {
    let vocab = Vocabulary::standard(4).unwrap();
    let c = synth_corpus(&vocab, 1, (3, 3), 9).unwrap();
    c[1].waveform.clone()
}

fn noise(len: usize, sigma: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..len)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            sigma * e
        })
        .collect();
    Waveform::new(v, SAMPLE_RATE_HZ)
}

#[test]
fn seg_snr_analytic_cases() {
    let x = speech();
    assert_eq!(seg_snr(&x, &x, 256).unwrap(), SEG_SNR_CEIL_DB);
    let flipped = x.scaled(-1.0);
    assert!((seg_snr(&x, &flipped, 256).unwrap() - 10.0 * 0.25f64.log10()).abs() < 1e-9);
    // Noise rescaled per frame to carry exactly the frame's signal power.
    let frame = 256;
    let n = noise(x.len(), 1.0, 4);
    let mut y = x.samples.clone();
    for (k, chunk) in x.samples.chunks(frame).enumerate() {
        let ps: f64 = chunk.iter().map(|v| v * v).sum();
        let nz = &n.samples[k * frame..k * frame + chunk.len()];
        let pn: f64 = nz.iter().map(|v| v * v).sum();
        for (i, v) in nz.iter().enumerate() {
            y[k * frame + i] += v * (ps / pn).sqrt();
        }
    }
    let y = Waveform::new(y, SAMPLE_RATE_HZ);
    assert!(seg_snr(&x, &y, frame).unwrap().abs() < 0.5);
}

#[test]
fn seg_snr_errors_and_gating() {
    let x = speech();
    let short = Waveform::new(x.samples[..100].to_vec(), SAMPLE_RATE_HZ);
    assert!(matches!(seg_snr(&x, &short, 256), Err(Error::LengthMismatch(..))));
    assert!(seg_snr(&short, &short, 256).is_err());
    let silent = Waveform::zeros(1024, SAMPLE_RATE_HZ);
    assert!(matches!(seg_snr(&silent, &silent, 256), Err(Error::SilentReference)));
    // A silent half does not count toward the average.
    let mut v = vec![0.0; 4096];
    v.extend(&x.samples[..4096]);
    let c = Waveform::new(v, SAMPLE_RATE_HZ);
    assert_eq!(seg_snr(&c, &c.scaled(-1.0), 256).unwrap(), 10.0 * 0.25f64.log10());
}

#[test]
fn stoi_analytic_cases() {
    let x = speech();
    assert!(stoi(&x, &x).unwrap() >= 0.99);
    assert!(stoi(&x, &x.scaled(0.5)).unwrap() >= 0.99);
    let s = stoi(&x, &noise(x.len(), 0.1, 7)).unwrap();
    assert!(s <= 0.3, "noise scored {s}");
}

#[test]
fn stoi_rejects_bad_inputs() {
    let x = speech();
    let other_rate = Waveform::new(x.samples.clone(), 8000);
    assert!(matches!(stoi(&other_rate, &other_rate), Err(Error::SampleRateMismatch(..))));
    let short = Waveform::new(x.samples[..4000].to_vec(), SAMPLE_RATE_HZ);
    assert!(matches!(stoi(&short, &short), Err(Error::SignalTooShort { .. })));
    assert!(stoi(&x, &short).is_err());
}

#[test]
fn stoi_does_not_rise_with_noise() {
    let x = speech();
    let n = noise(x.len(), 1.0, 21);
    let mut last = f64::INFINITY;
    for sigma in [0.0, 0.01, 0.03, 0.1, 0.3] {
        let y = x.add(&n.scaled(sigma)).unwrap();
        let s = stoi(&x, &y).unwrap();
        assert!(s <= last + 1e-12, "sigma {sigma}: {s} > {last}");
        last = s;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn wer_of_self_is_zero(r in prop::collection::vec(0usize..5, 1..8)) {
        prop_assert_eq!(wer(&t(&r), &t(&r)).unwrap().errors(), 0);
    }

    #[test]
    fn sla_ignores_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<(Transcript, Transcript)> = (0..8)
            .map(|_| (t(&[rng.gen_range(0..2)]), t(&[rng.gen_range(0..2)])))
            .collect();
        let a = sla(&rows).unwrap();
        rows.reverse();
        rows.rotate_left(3);
        prop_assert_eq!(a, sla(&rows).unwrap());
    }

    #[test]
    fn seg_snr_is_scale_invariant(c in 0.1f64..10.0, seed in any::<u64>()) {
        let x = speech();
        let y = x.add(&noise(x.len(), 0.05, seed)).unwrap();
        let a = seg_snr(&x, &y, 256).unwrap();
        let b = seg_snr(&x.scaled(c), &y.scaled(c), 256).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }
}
