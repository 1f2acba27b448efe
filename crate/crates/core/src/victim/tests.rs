use super::*;
use crate::signal::Waveform;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture() -> &'static crate::fixtures::VictimFixture {
    crate::fixtures::victim()
}

#[test]
fn corpus_is_deterministic_with_expected_lengths() {
    let vocab = Vocabulary::standard(4).unwrap();
    let a = synth_corpus(&vocab, 3, (3, 3), 5).unwrap();
    let b = synth_corpus(&vocab, 3, (3, 3), 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 12);
    assert!(a.iter().all(|u| u.waveform.len() == 12_000 && u.transcript.len() == 3));
    for (j, u) in a.iter().enumerate() {
        assert_eq!(u.transcript.0[0], j % 4);
    }
    assert_ne!(a, synth_corpus(&vocab, 3, (3, 3), 6).unwrap());
    assert!(synth_corpus(&vocab, 0, (1, 3), 0).is_err());
    assert!(synth_corpus(&vocab, 1, (0, 3), 0).is_err());
}

#[test]
fn segment_peak_sits_on_the_fundamental() {
    let vocab = Vocabulary::standard(6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = SEGMENT_LEN;
    for (k, sig) in vocab.signatures.iter().enumerate() {
        let x = synth_segment(&vocab, k, &mut rng);
        // direct DFT magnitude over the lower half band
        let mut best = (0, 0.0);
        for bin in 1..n / 4 {
            let w = std::f64::consts::TAU * bin as f64 / n as f64;
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in x.iter().enumerate() {
                re += v * (w * i as f64).cos();
                im -= v * (w * i as f64).sin();
            }
            let m = re * re + im * im;
            if m > best.1 {
                best = (bin, m);
            }
        }
        let expect = sig.f0_hz * n as f64 / SAMPLE_RATE_HZ as f64;
        assert!((best.0 as f64 - expect).abs() <= 1.0, "keyword {k}: bin {} vs {expect}", best.0);
    }
}

#[test]
fn vocabulary_validation_and_text() {
    assert!(Vocabulary::standard(3).is_err());
    let v = Vocabulary::standard(4).unwrap();
    let close = vec![
        Signature { f0_hz: 200.0, harmonics: vec![1.0] },
        Signature { f0_hz: 230.0, harmonics: vec![1.0] },
    ];
    assert!(Vocabulary::new(vec!["a".into(), "b".into()], close).is_err());
    let dup = vec![
        Signature { f0_hz: 200.0, harmonics: vec![1.0] },
        Signature { f0_hz: 300.0, harmonics: vec![1.0] },
    ];
    assert!(Vocabulary::new(vec!["a".into(), "a".into()], dup).is_err());
    let t = v.parse("delta alpha alpha").unwrap();
    assert_eq!(t, Transcript(vec![3, 0, 0]));
    assert_eq!(v.render(&t), "delta alpha alpha");
    assert_eq!(v.parse("").unwrap(), Transcript::default());
    assert!(v.parse("zulu").is_err());
}

#[test]
fn corpus_export_round_trip() {
    let vocab = Vocabulary::standard(4).unwrap();
    let corpus = synth_corpus(&vocab, 1, (1, 2), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = export_corpus(dir.path(), &corpus, &vocab).unwrap();
    let back = import_corpus(&manifest, &vocab).unwrap();
    assert_eq!(back.len(), corpus.len());
    for (a, b) in corpus.iter().zip(&back) {
        assert_eq!(a.transcript, b.transcript);
        let err = a.waveform.samples.iter().zip(&b.waveform.samples).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1.0 / 32767.0);
    }
}

#[test]
fn two_class_training_reaches_target() {
    let sigs = vec![
        Signature { f0_hz: 250.0, harmonics: vec![1.0, 0.5, 0.25] },
        Signature { f0_hz: 400.0, harmonics: vec![1.0, 0.3] },
    ];
    let vocab = Vocabulary::new(vec!["yes".into(), "no".into()], sigs).unwrap();
    let corpus = synth_corpus(&vocab, 10, (1, 2), 1).unwrap();
    let cfg = VictimConfig { epochs: 150, ..VictimConfig::default() };
    let a = train_victim(&corpus, &vocab, &cfg).unwrap();
    assert!(a.heldout_accuracy >= 0.95);
    let b = train_victim(&corpus, &vocab, &cfg).unwrap();
    assert_eq!(a.net.params(), b.net.params());
    assert!(matches!(train_victim(&[], &vocab, &cfg), Err(Error::EmptyDataset)));
    let strict = VictimConfig { epochs: 0, target_accuracy: 1.01, ..cfg };
    assert!(matches!(train_victim(&corpus, &vocab, &strict), Err(Error::UnderAccuracy { .. })));
}

#[test]
fn clean_utterances_transcribe_exactly() {
    let f = fixture();
    assert!(f.model.heldout_accuracy >= 0.95);
    let fresh = synth_corpus(&f.vocab, 5, (1, 4), 99).unwrap();
    let ok = fresh.iter().filter(|u| transcribe(&f.model, &u.waveform).unwrap() == u.transcript).count();
    assert!(ok as f64 >= 0.9 * fresh.len() as f64, "{ok}/{}", fresh.len());
}

#[test]
fn transcribe_boundaries() {
    let f = fixture();
    let silence = Waveform::zeros(2 * SEGMENT_LEN, SAMPLE_RATE_HZ);
    let t = transcribe(&f.model, &silence).unwrap();
    assert_eq!(t.0[0], t.0[1]);
    assert_eq!(t, transcribe(&f.model, &silence).unwrap());
    assert!(matches!(
        transcribe(&f.model, &Waveform::zeros(SEGMENT_LEN - 1, SAMPLE_RATE_HZ)),
        Err(Error::TooShortForSegment { .. })
    ));
    let a = &f.corpus[0].waveform;
    let b = &f.corpus[1].waveform;
    let ab = Waveform::concat(&[a.clone(), b.clone()]).unwrap();
    let mut want = transcribe(&f.model, a).unwrap().0;
    want.extend(transcribe(&f.model, b).unwrap().0);
    assert_eq!(transcribe(&f.model, &ab).unwrap().0, want);
}

#[test]
fn confident_loss_below_ln2() {
    let f = fixture();
    for u in f.corpus.iter().take(10) {
        let t = transcribe(&f.model, &u.waveform).unwrap();
        let per = f.model.segment_losses(&u.waveform, &t).unwrap();
        let (loss, _) = victim_loss_and_grad(&f.model, &u.waveform, &t).unwrap();
        assert!((loss - per.iter().sum::<f64>()).abs() < 1e-12);
        assert!(per.iter().all(|l| *l < std::f64::consts::LN_2), "{per:?}");
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let f = fixture();
    let u = f.corpus.iter().find(|u| u.transcript.len() == 3).unwrap();
    let target = Transcript(u.transcript.0.iter().map(|t| (t + 1) % 4).collect());
    let (_, g) = victim_loss_and_grad(&f.model, &u.waveform, &target).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-6;
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..32 {
        let i = rng.gen_range(0..u.waveform.len());
        let mut p = u.waveform.clone();
        let mut m = u.waveform.clone();
        p.samples[i] += h;
        m.samples[i] -= h;
        let lp = victim_loss_and_grad(&f.model, &p, &target).unwrap().0;
        let lm = victim_loss_and_grad(&f.model, &m, &target).unwrap().0;
        let fd = (lp - lm) / (2.0 * h);
        num += (fd - g.samples[i]).powi(2);
        den += g.samples[i].powi(2);
    }
    let rel = (num / den).sqrt();
    assert!(rel < 1e-4, "relative error {rel}");
}

#[test]
fn identical_segments_contribute_equally() {
    let f = fixture();
    let seg = f.corpus[0].waveform.samples[..SEGMENT_LEN].to_vec();
    let w = Waveform::new([seg.clone(), seg].concat(), SAMPLE_RATE_HZ);
    let per = f.model.segment_losses(&w, &Transcript(vec![2, 2])).unwrap();
    assert_eq!(per[0], per[1]);
    let (_, g) = victim_loss_and_grad(&f.model, &w, &Transcript(vec![2, 2])).unwrap();
    assert_eq!(g.samples[..SEGMENT_LEN], g.samples[SEGMENT_LEN..]);
    assert!(matches!(
        victim_loss_and_grad(&f.model, &w, &Transcript(vec![1])),
        Err(Error::TargetLength { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_is_nonnegative_and_consistent(idx in 0usize..80, shift in 0usize..4) {
        let f = fixture();
        let u = &f.corpus[idx % f.corpus.len()];
        let target = Transcript(u.transcript.0.iter().map(|t| (t + shift) % 4).collect());
        let per = f.model.segment_losses(&u.waveform, &target).unwrap();
        prop_assert!(per.iter().all(|l| *l >= 0.0));
        if per.iter().all(|l| *l < std::f64::consts::LN_2) {
            prop_assert_eq!(transcribe(&f.model, &u.waveform).unwrap(), target);
        }
    }
}

#[test]
fn saved_victim_reloads_identically() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    save_victim(dir.path(), &f.model).unwrap();
    let back = load_victim(dir.path()).unwrap();
    assert_eq!(back.net.params(), f.model.net.params());
    for u in f.corpus.iter().take(6) {
        assert_eq!(back.log_probs(&u.waveform).unwrap(), f.model.log_probs(&u.waveform).unwrap());
    }
}
