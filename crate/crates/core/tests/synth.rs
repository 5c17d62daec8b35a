use esc_core::synth::{all_words, baseline_compress, synth_corpus, translate_backbone, BaselineCompressor, SyntheticSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn without_fillers_source_equals_backbone() {
    let spec = SyntheticSpec {
        filler_rate: 0.0,
        ..SyntheticSpec::default()
    };
    let c = synth_corpus(&spec, 200, "train").unwrap();
    assert_eq!(c.src, c.cmp);
}

#[test]
fn dropping_fillers_recovers_the_backbone() {
    let spec = SyntheticSpec::default();
    let c = synth_corpus(&spec, 500, "train").unwrap();
    let mut with_fillers = 0;
    for (s, b) in c.src.iter().zip(&c.cmp) {
        let kept: Vec<&str> = s.split_whitespace().filter(|w| !SyntheticSpec::is_filler(w)).collect();
        assert_eq!(kept.join(" "), *b);
        with_fillers += (s != b) as usize;
    }
    assert!(with_fillers > 400);
}

#[test]
fn backbones_are_sorted_single_topic_words() {
    let spec = SyntheticSpec::default();
    let c = synth_corpus(&spec, 300, "valid").unwrap();
    for b in &c.cmp {
        let ids: Vec<usize> = b.split_whitespace().map(|w| w[1..].parse().unwrap()).collect();
        assert!((spec.backbone_min..=spec.backbone_max).contains(&ids.len()));
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert!(ids.iter().all(|i| i / spec.topic_size == ids[0] / spec.topic_size));
    }
}

#[test]
fn target_swaps_adjacent_mapped_words() {
    let spec = SyntheticSpec::default();
    let one = |i: usize| translate_backbone(&spec, &[i])[0].clone();
    let t = translate_backbone(&spec, &[0, 1, 2, 3, 4]);
    assert_eq!(t, vec![one(1), one(0), one(3), one(2), one(4)]);
    let mut mapped: Vec<String> = (0..spec.content_words()).map(one).collect();
    mapped.sort();
    mapped.dedup();
    assert_eq!(mapped.len(), spec.content_words());
}

#[test]
fn corpora_are_seeded_per_stream() {
    let spec = SyntheticSpec::default();
    assert_eq!(synth_corpus(&spec, 50, "train").unwrap(), synth_corpus(&spec, 50, "train").unwrap());
    assert_ne!(synth_corpus(&spec, 50, "train").unwrap(), synth_corpus(&spec, 50, "mono").unwrap());
    let other = SyntheticSpec { seed: 2, ..spec.clone() };
    assert_ne!(synth_corpus(&spec, 50, "train").unwrap(), synth_corpus(&other, 50, "train").unwrap());
}

#[test]
fn every_emitted_word_is_in_the_closed_vocabulary() {
    let spec = SyntheticSpec::default();
    let words = all_words(&spec);
    let c = synth_corpus(&spec, 200, "train").unwrap();
    for line in c.src.iter().chain(&c.tgt) {
        assert!(line.split_whitespace().all(|w| words.iter().any(|v| v == w)), "{line}");
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        SyntheticSpec { backbone_max: 7, ..SyntheticSpec::default() },
        SyntheticSpec { backbone_min: 0, ..SyntheticSpec::default() },
        SyntheticSpec { filler_rate: 1.5, ..SyntheticSpec::default() },
        SyntheticSpec { fillers: 0, ..SyntheticSpec::default() },
    ];
    for spec in bad {
        assert!(synth_corpus(&spec, 1, "train").is_err());
    }
    assert!(synth_corpus(&SyntheticSpec::default(), 0, "train").is_err());
}

#[test]
fn baseline_compressor_examples() {
    let s: Vec<u32> = (0..10).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(baseline_compress(&s, BaselineCompressor::AllText, 0.3, &mut rng), s);
    assert_eq!(baseline_compress(&s, BaselineCompressor::FirstEightWords, 0.3, &mut rng), (0..8).collect::<Vec<_>>());
    assert_eq!(baseline_compress(&s[..3], BaselineCompressor::FirstEightWords, 0.3, &mut rng), vec![0, 1, 2]);
    assert_eq!("F8W".parse::<BaselineCompressor>().unwrap(), BaselineCompressor::FirstEightWords);
    assert!("f9w".parse::<BaselineCompressor>().is_err());
}

proptest! {
    #[test]
    fn rand_sample_is_an_ordered_subsequence(len in 0usize..30, gamma in 0.0f64..=1.0, seed in any::<u64>()) {
        let s: Vec<usize> = (0..len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = baseline_compress(&s, BaselineCompressor::RandSample, gamma, &mut rng);
        prop_assert_eq!(out.len(), (gamma * len as f64).floor() as usize);
        prop_assert!(out.windows(2).all(|w| w[0] < w[1]));
    }
}
