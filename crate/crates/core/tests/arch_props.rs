use std::collections::HashSet;

use nas_core::arch::{
    decode_architecture, encode_architecture, window_output_len, ArchError, Architecture,
    BlockKind, Canonicalization, LayerDescriptor, PoolType, Shape, Vocabulary, Window,
};
use nas_core::corpus::{random_architecture, GenerationOptions};
use nas_core::rng::seeded;
use proptest::prelude::*;

/// Counts window placements by sliding one step at a time.
fn enumerate_positions(input: u32, k: u32, s: u32, pb: u32, pa: u32, d: u32) -> u32 {
    let padded = (input + pb + pa) as i64;
    let span = d as i64 * (k as i64 - 1) + 1;
    let mut count = 0;
    let mut start = 0i64;
    while start + span <= padded {
        count += 1;
        start += s as i64;
    }
    count
}

fn arch(seed: u64, widths: Vec<u32>) -> Architecture {
    let opts = GenerationOptions { widths, ..Default::default() };
    random_architecture(&BlockKind::LIBRARY, &opts, &mut seeded(seed)).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_decode_round_trips(seed in any::<u64>(), wide in any::<bool>()) {
        let widths = if wide { vec![16, 32, 64] } else { vec![32] };
        let a = arch(seed, widths);
        let vocab = Vocabulary::from_architectures([&a], Canonicalization::Full).unwrap();
        let seq = encode_architecture(&a, &vocab).unwrap();
        prop_assert_eq!(seq.len(), a.layer_count());
        prop_assert_eq!(seq.boundaries.len(), a.depth());
        let back = decode_architecture(&seq, &vocab, a.input_shape, a.num_classes).unwrap();
        prop_assert_eq!(back.kinds(), a.kinds());
        prop_assert_eq!(back.output_shape(), a.output_shape());
        prop_assert_eq!(
            back.canonical_keys(Canonicalization::Full).unwrap(),
            a.canonical_keys(Canonicalization::Full).unwrap()
        );
        prop_assert_eq!(encode_architecture(&back, &vocab).unwrap(), seq);
        back.validate().unwrap();
        prop_assert_eq!(back, a);
    }

    #[test]
    fn vocabulary_is_a_bijection(s1 in any::<u64>(), s2 in any::<u64>()) {
        for mode in [Canonicalization::Full, Canonicalization::ChannelsOnly] {
            let archs = [arch(s1, vec![16, 32]), arch(s2, vec![32, 48])];
            let vocab = Vocabulary::from_architectures(archs.iter(), mode).unwrap();
            let keys = vocab.keys();
            let distinct: HashSet<String> = keys.iter().map(|k| k.to_string()).collect();
            prop_assert_eq!(distinct.len(), keys.len());
            for k in keys {
                let t = vocab.token(k).unwrap();
                prop_assert!(!Vocabulary::is_special(t));
                prop_assert_eq!(vocab.key(t), Some(k));
            }
            for a in &archs {
                for key in a.canonical_keys(mode).unwrap() {
                    prop_assert!(vocab.token(&key).is_some());
                }
            }
        }
    }

    #[test]
    fn window_length_matches_enumeration(
        input in 1u32..64, k in 1u32..8, s in 1u32..5,
        pb in 0u32..4, pa in 0u32..4, d in 1u32..4,
    ) {
        let want = enumerate_positions(input, k, s, pb, pa, d);
        let got = window_output_len(input, k, s, pb, pa, d).unwrap_or(0);
        prop_assert_eq!(got, want);
    }

    #[test]
    fn conv_and_pool_shapes_match_enumeration(
        h in 1u32..40, w in 1u32..40, kh in 1u32..6, kw in 1u32..6,
        sh in 1u32..4, sw in 1u32..4, pad in proptest::array::uniform4(0u32..3),
        d in 1u32..3, out in 1u32..64, pool in any::<bool>(),
    ) {
        let window = Window {
            kernel: (kh, kw),
            stride: (sh, sw),
            padding: pad,
            dilation: d,
            bias_used: false,
        };
        let input = Shape::new(8, h, w);
        let layer = if pool {
            LayerDescriptor::pool(3, input, PoolType::Max, window)
        } else {
            LayerDescriptor::conv(3, input, out, window, 1)
        };
        let eh = enumerate_positions(h, kh, sh, pad[0], pad[1], d);
        let ew = enumerate_positions(w, kw, sw, pad[2], pad[3], d);
        match layer {
            Ok(l) => {
                prop_assert_eq!(l.out_size.height, eh);
                prop_assert_eq!(l.out_size.width, ew);
                prop_assert_eq!(l.out_size.channels, if pool { 8 } else { out });
            }
            Err(e) => {
                prop_assert!(eh == 0 || ew == 0, "unexpected {e}");
                let is_shape_error = matches!(e, ArchError::Shape { index: 3, .. });
                prop_assert!(is_shape_error);
            }
        }
    }
}

#[test]
fn unknown_layers_and_tokens_are_rejected() {
    let a = arch(1, vec![32]);
    let b = arch(2, vec![64]);
    let vocab = Vocabulary::from_architectures([&a], Canonicalization::Full).unwrap();
    let missing = b
        .canonical_keys(Canonicalization::Full)
        .unwrap()
        .iter()
        .any(|k| vocab.token(k).is_none());
    if missing {
        assert!(matches!(
            encode_architecture(&b, &vocab),
            Err(ArchError::UnknownLayer { .. })
        ));
    }
    let mut seq = encode_architecture(&a, &vocab).unwrap();
    seq.tokens[0] = vocab.size() as u32 + 5;
    assert!(matches!(
        decode_architecture(&seq, &vocab, a.input_shape, a.num_classes),
        Err(ArchError::UnknownToken { index: 0, .. })
    ));
}

#[test]
fn corpus_of_a_thousand_round_trips() {
    let archs: Vec<Architecture> = (0..1000).map(|s| arch(s, vec![16, 32, 64])).collect();
    let vocab = Vocabulary::from_architectures(archs.iter(), Canonicalization::Full).unwrap();
    for a in &archs {
        let seq = encode_architecture(a, &vocab).unwrap();
        let back = decode_architecture(&seq, &vocab, a.input_shape, a.num_classes).unwrap();
        assert_eq!(encode_architecture(&back, &vocab).unwrap(), seq);
        assert_eq!(&back, a);
    }
}
