mod common;

use nas_core::arch::{Architecture, Block, BlockKind};
use nas_core::corpus::GenerationOptions;
use nas_core::library::Repair;
use nas_core::reconstruct::{draw_eliminations, reconstruct, EliminationSchedule, EliminationUnit, Guide};
use nas_core::reporting::ablation_architectures;
use nas_core::rng::{seeded, substream};
use rand::Rng as _;

fn archs(n: usize, seed: u64) -> Vec<Architecture> {
    ablation_architectures(n, &GenerationOptions::default(), seed).unwrap()
}

/// Layer ids are global and shift when an earlier block changes length.
fn without_ids(b: &Block) -> Block {
    let mut b = b.clone();
    b.layers.iter_mut().for_each(|l| l.id = 0);
    b
}

#[test]
fn schedule_matches_linear_decay_at_every_generation() {
    let s = EliminationSchedule::new(0.4, 20).unwrap();
    for t in 0..=20 {
        let want = 0.4 * (1.0 - t as f64 / 20.0);
        assert!((s.rate(t).unwrap() - want).abs() < 1e-12, "t={t}");
    }
    let rates: Vec<f64> = (0..=20).map(|t| s.rate(t).unwrap()).collect();
    assert!(rates.windows(2).all(|w| w[1] < w[0]));
    assert!(s.rate(21).is_err());
    assert!(EliminationSchedule::new(-0.1, 5).is_err());
}

#[test]
fn block_elimination_counts_are_binomial() {
    let population = archs(200, 3);
    let blocks: usize = population.iter().map(Architecture::depth).sum();
    for rate in [0.1, 0.4, 0.8] {
        let mut rng = seeded(17);
        let hits: usize = population
            .iter()
            .map(|a| draw_eliminations(a, rate, EliminationUnit::Block, &mut rng).len())
            .sum();
        let mean = blocks as f64 * rate;
        let sd = (blocks as f64 * rate * (1.0 - rate)).sqrt();
        assert!((hits as f64 - mean).abs() < 3.0 * sd, "rate {rate}: {hits} vs {mean}");
    }
}

#[test]
fn layer_elimination_hits_blocks_with_any_selected_layer() {
    let population = archs(200, 4);
    let rate = 0.1;
    let mut rng = seeded(5);
    let (mut mean, mut var, mut hits) = (0.0, 0.0, 0usize);
    for a in &population {
        for b in &a.blocks {
            let p = 1.0 - (1.0 - rate as f64).powi(b.layers.len() as i32);
            mean += p;
            var += p * (1.0 - p);
        }
        hits += draw_eliminations(a, rate, EliminationUnit::Layer, &mut rng).len();
    }
    assert!((hits as f64 - mean).abs() < 3.0 * var.sqrt(), "{hits} vs {mean}");
}

#[test]
fn elimination_draws_consume_the_same_stream_at_any_rate() {
    let a = &archs(1, 6)[0];
    for rate in [0.0, 0.3, 1.0] {
        let mut r = seeded(9);
        draw_eliminations(a, rate, EliminationUnit::Block, &mut r);
        let mut reference = seeded(9);
        draw_eliminations(a, 0.5, EliminationUnit::Block, &mut reference);
        assert_eq!(r.random::<u64>(), reference.random::<u64>());
    }
}

#[test]
fn reconstruction_invariants() {
    let f = common::fixture();
    let guide = Guide::new(&f.gpt, &f.fcn, &f.vocab).unwrap();
    for (i, a) in archs(20, 7).iter().enumerate() {
        let mut r = seeded(i as u64);
        let (same, trace) = reconstruct(a, &guide, 0.0, &mut r).unwrap();
        assert_eq!(&same, a);
        assert!(trace.is_empty());

        for rate in [0.3, 1.0] {
            let mut r = substream(11, &[i as u64]);
            let (b, trace) = reconstruct(a, &guide, rate, &mut r).unwrap();
            b.validate().unwrap();
            assert_eq!(b.depth(), a.depth());
            assert_eq!(b.input_shape, a.input_shape);
            assert_eq!(b.num_classes, a.num_classes);
            assert!(trace.eliminated.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(trace.tokens.len(), trace.eliminated.len());
            assert_eq!(trace.kinds.len(), trace.eliminated.len());
            if rate == 1.0 {
                assert_eq!(trace.eliminated, (0..a.depth()).collect::<Vec<_>>());
            }
            for (j, (old, new)) in a.blocks.iter().zip(&b.blocks).enumerate() {
                if trace.eliminated.contains(&j) {
                    continue;
                }
                match trace.repairs.iter().find(|rp| rp.index() == j) {
                    None => assert_eq!(without_ids(old), without_ids(new), "untouched block {j} changed"),
                    Some(Repair::Reshaped { kind, .. }) => {
                        assert_eq!(*kind, old.kind);
                        assert_eq!(new.kind, old.kind);
                        assert_eq!(new.width, old.width);
                    }
                    Some(Repair::Fallback { .. }) => assert_eq!(new.kind, BlockKind::Conv),
                }
            }
            for t in &trace.tokens {
                assert!(f.vocab.key(*t).is_some());
            }
        }
    }
}

#[test]
fn reconstruction_is_reproducible_and_rejects_bad_rates() {
    let f = common::fixture();
    let guide = Guide::new(&f.gpt, &f.fcn, &f.vocab).unwrap().with_temperature(0.7);
    let a = &archs(1, 8)[0];
    let run = || reconstruct(a, &guide, 0.5, &mut seeded(3)).unwrap();
    assert_eq!(run(), run());
    assert!(reconstruct(a, &guide, 1.2, &mut seeded(3)).is_err());
    assert!(reconstruct(a, &guide, f64::NAN, &mut seeded(3)).is_err());
}

#[test]
fn guide_rejects_mismatched_vocabularies() {
    let f = common::fixture();
    let small = nas_core::gpt::Gpt::<f32>::new(f.gpt.config().clone(), f.vocab.size() - 1, 0).unwrap();
    assert!(Guide::new(&small, &f.fcn, &f.vocab).is_err());
}
