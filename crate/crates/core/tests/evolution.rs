mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use nas_core::arch::{Architecture, BlockKind};
use nas_core::corpus::GenerationOptions;
use nas_core::evaluation::{
    EvalError, EvalMode, Evaluator, FitnessRecord, Provenance, SurrogateEvaluator, SurrogateMode,
};
use nas_core::evolution::{
    crossover, crossover_at, init_population, mutate, random_search, run_search, tournament,
    GaConfig, Mutation,
};
use nas_core::library::BlockLibrary;
use nas_core::par::Execution;
use nas_core::reconstruct::Guide;
use nas_core::rng::seeded;
use proptest::prelude::*;
use rand::Rng as _;

/// Constant fitness; counts calls.
struct Flat {
    calls: AtomicUsize,
}

impl Evaluator for Flat {
    fn evaluate(&self, arch: &Architecture, _: &[usize]) -> Result<FitnessRecord, EvalError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(FitnessRecord {
            fitness: 0.5,
            param_count: arch.param_count(),
            provenance: Provenance::Surrogate,
            mode: EvalMode::Full,
            wall_ms: 0,
            error: None,
            cache_key: arch.canonical_hash(),
        })
    }

    fn provenance(&self) -> Provenance {
        Provenance::Surrogate
    }

    fn mode(&self) -> EvalMode {
        EvalMode::Full
    }
}

fn small_ga(seed: u64) -> GaConfig {
    GaConfig {
        population: 10,
        generations: 5,
        seed,
        ..Default::default()
    }
}

fn surrogate() -> SurrogateEvaluator {
    SurrogateEvaluator::new(common::fixture().teacher, SurrogateMode::Full)
}

fn population(n: usize, seed: u64) -> Vec<Architecture> {
    init_population(n, &BlockLibrary::standard(), &GenerationOptions::default(), &mut seeded(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn crossover_children_are_valid_spliced_parents(seed in any::<u64>()) {
        let opts = GenerationOptions::default();
        let p = population(2, seed);
        let (a, b) = (&p[0], &p[1]);
        let mut r = seeded(seed ^ 1);
        let ca = r.random_range(0..=a.depth());
        let cb = r.random_range(0..=b.depth());
        let (c1, c2) = crossover_at(a, b, ca, cb, &opts).unwrap();
        for c in [&c1, &c2] {
            c.validate().unwrap();
            prop_assert!(opts.depth.contains(c.depth()));
        }
        // the spliced prefix comes from the first parent unchanged
        let head = &c1.kinds()[..ca.min(c1.depth())];
        prop_assert_eq!(head, &a.kinds()[..head.len()]);
        let (d1, d2) = crossover(a, b, &opts, &mut seeded(seed)).unwrap();
        d1.validate().unwrap();
        d2.validate().unwrap();
    }

    #[test]
    fn mutation_changes_exactly_one_block(seed in any::<u64>()) {
        let opts = GenerationOptions::default();
        let parent = &population(1, seed)[0];
        let (child, action) = mutate(parent, &BlockLibrary::standard(), &opts, &mut seeded(seed)).unwrap();
        child.validate().unwrap();
        prop_assert!(opts.depth.contains(child.depth()));
        let (p, c) = (parent.kinds(), child.kinds());
        let prefix = p.iter().zip(&c).take_while(|(x, y)| x == y).count();
        match action {
            Mutation::Insert => {
                prop_assert_eq!(c.len(), p.len() + 1);
                // downstream blocks may fall back to a plain convolution
                let tail_ok = p[prefix..].iter().zip(&c[prefix + 1..]).all(|(x, y)| x == y || *y == BlockKind::Conv);
                prop_assert!(tail_ok);
            }
            Mutation::Delete => {
                prop_assert_eq!(c.len() + 1, p.len());
                let tail_ok = p[prefix + 1..].iter().zip(&c[prefix..]).all(|(x, y)| x == y || *y == BlockKind::Conv);
                prop_assert!(tail_ok);
            }
            Mutation::Replace => {
                prop_assert_eq!(c.len(), p.len());
                prop_assert!(prefix < p.len());
                let tail_ok = p[prefix + 1..].iter().zip(&c[prefix + 1..]).all(|(x, y)| x == y || *y == BlockKind::Conv);
                prop_assert!(tail_ok);
            }
        }
    }

    #[test]
    fn tournament_returns_fittest_draw_with_lowest_index_on_ties(
        fitness in proptest::collection::vec(0u8..4, 1..12),
        size in 1usize..5,
        seed in any::<u64>(),
    ) {
        let f: Vec<f64> = fitness.iter().map(|&v| v as f64).collect();
        let mut oracle = seeded(seed);
        let draws: Vec<usize> = (0..size).map(|_| oracle.random_range(0..f.len())).collect();
        let want = *draws
            .iter()
            .max_by(|&&x, &&y| f[x].total_cmp(&f[y]).then(y.cmp(&x)))
            .unwrap();
        prop_assert_eq!(tournament(&f, size, &mut seeded(seed)), want);
    }
}

#[test]
fn initial_depths_are_uniform() {
    let opts = GenerationOptions::default();
    let pop = population(3300, 21);
    let bins = opts.depth.max - opts.depth.min + 1;
    let mut counts = vec![0usize; bins];
    for a in &pop {
        counts[a.depth() - opts.depth.min] += 1;
    }
    let expected = pop.len() as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // upper 0.1% point of chi-square with 10 degrees of freedom
    assert!(chi2 < 29.59, "chi2 {chi2} counts {counts:?}");
}

#[test]
fn search_logs_every_generation_and_keeps_the_best() {
    let ev = surrogate();
    let cfg = small_ga(2);
    let r = run_search(&cfg, None, &ev, Execution::Parallel).unwrap();
    assert_eq!(r.history.len(), cfg.generations + 1);
    assert_eq!(r.fitness_history.len(), cfg.generations + 1);
    assert!(r.fitness_history.iter().all(|g| g.len() == cfg.population));
    let bsf = r.best_so_far();
    assert!(bsf.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(*bsf.last().unwrap(), r.best_fitness());
    for (g, scores) in r.fitness_history.iter().enumerate() {
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(top, r.history[g].best);
        assert!(top <= r.best_fitness());
    }
    // elitism carries the best forward
    assert!(r.history.windows(2).all(|w| w[1].best >= w[0].best));
}

#[test]
fn evaluator_calls_match_the_budget_accounting() {
    let flat = Flat { calls: AtomicUsize::new(0) };
    let cfg = small_ga(3);
    let r = run_search(&cfg, None, &flat, Execution::Sequential).unwrap();
    assert_eq!(r.evaluator_calls, flat.calls.load(Ordering::SeqCst));
    let pending = cfg.population + cfg.generations * (cfg.population - cfg.elitism);
    assert_eq!(r.evaluator_calls + r.cache_hits, pending);
    assert!(r.evaluator_calls <= cfg.budget());
    let per_gen: usize = r.history.iter().map(|h| h.evaluations).sum();
    assert_eq!(per_gen, r.evaluator_calls);
}

#[test]
fn constant_fitness_gives_a_flat_curve() {
    let flat = Flat { calls: AtomicUsize::new(0) };
    let r = run_search(&small_ga(4), None, &flat, Execution::Parallel).unwrap();
    assert!(r.best_so_far().iter().all(|&b| b == 0.5));
    assert!(r.history.iter().all(|h| h.mean == 0.5));
}

#[test]
fn zero_rate_guided_search_equals_plain_search() {
    let f = common::fixture();
    let guide = Guide::new(&f.gpt, &f.fcn, &f.vocab).unwrap();
    let ev = SurrogateEvaluator::new(f.teacher.clone(), SurrogateMode::Full);
    let cfg = GaConfig { rate_ori: 0.0, ..small_ga(5) };
    let guided = run_search(&cfg, Some(&guide), &ev, Execution::Parallel).unwrap();
    let plain = run_search(&cfg, None, &ev, Execution::Parallel).unwrap();
    assert_eq!(guided.fitness_history, plain.fitness_history);
    assert_eq!(guided.best.arch, plain.best.arch);
    assert!(guided.history.iter().all(|h| h.reconstructed == 0));
}

#[test]
fn guided_search_reconstructs_and_is_execution_independent() {
    let f = common::fixture();
    let guide = Guide::new(&f.gpt, &f.fcn, &f.vocab).unwrap();
    let ev = SurrogateEvaluator::new(f.teacher.clone(), SurrogateMode::Full);
    let cfg = small_ga(6);
    let seq = run_search(&cfg, Some(&guide), &ev, Execution::Sequential).unwrap();
    let par = run_search(&cfg, Some(&guide), &ev, Execution::Parallel).unwrap();
    assert_eq!(seq, par);
    assert!(seq.history.iter().map(|h| h.reconstructed).sum::<usize>() > 0);
    let rates: Vec<f64> = seq.history.iter().map(|h| h.rate).collect();
    assert_eq!(rates[1], cfg.rate_ori);
}

#[test]
fn random_search_spends_its_budget() {
    let flat = Flat { calls: AtomicUsize::new(0) };
    let r = random_search(&small_ga(7), 25, &flat, Execution::Parallel).unwrap();
    assert_eq!(r.evaluations, 25);
    assert_eq!(flat.calls.load(Ordering::SeqCst), 25);
    assert!(random_search(&small_ga(7), 0, &flat, Execution::Parallel).is_err());

    let ev = surrogate();
    let a = random_search(&small_ga(8), 40, &ev, Execution::Sequential).unwrap();
    let b = random_search(&small_ga(8), 40, &ev, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(ev.evaluate(&a.best, &[]).unwrap().fitness, a.best_fitness);
}

#[test]
fn invalid_ga_settings_are_rejected() {
    let ev = surrogate();
    for cfg in [
        GaConfig { population: 0, ..small_ga(0) },
        GaConfig { elitism: 11, ..small_ga(0) },
        GaConfig { crossover_rate: 1.5, ..small_ga(0) },
        GaConfig { temperature: -1.0, ..small_ga(0) },
    ] {
        assert!(run_search(&cfg, None, &ev, Execution::Sequential).is_err());
    }
}
