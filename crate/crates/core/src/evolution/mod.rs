//! Genetic search over variable-length block sequences.
//!
//! Generation 0 is the random initial population. Each later generation
//! copies the elites, breeds the rest by tournament selection, crossover and
//! mutation, reconstructs every non-elite child at the scheduled elimination
//! rate (`rate(t − 1)` for generation `t`), and evaluates whatever has no
//! fitness yet. Fitness is cached by canonical architecture hash; failed
//! evaluations score 0, carry an error flag and are not cached.

mod operators;

pub use operators::{crossover, crossover_at, init_population, mutate, tournament, Mutation};

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::arch::{Architecture, DepthBounds, Shape};
use crate::corpus::GenerationOptions;
use crate::error::{Error, Result};
use crate::evaluation::{Evaluator, FitnessRecord};
use crate::library::BlockLibrary;
use crate::par::{self, Execution};
use crate::reconstruct::{reconstruct, EliminationSchedule, EliminationUnit, Guide, ReconstructionTrace};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub depth: DepthBounds,
    pub elitism: usize,
    pub tournament_size: usize,
    pub seed: u64,
    /// Initial elimination rate of the reconstruction schedule.
    pub rate_ori: f64,
    /// Sampling temperature for layer prediction.
    pub temperature: f64,
    pub elimination_unit: EliminationUnit,
    pub widths: Vec<u32>,
    pub input_shape: Shape,
    pub num_classes: u32,
}

impl Default for GaConfig {
    fn default() -> Self {
        let g = GenerationOptions::default();
        GaConfig {
            population: 30,
            generations: 20,
            crossover_rate: 0.9,
            mutation_rate: 0.3,
            depth: g.depth,
            elitism: 1,
            tournament_size: 2,
            seed: 0,
            rate_ori: 0.4,
            temperature: 1.0,
            elimination_unit: EliminationUnit::Block,
            widths: g.widths,
            input_shape: g.input_shape,
            num_classes: g.num_classes,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.crossover_rate) || !unit(self.mutation_rate) || !unit(self.rate_ori) {
            return Err(Error::config("ga: rates must lie in [0, 1]"));
        }
        if self.population == 0 || self.elitism > self.population || self.tournament_size == 0 {
            return Err(Error::config(
                "ga: need population >= 1, elitism <= population, tournament_size >= 1",
            ));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::config("ga: temperature must be non-negative"));
        }
        self.generation_options().validate()
    }

    pub fn generation_options(&self) -> GenerationOptions {
        GenerationOptions {
            depth: self.depth,
            widths: self.widths.clone(),
            input_shape: self.input_shape,
            num_classes: self.num_classes,
        }
    }

    pub fn schedule(&self) -> Result<EliminationSchedule> {
        EliminationSchedule::new(self.rate_ori, self.generations.max(1))
    }

    /// Evaluation budget of a search without cache hits.
    pub fn budget(&self) -> usize {
        self.population * (self.generations + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: usize,
    pub arch: Architecture,
    pub fitness: Option<FitnessRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<ReconstructionTrace>,
    pub parents: Vec<usize>,
}

impl Individual {
    pub fn score(&self) -> f64 {
        self.fitness.as_ref().map_or(0.0, |f| f.fitness)
    }

    fn predicted(&self) -> Vec<usize> {
        self.trace.as_ref().map(|t| t.eliminated.clone()).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub generation: usize,
    /// Elimination rate applied to this generation's children.
    pub rate: f64,
    pub best: f64,
    pub best_so_far: f64,
    pub mean: f64,
    /// Evaluator calls made for this generation.
    pub evaluations: usize,
    pub cache_hits: usize,
    pub failures: usize,
    pub reconstructed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub seed: u64,
    pub config: GaConfig,
    pub guided: bool,
    pub history: Vec<GenerationLog>,
    /// Fitness of every individual, per generation.
    pub fitness_history: Vec<Vec<f64>>,
    pub best_per_generation: Vec<Individual>,
    pub best: Individual,
    pub evaluator_calls: usize,
    pub cache_hits: usize,
}

impl SearchResult {
    pub fn best_fitness(&self) -> f64 {
        self.best.score()
    }

    pub fn best_so_far(&self) -> Vec<f64> {
        self.history.iter().map(|h| h.best_so_far).collect()
    }
}

struct Evaluation<'a> {
    evaluator: &'a dyn Evaluator,
    cache: HashMap<String, FitnessRecord>,
    exec: Execution,
    calls: usize,
    hits: usize,
}

impl Evaluation<'_> {
    /// Scores every individual without fitness; returns (calls, hits,
    /// failures) for this round.
    fn run(&mut self, pop: &mut [Individual]) -> (usize, usize, usize) {
        let pending: Vec<usize> = (0..pop.len()).filter(|&i| pop[i].fitness.is_none()).collect();
        let keys: Vec<String> = pending.iter().map(|&i| pop[i].arch.canonical_hash()).collect();
        let mut first: HashMap<&str, usize> = HashMap::new();
        let mut todo = Vec::new();
        for (j, k) in keys.iter().enumerate() {
            if !self.cache.contains_key(k) && !first.contains_key(k.as_str()) {
                first.insert(k, j);
                todo.push(pending[j]);
            }
        }
        let evaluator = self.evaluator;
        let records = par::map(self.exec, &todo, |&i| {
            evaluator.evaluate_or_flag(&pop[i].arch, &pop[i].predicted())
        });
        let mut fresh: HashMap<String, FitnessRecord> = HashMap::new();
        let mut failures = 0;
        for (&i, r) in todo.iter().zip(records) {
            if r.is_error() {
                failures += 1;
                fresh.insert(keys[pending.iter().position(|p| *p == i).unwrap()].clone(), r);
            } else {
                self.cache.insert(r.cache_key.clone(), r);
            }
        }
        for (j, &i) in pending.iter().enumerate() {
            let r = self.cache.get(&keys[j]).or_else(|| fresh.get(&keys[j]));
            pop[i].fitness = r.cloned();
        }
        let calls = todo.len();
        let hits = pending.len() - calls;
        self.calls += calls;
        self.hits += hits;
        (calls, hits, failures)
    }
}

fn log_generation(
    generation: usize,
    rate: f64,
    pop: &[Individual],
    best_so_far: f64,
    round: (usize, usize, usize),
    reconstructed: usize,
) -> GenerationLog {
    let scores: Vec<f64> = pop.iter().map(Individual::score).collect();
    GenerationLog {
        generation,
        rate,
        best: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        best_so_far,
        mean: scores.iter().sum::<f64>() / scores.len() as f64,
        evaluations: round.0,
        cache_hits: round.1,
        failures: round.2,
        reconstructed,
    }
}

/// Index of the fittest individual, lowest index on ties.
fn fittest(pop: &[Individual]) -> usize {
    let mut best = 0;
    for (i, ind) in pop.iter().enumerate() {
        if ind.score() > pop[best].score() {
            best = i;
        }
    }
    best
}

/// Runs the search. Without a guide (or with `rate_ori = 0`) this is a
/// plain genetic algorithm; both paths share every operator and random
/// stream.
pub fn run_search(
    cfg: &GaConfig,
    guide: Option<&Guide<'_>>,
    evaluator: &dyn Evaluator,
    exec: Execution,
) -> Result<SearchResult> {
    cfg.validate()?;
    let lib = BlockLibrary::standard();
    let opts = cfg.generation_options();
    let schedule = cfg.schedule()?;
    let mut next_id = 0;
    let mut init_rng = rng::substream(cfg.seed, &[0xa0]);
    let mut pop: Vec<Individual> = init_population(cfg.population, &lib, &opts, &mut init_rng)?
        .into_iter()
        .map(|arch| {
            next_id += 1;
            Individual {
                id: next_id - 1,
                arch,
                fitness: None,
                trace: None,
                parents: Vec::new(),
            }
        })
        .collect();
    let mut eval = Evaluation {
        evaluator,
        cache: HashMap::new(),
        exec,
        calls: 0,
        hits: 0,
    };
    let round = eval.run(&mut pop);
    let mut best = pop[fittest(&pop)].clone();
    let mut history = vec![log_generation(0, 0.0, &pop, best.score(), round, 0)];
    let mut fitness_history = vec![pop.iter().map(Individual::score).collect::<Vec<_>>()];
    let mut best_per_generation = vec![best.clone()];
    log::info!("generation 0: best {:.4}", best.score());

    for t in 1..=cfg.generations {
        let rate = schedule.rate(t - 1)?;
        let mut breed = rng::substream(cfg.seed, &[0xb0, t as u64]);

        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| pop[b].score().total_cmp(&pop[a].score()).then(a.cmp(&b)));
        let mut next: Vec<Individual> =
            order[..cfg.elitism].iter().map(|&i| pop[i].clone()).collect();

        let scores: Vec<f64> = pop.iter().map(Individual::score).collect();
        let mut children = Vec::new();
        while next.len() + children.len() < cfg.population {
            let p1 = tournament(&scores, cfg.tournament_size, &mut breed);
            let p2 = tournament(&scores, cfg.tournament_size, &mut breed);
            let (mut c1, mut c2) = if breed.random::<f64>() < cfg.crossover_rate {
                crossover(&pop[p1].arch, &pop[p2].arch, &opts, &mut breed)?
            } else {
                (pop[p1].arch.clone(), pop[p2].arch.clone())
            };
            if breed.random::<f64>() < cfg.mutation_rate {
                c1 = mutate(&c1, &lib, &opts, &mut breed)?.0;
            }
            if breed.random::<f64>() < cfg.mutation_rate {
                c2 = mutate(&c2, &lib, &opts, &mut breed)?.0;
            }
            let parents = vec![pop[p1].id, pop[p2].id];
            children.push((c1, parents.clone()));
            if next.len() + children.len() < cfg.population {
                children.push((c2, parents));
            }
        }

        let slots: Vec<usize> = (0..children.len()).collect();
        let rebuilt = par::map(exec, &slots, |&s| -> Result<(Architecture, Option<ReconstructionTrace>)> {
            let arch = &children[s].0;
            match guide {
                Some(g) => {
                    let mut r = rng::substream(cfg.seed, &[0xc0, t as u64, s as u64]);
                    let (a, trace) = reconstruct(arch, g, rate, &mut r)?;
                    Ok((a, Some(trace)))
                }
                None => Ok((arch.clone(), None)),
            }
        });
        let mut reconstructed = 0;
        for ((_, parents), r) in children.into_iter().zip(rebuilt) {
            let (arch, trace) = r?;
            if trace.as_ref().is_some_and(|t| !t.is_empty()) {
                reconstructed += 1;
            }
            next.push(Individual {
                id: next_id,
                arch,
                fitness: None,
                trace,
                parents,
            });
            next_id += 1;
        }
        pop = next;
        let round = eval.run(&mut pop);
        let gen_best = &pop[fittest(&pop)];
        if gen_best.score() > best.score() {
            best = gen_best.clone();
        }
        history.push(log_generation(t, rate, &pop, best.score(), round, reconstructed));
        fitness_history.push(pop.iter().map(Individual::score).collect());
        best_per_generation.push(gen_best.clone());
        log::info!(
            "generation {t}: rate {rate:.3} best {:.4} best-so-far {:.4} evaluations {}",
            gen_best.score(),
            best.score(),
            round.0
        );
    }

    Ok(SearchResult {
        seed: cfg.seed,
        config: cfg.clone(),
        guided: guide.is_some(),
        history,
        fitness_history,
        best_per_generation,
        best,
        evaluator_calls: eval.calls,
        cache_hits: eval.hits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSearchResult {
    pub best: Architecture,
    pub best_fitness: f64,
    pub evaluations: usize,
}

/// Samples `budget` architectures from the initial-population distribution
/// and keeps the fittest.
pub fn random_search(
    cfg: &GaConfig,
    budget: usize,
    evaluator: &dyn Evaluator,
    exec: Execution,
) -> Result<RandomSearchResult> {
    cfg.validate()?;
    if budget == 0 {
        return Err(Error::config("random search budget must be positive"));
    }
    let mut r = rng::substream(cfg.seed, &[0x5ea]);
    let archs = init_population(budget, &BlockLibrary::standard(), &cfg.generation_options(), &mut r)?;
    let scores = par::map(exec, &archs, |a| evaluator.evaluate_or_flag(a, &[]).fitness);
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(RandomSearchResult {
        best_fitness: scores[best],
        best: archs.into_iter().nth(best).expect("budget is positive"),
        evaluations: budget,
    })
}
