use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{CorpusRecord, Source};
use crate::arch::{Architecture, BlockKind, DepthBounds, Shape};
use crate::error::{Error, Result};
use crate::evaluation::{surrogate_fitness, MarkovTeacher, SurrogateMode};
use crate::library::{assemble, BlockLibrary, Repair};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationOptions {
    pub depth: DepthBounds,
    /// Output widths drawn uniformly for width-parameterized blocks.
    pub widths: Vec<u32>,
    pub input_shape: Shape,
    pub num_classes: u32,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions {
            depth: DepthBounds::default(),
            widths: vec![32],
            input_shape: Shape::new(3, 32, 32),
            num_classes: 10,
        }
    }
}

impl GenerationOptions {
    pub fn validate(&self) -> Result<()> {
        if self.depth.min == 0 || self.depth.min > self.depth.max {
            return Err(Error::config("depth bounds must satisfy 1 <= min <= max"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("widths must be a non-empty list of positive values"));
        }
        if !self.input_shape.is_positive() || self.num_classes == 0 {
            return Err(Error::config("input shape and class count must be positive"));
        }
        Ok(())
    }

    pub fn draw_width(&self, rng: &mut Rng) -> u32 {
        self.widths[rng.random_range(0..self.widths.len())]
    }

    pub fn draw_depth(&self, rng: &mut Rng) -> usize {
        rng.random_range(self.depth.min..=self.depth.max)
    }
}

/// Uniform depth, kinds uniform over `kinds`, widths uniform over the
/// configured set.
pub fn random_architecture(
    kinds: &[BlockKind],
    opts: &GenerationOptions,
    rng: &mut Rng,
) -> Result<(Architecture, Vec<Repair>)> {
    if kinds.is_empty() {
        return Err(Error::config("no block kinds to draw from"));
    }
    let depth = opts.draw_depth(rng);
    let spec: Vec<(BlockKind, u32)> = (0..depth)
        .map(|_| {
            let k = kinds[rng.random_range(0..kinds.len())];
            (k, opts.draw_width(rng))
        })
        .collect();
    Ok(assemble(&spec, opts.input_shape, opts.num_classes)?)
}

/// Architectures composed from library blocks.
pub fn build_finetune_corpus(
    lib: &BlockLibrary,
    count: usize,
    seed: u64,
    opts: &GenerationOptions,
) -> Result<Vec<CorpusRecord>> {
    if count == 0 {
        return Err(Error::config("finetune corpus count must be at least 1"));
    }
    opts.validate()?;
    let kinds = lib.kinds();
    let mut rng = rng::substream(seed, &[0xf1]);
    (0..count)
        .map(|id| {
            let (arch, _) = random_architecture(&kinds, opts, &mut rng)?;
            Ok(CorpusRecord {
                id,
                source: Source::FinetuneLibrary,
                fitness: None,
                arch,
            })
        })
        .collect()
}

/// Architectures whose kind sequences are sampled from the teacher chain.
/// Records carry their full-mode surrogate fitness.
pub fn generate_teacher_corpus(
    teacher: &MarkovTeacher,
    n_archs: usize,
    seed: u64,
    opts: &GenerationOptions,
) -> Result<Vec<CorpusRecord>> {
    opts.validate()?;
    let mut rng = rng::substream(seed, &[0x7e]);
    (0..n_archs)
        .map(|id| {
            let depth = opts.draw_depth(&mut rng);
            let kinds = teacher.sample_kinds(depth, &mut rng);
            let spec: Vec<(BlockKind, u32)> =
                kinds.iter().map(|k| (*k, opts.draw_width(&mut rng))).collect();
            let (arch, _) = assemble(&spec, opts.input_shape, opts.num_classes)?;
            let fitness = surrogate_fitness(teacher, &arch, SurrogateMode::Full).ok();
            Ok(CorpusRecord {
                id,
                source: Source::Synthetic,
                fitness,
                arch,
            })
        })
        .collect()
}
