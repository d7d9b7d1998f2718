use rand::Rng as _;

use crate::arch::{Architecture, Block, BlockKind};
use crate::corpus::{random_architecture, GenerationOptions};
use crate::error::Result;
use crate::library::{instantiate_or_fallback, rechain, BlockLibrary};
use crate::rng::Rng;

/// Random architectures: uniform depth within bounds, kinds uniform over the
/// library.
pub fn init_population(
    count: usize,
    lib: &BlockLibrary,
    opts: &GenerationOptions,
    rng: &mut Rng,
) -> Result<Vec<Architecture>> {
    opts.validate()?;
    let kinds = lib.kinds();
    (0..count)
        .map(|_| Ok(random_architecture(&kinds, opts, rng)?.0))
        .collect()
}

fn rebuild(blocks: Vec<Block>, like: &Architecture) -> Result<Architecture> {
    Ok(rechain(blocks, like.input_shape, like.num_classes)?.0)
}

/// Trims to `max` or repeats the last block up to `min`.
fn fit_depth(mut blocks: Vec<Block>, opts: &GenerationOptions) -> Vec<Block> {
    blocks.truncate(opts.depth.max);
    while blocks.len() < opts.depth.min {
        let last = blocks.last().cloned().expect("child keeps at least one block");
        blocks.push(last);
    }
    blocks
}

/// Single-point crossover with cut points drawn independently on each
/// parent; tails are swapped.
pub fn crossover(
    a: &Architecture,
    b: &Architecture,
    opts: &GenerationOptions,
    rng: &mut Rng,
) -> Result<(Architecture, Architecture)> {
    let ca = rng.random_range(0..=a.depth());
    let cb = rng.random_range(0..=b.depth());
    crossover_at(a, b, ca, cb, opts)
}

pub fn crossover_at(
    a: &Architecture,
    b: &Architecture,
    ca: usize,
    cb: usize,
    opts: &GenerationOptions,
) -> Result<(Architecture, Architecture)> {
    let splice = |head: &[Block], tail: &[Block]| -> Vec<Block> { head.iter().chain(tail).cloned().collect() };
    let c1 = splice(&a.blocks[..ca], &b.blocks[cb..]);
    let c2 = splice(&b.blocks[..cb], &a.blocks[ca..]);
    // both cuts at the far ends can leave one child empty; it takes a parent
    let c1 = if c1.is_empty() { a.blocks.clone() } else { c1 };
    let c2 = if c2.is_empty() { b.blocks.clone() } else { c2 };
    Ok((
        rebuild(fit_depth(c1, opts), a)?,
        rebuild(fit_depth(c2, opts), b)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    Insert,
    Delete,
    Replace,
}

/// Applies one of insert / delete / replace, drawn uniformly; actions that
/// would leave the depth bounds are re-drawn. A replacement always changes
/// the block kind.
pub fn mutate(
    arch: &Architecture,
    lib: &BlockLibrary,
    opts: &GenerationOptions,
    rng: &mut Rng,
) -> Result<(Architecture, Mutation)> {
    let kinds = lib.kinds();
    let depth = arch.depth();
    let action = loop {
        let a = match rng.random_range(0..3) {
            0 => Mutation::Insert,
            1 => Mutation::Delete,
            _ => Mutation::Replace,
        };
        let ok = match a {
            Mutation::Insert => depth < opts.depth.max,
            Mutation::Delete => depth > opts.depth.min && depth > 1,
            Mutation::Replace => kinds.len() > 1,
        };
        if ok {
            break a;
        }
    };
    let mut blocks = arch.blocks.clone();
    match action {
        Mutation::Insert => {
            let at = rng.random_range(0..=depth);
            let kind = kinds[rng.random_range(0..kinds.len())];
            let width = opts.draw_width(rng);
            let input = if at == 0 { arch.input_shape } else { blocks[at - 1].out_size() };
            blocks.insert(at, instantiate_or_fallback(kind, input, width).0);
        }
        Mutation::Delete => {
            blocks.remove(rng.random_range(0..depth));
        }
        Mutation::Replace => {
            let at = rng.random_range(0..depth);
            let current = blocks[at].kind;
            let others: Vec<BlockKind> = kinds.iter().copied().filter(|k| *k != current).collect();
            let kind = others[rng.random_range(0..others.len())];
            let input = blocks[at].in_size();
            blocks[at] = instantiate_or_fallback(kind, input, blocks[at].width).0;
        }
    }
    Ok((rebuild(blocks, arch)?, action))
}

/// Index of the fittest of `size` uniform draws (with replacement); ties go
/// to the lower index.
pub fn tournament(fitness: &[f64], size: usize, rng: &mut Rng) -> usize {
    let mut best = rng.random_range(0..fitness.len());
    for _ in 1..size.max(1) {
        let c = rng.random_range(0..fitness.len());
        if fitness[c] > fitness[best] || (fitness[c] == fitness[best] && c < best) {
            best = c;
        }
    }
    best
}
