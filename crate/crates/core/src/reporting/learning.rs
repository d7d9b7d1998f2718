use std::collections::BTreeMap;

use crate::arch::{encode_architecture, Architecture, Shape, Vocabulary};
use crate::corpus::{CorpusRecord, GenerationOptions};
use crate::error::{Error, Result};
use crate::evaluation::MarkovTeacher;
use crate::gpt::{pad_context, probabilities, Gpt, Real};
use crate::library::instantiate_or_fallback;

/// Exact next-token distribution of the teacher generator for every prefix
/// of `arch`'s token sequence: entry `e` is P(token `e` | tokens `..e`),
/// conditioned on the sequence continuing.
///
/// The token stream hides block boundaries, sampled kinds (fallback blocks
/// look like convolutions) and widths, so this sums over every segmentation
/// of the prefix into generated blocks, weighted by the chain, the uniform
/// width draw and the depth bounds. Mass on tokens missing from `vocab` is
/// dropped and the rest renormalized.
pub fn teacher_next_tokens(
    teacher: &MarkovTeacher,
    opts: &GenerationOptions,
    arch: &Architecture,
    vocab: &Vocabulary,
) -> Result<Vec<BTreeMap<u32, f64>>> {
    opts.validate()?;
    let tokens = encode_architecture(arch, vocab)?.tokens;
    let len = tokens.len();
    let kinds = teacher.kinds();
    let nk = kinds.len();
    let (dmin, dmax) = (opts.depth.min, opts.depth.max);
    // P(depth >= n) under the uniform depth draw
    let survive = |n: usize| {
        if n > dmax {
            return 0.0;
        }
        (dmax + 1 - n.max(dmin)) as f64 / (dmax + 1 - dmin) as f64
    };
    let per_width = 1.0 / opts.widths.len() as f64;

    // alpha[pos][shape][n * nk + k]: tokens[..pos] emitted by exactly n
    // blocks, the last of kind k with output `shape` (depth factor excluded)
    let mut alpha: Vec<BTreeMap<Shape, Vec<f64>>> = vec![BTreeMap::new(); len + 1];
    let mut pred: Vec<BTreeMap<u32, f64>> = vec![BTreeMap::new(); len];
    for s in 0..len {
        let states: Vec<(Shape, Option<Vec<f64>>)> = if s == 0 {
            vec![(arch.input_shape, None)]
        } else {
            alpha[s].iter().map(|(sh, v)| (*sh, Some(v.clone()))).collect()
        };
        for (shape, state) in states {
            // next[n][j]: weight of block n+1 having kind j
            let mut next = vec![vec![0.0; nk]; dmax];
            match &state {
                None => next[0].copy_from_slice(teacher.initial()),
                Some(v) => {
                    for n in 1..dmax {
                        for k in 0..nk {
                            let a = v[n * nk + k];
                            if a == 0.0 {
                                continue;
                            }
                            for (j, t) in teacher.transition()[k].iter().enumerate() {
                                next[n][j] += a * t;
                            }
                        }
                    }
                }
            }
            for (j, kind) in kinds.iter().enumerate() {
                let started: f64 = (0..dmax).map(|n| survive(n + 1) * next[n][j]).sum();
                if started == 0.0 {
                    continue;
                }
                for &w in &opts.widths {
                    let (block, _) = instantiate_or_fallback(*kind, shape, w);
                    let toks = block
                        .layers
                        .iter()
                        .map(|l| vocab.token_of_layer(l))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    for (i, t) in toks.iter().enumerate() {
                        let e = s + i;
                        if e >= len {
                            break;
                        }
                        if let Some(t) = t {
                            *pred[e].entry(*t).or_insert(0.0) += started * per_width;
                        }
                        if *t != Some(tokens[e]) {
                            break;
                        }
                        if i + 1 == toks.len() {
                            let slot = alpha[e + 1]
                                .entry(block.out_size())
                                .or_insert_with(|| vec![0.0; (dmax + 1) * nk]);
                            for n in 0..dmax {
                                slot[(n + 1) * nk + j] += next[n][j] * per_width;
                            }
                        }
                    }
                }
            }
        }
    }
    for (e, dist) in pred.iter_mut().enumerate() {
        let total: f64 = dist.values().sum();
        if total == 0.0 {
            return Err(Error::config(format!("prefix of length {e} is impossible under the teacher")));
        }
        dist.values_mut().for_each(|p| *p /= total);
    }
    Ok(pred)
}

/// Mean KL(teacher ‖ model) over every block-final context of `records`
/// that is followed by another block. The teacher side is
/// [`teacher_next_tokens`]; the model side is its full next-token softmax.
pub fn teacher_kl<R: Real>(
    model: &Gpt<R>,
    teacher: &MarkovTeacher,
    opts: &GenerationOptions,
    records: &[CorpusRecord],
    vocab: &Vocabulary,
) -> Result<f64> {
    let k = model.config().context_len;
    let mut contexts = Vec::new();
    let mut targets = Vec::new();
    for r in records {
        let seq = encode_architecture(&r.arch, vocab)?;
        let mut pred = teacher_next_tokens(teacher, opts, &r.arch, vocab)?;
        for b in 1..r.arch.depth() {
            let e = seq.boundaries[b];
            contexts.push(pad_context(&seq.tokens[..e], k));
            targets.push(std::mem::take(&mut pred[e]));
        }
    }
    if contexts.is_empty() {
        return Err(Error::config("no block boundaries to measure"));
    }
    let mut total = 0.0;
    for (ctx, dist) in contexts.chunks(512).zip(targets.chunks(512)) {
        let refs: Vec<&[u32]> = ctx.iter().map(|c| &c[..]).collect();
        for (logits, p) in model.next_logits_batch(&refs)?.iter().zip(dist) {
            let l: Vec<f64> = logits.iter().map(|v| v.f64()).collect();
            let q = probabilities(&l, 1.0);
            total += p
                .iter()
                .map(|(&t, &pt)| pt * (pt.ln() - q[t as usize].ln()))
                .sum::<f64>();
        }
    }
    Ok(total / contexts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Canonicalization;
    use crate::corpus::{build_vocabulary, generate_teacher_corpus};
    use crate::gpt::GptConfig;

    #[test]
    fn uniform_model_kl_is_cross_entropy_gap() {
        let teacher = MarkovTeacher::default_library();
        let opts = GenerationOptions::default();
        let recs = generate_teacher_corpus(&teacher, 5, 3, &opts).unwrap();
        let vocab = build_vocabulary(&recs, Canonicalization::Full).unwrap();
        let cfg = GptConfig { n_layers: 1, d_model: 8, d_ff: 8, n_heads: 1, ..Default::default() };
        let mut m = Gpt::<f64>::new(cfg, vocab.size(), 0).unwrap();
        let b_out = m.layout().b_out.clone();
        let w_out = m.layout().w_out.clone();
        m.params_mut()[w_out].iter_mut().for_each(|v| *v = 0.0);
        m.params_mut()[b_out].iter_mut().for_each(|v| *v = 0.0);
        let ln_v = (vocab.size() as f64).ln();
        let mut want = 0.0;
        let mut n = 0;
        for r in &recs {
            let seq = encode_architecture(&r.arch, &vocab).unwrap();
            let pred = teacher_next_tokens(&teacher, &opts, &r.arch, &vocab).unwrap();
            assert_eq!(pred.len(), seq.tokens.len());
            for (e, p) in pred.iter().enumerate() {
                assert!((p.values().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(p[&seq.tokens[e]] > 0.0);
            }
            for b in 1..r.arch.depth() {
                let p = &pred[seq.boundaries[b]];
                want += p.values().map(|pt| pt * (pt.ln() + ln_v)).sum::<f64>();
                n += 1;
            }
        }
        let got = teacher_kl(&m, &teacher, &opts, &recs, &vocab).unwrap();
        assert!((got - want / n as f64).abs() < 1e-10);
        assert!(got > 0.0);
    }
}
