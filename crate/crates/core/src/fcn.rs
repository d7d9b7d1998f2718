//! Layer-to-block selector.
//!
//! A fully connected classifier over one-hot token identities: the `k`
//! context tokens and the predicted layer token are one-hot encoded,
//! concatenated, and mapped through ReLU hidden layers to one logit per
//! library kind. The first layer is evaluated as a sum of weight rows, one
//! per input slot, instead of a dense product with the one-hot vector.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arch::{encode_architecture, BlockKind, Vocabulary};
use crate::corpus::CorpusRecord;
use crate::error::{Error, Result};
use crate::gpt::real::{add_col_sums, add_row_bias, gemm, log_sum_exp, softmax_in_place, Op};
use crate::gpt::{argmax, pad_context, Adam};
use crate::library::BlockLibrary;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FcnConfig {
    pub context_len: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FcnConfig {
    fn default() -> Self {
        FcnConfig {
            context_len: 10,
            hidden: vec![128, 128],
            lr: 1e-3,
            epochs: 20,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl FcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_len == 0 || self.batch_size == 0 {
            return Err(Error::config("fcn: context_len and batch_size must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("fcn: hidden widths must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("fcn: lr must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One training example: preceding layer tokens, the layer token, and the
/// kind of the block that contains the layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcnExample {
    pub context: Vec<u32>,
    pub token: u32,
    pub label: BlockKind,
}

/// Examples for every layer position of every record.
pub fn fcn_examples(
    records: &[CorpusRecord],
    vocab: &Vocabulary,
    context_len: usize,
) -> Result<Vec<FcnExample>> {
    let mut out = Vec::new();
    for r in records {
        let seq = encode_architecture(&r.arch, vocab)?;
        for (b, block) in r.arch.blocks.iter().enumerate() {
            let start = seq.boundaries[b];
            for t in start..start + block.layers.len() {
                out.push(FcnExample {
                    context: pad_context(&seq.tokens[..t], context_len),
                    token: seq.tokens[t],
                    label: block.kind,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcnModel {
    config: FcnConfig,
    vocab_size: usize,
    classes: Vec<BlockKind>,
    params: Vec<f64>,
}

struct DenseRange {
    w: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
    fan_in: usize,
    fan_out: usize,
}

struct Activations {
    /// Post-ReLU outputs of each hidden layer.
    hidden: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl FcnModel {
    /// Randomly initialized model with one output per library entry, in
    /// library order. Output columns are seeded per kind, so a permuted
    /// library yields the same columns in permuted order.
    pub fn new(config: FcnConfig, vocab_size: usize, library: &BlockLibrary) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 || library.is_empty() {
            return Err(Error::config("fcn: empty vocabulary or library"));
        }
        let classes = library.kinds();
        let mut model = FcnModel {
            params: Vec::new(),
            config,
            vocab_size,
            classes,
        };
        let layers = model.dense_layers();
        model.params = vec![0.0; layers.last().map_or(0, |l| l.b.end)];
        let n_hidden = layers.len() - 1;
        for (i, l) in layers.iter().enumerate() {
            // the first layer sees k+1 active one-hot inputs per example
            let active = if i == 0 { model.config.context_len + 1 } else { l.fan_in };
            let std = if i == n_hidden { (1.0 / active as f64).sqrt() } else { (2.0 / active as f64).sqrt() };
            let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
            if i == n_hidden {
                for (c, kind) in model.classes.iter().enumerate() {
                    let mut r = rng::substream(model.config.seed, &[0xfc, i as u64, *kind as u64]);
                    for row in 0..l.fan_in {
                        model.params[l.w.start + row * l.fan_out + c] = normal.sample(&mut r);
                    }
                }
            } else {
                let mut r = rng::substream(model.config.seed, &[0xfc, i as u64]);
                for v in &mut model.params[l.w.clone()] {
                    *v = normal.sample(&mut r);
                }
            }
        }
        Ok(model)
    }

    pub fn from_parts(
        config: FcnConfig,
        vocab_size: usize,
        classes: Vec<BlockKind>,
        params: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let model = FcnModel {
            config,
            vocab_size,
            classes,
            params,
        };
        let expected = model.dense_layers().last().map_or(0, |l| l.b.end);
        if model.params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "fcn expects {expected} parameters, found {}",
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &FcnConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn classes(&self) -> &[BlockKind] {
        &self.classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_width(&self) -> usize {
        (self.config.context_len + 1) * self.vocab_size
    }

    fn dense_layers(&self) -> Vec<DenseRange> {
        let mut widths = vec![self.input_width()];
        widths.extend(&self.config.hidden);
        widths.push(self.classes.len());
        let mut off = 0;
        widths
            .windows(2)
            .map(|w| {
                let l = DenseRange {
                    w: off..off + w[0] * w[1],
                    b: off + w[0] * w[1]..off + w[0] * w[1] + w[1],
                    fan_in: w[0],
                    fan_out: w[1],
                };
                off = l.b.end;
                l
            })
            .collect()
    }

    /// One-hot slot indices of each input: `slot·V + token`.
    fn slots(&self, context: &[u32], token: u32) -> Result<Vec<usize>> {
        let v = self.vocab_size;
        let ctx = pad_context(context, self.config.context_len);
        let mut out = Vec::with_capacity(ctx.len() + 1);
        for (s, &t) in ctx.iter().chain(std::iter::once(&token)).enumerate() {
            if t as usize >= v {
                return Err(Error::Vocab { token: t, size: v });
            }
            out.push(s * v + t as usize);
        }
        Ok(out)
    }

    fn forward(&self, inputs: &[Vec<usize>]) -> Activations {
        let layers = self.dense_layers();
        let n = inputs.len();
        let first = &layers[0];
        let mut x = vec![0.0; n * first.fan_out];
        let w = &self.params[first.w.clone()];
        for (r, slots) in inputs.iter().enumerate() {
            let row = &mut x[r * first.fan_out..(r + 1) * first.fan_out];
            for &s in slots {
                row.iter_mut()
                    .zip(&w[s * first.fan_out..(s + 1) * first.fan_out])
                    .for_each(|(a, b)| *a += b);
            }
        }
        add_row_bias(&mut x, &self.params[first.b.clone()]);
        let mut hidden = Vec::with_capacity(layers.len() - 1);
        for l in &layers[1..] {
            x.iter_mut().for_each(|v| *v = v.max(0.0));
            let mut y = vec![0.0; n * l.fan_out];
            gemm(Op::N, Op::N, n, l.fan_in, l.fan_out, &x, &self.params[l.w.clone()], &mut y, false);
            add_row_bias(&mut y, &self.params[l.b.clone()]);
            hidden.push(std::mem::replace(&mut x, y));
        }
        Activations { hidden, logits: x }
    }

    pub fn logits(&self, context: &[u32], token: u32) -> Result<Vec<f64>> {
        let slots = self.slots(context, token)?;
        Ok(self.forward(&[slots]).logits)
    }

    /// Class probabilities in library order.
    pub fn probabilities(&self, context: &[u32], token: u32) -> Result<Vec<f64>> {
        let mut p = self.logits(context, token)?;
        softmax_in_place(&mut p);
        Ok(p)
    }

    /// Highest-scoring kind, lowest library index on ties.
    pub fn select(&self, context: &[u32], token: u32) -> Result<BlockKind> {
        Ok(self.classes[argmax(&self.logits(context, token)?)])
    }

    fn label_index(&self, kind: BlockKind) -> Result<usize> {
        self.classes
            .iter()
            .position(|k| *k == kind)
            .ok_or(Error::Label(kind))
    }

    /// Fraction of examples whose selected kind equals the label.
    pub fn accuracy(&self, examples: &[FcnExample]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0;
        for chunk in examples.chunks(256) {
            let inputs = chunk
                .iter()
                .map(|e| self.slots(&e.context, e.token))
                .collect::<Result<Vec<_>>>()?;
            let logits = self.forward(&inputs).logits;
            for (row, e) in logits.chunks_exact(self.classes.len()).zip(chunk) {
                if self.classes[argmax(row)] == e.label {
                    hits += 1;
                }
            }
        }
        Ok(hits as f64 / examples.len() as f64)
    }

    /// Mean cross-entropy and its gradient over a batch.
    fn gradient(&self, inputs: &[Vec<usize>], labels: &[usize]) -> (f64, Vec<f64>) {
        let layers = self.dense_layers();
        let acts = self.forward(inputs);
        let n = inputs.len();
        let c = self.classes.len();
        let scale = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut delta = acts.logits.clone();
        for (r, row) in delta.chunks_exact_mut(c).enumerate() {
            loss += log_sum_exp(row) - row[labels[r]];
            softmax_in_place(row);
            row[labels[r]] -= 1.0;
            row.iter_mut().for_each(|v| *v *= scale);
        }
        let mut grads = vec![0.0; self.params.len()];
        for (li, l) in layers.iter().enumerate().rev() {
            add_col_sums(&delta, &mut grads[l.b.clone()]);
            if li == 0 {
                let g = &mut grads[l.w.clone()];
                for (r, slots) in inputs.iter().enumerate() {
                    let d = &delta[r * l.fan_out..(r + 1) * l.fan_out];
                    for &s in slots {
                        g[s * l.fan_out..(s + 1) * l.fan_out]
                            .iter_mut()
                            .zip(d)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                break;
            }
            let input = &acts.hidden[li - 1];
            gemm(Op::T, Op::N, l.fan_in, n, l.fan_out, input, &delta, &mut grads[l.w.clone()], true);
            let mut prev = vec![0.0; n * l.fan_in];
            gemm(Op::N, Op::T, n, l.fan_out, l.fan_in, &delta, &self.params[l.w.clone()], &mut prev, false);
            prev.iter_mut()
                .zip(input)
                .for_each(|(g, a)| if *a <= 0.0 { *g = 0.0 });
            delta = prev;
        }
        (loss * scale, grads)
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcnReport {
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Trains a selector with Adam on shuffled mini-batches. Deterministic given
/// the config seed.
pub fn fcn_train(
    examples: &[FcnExample],
    config: FcnConfig,
    vocab_size: usize,
    library: &BlockLibrary,
) -> Result<(FcnModel, FcnReport)> {
    let mut model = FcnModel::new(config, vocab_size, library)?;
    let inputs = examples
        .iter()
        .map(|e| model.slots(&e.context, e.token))
        .collect::<Result<Vec<_>>>()?;
    let labels = examples
        .iter()
        .map(|e| model.label_index(e.label))
        .collect::<Result<Vec<_>>>()?;
    let cfg = model.config.clone();
    let mut adam = Adam::<f64>::new(model.params.len());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut r = rng::substream(cfg.seed, &[0xfc01, epoch as u64]);
        order.shuffle(&mut r);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let bi: Vec<Vec<usize>> = batch.iter().map(|&i| inputs[i].clone()).collect();
            let bl: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = model.gradient(&bi, &bl);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch: epoch + 1 });
            }
            total += loss * batch.len() as f64;
            adam.update(&mut model.params, &grads, cfg.lr, 0.9, 0.999, 1e-8);
        }
        losses.push(if examples.is_empty() { 0.0 } else { total / examples.len() as f64 });
    }
    let train_accuracy = model.accuracy(examples)?;
    Ok((
        model,
        FcnReport {
            losses,
            train_accuracy,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FcnConfig {
        FcnConfig {
            context_len: 2,
            hidden: vec![6, 5],
            ..Default::default()
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut m = FcnModel::new(tiny(), 4, &BlockLibrary::standard()).unwrap();
        for (i, p) in m.params.iter_mut().enumerate() {
            *p += 0.05 * (i as f64 * 0.37).sin();
        }
        let inputs: Vec<Vec<usize>> = [([0, 1], 2), ([3, 3], 1), ([2, 0], 0)]
            .iter()
            .map(|(c, t)| m.slots(c, *t).unwrap())
            .collect();
        let labels = [4, 0, 14];
        let (_, g) = m.gradient(&inputs, &labels);
        let loss = |m: &FcnModel| m.gradient(&inputs, &labels).0;
        let h = 1e-5;
        for i in 0..m.params.len() {
            let orig = m.params[i];
            m.params[i] = orig + h;
            let lp = loss(&m);
            m.params[i] = orig - h;
            let lm = loss(&m);
            m.params[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * fd.abs().max(1.0), "param {i}: fd {fd} an {}", g[i]);
        }
    }

    #[test]
    fn non_library_label_is_rejected() {
        let ex = vec![FcnExample { context: vec![], token: 1, label: BlockKind::Cell }];
        let r = fcn_train(&ex, tiny(), 4, &BlockLibrary::standard());
        assert!(matches!(r, Err(Error::Label(BlockKind::Cell))));
    }

    #[test]
    fn out_of_range_token_is_a_vocab_error() {
        let m = FcnModel::new(tiny(), 4, &BlockLibrary::standard()).unwrap();
        assert!(matches!(m.select(&[1], 4), Err(Error::Vocab { token: 4, .. })));
    }
}
