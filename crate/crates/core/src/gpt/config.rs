use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GptConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Batches are split into micro-batches of this size, processed
    /// independently and reduced in index order.
    pub micro_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub init_std: f64,
    /// Keep token and position embeddings fixed during training.
    pub freeze_embeddings: bool,
    /// Write a checkpoint every N epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for GptConfig {
    fn default() -> Self {
        GptConfig {
            n_layers: 4,
            n_heads: 4,
            context_len: 10,
            d_model: 64,
            d_ff: 256,
            dropout: 0.1,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 128,
            micro_batch: 32,
            epochs: 300,
            seed: 0,
            init_std: 0.02,
            freeze_embeddings: false,
            checkpoint_every: 0,
        }
    }
}

impl GptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("gpt: {m}")));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer, head and width counts must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.context_len == 0 {
            return bad("context_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Parameter ranges of one decoder layer inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRanges {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_o: Range<usize>,
    pub b_o: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_fc: Range<usize>,
    pub b_fc: Range<usize>,
    pub w_proj: Range<usize>,
    pub b_proj: Range<usize>,
}

/// A named contiguous parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub wte: Range<usize>,
    pub wpe: Range<usize>,
    pub layers: Vec<LayerRanges>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub w_out: Range<usize>,
    pub b_out: Range<usize>,
    pub groups: Vec<ParamGroup>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &GptConfig, vocab_size: usize) -> Self {
        let (d, f, t, v) = (cfg.d_model, cfg.d_ff, cfg.context_len, vocab_size);
        let mut groups = Vec::new();
        let mut offset = 0;
        let mut take = |name: String, shape: Vec<usize>| {
            let g = ParamGroup {
                name,
                offset,
                shape,
            };
            offset += g.len();
            let r = g.range();
            groups.push(g);
            r
        };
        let wte = take("wte".into(), vec![v, d]);
        let wpe = take("wpe".into(), vec![t, d]);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerRanges {
                ln1_g: take(format!("h{l}.ln1.g"), vec![d]),
                ln1_b: take(format!("h{l}.ln1.b"), vec![d]),
                w_qkv: take(format!("h{l}.attn.w_qkv"), vec![d, 3 * d]),
                b_qkv: take(format!("h{l}.attn.b_qkv"), vec![3 * d]),
                w_o: take(format!("h{l}.attn.w_o"), vec![d, d]),
                b_o: take(format!("h{l}.attn.b_o"), vec![d]),
                ln2_g: take(format!("h{l}.ln2.g"), vec![d]),
                ln2_b: take(format!("h{l}.ln2.b"), vec![d]),
                w_fc: take(format!("h{l}.mlp.w_fc"), vec![d, f]),
                b_fc: take(format!("h{l}.mlp.b_fc"), vec![f]),
                w_proj: take(format!("h{l}.mlp.w_proj"), vec![f, d]),
                b_proj: take(format!("h{l}.mlp.b_proj"), vec![d]),
            })
            .collect();
        let lnf_g = take("lnf.g".into(), vec![d]);
        let lnf_b = take("lnf.b".into(), vec![d]);
        let w_out = take("head.w".into(), vec![d, v]);
        let b_out = take("head.b".into(), vec![v]);
        Layout {
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            groups,
            total: offset,
        }
    }

    /// Groups that hold layer-norm gains (initialized to one).
    pub fn is_gain(name: &str) -> bool {
        name.ends_with(".g")
    }

    /// Groups that hold biases or layer-norm shifts (initialized to zero).
    pub fn is_shift(name: &str) -> bool {
        name.ends_with(".b") || name.starts_with("h") && name.contains(".b_")
    }
}
