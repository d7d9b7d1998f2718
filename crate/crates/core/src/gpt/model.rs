//! Decoder-only transformer over layer tokens.
//!
//! Pre-norm blocks: `x += Attn(LN(x))`, `x += MLP(LN(x))`, with learned
//! position embeddings, ReLU in the MLP and a final layer norm before the
//! output projection. Query `i` attends to key `j` iff `j <= i` and token `j`
//! is not PAD; a query with no admissible key gets a zero attention output.
//!
//! PAD positions never influence other positions, so when only last-position
//! logits are needed the forward pass drops PAD rows (except the last one)
//! and evaluates the final decoder layer at the last position only.

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use super::config::{GptConfig, LayerRanges, Layout};
use super::real::{add_col_sums, add_row_bias, gemm, log_sum_exp, softmax_in_place, Op, Real};
use crate::arch::PAD;
use crate::corpus::TrainingPair;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Gpt<R: Real> {
    config: GptConfig,
    vocab_size: usize,
    layout: Layout,
    params: Vec<R>,
}

/// Active rows of a batch: one per kept (context, position).
struct Rows {
    tok: Vec<u32>,
    pos: Vec<usize>,
    /// First row of the row's context.
    start: Vec<usize>,
    /// Last row of every context, in batch order.
    last: Vec<usize>,
}

impl Rows {
    fn new(tokens: &[u32], t: usize, all_positions: bool) -> Rows {
        let mut rows = Rows {
            tok: Vec::with_capacity(tokens.len()),
            pos: Vec::with_capacity(tokens.len()),
            start: Vec::with_capacity(tokens.len()),
            last: Vec::with_capacity(tokens.len() / t),
        };
        for ctx in tokens.chunks_exact(t) {
            let start = rows.tok.len();
            for (p, &tok) in ctx.iter().enumerate() {
                if all_positions || tok != PAD || p == t - 1 {
                    rows.tok.push(tok);
                    rows.pos.push(p);
                    rows.start.push(start);
                }
            }
            rows.last.push(rows.tok.len() - 1);
        }
        rows
    }

    fn len(&self) -> usize {
        self.tok.len()
    }
}

/// Activations kept for the backward pass of one decoder layer. The layer
/// reads `n` input rows and produces outputs for `queries` (indices into the
/// input rows).
struct LayerCache<R> {
    queries: Option<Vec<usize>>,
    xhat1: Vec<R>,
    rstd1: Vec<R>,
    h1: Vec<R>,
    qkv: Vec<R>,
    att: Vec<R>,
    ctx: Vec<R>,
    mask1: Option<Vec<R>>,
    xhat2: Vec<R>,
    rstd2: Vec<R>,
    h2: Vec<R>,
    act: Vec<R>,
    mask2: Option<Vec<R>>,
}

pub(crate) struct Forward<R> {
    rows: Rows,
    layers: Vec<LayerCache<R>>,
    xhatf: Vec<R>,
    rstdf: Vec<R>,
    hf: Vec<R>,
    /// One row of `vocab_size` logits per head row: every context position
    /// in all-positions mode, else the last position of every context.
    pub logits: Vec<R>,
}

/// Left-pads (or left-truncates) a context to exactly `k` tokens.
pub fn pad_context(context: &[u32], k: usize) -> Vec<u32> {
    if context.len() >= k {
        context[context.len() - k..].to_vec()
    } else {
        let mut out = vec![PAD; k - context.len()];
        out.extend_from_slice(context);
        out
    }
}

fn layer_norm<R: Real>(
    x: &[R],
    g: &[R],
    b: &[R],
    out: &mut [R],
    xhat: &mut [R],
    rstd: &mut [R],
) {
    let d = g.len();
    let inv_d = R::one() / R::lit(d as f64);
    let eps = R::lit(LN_EPS);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<R>() * inv_d;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<R>() * inv_d;
        let s = R::one() / (var + eps).sqrt();
        rstd[r] = s;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            xh[i] = (row[i] - mean) * s;
            o[i] = xh[i] * g[i] + b[i];
        }
    }
}

/// Accumulates the input gradient into `dx` and parameter gradients into
/// `dg`, `db`.
fn layer_norm_backward<R: Real>(
    dy: &[R],
    xhat: &[R],
    rstd: &[R],
    g: &[R],
    dx: &mut [R],
    dg: &mut [R],
    db: &mut [R],
) {
    let d = g.len();
    let inv_d = R::one() / R::lit(d as f64);
    let mut dxhat = vec![R::zero(); d];
    for r in 0..rstd.len() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut m1 = R::zero();
        let mut m2 = R::zero();
        for i in 0..d {
            dg[i] += dyr[i] * xh[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xh[i];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += rstd[r] * (dxhat[i] - m1 - xh[i] * m2);
        }
    }
}

/// Inverted-dropout mask. Drop decisions use 16-bit uniforms, so the
/// effective rate is `p` rounded to a multiple of 2^-16.
fn dropout_mask<R: Real>(len: usize, p: f64, rng: &mut Rng) -> Vec<R> {
    let threshold = (p * 65536.0).round() as u64;
    let keep = R::lit(1.0 / (1.0 - p));
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let mut bits = rng.next_u64();
        for _ in 0..4 {
            if out.len() == len {
                break;
            }
            out.push(if bits & 0xffff < threshold { R::zero() } else { keep });
            bits >>= 16;
        }
    }
    out
}

fn apply_dropout<R: Real>(
    branch: &mut [R],
    p: f64,
    rng: Option<&mut Rng>,
) -> Option<Vec<R>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let m = dropout_mask::<R>(branch.len(), p, rng);
    branch.iter_mut().zip(&m).for_each(|(b, m)| *b *= *m);
    Some(m)
}

fn gather_rows<R: Real>(x: &[R], rows: &[usize], d: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(&x[r * d..(r + 1) * d]);
    }
    out
}

impl<R: Real> Gpt<R> {
    /// Randomly initialized model: N(0, init_std) weights (residual output
    /// projections scaled by 1/sqrt(2·n_layers)), unit gains, zero biases.
    pub fn new(config: GptConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::config("gpt: vocabulary is empty"));
        }
        let layout = Layout::new(&config, vocab_size);
        let mut params = vec![R::zero(); layout.total];
        let mut rng = rng::substream(seed, &[0x6770_7400]);
        let std = config.init_std;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        for g in &layout.groups {
            let slice = &mut params[g.range()];
            if Layout::is_gain(&g.name) {
                slice.fill(R::one());
            } else if Layout::is_shift(&g.name) {
                slice.fill(R::zero());
            } else {
                let s = if g.name.ends_with("w_o") || g.name.ends_with("w_proj") {
                    resid_std
                } else {
                    std
                };
                let normal = Normal::new(0.0, s).map_err(|e| Error::config(e.to_string()))?;
                for v in slice.iter_mut() {
                    *v = R::lit(normal.sample(&mut rng));
                }
            }
        }
        Ok(Gpt {
            config,
            vocab_size,
            layout,
            params,
        })
    }

    pub fn from_params(config: GptConfig, vocab_size: usize, params: Vec<R>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab_size);
        if params.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Gpt {
            config,
            vocab_size,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &GptConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut GptConfig {
        &mut self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[R] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [R] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn cast<S: Real>(&self) -> Gpt<S> {
        Gpt {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| S::lit(v.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|t| **t as usize >= self.vocab_size) {
            Some(&token) => Err(Error::Vocab {
                token,
                size: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Logits at every position of one context (left-padded to the context
    /// length). Returns `context_len` rows of `vocab_size` values.
    pub fn logits(&self, context: &[u32]) -> Result<Vec<Vec<R>>> {
        let tokens = pad_context(context, self.config.context_len);
        self.check_tokens(&tokens)?;
        let fwd = self.forward_pass(&tokens, true, None);
        Ok(fwd
            .logits
            .chunks_exact(self.vocab_size)
            .map(|c| c.to_vec())
            .collect())
    }

    /// Attention weights of every layer for one context, each laid out as
    /// `context_len × n_heads × context_len` (query, head, key).
    pub fn attention_weights(&self, context: &[u32]) -> Result<Vec<Vec<R>>> {
        let t = self.config.context_len;
        let tokens = pad_context(context, t);
        self.check_tokens(&tokens)?;
        let fwd = self.forward_pass(&tokens, true, None);
        Ok(fwd.layers.into_iter().map(|c| c.att).collect())
    }

    /// Last-position logits of one context.
    pub fn next_logits(&self, context: &[u32]) -> Result<Vec<R>> {
        let tokens = pad_context(context, self.config.context_len);
        self.check_tokens(&tokens)?;
        Ok(self.forward_pass(&tokens, false, None).logits)
    }

    /// Last-position logits for many contexts, computed in eval mode.
    pub fn next_logits_batch(&self, contexts: &[&[u32]]) -> Result<Vec<Vec<R>>> {
        let t = self.config.context_len;
        let mut tokens = Vec::with_capacity(contexts.len() * t);
        for c in contexts {
            tokens.extend(pad_context(c, t));
        }
        self.check_tokens(&tokens)?;
        if contexts.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self
            .forward_pass(&tokens, false, None)
            .logits
            .chunks_exact(self.vocab_size)
            .map(|c| c.to_vec())
            .collect())
    }

    fn p(&self, r: &std::ops::Range<usize>) -> &[R] {
        &self.params[r.clone()]
    }

    /// Runs the network over `tokens` (`batch × context_len`, row-major).
    /// Dropout is active iff `dropout_rng` is given and the configured rate
    /// is positive.
    pub(crate) fn forward_pass(
        &self,
        tokens: &[u32],
        all_positions: bool,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Forward<R> {
        let cfg = &self.config;
        let (t, d, f, v) = (cfg.context_len, cfg.d_model, cfg.d_ff, self.vocab_size);
        let (nh, dh) = (cfg.n_heads, cfg.head_dim());
        let p_drop = cfg.dropout;
        let rows = Rows::new(tokens, t, all_positions);
        let n = rows.len();

        let wte = self.p(&self.layout.wte);
        let wpe = self.p(&self.layout.wpe);
        let mut x = vec![R::zero(); n * d];
        for r in 0..n {
            let tok = rows.tok[r] as usize;
            let e = &wte[tok * d..(tok + 1) * d];
            let pe = &wpe[rows.pos[r] * d..(rows.pos[r] + 1) * d];
            for i in 0..d {
                x[r * d + i] = e[i] + pe[i];
            }
        }

        let n_layers = self.layout.layers.len();
        let mut layers = Vec::with_capacity(n_layers);
        for (l, lr) in self.layout.layers.iter().enumerate() {
            let queries = (!all_positions && l + 1 == n_layers).then(|| rows.last.clone());
            let m = queries.as_ref().map_or(n, |q| q.len());
            let mut c = LayerCache {
                queries,
                xhat1: vec![R::zero(); n * d],
                rstd1: vec![R::zero(); n],
                h1: vec![R::zero(); n * d],
                qkv: vec![R::zero(); n * 3 * d],
                att: vec![R::zero(); m * nh * t],
                ctx: vec![R::zero(); m * d],
                mask1: None,
                xhat2: vec![R::zero(); m * d],
                rstd2: vec![R::zero(); m],
                h2: vec![R::zero(); m * d],
                act: vec![R::zero(); m * f],
                mask2: None,
            };
            layer_norm(
                &x,
                self.p(&lr.ln1_g),
                self.p(&lr.ln1_b),
                &mut c.h1,
                &mut c.xhat1,
                &mut c.rstd1,
            );
            gemm(Op::N, Op::N, n, d, 3 * d, &c.h1, self.p(&lr.w_qkv), &mut c.qkv, false);
            add_row_bias(&mut c.qkv, self.p(&lr.b_qkv));
            attention_forward(&c.qkv, &rows, c.queries.as_deref(), t, nh, dh, &mut c.att, &mut c.ctx);

            x = match &c.queries {
                Some(q) => gather_rows(&x, q, d),
                None => x,
            };
            let mut branch = vec![R::zero(); m * d];
            gemm(Op::N, Op::N, m, d, d, &c.ctx, self.p(&lr.w_o), &mut branch, false);
            add_row_bias(&mut branch, self.p(&lr.b_o));
            c.mask1 = apply_dropout(&mut branch, p_drop, dropout_rng.as_deref_mut());
            x.iter_mut().zip(&branch).for_each(|(x, b)| *x += *b);

            layer_norm(
                &x,
                self.p(&lr.ln2_g),
                self.p(&lr.ln2_b),
                &mut c.h2,
                &mut c.xhat2,
                &mut c.rstd2,
            );
            gemm(Op::N, Op::N, m, d, f, &c.h2, self.p(&lr.w_fc), &mut c.act, false);
            add_row_bias(&mut c.act, self.p(&lr.b_fc));
            c.act.iter_mut().for_each(|a| *a = a.max(R::zero()));
            gemm(Op::N, Op::N, m, f, d, &c.act, self.p(&lr.w_proj), &mut branch, false);
            add_row_bias(&mut branch, self.p(&lr.b_proj));
            c.mask2 = apply_dropout(&mut branch, p_drop, dropout_rng.as_deref_mut());
            x.iter_mut().zip(&branch).for_each(|(x, b)| *x += *b);
            layers.push(c);
        }

        let xf = if x.len() == n * d && !all_positions {
            gather_rows(&x, &rows.last, d)
        } else {
            x
        };
        let nr = xf.len() / d;
        let mut hf = vec![R::zero(); nr * d];
        let mut xhatf = vec![R::zero(); nr * d];
        let mut rstdf = vec![R::zero(); nr];
        layer_norm(
            &xf,
            self.p(&self.layout.lnf_g),
            self.p(&self.layout.lnf_b),
            &mut hf,
            &mut xhatf,
            &mut rstdf,
        );
        let mut logits = vec![R::zero(); nr * v];
        gemm(Op::N, Op::N, nr, d, v, &hf, self.p(&self.layout.w_out), &mut logits, false);
        add_row_bias(&mut logits, self.p(&self.layout.b_out));
        Forward {
            rows,
            layers,
            xhatf,
            rstdf,
            hf,
            logits,
        }
    }

    /// Summed cross-entropy of the targets under last-position logits, and
    /// the number of argmax hits.
    pub(crate) fn loss_sum(logits: &[R], targets: &[u32], v: usize) -> (R, usize) {
        let mut loss = R::zero();
        let mut correct = 0;
        for (row, &tgt) in logits.chunks_exact(v).zip(targets) {
            loss += log_sum_exp(row) - row[tgt as usize];
            if argmax(row) == tgt as usize {
                correct += 1;
            }
        }
        (loss, correct)
    }

    /// Mean cross-entropy over a batch of pairs, eval mode.
    pub fn loss(&self, batch: &[TrainingPair]) -> Result<R> {
        if batch.is_empty() {
            return Err(Error::config("loss of an empty batch"));
        }
        let (tokens, targets) = self.flatten(batch)?;
        let fwd = self.forward_pass(&tokens, false, None);
        let (sum, _) = Self::loss_sum(&fwd.logits, &targets, self.vocab_size);
        Ok(sum / R::lit(batch.len() as f64))
    }

    pub(crate) fn flatten(&self, batch: &[TrainingPair]) -> Result<(Vec<u32>, Vec<u32>)> {
        let t = self.config.context_len;
        let mut tokens = Vec::with_capacity(batch.len() * t);
        let mut targets = Vec::with_capacity(batch.len());
        for p in batch {
            tokens.extend(pad_context(&p.context, t));
            targets.push(p.target);
        }
        self.check_tokens(&tokens)?;
        self.check_tokens(&targets)?;
        Ok((tokens, targets))
    }

    /// Gradient of the mean cross-entropy over `batch` (eval mode, no
    /// dropout), same layout as the parameters.
    pub fn gradient(&self, batch: &[TrainingPair]) -> Result<(R, Vec<R>)> {
        if batch.is_empty() {
            return Err(Error::config("gradient of an empty batch"));
        }
        let (tokens, targets) = self.flatten(batch)?;
        let mut grads = vec![R::zero(); self.params.len()];
        let (sum, _) = self.accumulate_gradient(&tokens, &targets, None, &mut grads);
        let scale = R::one() / R::lit(batch.len() as f64);
        grads.iter_mut().for_each(|g| *g *= scale);
        Ok((sum * scale, grads))
    }

    /// Forward + backward of the summed loss; gradients are added to
    /// `grads`. Returns the loss sum and argmax hit count.
    pub(crate) fn accumulate_gradient(
        &self,
        tokens: &[u32],
        targets: &[u32],
        dropout_rng: Option<&mut Rng>,
        grads: &mut [R],
    ) -> (R, usize) {
        let fwd = self.forward_pass(tokens, false, dropout_rng);
        let v = self.vocab_size;
        let (loss, correct) = Self::loss_sum(&fwd.logits, targets, v);
        let mut dlogits = fwd.logits.clone();
        for (row, &tgt) in dlogits.chunks_exact_mut(v).zip(targets) {
            softmax_in_place(row);
            row[tgt as usize] -= R::one();
        }
        self.backward(&fwd, &dlogits, grads);
        (loss, correct)
    }

    fn backward(&self, fwd: &Forward<R>, dlogits: &[R], grads: &mut [R]) {
        let cfg = &self.config;
        let (d, v) = (cfg.d_model, self.vocab_size);
        let lay = &self.layout;
        let rows = &fwd.rows;
        let n = rows.len();
        let nr = fwd.rstdf.len();

        gemm(Op::T, Op::N, d, nr, v, &fwd.hf, dlogits, &mut grads[lay.w_out.clone()], true);
        add_col_sums(dlogits, &mut grads[lay.b_out.clone()]);
        let mut dhf = vec![R::zero(); nr * d];
        gemm(Op::N, Op::T, nr, v, d, dlogits, self.p(&lay.w_out), &mut dhf, false);
        let mut dx = vec![R::zero(); nr * d];
        self.ln_backward(&dhf, &fwd.xhatf, &fwd.rstdf, &lay.lnf_g, &lay.lnf_b, &mut dx, grads);
        if nr != n && fwd.layers.last().is_none_or(|c| c.queries.is_none()) {
            dx = scatter_rows(&dx, &rows.last, n, d);
        }

        for (c, lr) in fwd.layers.iter().zip(&lay.layers).rev() {
            dx = self.layer_backward(c, lr, rows, dx, grads);
        }

        let (wte, wpe) = (lay.wte.start, lay.wpe.start);
        for r in 0..n {
            let g = &dx[r * d..(r + 1) * d];
            let te = wte + rows.tok[r] as usize * d;
            let pe = wpe + rows.pos[r] * d;
            for i in 0..d {
                grads[te + i] += g[i];
                grads[pe + i] += g[i];
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn ln_backward(
        &self,
        dy: &[R],
        xhat: &[R],
        rstd: &[R],
        g: &std::ops::Range<usize>,
        b: &std::ops::Range<usize>,
        dx: &mut [R],
        grads: &mut [R],
    ) {
        let d = g.len();
        let mut dg = vec![R::zero(); d];
        let mut db = vec![R::zero(); d];
        layer_norm_backward(dy, xhat, rstd, self.p(g), dx, &mut dg, &mut db);
        add_into(&mut grads[g.clone()], &dg);
        add_into(&mut grads[b.clone()], &db);
    }

    /// Maps the gradient at the layer's output rows to its input rows.
    fn layer_backward(
        &self,
        c: &LayerCache<R>,
        lr: &LayerRanges,
        rows: &Rows,
        dout: Vec<R>,
        grads: &mut [R],
    ) -> Vec<R> {
        let cfg = &self.config;
        let (t, d, f) = (cfg.context_len, cfg.d_model, cfg.d_ff);
        let (nh, dh) = (cfg.n_heads, cfg.head_dim());
        let n = rows.len();
        let m = c.rstd2.len();

        // MLP branch
        let mut dbranch = dout.clone();
        if let Some(mask) = &c.mask2 {
            dbranch.iter_mut().zip(mask).for_each(|(g, m)| *g *= *m);
        }
        add_col_sums(&dbranch, &mut grads[lr.b_proj.clone()]);
        gemm(Op::T, Op::N, f, m, d, &c.act, &dbranch, &mut grads[lr.w_proj.clone()], true);
        let mut dact = vec![R::zero(); m * f];
        gemm(Op::N, Op::T, m, d, f, &dbranch, self.p(&lr.w_proj), &mut dact, false);
        dact.iter_mut()
            .zip(&c.act)
            .for_each(|(g, a)| if *a <= R::zero() { *g = R::zero() });
        add_col_sums(&dact, &mut grads[lr.b_fc.clone()]);
        gemm(Op::T, Op::N, d, m, f, &c.h2, &dact, &mut grads[lr.w_fc.clone()], true);
        let mut dh2 = vec![R::zero(); m * d];
        gemm(Op::N, Op::T, m, f, d, &dact, self.p(&lr.w_fc), &mut dh2, false);
        let mut dmid = dout;
        self.ln_backward(&dh2, &c.xhat2, &c.rstd2, &lr.ln2_g, &lr.ln2_b, &mut dmid, grads);

        // attention branch
        let mut dbranch = dmid.clone();
        if let Some(mask) = &c.mask1 {
            dbranch.iter_mut().zip(mask).for_each(|(g, m)| *g *= *m);
        }
        add_col_sums(&dbranch, &mut grads[lr.b_o.clone()]);
        gemm(Op::T, Op::N, d, m, d, &c.ctx, &dbranch, &mut grads[lr.w_o.clone()], true);
        let mut dctx = vec![R::zero(); m * d];
        gemm(Op::N, Op::T, m, d, d, &dbranch, self.p(&lr.w_o), &mut dctx, false);
        let mut dqkv = vec![R::zero(); n * 3 * d];
        attention_backward(&c.qkv, &c.att, &dctx, rows, c.queries.as_deref(), t, nh, dh, &mut dqkv);
        add_col_sums(&dqkv, &mut grads[lr.b_qkv.clone()]);
        gemm(Op::T, Op::N, d, n, 3 * d, &c.h1, &dqkv, &mut grads[lr.w_qkv.clone()], true);
        let mut dh1 = vec![R::zero(); n * d];
        gemm(Op::N, Op::T, n, 3 * d, d, &dqkv, self.p(&lr.w_qkv), &mut dh1, false);

        let mut dx = match &c.queries {
            Some(q) => scatter_rows(&dmid, q, n, d),
            None => dmid,
        };
        self.ln_backward(&dh1, &c.xhat1, &c.rstd1, &lr.ln1_g, &lr.ln1_b, &mut dx, grads);
        dx
    }
}

fn scatter_rows<R: Real>(x: &[R], rows: &[usize], n: usize, d: usize) -> Vec<R> {
    let mut out = vec![R::zero(); n * d];
    for (i, &r) in rows.iter().enumerate() {
        out[r * d..(r + 1) * d].copy_from_slice(&x[i * d..(i + 1) * d]);
    }
    out
}

fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += *b);
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<R: Real>(x: &[R]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Causal masked multi-head attention. `att` receives the weights as
/// `queries × heads × context_len`, indexed by key position.
#[allow(clippy::too_many_arguments)]
fn attention_forward<R: Real>(
    qkv: &[R],
    rows: &Rows,
    queries: Option<&[usize]>,
    t: usize,
    nh: usize,
    dh: usize,
    att: &mut [R],
    ctx: &mut [R],
) {
    let d = nh * dh;
    let scale = R::one() / R::lit(dh as f64).sqrt();
    let m = queries.map_or(rows.len(), |q| q.len());
    let mut keys = Vec::with_capacity(t);
    let mut scores = Vec::with_capacity(t);
    for qi in 0..m {
        let qr = queries.map_or(qi, |q| q[qi]);
        keys.clear();
        keys.extend((rows.start[qr]..=qr).filter(|&kr| rows.tok[kr] != PAD));
        if keys.is_empty() {
            continue;
        }
        for h in 0..nh {
            let q = &qkv[qr * 3 * d + h * dh..][..dh];
            scores.clear();
            for &kr in &keys {
                let k = &qkv[kr * 3 * d + d + h * dh..][..dh];
                let s: R = q.iter().zip(k).map(|(a, b)| *a * *b).sum();
                scores.push(s * scale);
            }
            softmax_in_place(&mut scores);
            let a_row = &mut att[(qi * nh + h) * t..][..t];
            let out = &mut ctx[qi * d + h * dh..][..dh];
            for (&kr, &a) in keys.iter().zip(&scores) {
                a_row[rows.pos[kr]] = a;
                let vv = &qkv[kr * 3 * d + 2 * d + h * dh..][..dh];
                for i in 0..dh {
                    out[i] += a * vv[i];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<R: Real>(
    qkv: &[R],
    att: &[R],
    dctx: &[R],
    rows: &Rows,
    queries: Option<&[usize]>,
    t: usize,
    nh: usize,
    dh: usize,
    dqkv: &mut [R],
) {
    let d = nh * dh;
    let scale = R::one() / R::lit(dh as f64).sqrt();
    let m = queries.map_or(rows.len(), |q| q.len());
    let mut keys = Vec::with_capacity(t);
    let mut da = Vec::with_capacity(t);
    for qi in 0..m {
        let qr = queries.map_or(qi, |q| q[qi]);
        keys.clear();
        keys.extend((rows.start[qr]..=qr).filter(|&kr| rows.tok[kr] != PAD));
        for h in 0..nh {
            let a_row = &att[(qi * nh + h) * t..][..t];
            let g = &dctx[qi * d + h * dh..][..dh];
            da.clear();
            let mut dot = R::zero();
            for &kr in &keys {
                let a = a_row[rows.pos[kr]];
                let vo = kr * 3 * d + 2 * d + h * dh;
                let s: R = g.iter().zip(&qkv[vo..vo + dh]).map(|(x, y)| *x * *y).sum();
                for i in 0..dh {
                    dqkv[vo + i] += a * g[i];
                }
                da.push(s);
                dot += a * s;
            }
            let qo = qr * 3 * d + h * dh;
            for (&kr, &s) in keys.iter().zip(&da) {
                let ds = a_row[rows.pos[kr]] * (s - dot) * scale;
                let ko = kr * 3 * d + d + h * dh;
                for i in 0..dh {
                    dqkv[qo + i] += ds * qkv[ko + i];
                    dqkv[ko + i] += ds * qkv[qo + i];
                }
            }
        }
    }
}
