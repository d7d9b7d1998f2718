use nas_core::arch::PAD;
use nas_core::corpus::TrainingPair;
use nas_core::gpt::{pad_context, predict_next, sample_from_logits, train, Gpt, GptConfig, Phase};
use nas_core::par::Execution;
use nas_core::rng::{seeded, substream};
use rand::Rng as _;

const V: usize = 7;

fn small_config() -> GptConfig {
    GptConfig {
        n_layers: 2,
        n_heads: 2,
        context_len: 5,
        d_model: 8,
        d_ff: 12,
        dropout: 0.0,
        init_std: 0.4,
        ..Default::default()
    }
}

fn perturbed(cfg: GptConfig, seed: u64) -> Gpt<f64> {
    let mut m = Gpt::<f64>::new(cfg, V, seed).unwrap();
    for (i, p) in m.params_mut().iter_mut().enumerate() {
        *p += 0.05 * ((i as f64) * 1.3).cos();
    }
    m
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * r * g[i] + b[i]).collect()
}

/// `x @ W + b` with `W` stored row-major as `[x.len(), b.len()]`.
fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let cols = b.len();
    (0..cols)
        .map(|j| b[j] + x.iter().enumerate().map(|(c, xv)| xv * w[c * cols + j]).sum::<f64>())
        .collect()
}

/// Straight-line forward pass written from the model description alone.
fn oracle_logits(m: &Gpt<f64>, context: &[u32]) -> Vec<Vec<f64>> {
    let cfg = m.config();
    let (t, d, nh) = (cfg.context_len, cfg.d_model, cfg.n_heads);
    let dh = d / nh;
    let p = m.params();
    let l = m.layout();
    let tok = pad_context(context, t);
    let wte = &p[l.wte.clone()];
    let wpe = &p[l.wpe.clone()];
    let mut x: Vec<Vec<f64>> = (0..t)
        .map(|i| (0..d).map(|c| wte[tok[i] as usize * d + c] + wpe[i * d + c]).collect())
        .collect();
    for lr in &l.layers {
        let h: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm(r, &p[lr.ln1_g.clone()], &p[lr.ln1_b.clone()]))
            .collect();
        let qkv: Vec<Vec<f64>> = h
            .iter()
            .map(|r| affine(r, &p[lr.w_qkv.clone()], &p[lr.b_qkv.clone()]))
            .collect();
        for i in 0..t {
            let mut ctx = vec![0.0; d];
            for head in 0..nh {
                let q = &qkv[i][head * dh..(head + 1) * dh];
                let keys: Vec<usize> = (0..=i).filter(|&j| tok[j] != PAD).collect();
                if keys.is_empty() {
                    continue;
                }
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&j| {
                        let k = &qkv[j][d + head * dh..d + (head + 1) * dh];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (kk, &j) in keys.iter().enumerate() {
                    for c in 0..dh {
                        ctx[head * dh + c] += e[kk] / z * qkv[j][2 * d + head * dh + c];
                    }
                }
            }
            let o = affine(&ctx, &p[lr.w_o.clone()], &p[lr.b_o.clone()]);
            x[i].iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        }
        for row in x.iter_mut() {
            let h2 = layer_norm(row, &p[lr.ln2_g.clone()], &p[lr.ln2_b.clone()]);
            let a: Vec<f64> = affine(&h2, &p[lr.w_fc.clone()], &p[lr.b_fc.clone()])
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let o = affine(&a, &p[lr.w_proj.clone()], &p[lr.b_proj.clone()]);
            row.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        }
    }
    x.iter()
        .map(|r| {
            let h = layer_norm(r, &p[l.lnf_g.clone()], &p[l.lnf_b.clone()]);
            affine(&h, &p[l.w_out.clone()], &p[l.b_out.clone()])
        })
        .collect()
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
    logits[k] - mx - z.ln()
}

fn contexts() -> Vec<Vec<u32>> {
    vec![
        vec![1, 2, 3, 4, 5],
        vec![3, 6],
        vec![6],
        vec![2, 2, 2, 2, 2, 2, 1],
        vec![5, 1, 0, 4, 3],
    ]
}

#[test]
fn logits_match_straight_line_oracle() {
    let m = perturbed(small_config(), 3);
    for c in contexts() {
        let got = m.logits(&c).unwrap();
        let want = oracle_logits(&m, &c);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            for (a, b) in g.iter().zip(w) {
                assert!((a - b).abs() < 1e-10, "{c:?}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn next_logits_equal_last_row_of_full_logits() {
    let m = perturbed(small_config(), 4);
    for c in contexts() {
        let full = m.logits(&c).unwrap();
        let last = m.next_logits(&c).unwrap();
        for (a, b) in full.last().unwrap().iter().zip(&last) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let owned = contexts();
    let refs: Vec<&[u32]> = owned.iter().map(|c| &c[..]).collect();
    let batch = m.next_logits_batch(&refs).unwrap();
    for (c, row) in owned.iter().zip(&batch) {
        let single = m.next_logits(c).unwrap();
        for (a, b) in row.iter().zip(&single) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn future_tokens_never_change_past_logits() {
    let m = perturbed(small_config(), 5);
    let t = m.config().context_len;
    let mut rng = seeded(77);
    for _ in 0..1000 {
        let a: Vec<u32> = (0..t).map(|_| rng.random_range(1..V as u32)).collect();
        let p = rng.random_range(0..t - 1);
        let mut b = a.clone();
        for tok in b.iter_mut().skip(p + 1) {
            *tok = rng.random_range(0..V as u32);
        }
        let la = m.logits(&a).unwrap();
        let lb = m.logits(&b).unwrap();
        for i in 0..=p {
            let same = la[i].iter().zip(&lb[i]).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "position {i} changed after editing positions > {p}");
        }
    }
}

#[test]
fn attention_ignores_pad_and_future_keys() {
    let m = perturbed(small_config(), 6);
    let t = m.config().context_len;
    let nh = m.config().n_heads;
    let c = vec![4, 2];
    let tok = pad_context(&c, t);
    for att in m.attention_weights(&c).unwrap() {
        assert_eq!(att.len(), nh * t * t);
        for h in 0..nh {
            for i in 0..t {
                let row = &att[(i * nh + h) * t..][..t];
                let admissible: Vec<bool> = (0..t).map(|j| j <= i && tok[j] != PAD).collect();
                for (j, w) in row.iter().enumerate() {
                    if !admissible[j] {
                        assert_eq!(*w, 0.0, "head {h} query {i} key {j}");
                    }
                }
                let s: f64 = row.iter().sum();
                if admissible.iter().any(|a| *a) {
                    assert!((s - 1.0).abs() < 1e-12);
                } else {
                    assert_eq!(s, 0.0);
                }
            }
        }
    }
}

#[test]
fn loss_matches_cross_entropy_oracle() {
    let m = perturbed(small_config(), 7);
    let batch: Vec<TrainingPair> = contexts()
        .into_iter()
        .enumerate()
        .map(|(i, context)| TrainingPair { context, target: (i as u32 * 3 + 1) % V as u32 })
        .collect();
    let want: f64 = batch
        .iter()
        .map(|p| -log_softmax_at(oracle_logits(&m, &p.context).last().unwrap(), p.target as usize))
        .sum::<f64>()
        / batch.len() as f64;
    let got = m.loss(&batch).unwrap();
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}

fn zeroed(cfg: GptConfig) -> Gpt<f64> {
    let mut m = Gpt::<f64>::new(cfg, V, 0).unwrap();
    let l = m.layout().clone();
    let p = m.params_mut();
    p.iter_mut().for_each(|v| *v = 0.0);
    let mut gains = vec![l.lnf_g.clone()];
    for lr in &l.layers {
        gains.push(lr.ln1_g.clone());
        gains.push(lr.ln2_g.clone());
    }
    for g in gains {
        p[g].iter_mut().for_each(|v| *v = 1.0);
    }
    m
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let m = zeroed(small_config());
    let batch = vec![
        TrainingPair { context: vec![1, 2], target: 3 },
        TrainingPair { context: vec![6, 5, 4], target: 0 },
    ];
    let loss = m.loss(&batch).unwrap();
    assert!((loss - (V as f64).ln()).abs() < 1e-12, "{loss}");
}

#[test]
fn dominant_logit_gives_near_zero_loss() {
    let mut m = zeroed(small_config());
    let b_out = m.layout().b_out.clone();
    m.params_mut()[b_out.start + 4] = 100.0;
    let loss = m.loss(&[TrainingPair { context: vec![1, 2, 3], target: 4 }]).unwrap();
    assert!((0.0..1e-40).contains(&loss), "{loss}");
    let wrong = m.loss(&[TrainingPair { context: vec![1, 2, 3], target: 2 }]).unwrap();
    assert!((wrong - 100.0).abs() < 1e-9);
}

#[test]
fn sampling_frequencies_follow_softmax() {
    let logits = [0.3, -1.0, 1.2, 0.0, 2.0];
    let total: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
    let probs: Vec<f64> = logits.iter().map(|l| l.exp() / total).collect();
    let n = 100_000;
    let mut counts = [0usize; 5];
    let mut rng = seeded(2024);
    for _ in 0..n {
        counts[sample_from_logits(&logits, 1.0, &mut rng).unwrap() as usize] += 1;
    }
    for (k, &c) in counts.iter().enumerate() {
        let mean = n as f64 * probs[k];
        let sd = (n as f64 * probs[k] * (1.0 - probs[k])).sqrt();
        assert!((c as f64 - mean).abs() < 3.0 * sd, "token {k}: {c} vs {mean}");
    }
}

#[test]
fn zero_temperature_is_argmax_with_lowest_tie() {
    let mut m = zeroed(small_config());
    let b_out = m.layout().b_out.clone();
    m.params_mut()[b_out.start + 5] = 2.0;
    m.params_mut()[b_out.start + 3] = 2.0;
    let mut rng = seeded(0);
    assert_eq!(predict_next(&m, &[1, 2], 0.0, &mut rng).unwrap(), 3);
    assert!(predict_next(&m, &[1, 2], -0.5, &mut rng).is_err());
    assert!(predict_next(&m, &[1, V as u32], 0.0, &mut rng).is_err());
}

fn pairs() -> Vec<TrainingPair> {
    let mut rng = substream(9, &[1]);
    (0..60)
        .map(|_| {
            let len = rng.random_range(1..=5);
            let context: Vec<u32> = (0..len).map(|_| rng.random_range(1..V as u32)).collect();
            let target = (context.iter().sum::<u32>() % (V as u32 - 1)) + 1;
            TrainingPair { context, target }
        })
        .collect()
}

fn train_cfg() -> GptConfig {
    GptConfig {
        dropout: 0.1,
        lr: 1e-2,
        batch_size: 16,
        micro_batch: 4,
        epochs: 3,
        seed: 12,
        ..small_config()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = GptConfig { lr: 0.0, ..train_cfg() };
    let m = Gpt::<f64>::new(cfg, V, 1).unwrap();
    let before = m.params().to_vec();
    let (after, _) = train(m, &pairs(), Phase::Pretrain, Execution::Parallel, |_, _| Ok(())).unwrap();
    assert_eq!(before, after.params());
}

#[test]
fn training_is_deterministic_across_execution_modes() {
    let run = |exec| {
        let m = Gpt::<f32>::new(train_cfg(), V, 1).unwrap();
        let (m, report) = train(m, &pairs(), Phase::Pretrain, exec, |_, _| Ok(())).unwrap();
        (m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), report.losses())
    };
    let seq = run(Execution::Sequential);
    assert_eq!(seq, run(Execution::Sequential));
    assert_eq!(seq, run(Execution::Parallel));
}

#[test]
fn frozen_embeddings_stay_fixed_while_the_rest_trains() {
    let cfg = GptConfig { freeze_embeddings: true, ..train_cfg() };
    let m = Gpt::<f64>::new(cfg, V, 1).unwrap();
    let before = m.params().to_vec();
    let emb = m.layout().wpe.end;
    let (after, _) = train(m, &pairs(), Phase::Finetune, Execution::Sequential, |_, _| Ok(())).unwrap();
    assert_eq!(&before[..emb], &after.params()[..emb]);
    assert_ne!(&before[emb..], &after.params()[emb..]);
}

#[test]
fn training_reduces_loss_on_a_learnable_rule() {
    let cfg = GptConfig { epochs: 40, dropout: 0.0, ..train_cfg() };
    let data = pairs();
    let m = Gpt::<f64>::new(cfg, V, 1).unwrap();
    let start = m.loss(&data).unwrap();
    let (m, report) = train(m, &data, Phase::Pretrain, Execution::Parallel, |_, _| Ok(())).unwrap();
    assert_eq!(report.epochs.len(), 40);
    let end = m.loss(&data).unwrap();
    assert!(end < 0.5 * start, "{start} -> {end}");
}
