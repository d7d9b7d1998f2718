use std::path::Path;

use anyhow::{bail, Context as _, Result};
use nas_core::arch::{Architecture, Vocabulary};
use nas_core::checkpoint::{load_fcn, load_gpt, save_fcn, save_gpt, write_bytes};
use nas_core::config::{EvaluatorConfig, EvaluatorKind};
use nas_core::corpus::{
    build_finetune_corpus, build_vocabulary, generate_teacher_corpus, load_nasbench,
    make_training_pairs, read_corpus, write_corpus, CorpusRecord, Source,
};
use nas_core::evaluation::{
    Evaluator, ExternalEvaluator, SurrogateEvaluator, SurrogateMode, TabularEvaluator,
};
use nas_core::evolution::run_search;
use nas_core::fcn::{fcn_examples, fcn_train, FcnModel};
use nas_core::gpt::{train, Gpt, Phase, TrainReport};
use nas_core::library::BlockLibrary;
use nas_core::reconstruct::Guide;
use nas_core::reporting::{
    self, ablation_architectures, format_correlation_table,
    format_rate_table, BEST_ARCH_FILE, FITNESS_TSV, GENERATIONS_FILE, PLOT_SCRIPT, RESULT_FILE,
    SUMMARY_FILE,
};
use nas_core::rng;
use serde::Serialize;

use crate::run::Ctx;
use crate::{
    AblateEpochsArgs, AblateRatesArgs, BuildCorpusArgs, CorrelateArgs, EvalArgs, FinetuneArgs,
    PretrainArgs, ReconstructArgs, ReportArgs, SearchArgs, TrainFcnArgs, UsageError,
};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())?;
    Ok(())
}

fn read_arch(ctx: &mut Ctx, path: &Path) -> Result<Architecture> {
    let s = std::fs::read_to_string(path).map_err(|e| nas_core::Error::io(path, e))?;
    let arch: Architecture = serde_json::from_str(&s)
        .map_err(|e| nas_core::Error::Parse { line: e.line(), message: format!("{}: {e}", path.display()) })?;
    arch.validate().map_err(nas_core::Error::from)?;
    ctx.input("arch", path)?;
    Ok(arch)
}

fn read_records(ctx: &mut Ctx, role: &str, path: &Path) -> Result<Vec<CorpusRecord>> {
    let recs = read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))?;
    ctx.input(role, path)?;
    Ok(recs)
}

fn load_models(ctx: &mut Ctx, gpt: &Path, fcn: &Path) -> Result<(Gpt<f32>, Vocabulary, FcnModel)> {
    let (model, vocab, _) = load_gpt::<f32>(gpt)?;
    ctx.input("gpt", gpt)?;
    let (selector, header) = load_fcn(fcn)?;
    ctx.input("fcn", fcn)?;
    if header.vocab_hash != vocab.hash() {
        return Err(nas_core::Error::Checkpoint(format!(
            "{} was trained against a different vocabulary than {}",
            fcn.display(),
            gpt.display()
        ))
        .into());
    }
    Ok((model, vocab, selector))
}

fn guide<'a>(ctx: &Ctx, gpt: &'a Gpt<f32>, fcn: &'a FcnModel, vocab: &'a Vocabulary) -> Result<Guide<'a>> {
    Ok(Guide::new(gpt, fcn, vocab)?
        .with_temperature(ctx.cfg.ga.temperature)
        .with_unit(ctx.cfg.ga.elimination_unit))
}

fn parse_kind(s: &str) -> Result<EvaluatorKind> {
    s.parse().map_err(|e: nas_core::Error| UsageError(e.to_string()).into())
}

fn parse_mode(s: &str) -> Result<SurrogateMode> {
    s.parse().map_err(|e: String| UsageError(e).into())
}

fn surrogate(ctx: &mut Ctx, mode: SurrogateMode) -> Result<SurrogateEvaluator> {
    if let Some(p) = ctx.cfg.evaluator.teacher.clone() {
        ctx.input("teacher", &p)?;
    }
    Ok(SurrogateEvaluator::new(ctx.cfg.evaluator.teacher()?, mode))
}

fn evaluator(ctx: &mut Ctx, cfg: &EvaluatorConfig) -> Result<Box<dyn Evaluator>> {
    Ok(match cfg.kind {
        EvaluatorKind::Surrogate => Box::new(surrogate(ctx, cfg.mode)?),
        EvaluatorKind::Tabular => {
            let path = cfg
                .table
                .clone()
                .ok_or_else(|| UsageError("tabular evaluator needs evaluator.table".into()))?;
            let t = TabularEvaluator::load(&path)?;
            ctx.input("table", &path)?;
            Box::new(t)
        }
        EvaluatorKind::External => Box::new(ExternalEvaluator::spawn(cfg.external.clone())?),
    })
}

fn evaluator_config(ctx: &Ctx, kind: Option<&str>, mode: Option<&str>) -> Result<EvaluatorConfig> {
    let mut c = ctx.cfg.evaluator.clone();
    if let Some(k) = kind {
        c.kind = parse_kind(k)?;
    }
    if let Some(m) = mode {
        c.mode = parse_mode(m)?;
    }
    Ok(c)
}

pub fn build_corpus(ctx: &mut Ctx, a: &BuildCorpusArgs) -> Result<()> {
    let c = ctx.cfg.corpus.clone();
    let records = match a.source {
        Source::Nasbench => {
            let input = a
                .input
                .as_deref()
                .ok_or_else(|| UsageError("--in is required for the nasbench source".into()))?;
            let min = a.min_accuracy.unwrap_or(c.min_accuracy);
            let recs = load_nasbench(input, min, c.generation.input_shape, c.generation.num_classes)?;
            ctx.input("benchmark", input)?;
            recs
        }
        Source::FinetuneLibrary => build_finetune_corpus(
            &BlockLibrary::standard(),
            a.count.unwrap_or(c.finetune_count),
            c.seed,
            &c.generation,
        )?,
        Source::Synthetic => {
            let teacher = surrogate(ctx, SurrogateMode::Full)?.teacher;
            generate_teacher_corpus(&teacher, a.count.unwrap_or(c.teacher_archs), c.seed, &c.generation)?
        }
    };
    if records.is_empty() {
        log::warn!("corpus is empty");
    }
    write_corpus(&a.out, &records)?;
    ctx.output("corpus", &a.out)?;
    outln!("{} architectures written to {}", records.len(), a.out.display());
    Ok(())
}

/// Checkpoints carry their training report without wall-clock time so that
/// replays produce identical bytes.
fn stable(mut report: TrainReport) -> TrainReport {
    report.wall_ms = 0;
    report
}

fn fit(
    ctx: &mut Ctx,
    model: Gpt<f32>,
    vocab: &Vocabulary,
    records: &[CorpusRecord],
    phase: Phase,
    out: &Path,
) -> Result<()> {
    let cfg = model.config().clone();
    let pairs = make_training_pairs(records, vocab, cfg.context_len, ctx.cfg.corpus.stride)?;
    log::info!("{} training pairs, vocabulary {}", pairs.len(), vocab.size());
    let mut periodic = Vec::new();
    let (model, report) = train(model, &pairs, phase, ctx.exec, |e, m| {
        log::info!("epoch {} loss {:.4} acc {:.4}", e.epoch, e.loss, e.accuracy);
        if cfg.checkpoint_every > 0 && e.epoch % cfg.checkpoint_every == 0 {
            let mut s = out.as_os_str().to_os_string();
            s.push(format!(".epoch{}", e.epoch));
            let p = std::path::PathBuf::from(s);
            save_gpt(&p, m, vocab, None)?;
            periodic.push(p);
        }
        Ok(())
    })?;
    for p in &periodic {
        ctx.output("checkpoint", p)?;
    }
    let report = stable(report);
    save_gpt(out, &model, vocab, Some(&report))?;
    ctx.output("gpt", out)?;
    if let Some(acc) = report.final_accuracy() {
        outln!("trained {} epochs, final accuracy {acc:.4}", report.epochs.len());
    }
    Ok(())
}

pub fn pretrain(ctx: &mut Ctx, a: &PretrainArgs) -> Result<()> {
    let records = read_records(ctx, "corpus", &a.corpus)?;
    let mut all = records.clone();
    for p in &a.vocab_corpus {
        all.extend(read_records(ctx, "vocab-corpus", p)?);
    }
    let vocab = build_vocabulary(&all, ctx.cfg.corpus.canonicalization)?;
    let mut cfg = ctx.cfg.gpt.clone();
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    let seed = cfg.seed;
    let model = Gpt::<f32>::new(cfg, vocab.size(), seed)?;
    fit(ctx, model, &vocab, &records, Phase::Pretrain, &a.out)
}

pub fn finetune(ctx: &mut Ctx, a: &FinetuneArgs) -> Result<()> {
    let (mut model, vocab, _) = load_gpt::<f32>(&a.from)?;
    ctx.input("gpt", &a.from)?;
    let records = read_records(ctx, "corpus", &a.corpus)?;
    let base = &ctx.cfg.gpt;
    let c = model.config_mut();
    c.epochs = a.epochs.unwrap_or(base.epochs);
    c.lr = a.lr.unwrap_or(base.lr);
    c.batch_size = a.batch.unwrap_or(base.batch_size);
    c.seed = base.seed;
    c.freeze_embeddings = a.freeze_embeddings || base.freeze_embeddings;
    c.checkpoint_every = base.checkpoint_every;
    model.config().validate()?;
    fit(ctx, model, &vocab, &records, Phase::Finetune, &a.out)
}

pub fn train_fcn(ctx: &mut Ctx, a: &TrainFcnArgs) -> Result<()> {
    let (_, vocab, _) = load_gpt::<f32>(&a.gpt)?;
    ctx.input("gpt", &a.gpt)?;
    let mut records = Vec::new();
    for p in &a.corpus {
        records.extend(read_records(ctx, "corpus", p)?);
    }
    let mut cfg = ctx.cfg.fcn.clone();
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let examples = fcn_examples(&records, &vocab, cfg.context_len)?;
    log::info!("{} selector examples", examples.len());
    let (model, report) = fcn_train(&examples, cfg, vocab.size(), &BlockLibrary::standard())?;
    save_fcn(&a.out, &model, &vocab.hash())?;
    ctx.output("fcn", &a.out)?;
    outln!("selector training accuracy {:.4}", report.train_accuracy);
    Ok(())
}

pub fn reconstruct(ctx: &mut Ctx, a: &ReconstructArgs) -> Result<()> {
    let arch = read_arch(ctx, &a.arch)?;
    let (gpt, vocab, fcn) = load_models(ctx, &a.gpt, &a.fcn)?;
    let g = guide(ctx, &gpt, &fcn, &vocab)?;
    let mut r = rng::substream(ctx.cfg.ga.seed, &[0xc1]);
    let (out, trace) = nas_core::reconstruct::reconstruct(&arch, &g, a.rate, &mut r)?;
    write_json(&a.out, &out)?;
    ctx.output("arch", &a.out)?;
    if let Some(t) = &a.trace {
        write_json(t, &trace)?;
        ctx.output("trace", t)?;
    }
    outln!("eliminated {:?}, refilled with {:?}", trace.eliminated, trace.kinds);
    Ok(())
}

pub fn search(ctx: &mut Ctx, a: &SearchArgs) -> Result<()> {
    let ecfg = evaluator_config(ctx, a.evaluator.as_deref(), None)?;
    let ev = evaluator(ctx, &ecfg)?;
    let models = match (&a.gpt, &a.fcn) {
        (Some(g), Some(f)) if !a.unguided => Some(load_models(ctx, g, f)?),
        _ if a.unguided => None,
        _ => bail!(UsageError("search needs --gpt and --fcn, or --unguided".into())),
    };
    let g = match &models {
        Some((gpt, vocab, fcn)) => Some(guide(ctx, gpt, fcn, vocab)?),
        None => None,
    };
    let result = run_search(&ctx.cfg.ga, g.as_ref(), ev.as_ref(), ctx.exec)?;
    std::fs::create_dir_all(&a.out).map_err(|e| nas_core::Error::io(&a.out, e))?;
    let path = a.out.join(RESULT_FILE);
    write_json(&path, &result)?;
    ctx.output("result", &path)?;
    let mut lines = String::new();
    for h in &result.history {
        lines.push_str(&serde_json::to_string(h)?);
        lines.push('\n');
    }
    let path = a.out.join(GENERATIONS_FILE);
    write_bytes(&path, lines.as_bytes())?;
    ctx.output("generations", &path)?;
    let path = a.out.join(BEST_ARCH_FILE);
    write_json(&path, &result.best.arch)?;
    ctx.output("best-arch", &path)?;
    outln!(
        "best fitness {:.4} after {} generations ({} evaluator calls)",
        result.best_fitness(),
        result.history.len() - 1,
        result.evaluator_calls
    );
    Ok(())
}

pub fn eval(ctx: &mut Ctx, a: &EvalArgs) -> Result<()> {
    let arch = read_arch(ctx, &a.arch)?;
    let ecfg = evaluator_config(ctx, a.evaluator.as_deref(), a.mode.as_deref())?;
    let ev = evaluator(ctx, &ecfg)?;
    let record = ev.evaluate(&arch, &[]).map_err(nas_core::Error::from)?;
    match &a.out {
        Some(p) => {
            write_json(p, &record)?;
            ctx.output("fitness", p)?;
        }
        None => outln!("{}", serde_json::to_string_pretty(&record)?),
    }
    Ok(())
}

pub fn correlate(ctx: &mut Ctx, a: &CorrelateArgs) -> Result<()> {
    let records = read_records(ctx, "corpus", &a.corpus)?;
    let archs: Vec<Architecture> = records.into_iter().map(|r| r.arch).collect();
    let mut evs = Vec::new();
    for m in &a.modes {
        evs.push((m.as_str(), surrogate(ctx, parse_mode(m)?)?));
    }
    if evs.len() < 2 {
        bail!(UsageError("--modes needs at least two entries".into()));
    }
    let named: Vec<(&str, &dyn Evaluator)> = evs.iter().map(|(n, e)| (*n, e as &dyn Evaluator)).collect();
    let mut pairs = Vec::new();
    for i in 0..named.len() {
        for j in i + 1..named.len() {
            pairs.push((i, j));
        }
    }
    let rows = nas_core::evaluation::correlation_report(&named, &pairs, &archs, ctx.exec)?;
    out!("{}", format_correlation_table(&rows));
    if let Some(p) = &a.out {
        write_json(p, &rows)?;
        ctx.output("correlation", p)?;
    }
    Ok(())
}

pub fn ablate_rates(ctx: &mut Ctx, a: &AblateRatesArgs) -> Result<()> {
    if a.rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
        bail!(UsageError("--rates must lie in [0, 1]".into()));
    }
    let (gpt, vocab, fcn) = load_models(ctx, &a.gpt, &a.fcn)?;
    let g = guide(ctx, &gpt, &fcn, &vocab)?;
    let ecfg = ctx.cfg.evaluator.clone();
    let ev = evaluator(ctx, &ecfg)?;
    let seed = ctx.cfg.ga.seed;
    let archs = ablation_architectures(a.count, &ctx.cfg.ga.generation_options(), seed)?;
    let table = reporting::ablate_rates(&archs, &g, ev.as_ref(), &a.rates, seed, ctx.exec)?;
    out!("{}", format_rate_table(&table.rows));
    if let Some(p) = &a.out {
        write_json(p, &table)?;
        ctx.output("ablation", p)?;
    }
    Ok(())
}

pub fn ablate_epochs(ctx: &mut Ctx, a: &AblateEpochsArgs) -> Result<()> {
    let cheap = surrogate(ctx, SurrogateMode::Cheap)?;
    let full = surrogate(ctx, SurrogateMode::Full)?;
    let archs = ablation_architectures(a.count, &ctx.cfg.ga.generation_options(), ctx.cfg.ga.seed)?;
    let modes: [(&str, &dyn Evaluator); 2] = [("cheap", &cheap), ("full", &full)];
    let rows = reporting::ablate_epochs(&archs, &modes, &[(0, 1)], ctx.exec)?;
    out!("{}", format_correlation_table(&rows));
    if let Some(p) = &a.out {
        write_json(p, &rows)?;
        ctx.output("correlation", p)?;
    }
    Ok(())
}

pub fn report(ctx: &mut Ctx, a: &ReportArgs) -> Result<()> {
    let summary = reporting::report(&a.run_dir)?;
    ctx.input("result", &a.run_dir.join(RESULT_FILE))?;
    let gens = a.run_dir.join(GENERATIONS_FILE);
    if gens.is_file() {
        ctx.input("generations", &gens)?;
    }
    for (role, name) in [("plot-data", FITNESS_TSV), ("plot-script", PLOT_SCRIPT), ("summary", SUMMARY_FILE)] {
        ctx.output(role, &a.run_dir.join(name))?;
    }
    out!("{}", summary.text);
    Ok(())
}
