#![allow(dead_code)]

use nas_core::arch::{Canonicalization, Vocabulary};
use nas_core::corpus::{
    build_finetune_corpus, build_vocabulary, generate_teacher_corpus, make_training_pairs,
    CorpusRecord, GenerationOptions,
};
use nas_core::evaluation::MarkovTeacher;
use nas_core::fcn::{fcn_examples, fcn_train, FcnConfig, FcnModel};
use nas_core::gpt::{train, Gpt, GptConfig, Phase};
use nas_core::library::BlockLibrary;
use nas_core::par::Execution;

/// A small trained model pair over a small teacher corpus.
pub struct Fixture {
    pub teacher: MarkovTeacher,
    pub records: Vec<CorpusRecord>,
    pub vocab: Vocabulary,
    pub gpt: Gpt<f32>,
    pub fcn: FcnModel,
}

pub fn fixture() -> Fixture {
    let teacher = MarkovTeacher::default_library();
    let opts = GenerationOptions::default();
    let mut records = generate_teacher_corpus(&teacher, 60, 1, &opts).unwrap();
    let teacher_only = records.clone();
    records.extend(build_finetune_corpus(&BlockLibrary::standard(), 30, 2, &opts).unwrap());
    let vocab = build_vocabulary(&records, Canonicalization::Full).unwrap();
    let cfg = GptConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        epochs: 2,
        lr: 3e-3,
        ..Default::default()
    };
    let pairs = make_training_pairs(&teacher_only, &vocab, cfg.context_len, 1).unwrap();
    let gpt = Gpt::<f32>::new(cfg, vocab.size(), 0).unwrap();
    let (gpt, _) = train(gpt, &pairs, Phase::Pretrain, Execution::Parallel, |_, _| Ok(())).unwrap();
    let examples = fcn_examples(&records, &vocab, 10).unwrap();
    let fcfg = FcnConfig {
        hidden: vec![32],
        epochs: 2,
        ..Default::default()
    };
    let (fcn, _) = fcn_train(&examples, fcfg, vocab.size(), &BlockLibrary::standard()).unwrap();
    Fixture {
        teacher,
        records,
        vocab,
        gpt,
        fcn,
    }
}
