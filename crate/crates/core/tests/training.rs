use chunkalign::alignment::{prepare_assignment, CapacityPolicy};
use chunkalign::harness::{prepare_training, train, RunConfig};
use chunkalign::losses::{batch_loss, LossItem, Reduction};
use chunkalign::model::{Architecture, Model, ModelConfig};
use chunkalign::synthdata::{generate_dataset, Dataset, SynthTaskConfig};
use chunkalign::tensor::Tape;
use chunkalign::Error;

fn small_run(arch: Architecture, steps: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.arch = arch;
    cfg.model = ModelConfig {
        encoder_dim: 16,
        ff_dim: 32,
        predictor_dim: 16,
        joiner_dim: 16,
        ..ModelConfig::default()
    };
    cfg.task = SynthTaskConfig {
        min_tokens: 3,
        max_tokens: 6,
        ..SynthTaskConfig::default()
    };
    cfg.train.steps = steps;
    cfg.train.batch_size = 2;
    cfg.train.eval_every = 0;
    cfg
}

fn single_utterance(cfg: &RunConfig) -> Dataset {
    let mut data = generate_dataset(&cfg.task, 10).unwrap();
    data.train.truncate(1);
    data.dev.clear();
    data.test.clear();
    data
}

#[test]
fn uniform_outputs_give_closed_form_chunkwise_loss() {
    let cfg = small_run(Architecture::Chunkwise, 1);
    let data = generate_dataset(&cfg.task, 10).unwrap();
    let mut model = Model::new(cfg.model.clone(), Architecture::Chunkwise).unwrap();
    for name in [
        "joiner.w_label",
        "joiner.b_label",
        "joiner.w_gate",
        "joiner.b_gate",
    ] {
        let id = model.params().find(name).unwrap();
        model.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let u = &data.train[0];
    let a = prepare_assignment(
        &u.alignment.with_eos(),
        cfg.model.chunk_len,
        CapacityPolicy::Repair,
    )
    .unwrap();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let item = LossItem {
        features: &u.features,
        labels: &u.tokens,
        assignment: Some(&a),
    };
    let (loss, report) = batch_loss(&model, &mut tape, &bound, &[item], Reduction::Sum).unwrap();
    let labels = (u.tokens.len() + 1) as f64;
    let chunks = a.num_chunks() as f64;
    let v = cfg.model.vocab_size as f64;
    let expect = labels * v.ln() + (labels + chunks) * 2f64.ln();
    assert!((tape.value(loss).data()[0] - expect).abs() < 1e-9);
    assert!((report.label_ce - labels * v.ln()).abs() < 1e-9);
}

#[test]
fn chunkwise_overfits_one_utterance() {
    let mut cfg = small_run(Architecture::Chunkwise, 2000);
    cfg.train.batch_size = 1;
    cfg.train.warmup_steps = 50;
    let data = single_utterance(&cfg);
    let out = train(&cfg, &data, None).unwrap();
    let best = out.log.iter().map(|e| e.loss).fold(f64::INFINITY, f64::min);
    assert!(best < 0.01, "best loss {best}");
}

#[test]
fn transducer_overfits_one_utterance() {
    let mut cfg = small_run(Architecture::Transducer, 600);
    cfg.train.batch_size = 1;
    cfg.train.warmup_steps = 50;
    let data = single_utterance(&cfg);
    let out = train(&cfg, &data, None).unwrap();
    let first = out.log[0].loss;
    let best = out.log.iter().map(|e| e.loss).fold(f64::INFINITY, f64::min);
    assert!(best < 0.05 * first, "loss {first} -> {best}");
}

#[test]
fn identical_seeds_give_identical_models() {
    for arch in [
        Architecture::Chunkwise,
        Architecture::Aligner,
        Architecture::Transducer,
    ] {
        let cfg = small_run(arch, 15);
        let data = generate_dataset(&cfg.task, 30).unwrap();
        let a = train(&cfg, &data, None).unwrap();
        let b = train(&cfg, &data, None).unwrap();
        assert_eq!(a.model.params(), b.model.params(), "{}", arch.name());
        assert_eq!(
            a.log.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>(),
            b.log.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>()
        );
        let mut other = cfg.clone();
        other.run.seed += 1;
        let c = train(&other, &data, None).unwrap();
        assert_ne!(a.model.params(), c.model.params());
    }
}

#[test]
fn strict_capacity_rejects_overfull_chunks() {
    let mut cfg = small_run(Architecture::Chunkwise, 1);
    cfg.task.min_duration = 1;
    cfg.task.max_duration = 2;
    cfg.task.min_tokens = 10;
    cfg.task.max_tokens = 12;
    cfg.task.chunk_len = 0;
    let data = generate_dataset(&cfg.task, 20).unwrap();
    cfg.run.capacity = CapacityPolicy::Strict;
    assert!(matches!(
        prepare_training(&cfg, &data.train),
        Err(Error::Capacity { .. })
    ));
    cfg.run.capacity = CapacityPolicy::Repair;
    let repaired = prepare_training(&cfg, &data.train);
    assert!(!matches!(repaired, Err(Error::Capacity { .. })));
}
