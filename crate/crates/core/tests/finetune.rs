mod common;

use hart_core::checkpoint::{Checkpoint, CheckpointMeta, DType};
use hart_core::corpus::{
    generate_document_task, generate_user_task, DocumentTaskConfig, SyntheticConfig, UserTaskConfig,
};
use hart_core::finetune::{
    baseline_user_predict, build_document_instances, build_user_instances, document_logits,
    finetune_document, finetune_user, init_head, user_predictions, user_rep, FinetuneConfig,
    Freeze, Representation, TaskSplit,
};
use hart_core::hart::{recurrence_param_names, run_sequence, ForwardMode, HartModel};
use hart_core::numerics::Tape;
use rand::Rng;

fn small() -> SyntheticConfig {
    SyntheticConfig {
        n_users: 24,
        messages_min: 3,
        messages_max: 5,
        tokens_min: 4,
        tokens_max: 6,
        vocab_size: 40,
        subvocab_size: 8,
        ..Default::default()
    }
}

fn doc_setup() -> (
    HartModel,
    Vec<hart_core::finetune::DocumentInstance>,
    Vec<hart_core::finetune::DocumentInstance>,
) {
    let (hist, docs) = generate_document_task(&DocumentTaskConfig {
        corpus: small(),
        ..Default::default()
    })
    .unwrap();
    let vocab = hist.vocab;
    let m = common::generic_model(common::config(vocab.len(), 8, 2, 2, 8), 3, 2.0);
    let tr = build_document_instances(&docs, &hist.corpus, &vocab, 8, 6, true, TaskSplit::Train)
        .unwrap();
    let dv =
        build_document_instances(&docs, &hist.corpus, &vocab, 8, 6, true, TaskSplit::Dev).unwrap();
    (m, tr, dv)
}

fn ft(freeze: Freeze) -> FinetuneConfig {
    FinetuneConfig {
        epochs: 2,
        batch_size: 4,
        learning_rate: 1e-2,
        freeze,
        ..FinetuneConfig::default()
    }
}

#[test]
fn zero_head_outputs_its_bias_for_any_input() {
    let (m, tr, _) = doc_setup();
    let mut head = init_head(8, 2, 0);
    head.get_mut("head.w")
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    head.get_mut("head.b")
        .unwrap()
        .data_mut()
        .copy_from_slice(&[0.3, -0.2]);
    for l in document_logits(&m, &head, &tr, ForwardMode::Full, Representation::Final).unwrap() {
        assert_eq!(l, vec![0.3, -0.2]);
    }
    head.get_mut("head.b")
        .unwrap()
        .data_mut()
        .copy_from_slice(&[0.0, 0.0]);
    for l in document_logits(&m, &head, &tr, ForwardMode::Full, Representation::Extract).unwrap() {
        // uniform class probabilities
        assert_eq!(l, vec![0.0, 0.0]);
    }
}

#[test]
fn single_block_user_representation_is_the_first_state() {
    let m = common::generic_model(common::config(20, 8, 2, 2, 6), 4, 3.0);
    let seq = common::random_sequence(&mut common::rng(5), 20, 6, 1);
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, |_| false);
    let rep = user_rep(&mut tape, &p, &m.config, &seq, ForwardMode::Full, None).unwrap();
    let out = run_sequence(&m, &seq, ForwardMode::Full).unwrap();
    assert_eq!(tape.value(rep).data(), &out.trajectory[1].u[..]);

    // several blocks: mean of U_1..U_n
    let seq = common::random_sequence(&mut common::rng(6), 20, 6, 3);
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, |_| false);
    let rep = user_rep(&mut tape, &p, &m.config, &seq, ForwardMode::Full, None).unwrap();
    let out = run_sequence(&m, &seq, ForwardMode::Full).unwrap();
    for c in 0..8 {
        let mean = out.trajectory[1..].iter().map(|s| s.u[c]).sum::<f64>() / 3.0;
        assert!((tape.value(rep).data()[c] - mean).abs() < 1e-15);
    }
}

#[test]
fn frozen_parameters_stay_bit_identical() {
    let (m, tr, dv) = doc_setup();
    let out = finetune_document(&ft(Freeze::All), m.clone(), 2, &tr, &dv).unwrap();
    for ((n, a), (_, b)) in m.params.iter().zip(out.model.params.iter()) {
        assert_eq!(a, b, "{n} moved under a full freeze");
    }

    let out = finetune_document(&ft(Freeze::RecurrenceOnly), m.clone(), 2, &tr, &[]).unwrap();
    assert_eq!(out.best_epoch, 2);
    let rec = recurrence_param_names(&m.config);
    let mut moved = 0;
    for ((n, a), (_, b)) in m.params.iter().zip(out.model.params.iter()) {
        if rec.iter().any(|r| r == n) {
            moved += usize::from(a != b);
        } else {
            assert_eq!(a, b, "{n} moved under a recurrence-only freeze");
        }
    }
    assert!(moved > 0);
}

#[test]
fn document_representation_ignores_trailing_pad_blocks() {
    let (m, tr, _) = doc_setup();
    let head = init_head(8, 2, 1);
    let mut padded = tr.clone();
    for inst in &mut padded {
        let pad = hart_core::corpus::segment_token_messages("x", &[vec![3]], 8, Some(3))
            .unwrap()
            .blocks[2]
            .clone();
        inst.seq.blocks.push(pad.clone());
        inst.seq.blocks.push(pad);
    }
    let a = document_logits(&m, &head, &tr, ForwardMode::Full, Representation::Final).unwrap();
    let b = document_logits(&m, &head, &padded, ForwardMode::Full, Representation::Final).unwrap();
    assert_eq!(a, b);
}

#[test]
fn reordering_blocks_changes_the_trajectory() {
    let m = common::generic_model(common::config(20, 8, 2, 2, 6), 7, 3.0);
    let seq = common::random_sequence(&mut common::rng(8), 20, 6, 3);
    let mut swapped = seq.clone();
    swapped.blocks.swap(0, 1);
    let a = run_sequence(&m, &seq, ForwardMode::Full).unwrap();
    let b = run_sequence(&m, &swapped, ForwardMode::Full).unwrap();
    assert_ne!(a.trajectory.last(), b.trajectory.last());
}

#[test]
fn baseline_prediction_is_the_mean() {
    let mut rng = common::rng(9);
    let xs: Vec<f64> = (0..100).map(|_| rng.gen_range(-5.0..5.0)).collect();
    // running-mean oracle
    let mut mean = 0.0;
    for (i, x) in xs.iter().enumerate() {
        mean += (x - mean) / (i + 1) as f64;
    }
    assert!((baseline_user_predict(&xs).unwrap() - mean).abs() < 1e-12);
}

#[test]
fn user_regression_trains_and_predicts_one_value_per_user() {
    let (data, labels) = generate_user_task(&UserTaskConfig {
        corpus: small(),
        ..Default::default()
    })
    .unwrap();
    let m = common::generic_model(common::config(data.vocab.len(), 8, 2, 2, 8), 10, 1.0);
    let tr =
        build_user_instances(&labels, &data.corpus, &data.vocab, 8, 4, TaskSplit::Train).unwrap();
    let te =
        build_user_instances(&labels, &data.corpus, &data.vocab, 8, 4, TaskSplit::Test).unwrap();
    let out = finetune_user(&ft(Freeze::None), m, &tr, &[]).unwrap();
    let preds = user_predictions(&out.model, &out.head, &te, ForwardMode::Full).unwrap();
    assert_eq!(preds.len(), te.len());
    assert!(preds.iter().all(|p| p.is_finite()));
    assert_eq!(out.train_losses.len(), 2);
    assert!(out.dev_losses.is_empty());
}

#[test]
fn checkpoint_bytes_are_stable_across_a_round_trip() {
    let (m, _, _) = doc_setup();
    let vocab = generate_document_task(&DocumentTaskConfig {
        corpus: small(),
        ..Default::default()
    })
    .unwrap()
    .0
    .vocab;
    for dtype in [DType::F64, DType::F32] {
        let mut c = Checkpoint::new(
            m.clone(),
            vocab.clone(),
            CheckpointMeta {
                seed: 3,
                ..Default::default()
            },
        );
        c.extra = init_head(8, 2, 4);
        c.dtype = dtype;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.hart");
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        let p2 = dir.path().join("b.hart");
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
        if dtype == DType::F64 {
            for ((_, a), (_, b)) in m.params.iter().zip(back.model.params.iter()) {
                assert_eq!(a, b);
            }
        }
        assert_eq!(back.vocab.tokens(), vocab.tokens());
        assert_eq!(back.extra.len(), 4);
    }
}
