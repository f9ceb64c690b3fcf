//! Subcommand bodies. Each reads its inputs from the resolved config and
//! writes a JSON report plus any artifacts under `output_dir`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hart_core::checkpoint::{Checkpoint, CheckpointMeta, TaskMeta};
use hart_core::corpus::{
    generate_document_task, generate_synthetic_corpus, generate_user_task, load_corpus,
    split_users, BlockSequence, SyntheticCorpus, UserCorpus, Vocabulary,
};
use hart_core::finetune::{
    self, build_document_instances, build_user_instances, document_logits, finetune_document,
    user_predictions, FinetuneOutcome, LabeledDocumentSet, LabeledUserSet, Representation,
    TaskSplit,
};
use hart_core::hart::{init_user_state, ForwardMode, HartModel, StateInit};
use hart_core::metrics::{
    self, accuracy, disattenuated_r, history_sweep as sweep, pearson_r, weighted_f1, MetricReport,
    NllCount, PerplexityResult, Significance,
};
use hart_core::training::{self, build_instances, LogRecord, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{DataKind, ExperimentConfig};
use crate::{create_file, write_report, Ablation, CliError, UserContext, CODE_VERSION};

fn read_corpus(cfg: &ExperimentConfig, field: &str) -> Result<UserCorpus, CliError> {
    let p = cfg.input(field)?;
    let (corpus, stats) = load_corpus(p).user_ctx(|| format!("paths.{field} ({})", p.display()))?;
    for u in &stats.merged_users {
        log::warn!(
            "{}: records of user {u} were not contiguous and have been merged",
            p.display()
        );
    }
    log::info!(
        "{}: {} users, {} messages",
        p.display(),
        stats.users,
        stats.messages
    );
    Ok(corpus)
}

fn read_vocab(cfg: &ExperimentConfig) -> Result<Vocabulary, CliError> {
    let p = cfg.input("vocab")?;
    Vocabulary::load(p).user_ctx(|| format!("paths.vocab ({})", p.display()))
}

fn read_checkpoint(cfg: &ExperimentConfig) -> Result<Checkpoint, CliError> {
    let p = cfg.input("checkpoint")?;
    let ckpt = Checkpoint::load(p).user_ctx(|| format!("paths.checkpoint ({})", p.display()))?;
    if let Some(vp) = cfg.optional_input("vocab")? {
        let v = Vocabulary::load(vp).user_ctx(|| format!("paths.vocab ({})", vp.display()))?;
        check_vocab(&ckpt.vocab, &v, vp)?;
    }
    Ok(ckpt)
}

/// The checkpoint's vocabulary must equal the one the corpus was built with.
fn check_vocab(ckpt: &Vocabulary, corpus: &Vocabulary, corpus_path: &Path) -> Result<(), CliError> {
    if ckpt.tokens() == corpus.tokens() {
        return Ok(());
    }
    let first = ckpt
        .tokens()
        .iter()
        .zip(corpus.tokens())
        .position(|(a, b)| a != b);
    let detail = match first {
        Some(i) => format!(
            "first difference at id {i}: `{}` vs `{}`",
            ckpt.tokens()[i],
            corpus.tokens()[i]
        ),
        None => "one list is a prefix of the other".into(),
    };
    Err(CliError::user(format!(
        "vocabulary mismatch: checkpoint has {} tokens (fingerprint {}), paths.vocab {} has {} tokens (fingerprint {}); {detail}",
        ckpt.len(),
        ckpt.fingerprint(),
        corpus_path.display(),
        corpus.len(),
        corpus.fingerprint()
    )))
}

fn validate_train(t: &TrainConfig) -> Result<(), CliError> {
    t.validate()
        .map_err(|e| CliError::user(format!("[train] {e}")))
}

fn meta(cfg: &ExperimentConfig, mode: ForwardMode) -> CheckpointMeta {
    CheckpointMeta {
        code_version: CODE_VERSION.into(),
        seed: cfg.seed,
        train_mode: mode.as_str().into(),
        config_hash: cfg.hash(),
        ..Default::default()
    }
}

fn save_checkpoint(
    cfg: &ExperimentConfig,
    ckpt: &mut Checkpoint,
    name: &str,
) -> Result<PathBuf, CliError> {
    ckpt.dtype = cfg.checkpoint_dtype;
    let path = cfg.output_dir.join(name);
    ckpt.save(&path).map_err(CliError::internal)?;
    Ok(path)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    let mut w = BufWriter::new(create_file(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(CliError::internal)?;
        w.write_all(b"\n").map_err(CliError::internal)?;
    }
    w.flush().map_err(CliError::internal)
}

fn per_user_mean(parts: &[NllCount]) -> Vec<f64> {
    parts
        .iter()
        .map(|p| if p.count == 0 { 0.0 } else { p.mean() })
        .collect()
}

fn ppl_metric(name: &str, r: &PerplexityResult) -> MetricReport {
    MetricReport {
        per_instance: per_user_mean(&r.per_user),
        ..MetricReport::new(name, r.perplexity)
    }
}

fn permutation(
    cfg: &ExperimentConfig,
    comparator: &str,
    a: &[f64],
    b: &[f64],
) -> Result<Significance, CliError> {
    let p = metrics::permutation_test(a, b, cfg.eval.n_resamples, cfg.seed)
        .map_err(|e| CliError::user(format!("[eval] {e}")))?;
    Ok(Significance {
        comparator: comparator.into(),
        test: "paired_sign_flip_permutation".into(),
        p_value: p,
        n_resamples: cfg.eval.n_resamples,
        seed: cfg.seed,
    })
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = &cfg.output_dir;
    let corpus_path = out.join("corpus.tsv");
    let vocab_path = out.join("vocab.txt");
    let labels_path = out.join("labels.tsv");
    let bad = |e: hart_core::corpus::CorpusError| CliError::user(format!("[data] {e}"));
    let (data, labels): (SyntheticCorpus, Option<String>) = match cfg.data.kind {
        DataKind::Lm => (
            generate_synthetic_corpus(&cfg.data.corpus).map_err(bad)?,
            None,
        ),
        DataKind::Document => {
            let (c, l) = generate_document_task(&cfg.data.document_task()).map_err(bad)?;
            (c, Some(l.to_tsv()))
        }
        DataKind::User => {
            let (c, l) = generate_user_task(&cfg.data.user_task()).map_err(bad)?;
            (c, Some(l.to_tsv()))
        }
    };
    data.corpus.save(&corpus_path).map_err(CliError::internal)?;
    data.vocab.save(&vocab_path).map_err(CliError::internal)?;
    let styles: String = data
        .styles
        .iter()
        .map(|s| format!("{}\t{}\t{}\n", s.user_id, s.window_start, s.bias))
        .collect();
    fs::write(out.join("styles.tsv"), styles).map_err(CliError::internal)?;
    if let Some(l) = &labels {
        fs::write(&labels_path, l).map_err(CliError::internal)?;
    }
    write_report(
        cfg,
        "gen-data",
        "gen_data.json",
        json!({
            "kind": cfg.data.kind,
            "users": data.corpus.len(),
            "messages": data.corpus.num_messages(),
            "vocab_size": data.vocab.len(),
            "null_bias": cfg.data.corpus.null_bias(),
            "corpus": corpus_path,
            "vocab": vocab_path,
            "labels": labels.map(|_| labels_path),
        }),
    )?;
    Ok(())
}

pub fn split(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let corpus = read_corpus(cfg, "corpus")?;
    let s = split_users(&corpus, &cfg.split, cfg.seed)
        .map_err(|e| CliError::user(format!("[split] {e}")))?;
    let out = &cfg.output_dir;
    let mut files = serde_json::Map::new();
    for (name, part) in [
        ("train", &s.train),
        ("dev", &s.dev_unseen),
        ("test", &s.test_unseen),
        ("dev_seen", &s.dev_seen_heldout),
    ] {
        let p = out.join(format!("{name}.tsv"));
        part.save(&p).map_err(CliError::internal)?;
        files.insert(
            name.into(),
            json!({ "path": p, "users": part.len(), "messages": part.num_messages() }),
        );
    }
    let vocab = Vocabulary::build(&s.train, 1);
    let vp = out.join("vocab.txt");
    vocab.save(&vp).map_err(CliError::internal)?;
    write_report(
        cfg,
        "split",
        "split.json",
        json!({ "splits": files, "vocab": vp, "vocab_size": vocab.len() }),
    )?;
    Ok(())
}

/// Pre-trains from `init`, writing the JSONL log as epochs finish.
fn run_pretrain(
    cfg: &ExperimentConfig,
    tc: &TrainConfig,
    init: HartModel,
    train: &[BlockSequence],
    dev: &[BlockSequence],
    log_name: &str,
) -> Result<training::TrainOutcome, CliError> {
    let log_path = cfg.output_dir.join(log_name);
    let mut w = BufWriter::new(create_file(&log_path)?);
    let mut io_err = None;
    let outcome = training::pretrain(tc, init, train, dev, |r: &LogRecord| {
        let res = serde_json::to_writer(&mut w, r)
            .map_err(std::io::Error::from)
            .and_then(|_| w.write_all(b"\n"))
            .and_then(|_| w.flush());
        if let Err(e) = res {
            io_err.get_or_insert(e);
        }
    })
    .map_err(CliError::internal)?;
    if let Some(e) = io_err {
        return Err(CliError::internal(e));
    }
    Ok(outcome)
}

fn instances(
    cfg: &ExperimentConfig,
    corpus: &UserCorpus,
    vocab: &Vocabulary,
    block_size: usize,
    cap: usize,
) -> Result<Vec<BlockSequence>, CliError> {
    build_instances(corpus, vocab, block_size, cap).map_err(|e| {
        CliError::user(format!(
            "segmenting corpus under {}: {e}",
            cfg.output_dir.display()
        ))
    })
}

pub fn pretrain(cfg: &ExperimentConfig) -> Result<(), CliError> {
    validate_train(&cfg.train)?;
    let vocab = read_vocab(cfg)?;
    let train_corpus = read_corpus(cfg, "train")?;
    let dev_corpus = match cfg.optional_input("dev")? {
        Some(_) => Some(read_corpus(cfg, "dev")?),
        None => None,
    };
    let mc = cfg.model.model_config(vocab.len(), cfg.train.max_blocks);
    mc.validate()
        .map_err(|e| CliError::user(format!("[model] {e}")))?;
    let train = instances(
        cfg,
        &train_corpus,
        &vocab,
        mc.block_size,
        cfg.train.max_blocks,
    )?;
    let dev = match &dev_corpus {
        Some(c) => instances(cfg, c, &vocab, mc.block_size, cfg.train.max_blocks)?,
        None => Vec::new(),
    };
    let mut init = HartModel::init(mc, cfg.seed).map_err(CliError::internal)?;
    if cfg.model.state_init == StateInit::CorpusAverage {
        let u0 = init_user_state(&init, StateInit::CorpusAverage, Some(&train))
            .map_err(CliError::internal)?;
        init.set_u0(&u0.u).map_err(CliError::internal)?;
    }
    let outcome = run_pretrain(cfg, &cfg.train, init, &train, &dev, "train_log.jsonl")?;
    let dev_nll = outcome
        .best_dev_nll
        .is_finite()
        .then_some(outcome.best_dev_nll);
    let mut ckpt = Checkpoint::new(
        outcome.model,
        vocab,
        CheckpointMeta {
            epoch: outcome.best_epoch,
            steps: outcome.steps,
            dev_nll,
            ..meta(cfg, cfg.train.mode)
        },
    );
    ckpt.optimizer = Some(outcome.optimizer);
    let path = save_checkpoint(cfg, &mut ckpt, "checkpoint.hart")?;
    write_report(
        cfg,
        "pretrain",
        "pretrain.json",
        json!({
            "checkpoint": path,
            "mode": cfg.train.mode,
            "best_epoch": outcome.best_epoch,
            "steps": outcome.steps,
            "dev_nll": dev_nll,
            "dev_perplexity": dev_nll.map(f64::exp),
            "parameters": ckpt.model.params.num_scalars(),
            "train_users": train.len(),
            "dev_users": dev.len(),
        }),
    )?;
    Ok(())
}

fn eval_instances(
    cfg: &ExperimentConfig,
    ckpt: &Checkpoint,
) -> Result<Vec<BlockSequence>, CliError> {
    let corpus = read_corpus(cfg, "eval")?;
    if corpus.is_empty() {
        return Err(CliError::user("paths.eval holds no users"));
    }
    instances(
        cfg,
        &corpus,
        &ckpt.vocab,
        ckpt.model.config.block_size,
        cfg.eval.max_blocks,
    )
}

fn ppl(
    model: &HartModel,
    seqs: &[BlockSequence],
    k: usize,
    mode: ForwardMode,
) -> Result<PerplexityResult, CliError> {
    metrics::perplexity(model, seqs, k, mode).map_err(|e| match e {
        metrics::MetricError::Invalid(m) => CliError::user(format!("[eval] {m}")),
        e => CliError::internal(e),
    })
}

pub fn eval_ppl(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let ckpt = read_checkpoint(cfg)?;
    let seqs = eval_instances(cfg, &ckpt)?;
    let r = ppl(&ckpt.model, &seqs, cfg.eval.history_blocks, cfg.eval.mode)?;
    write_report(
        cfg,
        "eval-ppl",
        "eval_ppl.json",
        json!({
            "history_blocks": cfg.eval.history_blocks,
            "mode": cfg.eval.mode,
            "nll": r.nll,
            "tokens": r.tokens,
            "users": seqs.len(),
            "metrics": [ppl_metric("perplexity", &r)],
        }),
    )?;
    println!("perplexity {:.6} over {} tokens", r.perplexity, r.tokens);
    Ok(())
}

pub fn history_sweep(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let ckpt = read_checkpoint(cfg)?;
    let seqs = eval_instances(cfg, &ckpt)?;
    let ks = &cfg.eval.sweep_blocks;
    let rows = sweep(&ckpt.model, &seqs, ks).map_err(|e| match e {
        metrics::MetricError::Invalid(m) => CliError::user(format!("eval.sweep_blocks: {m}")),
        metrics::MetricError::Empty => CliError::user(format!(
            "no evaluation user has {} non-PAD blocks under eval.max_blocks = {}; lower eval.sweep_blocks or use longer histories",
            ks.last().copied().unwrap_or(0),
            cfg.eval.max_blocks
        )),
        e => CliError::internal(e),
    })?;
    let mut reports: Vec<MetricReport> = rows
        .iter()
        .map(|r| MetricReport {
            per_instance: per_user_mean(&r.per_user),
            ..MetricReport::new(format!("perplexity_k{}", r.history_blocks), r.perplexity)
        })
        .collect();
    if reports.len() > 1 {
        // only users with scored tokens take part in the paired test
        let keep: Vec<usize> = (0..seqs.len())
            .filter(|&i| rows[0].per_user[i].count > 0)
            .collect();
        let pick = |r: &MetricReport| keep.iter().map(|&i| r.per_instance[i]).collect::<Vec<_>>();
        let first = pick(&reports[0]);
        let last_i = reports.len() - 1;
        let last = pick(&reports[last_i]);
        let s = permutation(cfg, &reports[0].metric.clone(), &last, &first)?;
        reports[last_i].significance.push(s);
    }
    let mut tsv = String::from("history_blocks\tperplexity\n");
    for r in &rows {
        tsv.push_str(&format!("{}\t{}\n", r.history_blocks, r.perplexity));
    }
    fs::write(cfg.output_dir.join("history_sweep.tsv"), tsv).map_err(CliError::internal)?;
    write_report(
        cfg,
        "history-sweep",
        "history_sweep.json",
        json!({ "sweep_blocks": ks, "scored_from_block": ks.last().map(|k| k - 1), "metrics": reports }),
    )?;
    for r in &rows {
        println!("k={}\tperplexity {:.6}", r.history_blocks, r.perplexity);
    }
    Ok(())
}

fn validate_finetune(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.finetune
        .validate()
        .map_err(|e| CliError::user(format!("[finetune] {e}")))
}

fn finetune_log(cfg: &ExperimentConfig, o: &FinetuneOutcome) -> Result<(), CliError> {
    let recs: Vec<_> = o
        .train_losses
        .iter()
        .enumerate()
        .map(|(i, t)| json!({ "epoch": i + 1, "train_loss": t, "dev_loss": o.dev_losses.get(i) }))
        .collect();
    write_jsonl(&cfg.output_dir.join("finetune_log.jsonl"), &recs)
}

fn task_error(e: finetune::FinetuneError) -> CliError {
    use finetune::FinetuneError as E;
    match e {
        E::LabeledTruncated { .. }
        | E::NoBlocks(_)
        | E::UnknownUser(_)
        | E::NoData(_)
        | E::InvalidConfig(_)
        | E::Corpus(_) => CliError::user(e.to_string()),
        e => CliError::internal(e),
    }
}

fn with_history(mode: ForwardMode) -> bool {
    mode != ForwardMode::NoHistory
}

pub fn finetune_doc(cfg: &ExperimentConfig) -> Result<(), CliError> {
    validate_finetune(cfg)?;
    let ckpt = read_checkpoint(cfg)?;
    let history = read_corpus(cfg, "corpus")?;
    let lp = cfg.input("labels")?;
    let labels =
        LabeledDocumentSet::load(lp).user_ctx(|| format!("paths.labels ({})", lp.display()))?;
    let ft = &cfg.finetune;
    let bs = ckpt.model.config.block_size;
    let build = |split, cap| {
        build_document_instances(
            &labels,
            &history,
            &ckpt.vocab,
            bs,
            cap,
            with_history(ft.mode),
            split,
        )
        .map_err(task_error)
    };
    let train = build(TaskSplit::Train, ft.train_max_blocks)?;
    let dev = build(TaskSplit::Dev, ft.eval_max_blocks)?;
    let o = finetune_document(ft, ckpt.model.clone(), labels.classes.len(), &train, &dev)
        .map_err(task_error)?;
    finetune_log(cfg, &o)?;
    let dev_f1 = if dev.is_empty() {
        None
    } else {
        let logits = document_logits(&o.model, &o.head, &dev, ft.mode, ft.representation)
            .map_err(CliError::internal)?;
        let preds: Vec<usize> = logits.iter().map(|l| finetune::argmax(l)).collect();
        let golds: Vec<usize> = dev.iter().map(|d| d.label).collect();
        Some(weighted_f1(&preds, &golds, labels.classes.len()).map_err(CliError::internal)?)
    };
    let task = TaskMeta {
        kind: "document".into(),
        classes: labels.classes.clone(),
        mode: ft.mode.as_str().into(),
        representation: match ft.representation {
            Representation::Final => "final",
            Representation::Extract => "extract",
        }
        .into(),
    };
    let mut out = Checkpoint::new(
        o.model,
        ckpt.vocab,
        CheckpointMeta {
            epoch: o.best_epoch,
            task: Some(task),
            ..meta(cfg, ft.mode)
        },
    );
    out.extra = o.head;
    let path = save_checkpoint(cfg, &mut out, "finetuned.hart")?;
    write_report(
        cfg,
        "finetune-doc",
        "finetune.json",
        json!({
            "checkpoint": path,
            "best_epoch": o.best_epoch,
            "train_documents": train.len(),
            "dev_documents": dev.len(),
            "dev_weighted_f1": dev_f1,
            "freeze": ft.freeze,
        }),
    )?;
    Ok(())
}

pub fn finetune_user(cfg: &ExperimentConfig) -> Result<(), CliError> {
    validate_finetune(cfg)?;
    let ckpt = read_checkpoint(cfg)?;
    let corpus = read_corpus(cfg, "corpus")?;
    let lp = cfg.input("labels")?;
    let labels =
        LabeledUserSet::load(lp).user_ctx(|| format!("paths.labels ({})", lp.display()))?;
    let ft = &cfg.finetune;
    let bs = ckpt.model.config.block_size;
    let train = build_user_instances(
        &labels,
        &corpus,
        &ckpt.vocab,
        bs,
        ft.train_max_blocks,
        TaskSplit::Train,
    )
    .map_err(task_error)?;
    let dev = build_user_instances(
        &labels,
        &corpus,
        &ckpt.vocab,
        bs,
        ft.eval_max_blocks,
        TaskSplit::Dev,
    )
    .map_err(task_error)?;
    let o = finetune::finetune_user(ft, ckpt.model.clone(), &train, &dev).map_err(task_error)?;
    finetune_log(cfg, &o)?;
    let unchanged = ckpt
        .model
        .params
        .iter()
        .zip(o.model.params.iter())
        .filter(|((_, a), (_, b))| a.data() == b.data())
        .map(|((n, _), _)| n.to_string())
        .collect::<Vec<_>>();
    let task = TaskMeta {
        kind: "user".into(),
        classes: Vec::new(),
        mode: ft.mode.as_str().into(),
        representation: "user_state_mean".into(),
    };
    let mut out = Checkpoint::new(
        o.model,
        ckpt.vocab,
        CheckpointMeta {
            epoch: o.best_epoch,
            task: Some(task),
            ..meta(cfg, ft.mode)
        },
    );
    out.extra = o.head;
    let path = save_checkpoint(cfg, &mut out, "finetuned.hart")?;
    write_report(
        cfg,
        "finetune-user",
        "finetune.json",
        json!({
            "checkpoint": path,
            "best_epoch": o.best_epoch,
            "train_users": train.len(),
            "dev_users": dev.len(),
            "freeze": ft.freeze,
            "unchanged_tensors": unchanged,
        }),
    )?;
    Ok(())
}

pub fn eval_task(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let ckpt = read_checkpoint(cfg)?;
    let task = ckpt.meta.task.clone().ok_or_else(|| {
        CliError::user(
            "paths.checkpoint carries no task head; run finetune-doc or finetune-user first",
        )
    })?;
    let mode = ForwardMode::parse(&task.mode)
        .ok_or_else(|| CliError::user(format!("checkpoint task mode `{}` unknown", task.mode)))?;
    let corpus = read_corpus(cfg, "corpus")?;
    let lp = cfg.input("labels")?;
    let split = cfg.eval.task_split;
    let cap = cfg.finetune.eval_max_blocks;
    let bs = ckpt.model.config.block_size;
    let mut tsv = String::new();
    let metrics: Vec<MetricReport> = match task.kind.as_str() {
        "document" => {
            let labels = LabeledDocumentSet::load(lp)
                .user_ctx(|| format!("paths.labels ({})", lp.display()))?;
            if labels.classes != task.classes {
                return Err(CliError::user(format!(
                    "label classes {:?} differ from the checkpoint's {:?}",
                    labels.classes, task.classes
                )));
            }
            let data = build_document_instances(
                &labels,
                &corpus,
                &ckpt.vocab,
                bs,
                cap,
                with_history(mode),
                split,
            )
            .map_err(task_error)?;
            if data.is_empty() {
                return Err(CliError::user(format!(
                    "no documents in split {}",
                    split.as_str()
                )));
            }
            let repr = if task.representation == "extract" {
                Representation::Extract
            } else {
                Representation::Final
            };
            let logits = document_logits(&ckpt.model, &ckpt.extra, &data, mode, repr)
                .map_err(CliError::internal)?;
            let preds: Vec<usize> = logits.iter().map(|l| finetune::argmax(l)).collect();
            let golds: Vec<usize> = data.iter().map(|d| d.label).collect();
            tsv.push_str("user_id\tgold\tprediction\n");
            for ((d, p), g) in data.iter().zip(&preds).zip(&golds) {
                tsv.push_str(&format!(
                    "{}\t{}\t{}\n",
                    d.user_id, task.classes[*g], task.classes[*p]
                ));
            }
            let correct: Vec<f64> = preds
                .iter()
                .zip(&golds)
                .map(|(p, g)| f64::from(u8::from(p == g)))
                .collect();
            let f1 = weighted_f1(&preds, &golds, task.classes.len()).map_err(CliError::internal)?;
            let acc = accuracy(&preds, &golds).map_err(CliError::internal)?;
            vec![
                MetricReport {
                    per_instance: correct,
                    ..MetricReport::new("weighted_f1", f1)
                },
                MetricReport::new("accuracy", acc),
            ]
        }
        "user" => {
            let labels =
                LabeledUserSet::load(lp).user_ctx(|| format!("paths.labels ({})", lp.display()))?;
            let data = build_user_instances(&labels, &corpus, &ckpt.vocab, bs, cap, split)
                .map_err(task_error)?;
            let preds = user_predictions(&ckpt.model, &ckpt.extra, &data, mode)
                .map_err(CliError::internal)?;
            let golds: Vec<f64> = data.iter().map(|u| u.target).collect();
            tsv.push_str("user_id\tgold\tprediction\n");
            for (u, p) in data.iter().zip(&preds) {
                tsv.push_str(&format!("{}\t{}\t{}\n", u.user_id, u.target, p));
            }
            let r = pearson_r(&preds, &golds).map_err(|e| {
                CliError::user(format!("pearson r on split {}: {e}", split.as_str()))
            })?;
            let r_dis = disattenuated_r(r, cfg.eval.reliability)
                .map_err(|e| CliError::user(format!("eval.reliability: {e}")))?;
            let sq: Vec<f64> = preds
                .iter()
                .zip(&golds)
                .map(|(p, g)| (p - g).powi(2))
                .collect();
            let mse = sq.iter().sum::<f64>() / sq.len() as f64;
            vec![
                MetricReport::new("pearson_r", r),
                MetricReport::new("disattenuated_r", r_dis),
                MetricReport {
                    per_instance: sq,
                    ..MetricReport::new("mse", mse)
                },
            ]
        }
        other => {
            return Err(CliError::user(format!(
                "checkpoint task kind `{other}` unknown"
            )))
        }
    };
    fs::write(cfg.output_dir.join("predictions.tsv"), tsv).map_err(CliError::internal)?;
    for m in &metrics {
        println!("{}\t{:.6}", m.metric, m.value);
    }
    write_report(
        cfg,
        "eval-task",
        "eval_task.json",
        json!({ "kind": task.kind, "split": split, "mode": mode, "metrics": metrics }),
    )?;
    Ok(())
}

pub fn ablate(cfg: &ExperimentConfig, variant: Ablation) -> Result<(), CliError> {
    let ckpt = read_checkpoint(cfg)?;
    let seqs = eval_instances(cfg, &ckpt)?;
    let k = cfg.eval.history_blocks;
    let full = ppl(&ckpt.model, &seqs, k, ForwardMode::Full)?;
    let mut retrained = None;
    let ablated = match variant {
        Ablation::NoHistory => ppl(&ckpt.model, &seqs, 1, ForwardMode::NoHistory)?,
        Ablation::Frozen => ppl(&ckpt.model, &seqs, k, ForwardMode::FrozenState)?,
        Ablation::NotPretrained => {
            let m =
                HartModel::init(ckpt.model.config.clone(), cfg.seed).map_err(CliError::internal)?;
            ppl(&m, &seqs, k, ForwardMode::Full)?
        }
        Ablation::NoRecurrence => {
            let tc = TrainConfig {
                mode: ForwardMode::NoRecurrence,
                ..cfg.train.clone()
            };
            validate_train(&tc)?;
            let bs = ckpt.model.config.block_size;
            let train = instances(
                cfg,
                &read_corpus(cfg, "train")?,
                &ckpt.vocab,
                bs,
                tc.max_blocks,
            )?;
            let dev = match cfg.optional_input("dev")? {
                Some(_) => instances(
                    cfg,
                    &read_corpus(cfg, "dev")?,
                    &ckpt.vocab,
                    bs,
                    tc.max_blocks,
                )?,
                None => Vec::new(),
            };
            let mc = hart_core::model::ModelConfig {
                max_blocks: tc.max_blocks,
                ..ckpt.model.config.clone()
            };
            let init = HartModel::init(mc, cfg.seed).map_err(CliError::internal)?;
            let o = run_pretrain(
                cfg,
                &tc,
                init,
                &train,
                &dev,
                "ablate_no_recurrence_log.jsonl",
            )?;
            let r = ppl(&o.model, &seqs, k, ForwardMode::NoRecurrence)?;
            let mut c = Checkpoint::new(
                o.model,
                ckpt.vocab.clone(),
                CheckpointMeta {
                    epoch: o.best_epoch,
                    steps: o.steps,
                    ..meta(cfg, tc.mode)
                },
            );
            c.optimizer = Some(o.optimizer);
            retrained = Some(save_checkpoint(cfg, &mut c, "ablate_no_recurrence.hart")?);
            r
        }
    };
    let mut a = ppl_metric("perplexity_full", &full);
    let b = ppl_metric(&format!("perplexity_{}", variant.as_str()), &ablated);
    a.significance.push(permutation(
        cfg,
        &b.metric,
        &a.per_instance,
        &b.per_instance,
    )?);
    println!(
        "full {:.6}\t{} {:.6}",
        full.perplexity,
        variant.as_str(),
        ablated.perplexity
    );
    write_report(
        cfg,
        "ablate",
        &format!("ablate_{}.json", variant.as_str()),
        json!({
            "variant": variant.as_str(),
            "history_blocks": k,
            "relative_reduction": 1.0 - full.perplexity / ablated.perplexity,
            "retrained_checkpoint": retrained,
            "metrics": [a, b],
        }),
    )?;
    Ok(())
}

#[derive(Deserialize)]
struct MetricsOnly {
    metrics: Vec<MetricReport>,
}

fn scores(path: &Path, metric: Option<&str>) -> Result<MetricReport, CliError> {
    let text =
        fs::read_to_string(path).user_ctx(|| format!("cannot read report {}", path.display()))?;
    let r: MetricsOnly = serde_json::from_str(&text)
        .user_ctx(|| format!("report {} has no metrics list", path.display()))?;
    let found = match metric {
        Some(m) => r.metrics.into_iter().find(|x| x.metric == m),
        None => r.metrics.into_iter().find(|x| !x.per_instance.is_empty()),
    };
    let m = found.ok_or_else(|| {
        CliError::user(format!(
            "report {} has no metric {} with per-instance scores",
            path.display(),
            metric.unwrap_or("")
        ))
    })?;
    if m.per_instance.is_empty() {
        return Err(CliError::user(format!(
            "metric {} in {} has no per-instance scores",
            m.metric,
            path.display()
        )));
    }
    Ok(m)
}

pub fn significance(
    cfg: &ExperimentConfig,
    a: &Path,
    b: &Path,
    metric: Option<&str>,
) -> Result<(), CliError> {
    let ma = scores(a, metric)?;
    let mb = scores(b, metric)?;
    if ma.per_instance.len() != mb.per_instance.len() {
        return Err(CliError::user(format!(
            "reports are not paired: {} has {} instances, {} has {}",
            a.display(),
            ma.per_instance.len(),
            b.display(),
            mb.per_instance.len()
        )));
    }
    let n = cfg.eval.n_resamples;
    let user = |e: metrics::MetricError| CliError::user(format!("[eval] {e}"));
    let perm =
        metrics::permutation_test(&ma.per_instance, &mb.per_instance, n, cfg.seed).map_err(user)?;
    let boot =
        metrics::bootstrap_test(&ma.per_instance, &mb.per_instance, n, cfg.seed).map_err(user)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let comparator = format!(
        "{}:{} vs {}:{}",
        a.display(),
        ma.metric,
        b.display(),
        mb.metric
    );
    let tests = [
        ("paired_sign_flip_permutation", perm),
        ("paired_bootstrap", boot),
    ]
    .map(|(test, p)| Significance {
        comparator: comparator.clone(),
        test: test.into(),
        p_value: p,
        n_resamples: n,
        seed: cfg.seed,
    });
    println!("permutation p = {perm:.6}\tbootstrap p = {boot:.6}");
    write_report(
        cfg,
        "significance",
        "significance.json",
        json!({
            "instances": ma.per_instance.len(),
            "mean_a": mean(&ma.per_instance),
            "mean_b": mean(&mb.per_instance),
            "tests": tests,
        }),
    )?;
    Ok(())
}
