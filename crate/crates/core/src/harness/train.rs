//! Pre-training, fine-tuning and evaluation loops.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::Serialize;

use super::config::{warmup_lr, TrainConfig};
use super::metrics::{entity_prf, AverageMode, MetricsReport};
use super::tagging::{argmax_tags, decode_bioes, encode_tags, EntityPrediction};
use crate::data::{build_vocab, load_dataset, sample_mlm, Document, Vocabulary};
use crate::error::{Error, Result};
use crate::graph::CorruptionConfig;
use crate::model::{load_checkpoint, prepare, save_checkpoint, FormNetV2, PreparedDoc};
use crate::objectives::pretrain_loss;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{mix, rng_from};

/// One line of the pre-training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub mlm_loss: Option<f64>,
    pub gcl_loss: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

pub struct Trained<R> {
    pub model: FormNetV2,
    pub vocab: Vocabulary,
    pub log: Vec<R>,
}

fn write_line<T: Serialize>(log: &mut Option<&mut dyn Write>, record: &T) -> Result<()> {
    if let Some(w) = log.as_mut() {
        serde_json::to_writer(&mut *w, record)?;
        w.write_all(b"\n").map_err(|e| Error::io("<log>", e))?;
    }
    Ok(())
}

/// Document order of one pass over the data.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(&[seed, 0xe90c, epoch as u64]));
    order
}

fn corpus_vocab(docs: &[Document], size: usize, lowercase: bool) -> Vocabulary {
    build_vocab(docs.iter().flat_map(|d| d.tokens.iter().map(|t| t.text.as_str())), size, lowercase)
}

fn prepare_all(docs: &[Document], vocab: &Vocabulary, model: &FormNetV2) -> Result<Vec<PreparedDoc>> {
    docs.iter().map(|d| prepare(d, vocab, model.config())).collect()
}

/// Runs the pre-training schedule of `cfg` over `docs`.
pub fn pretrain_on(
    cfg: &TrainConfig,
    docs: &[Document],
    mut log: Option<&mut dyn Write>,
    checkpoint_dir: Option<&Path>,
) -> Result<Trained<LossRecord>> {
    cfg.validate()?;
    let sched = cfg.pretrain_schedule()?;
    if docs.is_empty() {
        return Err(Error::Data("pre-training dataset is empty".into()));
    }
    let vocab = corpus_vocab(docs, cfg.model.vocab_size, cfg.data.lowercase);
    let model = FormNetV2::new(&cfg.model, cfg.seed)?;
    let mut prepared = prepare_all(docs, &vocab, &model)?;
    if cfg.loss.w_gcl > 0.0 {
        let before = prepared.len();
        prepared.retain(|d| d.num_tokens() >= 2);
        if prepared.len() < before {
            warn!("skipping {} single-token documents with no contrastive negatives", before - prepared.len());
        }
        if prepared.is_empty() {
            return Err(Error::Data("no document has two or more tokens".into()));
        }
    }
    let n = prepared.len();
    let mut adam = Adam::new(AdamConfig::with_lr(sched.learning_rate));
    let mut records = Vec::with_capacity(sched.steps);
    let mut order = (usize::MAX, Vec::new());
    for step in 0..sched.steps {
        let lr = warmup_lr(sched.learning_rate, sched.warmup_proportion, sched.steps, step);
        let corruption = CorruptionConfig {
            seed: mix(&[cfg.seed, cfg.corruption.seed, step as u64]),
            ..cfg.corruption.clone()
        };
        let scale = 1.0 / sched.batch_size as f64;
        let (mut mlm, mut gcl, mut total) = ((0.0, 0usize), (0.0, 0usize), 0.0);
        for k in 0..sched.batch_size {
            let pos = step * sched.batch_size + k;
            if order.0 != pos / n {
                order = (pos / n, epoch_order(n, cfg.seed, pos / n));
            }
            let doc = &prepared[order.1[pos % n]];
            let plan = sample_mlm(&doc.token_ids, vocab.len(), sched.mlm_rate, mix(&[cfg.seed, step as u64, pos as u64]))?;
            let loss = pretrain_loss(&model, doc, &plan, &corruption, &cfg.loss)?;
            total += loss.total.item()?;
            if let Some(v) = loss.mlm {
                mlm = (mlm.0 + v, mlm.1 + 1);
            }
            if let Some(v) = loss.gcl {
                gcl = (gcl.0 + v, gcl.1 + 1);
            }
            loss.total.mul_scalar(scale).backward()?;
        }
        adam.step_with_lr(model.params(), lr)?;
        let mean = |(s, c): (f64, usize)| (c > 0).then(|| s / c as f64);
        let record = LossRecord {
            step: step + 1,
            mlm_loss: mean(mlm),
            gcl_loss: mean(gcl),
            total: total * scale,
        };
        write_line(&mut log, &record)?;
        records.push(record);
        if let Some(dir) = checkpoint_dir {
            if sched.checkpoint_every > 0 && (step + 1) % sched.checkpoint_every == 0 {
                let run = serde_json::json!({"phase": "pretrain", "step": step + 1});
                save_checkpoint(&dir.join(format!("step-{}", step + 1)), &model, &vocab, run)?;
            }
        }
        if (step + 1) % 50 == 0 {
            info!("pretrain step {}/{}: total {:.4}", step + 1, sched.steps, records[step].total);
        }
    }
    Ok(Trained {
        model,
        vocab,
        log: records,
    })
}

/// Gold tags for a prepared document; unknown labels are a label-set mismatch.
pub fn gold_tags(doc: &PreparedDoc, labels: &[String]) -> Result<Vec<usize>> {
    encode_tags(&doc.entities, doc.num_tokens(), labels)
        .map_err(|e| Error::Data(format!("document `{}`: {e}", doc.id)))
}

/// Fine-tunes `init` (or a fresh model) on labeled `docs`. The input graph
/// is never corrupted here.
pub fn finetune_on(
    cfg: &TrainConfig,
    docs: &[Document],
    init: Option<(FormNetV2, Vocabulary)>,
    mut log: Option<&mut dyn Write>,
) -> Result<Trained<FinetuneRecord>> {
    cfg.validate()?;
    let sched = cfg.finetune_schedule()?;
    if sched.corruption.is_some() {
        warn!("graph corruption is not used during fine-tuning; ignoring `finetune.corruption`");
    }
    if docs.is_empty() {
        return Err(Error::Data("fine-tuning dataset is empty".into()));
    }
    let (model, vocab) = match init {
        Some((model, vocab)) => {
            if model.config().labels != cfg.model.labels {
                return Err(Error::Config(format!(
                    "label set mismatch: checkpoint has {:?}, config has {:?}",
                    model.config().labels,
                    cfg.model.labels
                )));
            }
            (model, vocab)
        }
        None => {
            let vocab = corpus_vocab(docs, cfg.model.vocab_size, cfg.data.lowercase);
            (FormNetV2::new(&cfg.model, cfg.seed)?, vocab)
        }
    };
    let prepared = prepare_all(docs, &vocab, &model)?;
    let labels = model.config().labels.clone();
    let tags = prepared.iter().map(|d| gold_tags(d, &labels)).collect::<Result<Vec<_>>>()?;
    let n = prepared.len();
    let per_epoch = n.div_ceil(sched.batch_size);
    let total_steps = sched.epochs * per_epoch;
    let mut adam = Adam::new(AdamConfig::with_lr(sched.learning_rate));
    let mut records = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..sched.epochs {
        let order = epoch_order(n, cfg.seed, epoch);
        for batch in order.chunks(sched.batch_size) {
            let lr = warmup_lr(sched.learning_rate, sched.warmup_proportion, total_steps, step);
            let scale = 1.0 / batch.len() as f64;
            let mut total = 0.0;
            for &i in batch {
                let image = model.edge_image_features(&prepared[i])?;
                let logits = model.forward_tags(&prepared[i], image.as_ref())?;
                let loss = logits.cross_entropy(&tags[i], None)?;
                total += loss.item()?;
                loss.mul_scalar(scale).backward()?;
            }
            adam.step_with_lr(model.params(), lr)?;
            step += 1;
            let record = FinetuneRecord {
                step,
                epoch,
                loss: total * scale,
            };
            write_line(&mut log, &record)?;
            records.push(record);
        }
        info!("finetune epoch {}/{}: last loss {:.4}", epoch + 1, sched.epochs, records.last().map_or(0.0, |r| r.loss));
    }
    Ok(Trained {
        model,
        vocab,
        log: records,
    })
}

fn check_labels(doc: &Document, labels: &[String]) -> Result<()> {
    match doc.entities.iter().find(|e| !labels.contains(&e.label)) {
        Some(e) => Err(Error::Data(format!(
            "document `{}`: label `{}` is not in the model's label set {labels:?}",
            doc.id, e.label
        ))),
        None => Ok(()),
    }
}

/// Tags every document, decodes entities and scores them against gold.
pub fn evaluate_on(model: &FormNetV2, vocab: &Vocabulary, docs: &[Document], mode: AverageMode) -> Result<MetricsReport> {
    if docs.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".into()));
    }
    let labels = &model.config().labels;
    let mut predicted = Vec::with_capacity(docs.len());
    let mut gold = Vec::with_capacity(docs.len());
    for doc in docs {
        check_labels(doc, labels)?;
        let p = prepare(doc, vocab, model.config())?;
        let image = model.edge_image_features(&p)?;
        let logits = model.forward_tags(&p, image.as_ref())?;
        predicted.push(decode_bioes(&logits, labels));
        gold.push(p.entities.iter().map(EntityPrediction::from).collect());
    }
    entity_prf(&predicted, &gold, mode)
}

/// Fraction of tokens whose argmax tag equals the gold tag.
pub fn token_accuracy(model: &FormNetV2, vocab: &Vocabulary, docs: &[Document]) -> Result<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for doc in docs {
        let p = prepare(doc, vocab, model.config())?;
        let gold = gold_tags(&p, &model.config().labels)?;
        let image = model.edge_image_features(&p)?;
        let pred = argmax_tags(&model.forward_tags(&p, image.as_ref())?);
        right += pred.iter().zip(&gold).filter(|(a, b)| a == b).count();
        total += gold.len();
    }
    Ok(if total == 0 { 0.0 } else { right as f64 / total as f64 })
}

fn open_log(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn data_path<'a>(p: &'a Option<std::path::PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("data.{what} is not set")))
}

/// File-level pre-training: reads `data.pretrain`, writes `loss.jsonl`,
/// interval checkpoints and the final checkpoint into `out`.
pub fn pretrain(cfg: &TrainConfig, out: &Path) -> Result<Trained<LossRecord>> {
    let docs = load_dataset(data_path(&cfg.data.pretrain, "pretrain")?)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut log = open_log(&out.join("loss.jsonl"))?;
    let trained = pretrain_on(cfg, &docs, Some(&mut log), Some(out))?;
    log.flush().map_err(|e| Error::io(out, e))?;
    let run = serde_json::json!({"phase": "pretrain", "train": cfg});
    save_checkpoint(out, &trained.model, &trained.vocab, run)?;
    Ok(trained)
}

/// File-level fine-tuning from an optional checkpoint directory.
pub fn finetune(cfg: &TrainConfig, init: Option<&Path>, out: &Path) -> Result<Trained<FinetuneRecord>> {
    let docs = load_dataset(data_path(&cfg.data.train, "train")?)?;
    let init = match init {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            if ck.model.config().labels == cfg.model.labels && *ck.model.config() != cfg.model {
                warn!("using the architecture stored in {} instead of the config's model section", dir.display());
            }
            Some((ck.model, ck.vocab))
        }
        None => None,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut log = open_log(&out.join("finetune.jsonl"))?;
    let trained = finetune_on(cfg, &docs, init, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(out, e))?;
    let run = serde_json::json!({"phase": "finetune", "train": cfg});
    save_checkpoint(out, &trained.model, &trained.vocab, run)?;
    Ok(trained)
}

pub fn evaluate(ckpt: &Path, data: &Path, mode: AverageMode) -> Result<MetricsReport> {
    let ck = load_checkpoint(ckpt)?;
    let docs = load_dataset(data)?;
    evaluate_on(&ck.model, &ck.vocab, &docs, mode)
}
