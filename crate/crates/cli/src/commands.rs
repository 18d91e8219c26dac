use std::fmt::Write as _;
use std::fs::{self, File, TryLockError};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use mqseq_core::classifier::{load_checkpoint, save_checkpoint};
use mqseq_core::dataset::{parse_records_with, write_records, ParseOptions};
use mqseq_core::evaluation::csv_field;
use mqseq_core::tsne::project;
use mqseq_core::{
    build_report, build_vocabulary, embed_corpus, predict, read_cache, reference_backend, summarize_splits, train,
    write_cache, ClassifierStateF64, EmbeddingMatrix, EncoderBackend, EvalReport, QuestionRecord, Split,
    SubjectVocabulary, TokenizerSpec,
};
use sha2::{Digest, Sha256};

use crate::config::{BackendKind, RunConfig, Strategy};
use crate::error::CliError;

const LOCK_FILE: &str = ".lock";
const SUBJECTS_FILE: &str = "subjects.txt";
const REFERENCE_EOS: u32 = 0;

/// Exclusive advisory lock on the cache directory, released on drop.
pub struct CacheLock {
    _file: File,
}

pub fn lock_cache(dir: &Path) -> Result<CacheLock, CliError> {
    fs::create_dir_all(dir)?;
    let file = File::options()
        .create(true)
        .truncate(false)
        .write(true)
        .open(dir.join(LOCK_FILE))?;
    match file.try_lock() {
        Ok(()) => Ok(CacheLock { _file: file }),
        Err(TryLockError::WouldBlock) => Err(CliError::Precondition(format!(
            "cache directory {} is locked by another mqseq process",
            dir.display()
        ))),
        Err(TryLockError::Error(e)) => Err(e.into()),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn records_path(cfg: &RunConfig, split: Split) -> PathBuf {
    cfg.cache_dir.join("records").join(format!("{split}.jsonl"))
}

fn cache_path(cfg: &RunConfig, split: Split) -> PathBuf {
    cfg.cache_dir.join("embeddings").join(format!("{split}.mqsb"))
}

fn key_path(cfg: &RunConfig, split: Split) -> PathBuf {
    cfg.cache_dir.join("embeddings").join(format!("{split}.key"))
}

fn checkpoint_path(cfg: &RunConfig, strategy: Strategy) -> PathBuf {
    cfg.out_dir.join(format!("checkpoint-{strategy}.mqck"))
}

fn find_split_file(dir: &Path, split: Split) -> Option<PathBuf> {
    let stems: &[&str] = match split {
        Split::Train => &["train"],
        Split::Dev => &["dev", "validation"],
        Split::Test => &["test"],
    };
    stems
        .iter()
        .flat_map(|s| [format!("{s}.json"), format!("{s}.jsonl")])
        .map(|name| dir.join(name))
        .find(|p| p.is_file())
}

fn read_store(cfg: &RunConfig, split: Split) -> Result<Vec<QuestionRecord>, CliError> {
    let path = records_path(cfg, split);
    let file = File::open(&path)
        .map_err(|_| CliError::Precondition(format!("no record store for {split}; run `mqseq ingest` first")))?;
    parse_records_with(BufReader::new(file), split, ParseOptions::default())
        .map_err(|source| CliError::Ingest { path, source })
}

fn read_vocabulary(cfg: &RunConfig) -> Result<SubjectVocabulary, CliError> {
    let text = fs::read_to_string(cfg.cache_dir.join(SUBJECTS_FILE))
        .map_err(|_| CliError::Precondition("no subject vocabulary; run `mqseq ingest` first".into()))?;
    SubjectVocabulary::from_text(&text).map_err(|e| CliError::Precondition(format!("subject vocabulary: {e}")))
}

/// Parses the three split files, writes the record store and subject list.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<String, CliError> {
    let dir = cfg
        .data_dir
        .as_ref()
        .ok_or_else(|| CliError::Config("data_dir is required for ingest".into()))?;
    let _lock = lock_cache(&cfg.cache_dir)?;
    let options = ParseOptions {
        cop_one_based: cfg.cop_one_based,
    };
    let mut all = Vec::new();
    let mut per_split = Vec::new();
    for split in Split::ALL {
        let path = find_split_file(dir, split).ok_or_else(|| {
            CliError::MissingInput(format!(
                "no {split} file ({split}.json or {split}.jsonl) in {}",
                dir.display()
            ))
        })?;
        let file = File::open(&path)?;
        let records = parse_records_with(BufReader::new(file), split, options).map_err(|source| CliError::Ingest {
            path: path.clone(),
            source,
        })?;
        per_split.push((split, records.len()));
        all.extend(records);
    }
    let train_records: Vec<QuestionRecord> = all.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let vocab = build_vocabulary(&train_records).map_err(|e| CliError::MissingInput(format!("train split: {e}")))?;
    let summary = summarize_splits(&all, &vocab);

    fs::create_dir_all(cfg.cache_dir.join("records"))?;
    for split in Split::ALL {
        let records: Vec<QuestionRecord> = all.iter().filter(|r| r.split == split).cloned().collect();
        let mut buf = Vec::new();
        write_records(&records, &mut buf)?;
        write_if_changed(&records_path(cfg, split), &buf)?;
    }
    write_if_changed(&cfg.cache_dir.join(SUBJECTS_FILE), vocab.to_text().as_bytes())?;
    fs::create_dir_all(&cfg.out_dir)?;
    let rendered = summary.render();
    fs::write(cfg.out_dir.join("summary.txt"), &rendered)?;

    let mut out = String::new();
    for (split, n) in per_split {
        let _ = writeln!(out, "parsed {split}: {n} records");
    }
    out.push_str(&rendered);
    Ok(out)
}

/// Leaves the file (and its mtime) alone when the content is unchanged.
fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if fs::read(path).map(|old| old == bytes).unwrap_or(false) {
        return Ok(());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn build_backend(cfg: &RunConfig) -> Result<(Box<dyn EncoderBackend>, TokenizerSpec), CliError> {
    match cfg.backend {
        BackendKind::Reference => {
            let spec = TokenizerSpec::whitespace(REFERENCE_EOS, cfg.max_len.unwrap_or(512));
            Ok((Box::new(reference_backend(cfg.reference_dim(), cfg.seed)), spec))
        }
        BackendKind::Loaded => {
            let path = cfg
                .model_path
                .as_ref()
                .ok_or_else(|| CliError::Config("model_path is required for the loaded backend".into()))?;
            let backend = mqseq_core::load_backend(path)?;
            if let Some(d) = cfg.dim {
                if d != backend.dim() {
                    return Err(CliError::Shape(format!(
                        "requested dim {d}, model produces {}",
                        backend.dim()
                    )));
                }
            }
            let mut spec = backend.tokenizer().expect("loaded models carry a tokenizer").clone();
            if let Some(len) = cfg.max_len {
                spec = spec
                    .with_max_input_length(len)
                    .map_err(|e| CliError::Config(format!("max_len: {e}")))?;
            }
            Ok((Box::new(backend), spec))
        }
    }
}

fn cache_key(records: &[u8], backend: &dyn EncoderBackend, spec: &TokenizerSpec) -> String {
    let mut h = Sha256::new();
    h.update(b"records\n");
    h.update(records);
    h.update(b"\nbackend\n");
    h.update(backend.fingerprint().as_bytes());
    h.update(b"\ntokenizer\n");
    h.update(spec.to_text().as_bytes());
    hex(&h.finalize())
}

/// Embeds every split, skipping splits whose cache key is unchanged.
pub fn cmd_embed(cfg: &RunConfig, force: bool) -> Result<String, CliError> {
    let _lock = lock_cache(&cfg.cache_dir)?;
    let (backend, spec) = build_backend(cfg)?;
    fs::create_dir_all(cfg.cache_dir.join("embeddings"))?;
    let mut out = String::new();
    for split in Split::ALL {
        let records = read_store(cfg, split)?;
        let raw = fs::read(records_path(cfg, split))?;
        let key = cache_key(&raw, backend.as_ref(), &spec);
        let up_to_date = !force
            && cache_path(cfg, split).is_file()
            && fs::read_to_string(key_path(cfg, split))
                .map(|k| k.trim() == key)
                .unwrap_or(false);
        if up_to_date {
            let _ = writeln!(out, "{split}: cache up to date");
            continue;
        }
        if records.is_empty() {
            let _ = writeln!(out, "{split}: no records, skipped");
            continue;
        }
        let matrix = embed_corpus(&records, backend.as_ref(), &spec, cfg.embed_batch)?;
        write_cache(&matrix, cache_path(cfg, split))?;
        fs::write(key_path(cfg, split), format!("{key}\n"))?;
        let _ = writeln!(
            out,
            "{split}: embedded {} x {} with {} backend",
            matrix.len(),
            matrix.dim(),
            backend.name()
        );
    }
    Ok(out)
}

/// Cache rows joined to their records; `labels[i]` is `None` for subjects
/// outside the training vocabulary.
struct SplitData {
    matrix: EmbeddingMatrix,
    records: Vec<QuestionRecord>,
    labels: Vec<Option<usize>>,
    key: String,
}

impl SplitData {
    fn labeled(&self) -> (EmbeddingMatrix, Vec<usize>) {
        let rows: Vec<usize> = (0..self.labels.len()).filter(|&i| self.labels[i].is_some()).collect();
        let labels = rows.iter().map(|&i| self.labels[i].expect("filtered")).collect();
        (self.matrix.select(&rows), labels)
    }
}

fn load_split(cfg: &RunConfig, split: Split, vocab: &SubjectVocabulary) -> Result<SplitData, CliError> {
    let path = cache_path(cfg, split);
    if !path.is_file() {
        return Err(CliError::Precondition(format!(
            "no embedding cache for {split}; run `mqseq embed` first"
        )));
    }
    let matrix = read_cache(&path)?;
    let records = read_store(cfg, split)?;
    if matrix.ids().len() != records.len() || matrix.ids().iter().zip(&records).any(|(id, r)| *id != r.id) {
        return Err(CliError::Shape(format!(
            "{split} cache rows do not match the record store; rerun `mqseq embed`"
        )));
    }
    if let Some(d) = cfg.dim {
        if d != matrix.dim() {
            return Err(CliError::Shape(format!(
                "{split} cache has D={}, requested dim {d}",
                matrix.dim()
            )));
        }
    }
    let labels = records.iter().map(|r| vocab.index_of(&r.subject_name)).collect();
    let key = fs::read_to_string(key_path(cfg, split))
        .unwrap_or_default()
        .trim()
        .to_string();
    Ok(SplitData {
        matrix,
        records,
        labels,
        key,
    })
}

fn run_hash(cfg: &RunConfig, strategy: Strategy, classes: usize, keys: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(cfg.train.canonical().as_bytes());
    h.update(format!("strategy={strategy}\nclasses={classes}\n").as_bytes());
    for k in keys {
        h.update(k.as_bytes());
        h.update(b"\n");
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn accuracy_on(state: &ClassifierStateF64, data: &SplitData) -> Result<Option<f64>, CliError> {
    let (m, labels) = data.labeled();
    if labels.is_empty() {
        return Ok(None);
    }
    let pred = predict(state, m.to_scalar::<f64>().view())?;
    Ok(Some(
        pred.iter().zip(&labels).filter(|(p, g)| p == g).count() as f64 / labels.len() as f64,
    ))
}

/// Trains the head for the configured strategy and writes the checkpoint
/// and run log.
pub fn cmd_train(cfg: &RunConfig) -> Result<String, CliError> {
    let vocab = read_vocabulary(cfg)?;
    let train_data = load_split(cfg, Split::Train, &vocab)?;
    let dev_data = match cfg.strategy {
        Strategy::TrainPlusDev => Some(load_split(cfg, Split::Dev, &vocab)?),
        Strategy::TrainOnly => load_split(cfg, Split::Dev, &vocab).ok(),
    };
    let (mut x, mut labels) = train_data.labeled();
    let mut keys = vec![train_data.key.as_str()];
    if cfg.strategy == Strategy::TrainPlusDev {
        let dev = dev_data.as_ref().expect("loaded above");
        let (dx, dl) = dev.labeled();
        x = x.concat(&dx)?;
        labels.extend(dl);
        keys.push(dev.key.as_str());
    }

    let (state, mut history) = train(x.to_scalar::<f64>().view(), &labels, vocab.len(), &cfg.train)?;
    if let Some(dev) = &dev_data {
        history.final_dev_accuracy = accuracy_on(&state, dev)?;
    }
    let hash = run_hash(cfg, cfg.strategy, vocab.len(), &keys);
    fs::create_dir_all(cfg.out_dir.join("runs"))?;
    save_checkpoint(&state, hash, checkpoint_path(cfg, cfg.strategy))?;
    fs::write(
        cfg.out_dir.join("runs").join(format!("{hash:016x}.history.csv")),
        history.to_csv(),
    )?;

    let mut summary = String::new();
    let _ = writeln!(summary, "run={hash:016x}");
    let _ = writeln!(summary, "strategy={}", cfg.strategy);
    let _ = writeln!(summary, "rows={}", labels.len());
    let _ = writeln!(summary, "classes={}", vocab.len());
    let _ = writeln!(summary, "dim={}", x.dim());
    let _ = writeln!(summary, "steps={}", history.step_losses.len());
    let _ = writeln!(
        summary,
        "final_loss={}",
        history.step_losses.last().copied().unwrap_or(f64::NAN)
    );
    let _ = writeln!(
        summary,
        "last_epoch_loss={}",
        history.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    match history.final_dev_accuracy {
        Some(a) => {
            let _ = writeln!(summary, "dev_accuracy={a}");
        }
        None => summary.push_str("dev_accuracy=\n"),
    }
    summary.push_str(&cfg.train.canonical());
    fs::write(
        cfg.out_dir.join("runs").join(format!("{hash:016x}.summary.txt")),
        &summary,
    )?;
    Ok(summary)
}

fn load_head(
    cfg: &RunConfig,
    strategy: Strategy,
    vocab: &SubjectVocabulary,
    dim: usize,
) -> Result<ClassifierStateF64, CliError> {
    let path = checkpoint_path(cfg, strategy);
    if !path.is_file() {
        return Err(CliError::Precondition(format!(
            "no {strategy} checkpoint; run `mqseq train` first"
        )));
    }
    let (state, header) = load_checkpoint::<f64>(&path)?;
    state.check_dim(dim)?;
    if header.classes != vocab.len() {
        return Err(CliError::Shape(format!(
            "checkpoint has {} classes, vocabulary has {}",
            header.classes,
            vocab.len()
        )));
    }
    Ok(state)
}

fn evaluate_strategy(
    cfg: &RunConfig,
    split: Split,
    strategy: Strategy,
    vocab: &SubjectVocabulary,
    data: &SplitData,
) -> Result<EvalReport, CliError> {
    let state = load_head(cfg, strategy, vocab, data.matrix.dim())?;
    let (m, gold) = data.labeled();
    if gold.is_empty() {
        return Err(CliError::Precondition(format!("{split} has no labelled records")));
    }
    let pred = predict(&state, m.to_scalar::<f64>().view())?;
    let report = build_report(&pred, &gold, vocab).map_err(|e| CliError::Shape(e.to_string()))?;

    let name = |k: usize| csv_field(vocab.name(k).unwrap_or_default());
    let mut rows = String::from("id,gold,predicted\n");
    for ((id, g), p) in m.ids().iter().zip(&gold).zip(&pred) {
        let _ = writeln!(rows, "{},{},{}", csv_field(id), name(*g), name(*p));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let stem = format!("{split}-{strategy}");
    fs::write(cfg.out_dir.join(format!("predictions-{stem}.csv")), rows)?;
    fs::write(
        cfg.out_dir.join(format!("confusion-{stem}.csv")),
        report.confusion.to_csv(vocab.names()),
    )?;
    fs::write(cfg.out_dir.join(format!("report-{stem}.txt")), report.to_key_value())?;
    Ok(report)
}

/// Scores the checkpoint(s) on `split`; `compare` evaluates both strategies.
pub fn cmd_eval(cfg: &RunConfig, split: Split, compare: bool) -> Result<String, CliError> {
    let vocab = read_vocabulary(cfg)?;
    let data = load_split(cfg, split, &vocab)?;
    let excluded = data.labels.iter().filter(|l| l.is_none()).count();
    let mut out = String::new();
    if compare {
        let _ = writeln!(out, "{:<16} {:>9} {:>9} {:>7}", "strategy", "accuracy", "macro_f1", "n");
        for strategy in Strategy::ALL {
            let r = evaluate_strategy(cfg, split, strategy, &vocab, &data)?;
            let _ = writeln!(
                out,
                "{:<16} {:>9.4} {:>9.4} {:>7}",
                strategy.to_string(),
                r.accuracy,
                r.macro_f1(),
                r.n
            );
        }
    } else {
        let r = evaluate_strategy(cfg, split, cfg.strategy, &vocab, &data)?;
        let _ = writeln!(out, "split={split} strategy={}", cfg.strategy);
        out.push_str(&r.render_table());
    }
    if excluded > 0 {
        let _ = writeln!(out, "excluded {excluded} records with subjects unseen in train");
    }
    Ok(out)
}

/// Writes the predicted subject of every record in `split`.
pub fn cmd_predict(cfg: &RunConfig, split: Split) -> Result<String, CliError> {
    let vocab = read_vocabulary(cfg)?;
    let data = load_split(cfg, split, &vocab)?;
    let state = load_head(cfg, cfg.strategy, &vocab, data.matrix.dim())?;
    let pred = predict(&state, data.matrix.to_scalar::<f64>().view())?;
    let mut rows = String::from("id,predicted\n");
    for (r, p) in data.records.iter().zip(&pred) {
        let _ = writeln!(
            rows,
            "{},{}",
            csv_field(&r.id),
            csv_field(vocab.name(*p).unwrap_or_default())
        );
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("predicted-{split}-{}.csv", cfg.strategy));
    fs::write(&path, rows)?;
    Ok(format!(
        "predicted {} {split} records with the {} head\n",
        pred.len(),
        cfg.strategy
    ))
}

/// 2-D t-SNE of the labelled embeddings of `split`.
pub fn cmd_project(cfg: &RunConfig, split: Split) -> Result<String, CliError> {
    let vocab = read_vocabulary(cfg)?;
    let data = load_split(cfg, split, &vocab)?;
    let (m, labels) = data.labeled();
    let projection = project(m.to_scalar::<f64>().view(), m.ids(), &labels, &cfg.tsne)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(
        cfg.out_dir.join(format!("projection-{split}.csv")),
        projection.to_csv(vocab.names()),
    )?;
    fs::write(cfg.out_dir.join(format!("kl-{split}.csv")), projection.kl_csv())?;
    let mut out = format!(
        "projected {} {split} points; final KL {:.6}\n",
        projection.ids.len(),
        projection.kl_history.last().copied().unwrap_or(f64::NAN)
    );
    if !projection.calibration_failures.is_empty() {
        let _ = writeln!(
            out,
            "{} points fell back to uniform affinities",
            projection.calibration_failures.len()
        );
    }
    Ok(out)
}
