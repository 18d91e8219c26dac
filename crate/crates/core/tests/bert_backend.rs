use std::fs;
use std::path::{Path, PathBuf};

use mqseq_core::dataset::{QuestionRecord, Split};
use mqseq_core::embedding::DEFAULT_EMBED_BATCH;
use mqseq_core::encoder::{CONFIG_FILE, MANIFEST_FILE, TOKENIZER_FILE, WEIGHTS_FILE};
use mqseq_core::{embed_corpus, load_backend, mean_pool, tokenize_batch, EncoderBackend, EncoderError, TokenBatch};
use serde_json::Value;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny_bert")
}

fn expected() -> Value {
    serde_json::from_str(&fs::read_to_string(fixture().join("expected.json")).unwrap()).unwrap()
}

fn copy_fixture(dir: &Path) {
    for name in [WEIGHTS_FILE, CONFIG_FILE, TOKENIZER_FILE] {
        fs::copy(fixture().join(name), dir.join(name)).unwrap();
    }
}

fn as_u32_rows(v: &Value) -> Vec<Vec<u32>> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|r| {
            r.as_array()
                .unwrap()
                .iter()
                .map(|x| x.as_u64().unwrap() as u32)
                .collect()
        })
        .collect()
}

#[test]
fn matches_transformers_hidden_states() {
    let backend = load_backend(fixture()).unwrap();
    let exp = expected();
    let sentences: Vec<&str> = exp["sentences"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s.as_str().unwrap())
        .collect();
    let batch = tokenize_batch(&sentences, backend.tokenizer().unwrap()).unwrap();
    let ids = as_u32_rows(&exp["ids"]);
    let masks = as_u32_rows(&exp["mask"]);
    for (i, row) in ids.iter().enumerate() {
        assert_eq!(batch.ids.row(i).to_vec(), *row, "token ids for sentence {i}");
        let m: Vec<u32> = batch.attention_mask.row(i).iter().map(|&v| v as u32).collect();
        assert_eq!(m, masks[i]);
    }

    let out = backend.evaluate(&batch).unwrap();
    assert_eq!(out.dim, 16);
    let hidden = exp["hidden"].as_array().unwrap();
    let mut worst = 0f64;
    for (b, rows) in hidden.iter().enumerate() {
        for (t, vals) in rows.as_array().unwrap().iter().enumerate() {
            if masks[b][t] == 0 {
                continue;
            }
            for (d, v) in vals.as_array().unwrap().iter().enumerate() {
                worst = worst.max((out.hidden_states[[b, t, d]] as f64 - v.as_f64().unwrap()).abs());
            }
        }
    }
    assert!(worst < 1e-4, "max abs difference {worst}");

    let pooled = mean_pool(&out).unwrap();
    for (b, vals) in exp["pooled"].as_array().unwrap().iter().enumerate() {
        for (d, v) in vals.as_array().unwrap().iter().enumerate() {
            assert!((pooled[[b, d]] as f64 - v.as_f64().unwrap()).abs() < 1e-4);
        }
    }
}

#[test]
fn masked_ids_do_not_leak() {
    let backend = load_backend(fixture()).unwrap();
    let rows = vec![vec![2, 5, 6, 3], vec![2, 7, 3]];
    let batch = TokenBatch::from_rows(&rows, 0);
    let mut flipped = batch.clone();
    flipped.ids[[1, 3]] = 12;
    let a = mean_pool(&backend.evaluate(&batch).unwrap()).unwrap();
    let b = mean_pool(&backend.evaluate(&flipped).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn corpus_embeddings_are_unit_rows() {
    let backend = load_backend(fixture()).unwrap();
    let records: Vec<QuestionRecord> = ["acute fever", "the heart and kidney", "Which drug dose?"]
        .iter()
        .enumerate()
        .map(|(i, q)| QuestionRecord {
            id: format!("q{i}"),
            question_text: q.to_string(),
            options: Default::default(),
            correct_option: None,
            subject_name: "Medicine".into(),
            topic_name: None,
            split: Split::Train,
        })
        .collect();
    let m = embed_corpus(&records, &backend, backend.tokenizer().unwrap(), DEFAULT_EMBED_BATCH).unwrap();
    let one = embed_corpus(&records, &backend, backend.tokenizer().unwrap(), 1).unwrap();
    assert_eq!(m.dim(), 16);
    for row in m.data().rows() {
        let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-4);
    }
    let diff = (&m.data() - &one.data()).iter().fold(0f32, |a, v| a.max(v.abs()));
    assert!(diff < 1e-6);
}

#[test]
fn missing_model_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_backend(dir.path()), Err(EncoderError::ModelNotFound(_))));
    assert!(matches!(
        load_backend("/nonexistent/model"),
        Err(EncoderError::ModelNotFound(_))
    ));
}

#[test]
fn corrupted_weights_rejected() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    let path = dir.path().join(WEIGHTS_FILE);
    let mut bytes = fs::read(&path).unwrap();
    bytes[9] ^= 0xff;
    bytes[10] = b'{';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_backend(dir.path()),
        Err(EncoderError::FormatMismatch { .. })
    ));

    fs::write(&path, &bytes[..40]).unwrap();
    assert!(matches!(
        load_backend(dir.path()),
        Err(EncoderError::FormatMismatch { .. })
    ));
}

#[test]
fn declared_dim_checked() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    fs::write(dir.path().join(MANIFEST_FILE), r#"{"dim": 384}"#).unwrap();
    assert!(matches!(
        load_backend(dir.path()),
        Err(EncoderError::DimMismatch { .. })
    ));
    fs::write(dir.path().join(MANIFEST_FILE), r#"{"dim": 16}"#).unwrap();
    assert_eq!(load_backend(dir.path()).unwrap().dim(), 16);
}

#[test]
fn bad_config_rejected() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    let cfg = fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap();
    fs::write(dir.path().join(CONFIG_FILE), cfg.replace("\"gelu\"", "\"swish\"")).unwrap();
    assert!(matches!(
        load_backend(dir.path()),
        Err(EncoderError::FormatMismatch { .. })
    ));
    fs::write(
        dir.path().join(CONFIG_FILE),
        cfg.replace("\"hidden_size\": 16", "\"hidden_size\": 32"),
    )
    .unwrap();
    assert!(load_backend(dir.path()).is_err());
}

#[test]
fn fingerprint_tracks_weights() {
    let a = load_backend(fixture()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    let b = load_backend(dir.path()).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    let tok = fs::read_to_string(dir.path().join(TOKENIZER_FILE)).unwrap();
    fs::write(dir.path().join(TOKENIZER_FILE), tok.replace("max_len=24", "max_len=20")).unwrap();
    let c = load_backend(dir.path()).unwrap();
    assert_ne!(a.fingerprint(), c.fingerprint());
}
