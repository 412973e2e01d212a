use std::fs;

use chrono::NaiveDate;
use ralab::corpus::{
    ingest, read_passages, write_passages, DocumentStats, FilterConfig, RawDocument, Section,
    Source,
};
use ralab::index::{compress, train_pq, BuildOptions, EmbeddingIndex, Precision, StoredIndex};
use ralab::retriever::{DualEncoder, Vocab};

fn paragraph() -> String {
    fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/paragraph.txt"
    ))
    .unwrap()
}

fn doc(id: &str, text: &str) -> RawDocument {
    RawDocument {
        id: id.into(),
        title: id.into(),
        sections: vec![Section::new("", text)],
        source: Source::Wiki,
        dump_date: NaiveDate::from_ymd_opt(2018, 12, 20),
    }
}

#[test]
fn paragraph_statistics() {
    let stats = DocumentStats::of_document(&doc("para", &paragraph()));
    assert_eq!(stats.word_count, 60);
    assert_eq!(stats.mean_word_length, 287.0 / 60.0);
    assert_eq!(stats.alnum_ratio, 280.0 / 287.0);
    assert_eq!(stats.repeated_token_ratio, 1.0 - 53.0 / 60.0);
    assert!(stats.passes(&FilterConfig::default()));
}

#[test]
fn ingest_filters_and_chunks() {
    let noisy = doc("noise", &"#### $$$$ %%%% ".repeat(30));
    let short = doc("short", "too few words here");
    let docs = vec![doc("para", &paragraph()), noisy, short];
    let report = ingest(&docs, 25, Some(&FilterConfig::default())).unwrap();
    assert_eq!((report.documents_kept, report.documents_dropped), (1, 2));
    let sizes: Vec<usize> = report.passages.iter().map(|p| p.word_count()).collect();
    assert_eq!(sizes, vec![20, 20, 20]);
    assert!(report.passages.iter().all(|p| p.doc_id == "para"));
}

#[test]
fn passages_round_trip_through_jsonl() {
    let report = ingest(&[doc("para", &paragraph())], 16, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("passages.jsonl");
    write_passages(&path, &report.passages).unwrap();
    assert_eq!(read_passages(&path).unwrap(), report.passages);
}

#[test]
fn indices_and_checkpoints_round_trip() {
    let passages = ingest(&[doc("para", &paragraph())], 8, None)
        .unwrap()
        .passages;
    let vocab = Vocab::build(passages.iter().flat_map(|p| p.text.iter()));
    let encoder = DualEncoder::init(vocab, 16, true, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let ckpt = dir.path().join("encoder.bin");
    encoder.save(&ckpt).unwrap();
    assert_eq!(DualEncoder::load(&ckpt).unwrap(), encoder.rounded_to_f32());

    for precision in [Precision::F32, Precision::F16] {
        let opts = BuildOptions {
            shards: 3,
            precision,
            dump_date: None,
        };
        let index = EmbeddingIndex::build(&passages, &encoder, &opts).unwrap();
        assert_eq!(index.dump_date(), NaiveDate::from_ymd_opt(2018, 12, 20));
        let path = dir.path().join(format!("{precision:?}.idx"));
        let stored = StoredIndex::Exact(index.clone());
        stored.save(&path).unwrap();
        assert_eq!(StoredIndex::load(&path).unwrap(), stored);

        let codec = train_pq(&index, 4, 4, 10, 0).unwrap().codec;
        let pq = StoredIndex::Pq(compress(&index, &codec).unwrap());
        pq.save(&path).unwrap();
        let loaded = StoredIndex::load(&path).unwrap();
        assert_eq!(loaded, pq);
        let q = vec![0.5f32; 16];
        assert_eq!(loaded.search(&q, 3).unwrap(), pq.search(&q, 3).unwrap());
    }
}

#[test]
fn corrupt_index_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.idx");
    fs::write(&path, b"not an index").unwrap();
    assert!(StoredIndex::load(&path).is_err());
}
