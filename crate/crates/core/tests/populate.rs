use std::io::Write;
use std::time::Instant;

use patchrag_core::embed::{EmbedError, EmbedderConfig, EmbedderKind};
use patchrag_core::harness::{inject_expert_feedback, populate_pre_t, EvalItem, ExpertFeedback, HarnessError};
use patchrag_core::memory::MemoryError;
use patchrag_core::retrieval::retrieve_feedback;
use patchrag_core::{Memory, PatchSource, RetrievalConfig, StubEmbedder};

fn write_records(n: usize) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    let mut w = std::io::BufWriter::new(f.as_file_mut());
    for i in 0..n {
        writeln!(
            w,
            r#"{{"question": "synthetic question {i} topic {}", "answer": "answer {i}", "context": "passage {} mentions item {i}"}}"#,
            i % 977,
            i % 331
        )
        .unwrap();
    }
    drop(w);
    f
}

#[test]
fn populates_small_and_empty_files() {
    let e = StubEmbedder::new(32).unwrap();
    let m = Memory::new();
    assert_eq!(populate_pre_t(&m, write_records(0).path(), &e).unwrap(), 0);
    assert!(m.is_empty());
    assert_eq!(populate_pre_t(&m, write_records(10).path(), &e).unwrap(), 10);
    assert_eq!(m.len(), 10);
    assert!(m.patches().iter().all(|p| p.source == PatchSource::PreTSynthetic && p.inserted_at_step == 0));
}

#[test]
fn malformed_record_is_reported_with_line() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, r#"{{"question": "q", "answer": "a", "context": "c"}}"#).unwrap();
    writeln!(f, r#"{{"question": "q"}}"#).unwrap();
    let err = populate_pre_t(&Memory::new(), f.path(), &StubEmbedder::new(8).unwrap()).unwrap_err();
    assert!(matches!(err, HarnessError::Memory(MemoryError::MalformedRecord { line: 2, .. })), "{err:?}");
}

#[test]
fn paper_scale_population() {
    let file = write_records(150_000);
    let e = StubEmbedder::new(64).unwrap();
    let m = Memory::new();
    let started = Instant::now();
    assert_eq!(populate_pre_t(&m, file.path(), &e).unwrap(), 150_000);
    assert_eq!(m.len(), 150_000);
    let hits = retrieve_feedback("synthetic question 123 topic 123", &m, &e, &RetrievalConfig::default()).unwrap();
    assert_eq!(hits.len(), 5);
    // Small stub dims collide, so only the best similarity is pinned.
    assert!((hits[0].intent_sim - 1.0).abs() < 1e-9, "{}", hits[0].intent_sim);
    assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
    eprintln!("150000 records populated and queried in {:?}", started.elapsed());
}

#[test]
fn unreachable_embedder_leaves_memory_unchanged() {
    let e = EmbedderConfig {
        kind: EmbedderKind::Remote,
        endpoint_url: Some("http://127.0.0.1:9/v1/embeddings".into()),
        timeout_ms: 500,
        ..EmbedderConfig::stub(16)
    }
    .build()
    .unwrap();
    let m = Memory::new();
    let items = vec![EvalItem {
        item_id: "x".into(),
        query_text: "q".into(),
        golds: vec!["a".into()],
        expert_feedback: ExpertFeedback {
            paraphrased_query: "p".into(),
            answer: "a".into(),
            context: "c".into(),
        },
        variant: None,
    }];
    let err = inject_expert_feedback(&m, &items, e.as_ref()).unwrap_err();
    assert!(matches!(err, HarnessError::Memory(MemoryError::Embed(EmbedError::EmbedderUnavailable(_)))), "{err:?}");
    assert!(err.is_backend_failure());
    assert!(m.is_empty());
    assert_eq!(m.clock().feedback_injection_step, None);
}
