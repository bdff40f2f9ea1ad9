//! End-to-end runs over the 20-item fixture with stub backends.

use std::path::PathBuf;
use std::sync::Arc;

use patchrag_core::generate::PatchCopyStub;
use patchrag_core::harness::{
    apply_stress, load_items, populate_pre_t, run_lagged_baseline, run_lambda_sweep, run_snapshot, EvalItem, SnapshotOptions, StressSpec,
    StressVariant,
};
use patchrag_core::{Backends, Corpus, Memory, Metric, RetrievalConfig, RetrievalMode, StubEmbedder};

const DIM: usize = 1024;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/snapshot20").join(name)
}

struct Setup {
    items: Vec<EvalItem>,
    memory: Memory,
    corpus: Corpus,
    backends: Backends,
}

fn setup() -> Setup {
    let embedder = Arc::new(StubEmbedder::new(DIM).unwrap());
    let memory = Memory::new();
    populate_pre_t(&memory, &fixture("pre_t.jsonl"), embedder.as_ref()).unwrap();
    let corpus = Corpus::load(&fixture("corpus.jsonl"), Some(embedder.as_ref())).unwrap();
    Setup {
        items: load_items(&fixture("items.jsonl")).unwrap(),
        memory,
        corpus,
        backends: Backends {
            embedder,
            generator: Arc::new(PatchCopyStub),
        },
    }
}

fn opts() -> SnapshotOptions {
    SnapshotOptions {
        dataset: "snapshot20".into(),
        seed: 7,
        ..Default::default()
    }
}

#[test]
fn snapshot_corrects_every_item() {
    let s = setup();
    assert_eq!(s.memory.len(), 100);
    let report = run_snapshot(&s.items, &s.memory, &s.corpus, &s.backends, &RetrievalConfig::default(), Metric::Em, &opts()).unwrap();
    assert_eq!((report.pre_t, report.post_t, report.gain), (0.0, 100.0, 100.0));
    assert_eq!(report.n_items, 20);
    assert!(report.correction_lag_ms.per_batch_total >= 1);
    assert_eq!(s.memory.len(), 120);
    assert_eq!(s.memory.clock().feedback_injection_step, Some(20));
    assert_eq!(report.table_line(), "pre 0.0 post 100.0 gain +100.0");
}

#[test]
fn snapshot_is_deterministic() {
    let a = setup();
    let b = setup();
    let cfg = RetrievalConfig::default();
    let ra = run_snapshot(&a.items, &a.memory, &a.corpus, &a.backends, &cfg, Metric::F1, &opts()).unwrap();
    let rb = run_snapshot(&b.items, &b.memory, &b.corpus, &b.backends, &cfg, Metric::F1, &opts()).unwrap();
    assert_eq!(ra.canonical_json(), rb.canonical_json());
}

#[test]
fn zero_delay_matches_immediate_snapshot() {
    let a = setup();
    let b = setup();
    let cfg = RetrievalConfig::default();
    let snap = run_snapshot(&a.items, &a.memory, &a.corpus, &a.backends, &cfg, Metric::Em, &opts()).unwrap();
    let lagged = run_lagged_baseline(&b.items, &b.memory, &b.corpus, &b.backends, &cfg, Metric::Em, &opts(), 0).unwrap();
    assert_eq!(snap.canonical_json(), lagged.canonical_json());
}

#[test]
fn delayed_visibility_misses_early_queries() {
    let s = setup();
    let report = run_lagged_baseline(&s.items, &s.memory, &s.corpus, &s.backends, &RetrievalConfig::default(), Metric::Em, &opts(), 5).unwrap();
    assert_eq!(report.post_t, 75.0);
    for (j, item) in report.per_item.iter().enumerate() {
        assert_eq!(item.post_t.em, u8::from(j >= 5), "{}", item.item_id);
    }
}

#[test]
fn lambda_sweep_endpoints() {
    let s = setup();
    let points = run_lambda_sweep(
        &s.items,
        &s.memory,
        &s.corpus,
        &s.backends,
        &RetrievalConfig::default(),
        &[0.0, 0.5, 1.0],
        Metric::Em,
        &opts(),
    )
    .unwrap();
    let post: Vec<f64> = points.iter().map(|p| p.post_t).collect();
    assert_eq!(post, [0.0, 100.0, 100.0]);
    assert!(points.iter().all(|p| p.pre_t == 0.0));
    // The sweep works on copies.
    assert_eq!(s.memory.len(), 100);
}

#[test]
fn standard_rag_ignores_feedback() {
    let s = setup();
    let cfg = RetrievalConfig {
        mode: RetrievalMode::CorpusQToC,
        ..Default::default()
    };
    let report = run_snapshot(&s.items, &s.memory, &s.corpus, &s.backends, &cfg, Metric::Em, &opts()).unwrap();
    assert_eq!((report.pre_t, report.post_t), (0.0, 0.0));
}

#[test]
fn noise_degrades_linearly() {
    let mut post = Vec::new();
    for f in [0.0, 0.25, 0.5, 0.75] {
        let s = setup();
        let spec = StressSpec {
            variant: StressVariant::Noise(f),
            seed: Some(2024),
        };
        let items = apply_stress(&s.items, &spec, &s.corpus, s.backends.embedder.as_ref()).unwrap();
        let report = run_snapshot(&items, &s.memory, &s.corpus, &s.backends, &RetrievalConfig::default(), Metric::Em, &opts()).unwrap();
        post.push(report.post_t);
    }
    assert_eq!(post, [100.0, 75.0, 50.0, 25.0]);
}

#[test]
fn blank_feedback_scores_zero() {
    let s = setup();
    let spec = StressSpec {
        variant: StressVariant::Blank,
        seed: None,
    };
    let items = apply_stress(&s.items, &spec, &s.corpus, s.backends.embedder.as_ref()).unwrap();
    let report = run_snapshot(&items, &s.memory, &s.corpus, &s.backends, &RetrievalConfig::default(), Metric::Em, &opts()).unwrap();
    assert_eq!(report.post_t, 0.0);
    assert_eq!(s.memory.count_by_source().get("stress_variant:blank"), Some(&20));
}
