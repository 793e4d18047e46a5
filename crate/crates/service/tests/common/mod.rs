#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use ndarray::Array2;
use tower::ServiceExt;

use segxal_core::dataset::SyntheticBenchmark;
use segxal_core::io::write_label_png;
use segxal_core::model::ModelConfig;
use segxal_core::orchestrator::{OracleMode, RunConfig, Runner};
use segxal_core::queue::{Queue, Ticket, TicketStatus};
use segxal_core::types::{LabelMask, Sample};
use segxal_service::{router_with_clock, ServiceConfig, QUEUE_FILE};

pub const H: usize = 16;
pub const W: usize = 32;
pub const CLASSES: u8 = 5;

pub fn data() -> (Vec<Sample>, Vec<Sample>) {
    SyntheticBenchmark {
        n_train: 24,
        n_val: 6,
        width: W,
        height: H,
        max_objects: 2,
        ..SyntheticBenchmark::default()
    }
    .generate()
    .unwrap()
}

pub fn human_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        levels: 2,
        base_channels: 4,
        epochs_per_cycle: 2,
        ..ModelConfig::desk(CLASSES as usize, H, W)
    };
    cfg.oracle = OracleMode::Human;
    cfg.al.num_cycles = 1;
    cfg.al.query_fraction_per_cycle = 0.1;
    cfg.al.dice_threshold_theta = 0.0;
    cfg.extract.min_region_px = 2;
    cfg
}

/// `state.json` of a freshly initialised human-oracle run (cycle 0).
pub fn template_state() -> &'static [u8] {
    static STATE: OnceLock<Vec<u8>> = OnceLock::new();
    STATE.get_or_init(|| {
        let (tr, va) = data();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        Runner::new(human_config(), tr, va, Some(dir.clone())).unwrap();
        std::fs::read(dir.join("state.json")).unwrap()
    })
}

/// A run directory holding the template state and hand-made cycle-1
/// tickets with all-zero initial masks.
pub fn fixture(dir: &Path, scores: &[f64]) -> Vec<String> {
    std::fs::write(dir.join("state.json"), template_state()).unwrap();
    let mut q = Queue::open(dir.join(QUEUE_FILE)).unwrap();
    let mut ids = Vec::new();
    for (k, &score) in scores.iter().enumerate() {
        let sample = format!("s{k:03}");
        let rel = format!("cycle_1/assets/{sample}");
        std::fs::create_dir_all(dir.join(&rel)).unwrap();
        let initial_mask = format!("{rel}/initial_mask.png");
        write_label_png(&zeros(), &dir.join(&initial_mask)).unwrap();
        let ticket_id = format!("c1-{sample}");
        q.enqueue(Ticket {
            ticket_id: ticket_id.clone(),
            sample_id: sample,
            cycle: 1,
            status: TicketStatus::Pending,
            lease_expiry: None,
            annotator_id: None,
            claimed_at: None,
            asset_refs: BTreeMap::from([("initial_seg".to_string(), initial_mask.clone())]),
            initial_mask,
            top_score: score,
            num_prompts: 1,
            submission: None,
        })
        .unwrap();
        ids.push(ticket_id);
    }
    q.save().unwrap();
    ids
}

pub fn zeros() -> LabelMask {
    LabelMask::new(Array2::zeros((H, W)), CLASSES).unwrap()
}

#[derive(Clone, Default)]
pub struct ManualClock(pub Arc<AtomicU64>);

impl ManualClock {
    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }

    pub fn now(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

pub fn app(dir: &Path, lease_ms: u64, clock: &ManualClock) -> Router {
    let c = clock.clone();
    router_with_clock(
        ServiceConfig {
            lease_ms,
            ..ServiceConfig::new(dir)
        },
        Arc::new(move || c.now()),
    )
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<serde_json::Value>) -> (StatusCode, serde_json::Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let v = serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null);
    (status, v)
}

pub fn claim_body(who: &str) -> serde_json::Value {
    serde_json::json!({ "annotator_id": who })
}

pub fn annotation_body(who: &str, edits: serde_json::Value) -> serde_json::Value {
    serde_json::json!({ "annotator_id": who, "edits": edits })
}
