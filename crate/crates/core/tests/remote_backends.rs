mod common;

use std::collections::BTreeMap;
use std::time::Duration;

use affordgrasp::decomposition::{self, chat_completion_body, Decomposer, RemoteDecomposer};
use affordgrasp::pipeline::{self, Backends, CandidateSource, FailureClass, GraspRequest, GraspResponse, PipelineConfig, RemoteCandidates};
use affordgrasp::scene::{self, SceneFixture};
use affordgrasp::segmentation::{self, FixtureSegmenter, RemoteSegmenter, SegmentRequest, SegmentResponse, Segmenter, WireSegment};
use affordgrasp::{Error, TaskRequest};
use base64::Engine;
use common::{dead_url, knife_scene, MockServer, CUT};
use serde_json::{json, Value};

fn remote_decomposer(url: &str, key_var: &str, retries: u32) -> RemoteDecomposer {
    RemoteDecomposer::new(url, "planner-small", key_var, 0.0, retries, Duration::from_secs(5)).unwrap()
}

fn chat(content: &str) -> (u16, String) {
    (200, chat_completion_body(content).to_string())
}

#[test]
fn conforming_endpoint_round_trip() {
    std::env::set_var("AFFORDGRASP_TEST_KEY_A", "sekrit");
    let server = MockServer::start(|_, _, body| {
        // echo the task object back as a conforming reply
        let req: Value = serde_json::from_str(body).unwrap();
        assert_eq!(req["messages"][1]["content"], "Task: cut the vegetables");
        chat(r#"{"object": "Knife", "grasp_parts": ["Handle "], "avoid_parts": ["blade"]}"#)
    });
    let d = remote_decomposer(&server.url, "AFFORDGRASP_TEST_KEY_A", 0)
        .decompose(&TaskRequest::new(CUT).unwrap())
        .unwrap();
    assert_eq!(d.object_name(), "knife");
    assert_eq!(d.desirable_parts(), ["handle"]);
    assert_eq!(d.undesirable_parts(), ["blade"]);

    let calls = server.calls();
    assert_eq!(calls.len(), 1);
    assert_eq!(calls[0].authorization.as_deref(), Some("Bearer sekrit"));
    let req: Value = serde_json::from_str(&calls[0].body).unwrap();
    assert_eq!(req["model"], "planner-small");
    assert_eq!(req["temperature"], 0.0);
    let roles: Vec<&str> = req["messages"].as_array().unwrap().iter().map(|m| m["role"].as_str().unwrap()).collect();
    assert_eq!(roles, ["system", "user"]);
    let prompt = decomposition::build_prompt(&TaskRequest::new(CUT).unwrap());
    assert_eq!(req["messages"][0]["content"], prompt.system);
}

#[test]
fn unparseable_reply_gets_one_repair_prompt() {
    let server = MockServer::start(|n, _, _| match n {
        0 => chat("Sure! The knife should be held by the handle."),
        _ => chat(r#"{"object": "knife", "grasp_parts": ["handle"], "avoid_parts": []}"#),
    });
    let d = remote_decomposer(&server.url, "AFFORDGRASP_UNSET_VAR", 0)
        .decompose(&TaskRequest::new(CUT).unwrap())
        .unwrap();
    assert_eq!(d.desirable_parts(), ["handle"]);
    let calls = server.calls();
    assert_eq!(calls.len(), 2);
    assert_eq!(calls[0].authorization, None);
    let second: Value = serde_json::from_str(&calls[1].body).unwrap();
    let msgs = second["messages"].as_array().unwrap();
    assert_eq!(msgs.len(), 4);
    assert_eq!(msgs[2]["role"], "assistant");
    assert_eq!(msgs[3]["role"], "user");
}

#[test]
fn second_bad_reply_is_malformed() {
    let server = MockServer::start(|_, _, _| chat(r#"{"object": "knife", "grasp": ["handle"]}"#));
    let r = remote_decomposer(&server.url, "AFFORDGRASP_UNSET_VAR", 0).decompose(&TaskRequest::new(CUT).unwrap());
    assert!(matches!(r, Err(Error::MalformedDecomposition(_))), "{r:?}");
    assert_eq!(server.calls().len(), 2);
}

#[test]
fn empty_grasp_parts_is_invalid() {
    let server = MockServer::start(|_, _, _| chat(r#"{"object": "knife", "grasp_parts": [], "avoid_parts": ["blade"]}"#));
    let r = remote_decomposer(&server.url, "AFFORDGRASP_UNSET_VAR", 0).decompose(&TaskRequest::new(CUT).unwrap());
    assert!(matches!(r, Err(Error::InvalidDecomposition(_))), "{r:?}");
}

#[test]
fn server_errors_are_retried() {
    let server = MockServer::start(|n, _, _| match n {
        0 => (503, "{}".into()),
        _ => chat(r#"{"object": "knife", "grasp_parts": ["handle"]}"#),
    });
    remote_decomposer(&server.url, "AFFORDGRASP_UNSET_VAR", 1)
        .decompose(&TaskRequest::new(CUT).unwrap())
        .unwrap();
    assert_eq!(server.calls().len(), 2);

    let down = MockServer::start(|_, _, _| (500, "{}".into()));
    let r = remote_decomposer(&down.url, "AFFORDGRASP_UNSET_VAR", 2).decompose(&TaskRequest::new(CUT).unwrap());
    assert!(matches!(r, Err(Error::BackendUnavailable(_))));
    assert_eq!(down.calls().len(), 3);
}

#[test]
fn unreachable_decomposer_reports_backend_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    knife_scene(dir.path(), 1);
    let config: PipelineConfig = serde_json::from_value(json!({
        "decomposition": {"kind": "remote", "endpoint_url": dead_url(), "model_name": "m",
                          "api_key_env_var": "AFFORDGRASP_UNSET_VAR", "max_retries": 0, "request_timeout": 2}
    }))
    .unwrap();
    let out = pipeline::run_scene(dir.path(), CUT, &config).unwrap();
    let failure = out.report.failure.clone().unwrap();
    assert_eq!(failure.class, FailureClass::DecompositionFailure);
    assert!(failure.backend_unavailable);
    assert_eq!(out.report.exit_code(), 3);
}

/// Serves `/segment` from the fixture's own mask files.
fn segmentation_server(fixture: SceneFixture) -> MockServer {
    MockServer::start(move |_, path, body| {
        assert_eq!(path, "/segment");
        let req: SegmentRequest = serde_json::from_str(body).unwrap();
        let segments = req
            .queries
            .iter()
            .filter_map(|q| {
                let mask = fixture.ground_truth_masks.get(q)?;
                Some(WireSegment {
                    label: q.clone(),
                    confidence: fixture.confidences[q],
                    mask_rle: mask.runs().to_vec(),
                    width: mask.width(),
                    height: mask.height(),
                })
            })
            .collect();
        (200, serde_json::to_string(&SegmentResponse { segments }).unwrap())
    })
}

#[test]
fn remote_segmentation_matches_fixture_backend() {
    let dir = tempfile::tempdir().unwrap();
    let g = knife_scene(dir.path(), 2);
    let server = segmentation_server(g.fixture.clone());
    let remote = RemoteSegmenter::new(&server.url, Duration::from_secs(5)).unwrap();
    let local = FixtureSegmenter::open(&dir.path().join(scene::MASKS_DIR)).unwrap();
    let parts = vec!["handle".to_string(), "blade".to_string()];
    let frame = &g.fixture.frame;
    let a = segmentation::segment_with(&remote, frame, "knife", &parts, 0.0).unwrap();
    let b = segmentation::segment_with(&local, frame, "knife", &parts, 0.0).unwrap();
    assert_eq!(a, b);
    // raw detections share one schema
    let queries = segmentation::build_queries("knife", &parts);
    assert_eq!(remote.detect(frame, &queries).unwrap(), local.detect(frame, &queries).unwrap());

    let req: SegmentRequest = serde_json::from_str(&server.calls()[0].body).unwrap();
    assert_eq!(req.queries, ["knife", "handle", "blade"]);
    let png = base64::engine::general_purpose::STANDARD.decode(&req.image_png_b64).unwrap();
    let img = image::load_from_memory(&png).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), frame.dims());
    assert!(img.pixels().zip(frame.color()).all(|(p, c)| p.0 == *c));
}

#[test]
fn malformed_segment_response_is_a_segmentation_failure() {
    let dir = tempfile::tempdir().unwrap();
    knife_scene(dir.path(), 3);
    let server = MockServer::start(|_, _, _| {
        (200, json!({"segments": [{"label": "knife", "confidence": 0.9, "mask_rle": [4], "width": 2, "height": 2}]}).to_string())
    });
    let config: PipelineConfig =
        serde_json::from_value(json!({"segmentation": {"kind": "remote", "endpoint_url": server.url}})).unwrap();
    let out = pipeline::run_scene(dir.path(), CUT, &config).unwrap();
    assert_eq!(out.report.failure.unwrap().class, FailureClass::SegmentationFailure);
}

#[test]
fn remote_grasps_match_file_source() {
    let dir = tempfile::tempdir().unwrap();
    let g = knife_scene(dir.path(), 4);
    let candidates = g.fixture.candidates.clone();
    let server = MockServer::start(move |_, path, _| {
        assert_eq!(path, "/grasps");
        (200, serde_json::to_string(&GraspResponse { candidates: candidates.clone() }).unwrap())
    });
    let config: PipelineConfig =
        serde_json::from_value(json!({"candidate_source": {"kind": "remote", "endpoint_url": server.url}})).unwrap();
    let remote = pipeline::run_scene(dir.path(), CUT, &config).unwrap();
    let local = pipeline::run_scene(dir.path(), CUT, &PipelineConfig::default()).unwrap();
    assert_eq!(remote.report.to_json_without_timings().unwrap(), local.report.to_json_without_timings().unwrap());
    assert_eq!(remote.report.selected.unwrap().id(), g.part_targets["handle"]);

    let req: GraspRequest = serde_json::from_str(&server.calls()[0].body).unwrap();
    let frame = &g.fixture.frame;
    assert_eq!((req.width, req.height), frame.dims());
    assert_eq!(req.intrinsics, *frame.intrinsics());
    assert_eq!(req.object_mask_rle, g.fixture.ground_truth_masks["knife"].runs());
    let png = base64::engine::general_purpose::STANDARD.decode(&req.depth_png16_b64).unwrap();
    let depth = image::load_from_memory(&png).unwrap().to_luma16();
    assert_eq!(depth.as_raw().as_slice(), frame.depth_mm());
}

#[test]
fn grasp_file_schema_is_the_wire_schema() {
    let dir = tempfile::tempdir().unwrap();
    knife_scene(dir.path(), 5);
    let file: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(scene::GRASPS_FILE)).unwrap()).unwrap();
    let wire: GraspResponse = serde_json::from_value(json!({ "candidates": file })).unwrap();
    for c in &wire.candidates {
        let q = c.pose.rotation().quaternion();
        assert!((q.norm() - 1.0).abs() <= 1e-6);
    }
    let record = &file[0];
    let keys: Vec<&str> = record.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["confidence", "contact_point", "id", "pose"]);
    assert_eq!(record["pose"]["quaternion"].as_array().unwrap().len(), 4);
}

#[test]
fn zero_remote_proposals_is_no_candidates() {
    let dir = tempfile::tempdir().unwrap();
    knife_scene(dir.path(), 6);
    let server = MockServer::start(|_, _, _| (200, r#"{"candidates": []}"#.into()));
    let source = RemoteCandidates::new(&server.url, Duration::from_secs(5)).unwrap();
    let fixture = SceneFixture::load(dir.path()).unwrap();
    assert!(source.candidates(&fixture.frame, &fixture.ground_truth_masks["knife"]).unwrap().is_empty());

    let config: PipelineConfig =
        serde_json::from_value(json!({"candidate_source": {"kind": "remote", "endpoint_url": server.url}})).unwrap();
    let out = pipeline::run_scene(dir.path(), CUT, &config).unwrap();
    let failure = out.report.failure.unwrap();
    assert_eq!(failure.class, FailureClass::NoCandidates);
    assert!(!failure.backend_unavailable);
}

#[test]
fn injected_backends_drive_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let g = knife_scene(dir.path(), 7);
    let table = decomposition::FixtureTable::load(&dir.path().join(scene::DECOMPOSITION_FILE)).unwrap();
    let masks = FixtureSegmenter::open(&dir.path().join(scene::MASKS_DIR)).unwrap();
    let backends = Backends {
        decomposer: Ok(Box::new(table)),
        segmenter: Ok(Box::new(masks)),
        candidates: Ok(Box::new(g.fixture.candidates.clone())),
    };
    let out = pipeline::run_with(&g.fixture.frame, CUT, &PipelineConfig::default(), backends).unwrap();
    assert_eq!(out.report.selected.unwrap().id(), g.part_targets["handle"]);
    let mut by_label = BTreeMap::new();
    for s in &out.report.part_segments {
        by_label.insert(s.label.clone(), s.pixels);
    }
    assert_eq!(by_label["handle"], g.fixture.ground_truth_masks["handle"].count_ones());
}
