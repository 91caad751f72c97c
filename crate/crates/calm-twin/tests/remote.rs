//! Remote client behavior against the local fixture server: envelope
//! validation, timeout handling, ensembles via repeated calls, and the
//! embeddings endpoint.

use calm_twin::llm::{
    llm_select_context, CannedResponse, EmbeddingsClient, FixtureServer, GenerationParams,
    LlmBackend, LlmError, LlmSelectorMock, PromptBundle, RemoteChatBackend, RemoteConfig,
    RemoteEmbedder, SELECTION_PROMPT_CHAR_BUDGET,
};
use calm_twin::retrieval::Embedder;

fn fast_config(server: &FixtureServer) -> RemoteConfig {
    let mut cfg = RemoteConfig::new(server.base_url(), "test-model");
    cfg.max_retries = 1;
    cfg.backoff_base_ms = 1;
    cfg.backoff_cap_ms = 2;
    cfg.timeout_ms = 500;
    cfg
}

fn bundle() -> PromptBundle {
    PromptBundle {
        system_text: String::new(),
        user_text: "Given the following state history:\nTime 0: x: 1\n\nSimulate.".into(),
        params: GenerationParams::default(),
    }
}

#[test]
fn malformed_envelope_is_reported() {
    let server = FixtureServer::start(vec![CannedResponse::ok("{\"nope\": 1}")]).unwrap();
    let backend = RemoteChatBackend::new(fast_config(&server));
    let err = backend.complete(&bundle()).unwrap_err();
    assert!(matches!(err, LlmError::MalformedResponse { .. }));

    let server = FixtureServer::start(vec![CannedResponse::ok("not json at all")]).unwrap();
    let backend = RemoteChatBackend::new(fast_config(&server));
    let err = backend.complete(&bundle()).unwrap_err();
    assert!(matches!(err, LlmError::MalformedResponse { .. }));
}

#[test]
fn per_call_timeout_is_honored() {
    let server = FixtureServer::start(vec![CannedResponse {
        status: 200,
        body: "{}".into(),
        delay_ms: 5_000,
    }])
    .unwrap();
    let mut cfg = fast_config(&server);
    cfg.max_retries = 0;
    cfg.timeout_ms = 300;
    let backend = RemoteChatBackend::new(cfg);
    let started = std::time::Instant::now();
    let err = backend.complete(&bundle()).unwrap_err();
    assert!(matches!(err, LlmError::Transport { .. }));
    assert!(started.elapsed().as_secs_f64() < 4.0, "timeout was not honored");
}

#[test]
fn ensembles_can_use_repeated_calls() {
    let server = FixtureServer::start(vec![
        CannedResponse::chat("Time 1: x: 10"),
        CannedResponse::chat("Time 1: x: 11"),
        CannedResponse::chat("Time 1: x: 12"),
    ])
    .unwrap();
    let mut cfg = fast_config(&server);
    cfg.use_n_parameter = false;
    let backend = RemoteChatBackend::new(cfg);
    let mut request = bundle();
    request.params.n_samples = 3;
    let texts = backend.complete(&request).unwrap();
    assert_eq!(texts, vec!["Time 1: x: 10", "Time 1: x: 11", "Time 1: x: 12"]);
    assert_eq!(server.requests().len(), 3);
    // Each request asked for a single sample.
    for recorded in server.requests() {
        let body: serde_json::Value = serde_json::from_str(&recorded.body).unwrap();
        assert_eq!(body["n"], 1);
    }
}

#[test]
fn embeddings_are_normalized_and_checked() {
    let body = serde_json::json!({
        "data": [
            {"index": 1, "embedding": [0.0, 2.0]},
            {"index": 0, "embedding": [3.0, 4.0]},
        ]
    });
    let server = FixtureServer::start(vec![CannedResponse::ok(body.to_string())]).unwrap();
    let client = EmbeddingsClient::new(fast_config(&server));
    let vectors = client
        .embed_batch(&["a".to_string(), "b".to_string()])
        .unwrap();
    // Sorted back into request order and L2-normalized on receipt.
    assert!((vectors[0][0] - 0.6).abs() < 1e-12);
    assert!((vectors[0][1] - 0.8).abs() < 1e-12);
    assert_eq!(vectors[1], vec![0.0, 1.0]);

    // Empty batches make no request at all.
    let before = server.requests().len();
    assert!(client.embed_batch(&[]).unwrap().is_empty());
    assert_eq!(server.requests().len(), before);
}

#[test]
fn inconsistent_embedding_dimensions_are_rejected() {
    let body = serde_json::json!({
        "data": [
            {"index": 0, "embedding": [1.0, 0.0]},
            {"index": 1, "embedding": [1.0, 0.0, 0.0]},
        ]
    });
    let server = FixtureServer::start(vec![CannedResponse::ok(body.to_string())]).unwrap();
    let client = EmbeddingsClient::new(fast_config(&server));
    let err = client
        .embed_batch(&["a".to_string(), "b".to_string()])
        .unwrap_err();
    assert!(matches!(err, LlmError::MalformedResponse { .. }));
}

#[test]
fn remote_embedder_slots_behind_the_encoder_interface() {
    let body = serde_json::json!({
        "data": [{"index": 0, "embedding": [0.0, 5.0]}]
    });
    let server = FixtureServer::start(vec![CannedResponse::ok(body.to_string())]).unwrap();
    let embedder = RemoteEmbedder::new(fast_config(&server));
    let vector = embedder.embed("Time 0: x: 1").unwrap();
    assert_eq!(vector, vec![0.0, 1.0]);
}

#[test]
fn selection_respects_the_character_budget() {
    let huge = "x".repeat(SELECTION_PROMPT_CHAR_BUDGET);
    let err = llm_select_context(&LlmSelectorMock, &huge, &["a".to_string()], 1).unwrap_err();
    assert!(matches!(err, LlmError::SelectionFailed { .. }));
}
