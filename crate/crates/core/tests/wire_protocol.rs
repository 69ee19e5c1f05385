use std::sync::Arc;
use std::time::Duration;

use serde_json::json;
use switchgen::backends::fixture::{CannedResponse, CannedServer};
use switchgen::backends::{
    self, Backend, BackendError, GenerationRequest, HttpBackendOptions, HttpCompletionBackend,
};
use switchgen::domain::{CandidatePool, GenerationConfig, Query, ANSWER_CUE};
use switchgen::engine::switch_generate;
use switchgen::rng::SeedStream;
use switchgen::switcher::LmPolicy;

fn options(max_retries: u32, timeout: Duration) -> HttpBackendOptions {
    HttpBackendOptions {
        timeout,
        max_retries,
        backoff: Duration::from_millis(1),
        concurrency: 4,
    }
}

fn backend(server: &CannedServer, max_retries: u32) -> HttpCompletionBackend {
    HttpCompletionBackend::new(
        "b",
        &server.url(),
        "model-x",
        None,
        options(max_retries, Duration::from_secs(5)),
    )
    .unwrap()
}

fn completion(text: &str, finish: &str, tokens: usize) -> CannedResponse {
    CannedResponse::json(
        200,
        json!({"choices": [{"text": text, "finish_reason": finish}], "usage": {"completion_tokens": tokens}}).to_string(),
    )
}

#[test]
fn stop_before_budget_is_finished() {
    let server = CannedServer::start(vec![completion("done", "stop", 3)]).unwrap();
    let r = backends::generate(&backend(&server, 0), &GenerationRequest::new("x", 50)).unwrap();
    assert_eq!(
        (r.text.as_str(), r.token_count, r.finished),
        ("done", 3, true)
    );
}

#[test]
fn token_count_falls_back_to_logprob_tokens() {
    let server = CannedServer::start(vec![CannedResponse::json(
        200,
        json!({"choices": [{"text": "a b", "finish_reason": "length", "logprobs": {"tokens": ["a", " b"]}}]})
            .to_string(),
    )])
    .unwrap();
    let r = backends::generate(&backend(&server, 0), &GenerationRequest::new("x", 2)).unwrap();
    assert_eq!(r.token_count, 2);
    assert!(!r.finished);
}

#[test]
fn overlong_reply_is_a_protocol_error() {
    let server = CannedServer::start(vec![completion("long", "length", 80)]).unwrap();
    assert!(matches!(
        backends::generate(&backend(&server, 0), &GenerationRequest::new("x", 50)),
        Err(BackendError::Protocol(_))
    ));
}

#[test]
fn malformed_body_is_a_protocol_error() {
    let server = CannedServer::start(vec![CannedResponse::json(200, "not json")]).unwrap();
    assert!(matches!(
        backends::generate(&backend(&server, 0), &GenerationRequest::new("x", 5)),
        Err(BackendError::Protocol(_))
    ));
}

#[test]
fn missing_top_logprobs_is_a_capability_error() {
    let server = CannedServer::start(vec![completion("0", "length", 1)]).unwrap();
    assert!(matches!(
        backends::next_label_logits(&backend(&server, 0), "p", 3),
        Err(BackendError::Capability(_))
    ));
}

#[test]
fn timeout_is_retried_then_reported() {
    let server = CannedServer::start(vec![
        completion("late", "stop", 1).delayed(Duration::from_millis(600))
    ])
    .unwrap();
    let b = HttpCompletionBackend::new(
        "slow",
        &server.url(),
        "m",
        None,
        options(1, Duration::from_millis(150)),
    )
    .unwrap();
    match backends::generate(&b, &GenerationRequest::new("x", 5)) {
        Err(BackendError::Transport { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("expected transport failure, got {other:?}"),
    }
    assert_eq!(b.retries(), 1);
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let b = HttpCompletionBackend::new(
        "gone",
        &format!("http://127.0.0.1:{port}"),
        "m",
        None,
        options(0, Duration::from_secs(1)),
    )
    .unwrap();
    assert!(matches!(
        backends::generate(&b, &GenerationRequest::new("x", 5)),
        Err(BackendError::Transport { attempts: 1, .. })
    ));
}

#[test]
fn rate_limit_is_not_retried() {
    let server = CannedServer::start(vec![
        CannedResponse::json(429, "{}"),
        completion("ok", "stop", 1),
    ])
    .unwrap();
    let b = backend(&server, 3);
    assert!(matches!(
        backends::generate(&b, &GenerationRequest::new("x", 5)),
        Err(BackendError::Config(_))
    ));
    assert_eq!(server.request_count(), 1);
}

#[test]
fn switcher_lm_over_http_drives_the_engine() {
    // Pool members and switcher all behind canned servers.
    let gen = |text: &str| CannedServer::start(vec![completion(text, "length", 10)]).unwrap();
    let servers = [gen(" zero"), gen(" one"), gen(" two")];
    let switcher = CannedServer::start(vec![CannedResponse::json(
        200,
        json!({"choices": [{"text": "1", "logprobs": {"tokens": ["1"], "top_logprobs": [{"1": -0.01, "0": -6.0}]}}]})
            .to_string(),
    )])
    .unwrap();
    let pool = CandidatePool::from_backends(
        servers
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("g{i}"), Arc::new(backend(s, 0)) as Arc<dyn Backend>)),
        2,
    )
    .unwrap();
    let policy = LmPolicy::new(Arc::new(backend(&switcher, 0)));
    let config = GenerationConfig {
        patch_size: 10,
        max_new_tokens: 40,
        ..GenerationConfig::default()
    };
    let q = Query::new("h", "Question?");
    let rec = switch_generate(&q, &pool, &policy, &config, &SeedStream::for_query(0, "h")).unwrap();
    assert!(rec.failure.is_none(), "{:?}", rec.failure);
    assert_eq!(rec.model_sequence, vec![2, 1, 1, 2]);
    assert_eq!(rec.final_text, " two one one two");

    // Switcher saw attributed prompts ending in the cue; generators saw plain text.
    let prompts: Vec<String> = switcher
        .requests()
        .iter()
        .map(|r| r.json()["prompt"].as_str().unwrap().to_owned())
        .collect();
    assert_eq!(prompts.len(), 2);
    assert!(prompts.iter().all(|p| p.ends_with(ANSWER_CUE)));
    assert!(prompts[0].contains("<model 2 begins>  two <model 2 ends>"));
    let g1 = servers[1].requests();
    assert_eq!(g1[0].json()["prompt"], "Question? two");
    assert_eq!(g1[1].json()["prompt"], "Question? two one");
    assert_eq!(g1[0].json()["max_tokens"], 10);
}
