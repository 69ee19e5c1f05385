// Drives the engine over HTTP. A local canned server stands in for an
// OpenAI-compatible completions endpoint, for both generators and switcher.

use std::sync::Arc;
use std::time::Duration;

use serde_json::json;
use switchgen::backends::fixture::{CannedResponse, CannedServer};
use switchgen::backends::{Backend, HttpBackendOptions, HttpCompletionBackend};
use switchgen::domain::{CandidatePool, GenerationConfig, Query};
use switchgen::engine::switch_generate;
use switchgen::rng::SeedStream;
use switchgen::switcher::LmPolicy;

fn completion(text: &str) -> CannedResponse {
    CannedResponse::json(
        200,
        json!({"choices": [{"text": text, "finish_reason": "length"}], "usage": {"completion_tokens": 8}}).to_string(),
    )
}

fn backend(name: &str, server: &CannedServer) -> HttpCompletionBackend {
    let options = HttpBackendOptions {
        timeout: Duration::from_secs(5),
        ..HttpBackendOptions::default()
    };
    HttpCompletionBackend::new(name, &server.url(), "demo-model", None, options)
        .expect("valid endpoint")
}

fn main() {
    let base = CannedServer::start(vec![completion(" the base model speaks")]).expect("server");
    let chat = CannedServer::start(vec![completion(" the chat model replies")]).expect("server");
    // The switcher answers with top-5 log-probabilities over the label tokens.
    let switcher = CannedServer::start(vec![CannedResponse::json(
        200,
        json!({"choices": [{"text": "0", "logprobs": {"tokens": ["0"], "top_logprobs": [{"0": -0.1, "1": -2.4, " ": -5.0}]}}]})
            .to_string(),
    )])
    .expect("server");

    let pool = CandidatePool::from_backends(
        [("base", &base), ("chat", &chat)]
            .map(|(n, s)| (n, Arc::new(backend(n, s)) as Arc<dyn Backend>)),
        1,
    )
    .expect("valid pool");
    let policy = LmPolicy::new(Arc::new(backend("switcher", &switcher)));
    let config = GenerationConfig {
        patch_size: 8,
        max_new_tokens: 32,
        ..GenerationConfig::default()
    };
    let query = Query::new("h1", "Tell me something.");
    let rec = switch_generate(
        &query,
        &pool,
        &policy,
        &config,
        &SeedStream::for_query(0, &query.id),
    )
    .expect("valid inputs");
    assert!(rec.failure.is_none(), "{:?}", rec.failure);
    println!("models {:?}", rec.model_sequence);
    println!("text   {:?}", rec.final_text);
    println!(
        "switcher calls {}, base calls {}, chat calls {}",
        switcher.request_count(),
        base.request_count(),
        chat.request_count()
    );
    println!(
        "first switcher prompt:\n{}",
        switcher.requests()[0].json()["prompt"]
            .as_str()
            .unwrap_or_default()
    );
}
