//! End-to-end runs through the public API: corpus files, n-gram training,
//! simulation, step logs and reports, and the HTTP wire protocol.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::net::TcpListener;
use std::sync::Arc;

use chatac_core::corpus::{read_canonical, turn_starts, write_canonical};
use chatac_core::metrics::{build_report, RunMeta};
use chatac_core::provider::http::HttpProvider;
use chatac_core::provider::ngram::{NgramModel, NgramProvider, SmoothingConfig};
use chatac_core::provider::TimingMode;
use chatac_core::simulator::{run_dataset, RunOptions};
use chatac_core::steplog::{read_step_log, write_step_log};
use chatac_core::{
    CompletionProvider, CompletionRequest, Conversation, GenConfig, Message, PrefixInstance, Role, SuggestionMode,
    TurnTrace,
};

const PROMPTS: &[&str] = &[
    "can you tell me more about the weather",
    "can you tell me a joke",
    "how do I bake bread at home",
    "how do I fix a flat tire",
    "what is the capital of france",
    "what is the best way to learn rust",
    "thanks, that was very helpful",
    "can you tell me more about rust",
];

fn corpus() -> Vec<Conversation> {
    (0..24)
        .map(|i| Conversation {
            id: format!("c{i}"),
            lang: "en".into(),
            messages: vec![
                Message::new(Role::Prompter, PROMPTS[i % PROMPTS.len()]),
                Message::new(Role::Assistant, "Sure, here is what I know."),
                Message::new(Role::Prompter, PROMPTS[(i * 3 + 1) % PROMPTS.len()]),
            ],
        })
        .collect()
}

fn instances(convs: &[Conversation]) -> Vec<PrefixInstance> {
    convs.iter().flat_map(turn_starts).collect()
}

fn meta(gen: &GenConfig, k_list: &[usize]) -> RunMeta {
    RunMeta {
        dataset: "toy".into(),
        provider: "ngram-3".into(),
        gen: gen.clone(),
        mode: SuggestionMode::WordLevel,
        k_list: k_list.to_vec(),
        seed: Some(5),
        timing: TimingMode::virtual_default(),
        config: serde_json::Value::Null,
    }
}

fn without_latency(mut traces: Vec<TurnTrace>) -> Vec<TurnTrace> {
    for t in &mut traces {
        for s in &mut t.steps {
            s.latency_ms = 0.0;
        }
    }
    traces
}

#[test]
fn files_to_report_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("train.jsonl");
    let mut w = BufWriter::new(File::create(&corpus_path).unwrap());
    write_canonical(&mut w, &corpus()).unwrap();
    w.flush().unwrap();
    drop(w);
    let convs = read_canonical(BufReader::new(File::open(&corpus_path).unwrap())).unwrap();
    assert_eq!(convs, corpus());

    let model = NgramModel::train(&convs, 3, &SmoothingConfig::default()).unwrap();
    let model_path = dir.path().join("model.jsonl");
    model.write_jsonl(BufWriter::new(File::create(&model_path).unwrap())).unwrap();
    let model = NgramModel::read_jsonl(BufReader::new(File::open(&model_path).unwrap())).unwrap();

    let provider = NgramProvider::new(Arc::new(model)).with_timing(TimingMode::virtual_default());
    let turns = instances(&convs);
    let gen = GenConfig::best();
    let ks = [1, 3, 10];
    let run = |workers| {
        let opts = RunOptions { seed: Some(5), workers, memoize: true };
        run_dataset(&turns, &provider, &gen, SuggestionMode::WordLevel, &ks, &opts).unwrap()
    };
    let (single, stats) = run(1);
    let (parallel, _) = run(4);
    assert_eq!(single, parallel);
    assert_eq!(single.len(), turns.len() * ks.len());
    assert!(stats.provider_calls > 0);

    let report = build_report(&meta(&gen, &ks), &single).unwrap();
    assert!(report.reports[2].saved_at_k > 0.0, "a model trained on the test turns should save keystrokes");
    assert!(report.reports.windows(2).all(|w| w[0].saved_at_k <= w[1].saved_at_k));

    let log_path = dir.path().join("steps.jsonl");
    write_step_log(BufWriter::new(File::create(&log_path).unwrap()), &meta(&gen, &ks), &single)
        .unwrap()
        .flush()
        .unwrap();
    let (m, traces) = read_step_log(BufReader::new(File::open(&log_path).unwrap())).unwrap();
    assert_eq!(traces, single);
    assert_eq!(build_report(&m, &traces).unwrap().to_json_pretty(), report.to_json_pretty());
}

/// Serves `/v1/complete`, `/v1/score` and `/v1/health` from a local
/// provider, one connection at a time.
fn serve(provider: Arc<NgramProvider>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                continue;
            }
            let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
            let mut len = 0;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h.trim().is_empty() {
                    break;
                }
                if let Some((k, v)) = h.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let body: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
            let reply = match path.as_str() {
                "/v1/health" => serde_json::json!({"model": "ngram", "ready": true}),
                "/v1/complete" => {
                    let mut req = CompletionRequest::new(
                        body["context"].as_str().unwrap(),
                        body["n_samples"].as_u64().unwrap() as usize,
                        body["max_tokens"].as_u64().unwrap() as usize,
                    )
                    .with_temperature(body["temperature"].as_f64().unwrap());
                    req.seed = body["seed"].as_u64();
                    let c = provider.complete(&req).unwrap();
                    serde_json::json!({"completions": c.samples, "model": "ngram"})
                }
                "/v1/score" => {
                    let tokens: Vec<String> = serde_json::from_value(body["tokens"].clone()).unwrap();
                    let s = provider.score(body["context"].as_str().unwrap(), &tokens).unwrap();
                    serde_json::json!({"logprobs": s.logprobs})
                }
                _ => serde_json::json!({"error": "not found"}),
            };
            let reply = reply.to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    url
}

#[test]
fn http_provider_matches_in_process_provider() {
    let convs = corpus();
    let model = Arc::new(NgramModel::train(&convs, 3, &SmoothingConfig::default()).unwrap());
    let local = Arc::new(NgramProvider::new(model));
    let remote = HttpProvider::new(serve(local.clone()));
    let health = remote.health().unwrap();
    assert!(health.ready);

    let turns: Vec<PrefixInstance> = instances(&convs).into_iter().take(6).collect();
    let gen = GenConfig::new(3, 8, 3);
    let opts = RunOptions { seed: Some(9), workers: 2, memoize: true };
    let (direct, _) = run_dataset(&turns, local.as_ref(), &gen, SuggestionMode::WordLevel, &[1, 3], &opts).unwrap();
    let (over_http, _) = run_dataset(&turns, &remote, &gen, SuggestionMode::WordLevel, &[1, 3], &opts).unwrap();
    assert_eq!(without_latency(direct), without_latency(over_http));
    assert!(remote.name().starts_with("http:"));

    let forced = vec!["can".to_string(), " you".to_string()];
    let context = "<|prompter|>";
    assert_eq!(remote.score(context, &forced).unwrap().logprobs, local.score(context, &forced).unwrap().logprobs);
}
