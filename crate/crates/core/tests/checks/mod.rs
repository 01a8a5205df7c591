//! One check per acceptance criterion. Each returns a short detail line.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use mgd_core::decode::{generate, nucleus_sample, run_trials, Decoder, SamplerConfig, DEFAULT_SCHEDULE};
use mgd_core::harness::score_record;
use mgd_core::lm::{build_prompt, LanguageModel, LogitVector, MockBackend, PromptInputs, PromptPlan, Strategy as Prompting};
use mgd_core::metrics::{
    self, binomial, bucket_of, identifier_complexity, nim_by_complexity, score_at_k, SubwordTokenizer, TrialScores,
};
use mgd_core::monitor::{replay, MonitorConfig, MonitorEvent, MonitorState};
use mgd_core::par::Execution;
use mgd_core::suggest::{LspClient, SuggestionProvider, SuggestionQuery};
use mgd_core::vocab::{maskgen_with, DelimiterSet, SuggestionSet, Vocabulary};

use crate::common::*;

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn random_string(rng: &mut ChaCha8Rng, alphabet: &[&str], max_len: usize) -> String {
    let len = rng.random_range(1..=max_len);
    (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
}

pub fn maskgen_oracle() -> Check {
    const INSTANCES: usize = 10_000;
    let token_chars = ["a", "b", "c", "_", "$", "1", ".", "(", " ", ")", "é"];
    let ident_chars = ["a", "b", "c", "_", "$", "1"];
    let delims = DelimiterSet::java();
    let mut rng = ChaCha8Rng::seed_from_u64(20240101);
    let start = Instant::now();
    let mut admitted = 0usize;
    for instance in 0..INSTANCES {
        let size = rng.random_range(1..=200);
        let tokens: BTreeSet<String> = (0..size).map(|_| random_string(&mut rng, &token_chars, 5)).collect();
        let vocab = Vocabulary::new(tokens.into_iter().collect()).map_err(|e| e.to_string())?;
        let n_sugg = rng.random_range(1..=20);
        let suggestions: Vec<String> = (0..n_sugg).map(|_| random_string(&mut rng, &ident_chars, 6)).collect();
        // Consume part of one suggestion so ε and partial residuals occur.
        let pick = &suggestions[rng.random_range(0..suggestions.len())];
        let cut = rng.random_range(0..=pick.len());
        let consumed = &pick[..cut];
        let residuals: Vec<String> = suggestions
            .iter()
            .filter_map(|s| s.strip_prefix(consumed).map(str::to_string))
            .collect();
        let state: SuggestionSet = residuals.iter().map(String::as_str).collect();
        for exec in [Execution::Sequential, Execution::Parallel] {
            let mask = maskgen_with(&state, &vocab, &delims, exec).map_err(|e| e.to_string())?;
            for (id, tok) in vocab.tokens().iter().enumerate() {
                let want = oracle_admits(tok, &residuals);
                ensure!(
                    mask.get(id as u32) == want,
                    "instance {instance}: token {tok:?} residuals {residuals:?}: mask {} oracle {want}",
                    mask.get(id as u32)
                );
            }
            admitted += mask.count_ones();
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1} s (limit 30 s)");
    Ok(format!("{INSTANCES} instances bit-equal in both executions, {admitted} admissions, {secs:.2} s"))
}

const BUILDER_TABLE: &str = r#"{
  "base_logit": 0.0,
  "rules": [
    {"suffix": "builder.", "logits": {"with": 30.0, "new": 20.0}},
    {"suffix": "builder.with", "logits": {"Ip": 30.0, "Port": 25.0}},
    {"suffix": "withIp", "logits": {"(": 30.0}},
    {"suffix": "Ip(", "logits": {")": 30.0}},
    {"suffix": "Ip()", "logits": {";": 30.0}},
    {"suffix": ";", "logits": {"}": 30.0}}
  ]
}"#;

pub fn builder_replay() -> Check {
    let vocab = builder_vocab();
    let model = mock(vocab.clone(), BUILDER_TABLE);
    let c = case("A.java", "class A {\n  void f(Builder builder) {\n    builder.", "withIp();}");
    let provider = fixture_provider("A.java", c.dot_offset, &["withIp", "withPort", "newServerNode"]);
    let plan = PromptPlan::default();
    let delims = DelimiterSet::java();
    let decoder = Decoder::new(&plan, &model, &delims).with_monitor(&provider, MonitorConfig::default());
    let sampler = SamplerConfig {
        temperature: 0.2,
        seed: 1,
        ..SamplerConfig::default()
    };
    let record = generate(&c, &decoder, &sampler, 0);
    let tokens: Vec<&str> = record.events.iter().filter_map(|e| match e {
        MonitorEvent::Token { text, .. } => Some(text.as_str()),
        _ => None,
    }).collect();
    ensure!(tokens.starts_with(&["with", "Ip", "("]), "emitted {tokens:?}");

    let set = |items: &[&str]| MonitorState::Active(items.iter().copied().collect());
    let expected = vec![
        MonitorState::Wait,
        set(&["withIp", "withPort", "newServerNode"]),
        set(&["Ip", "Port"]),
        set(&[""]),
        MonitorState::Wait,
    ];
    let logged: Vec<MonitorState> = std::iter::once(MonitorState::Wait)
        .chain(record.events.iter().filter_map(|e| match e {
            MonitorEvent::State { state } => Some(state.clone()),
            _ => None,
        }))
        .collect();
    ensure!(logged == expected, "logged trajectory {logged:?}");
    let summary = replay(&record.events, &vocab, &delims, MonitorConfig::default()).map_err(|e| e.to_string())?;
    ensure!(summary.trajectory == expected, "replayed trajectory {:?}", summary.trajectory);
    let idents: Vec<&str> = summary.identifiers.iter().map(|i| i.identifier.as_str()).collect();
    ensure!(idents == ["withIp"], "emitted identifiers {idents:?}");
    ensure!(summary.identifiers[0].in_set, "withIp not in set");
    Ok("Active{withIp,withPort,newServerNode} -> Active{Ip,Port} -> Active{ε} -> Wait; identifier withIp".into())
}

pub fn hallucination_correction() -> Check {
    let f = builder_fixture();
    let delims = DelimiterSet::java();
    let sampler = SamplerConfig {
        seed: 7,
        ..SamplerConfig::default()
    };
    let mut off = Decoder::new(&f.plan, &f.model, &delims);
    off.record_timing = false;
    let on = off.with_monitor(&f.provider, MonitorConfig::default());

    let nim_at_1 = |records: &[mgd_core::decode::GenerationRecord]| {
        let nims: Vec<f64> = records.iter().map(|r| score_record(&f.case, r, None).nim as f64).collect();
        score_at_k(&nims, 1).unwrap()
    };
    let rec_off = run_trials(&f.case, &off, &sampler, &DEFAULT_SCHEDULE, Execution::Parallel);
    let rec_on = run_trials(&f.case, &on, &sampler, &DEFAULT_SCHEDULE, Execution::Parallel);
    ensure!(rec_off.len() == 6 && rec_on.len() == 6, "expected 6 trials");
    let (n_off, n_on) = (nim_at_1(&rec_off), nim_at_1(&rec_on));
    ensure!(n_off == 0.0, "monitor-off NIM@1 = {n_off}; texts {:?}", rec_off.iter().map(|r| &r.text).collect::<Vec<_>>());
    ensure!(n_on == 1.0, "monitor-on NIM@1 = {n_on}; texts {:?}", rec_on.iter().map(|r| &r.text).collect::<Vec<_>>());

    let mut idents = 0;
    for r in &rec_on {
        let s = replay(&r.events, &f.vocab, &delims, MonitorConfig::default()).map_err(|e| e.to_string())?;
        ensure!(!s.identifiers.is_empty(), "trial {} emitted no post-trigger identifier", r.trial_index);
        for i in &s.identifiers {
            ensure!(i.in_set, "trial {}: {} not in {:?}", r.trial_index, i.identifier, i.suggestions);
        }
        idents += s.identifiers.len();
    }
    let again = run_trials(&f.case, &on, &sampler, &DEFAULT_SCHEDULE, Execution::Sequential);
    ensure!(again == rec_on, "records differ between runs");
    Ok(format!(
        "NIM@1 off={n_off} on={n_on}; {idents}/{idents} post-trigger identifiers in-set; rerun identical"
    ))
}

fn enumerate_score(scores: &[f64], k: usize) -> f64 {
    let n = scores.len();
    let (mut total, mut count) = (0.0, 0u32);
    for subset in 0u32..(1 << n) {
        if subset.count_ones() as usize == k {
            let best = (0..n).filter(|i| subset & (1 << i) != 0).map(|i| scores[i]).fold(f64::MIN, f64::max);
            total += best;
            count += 1;
        }
    }
    total / count as f64
}

pub fn score_at_k_laws() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        for k in 1..=n {
            let got = score_at_k(&scores, k).map_err(|e| e.to_string())?;
            let want = enumerate_score(&scores, k);
            worst = worst.max((got - want).abs());
            ensure!((got - want).abs() <= 1e-12, "{scores:?} k={k}: {got} vs {want}");
        }
    }
    // Dyadic values keep the naive mean exact.
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..=1024) as f64 / 1024.0).collect();
        let mean = scores.iter().sum::<f64>() / n as f64;
        let max = scores.iter().copied().fold(f64::MIN, f64::max);
        ensure!(score_at_k(&scores, 1).unwrap() == mean, "score@1 != mean for {scores:?}");
        ensure!(score_at_k(&scores, n).unwrap() == max, "score@n != max for {scores:?}");
    }
    let mut binary_cases = 0;
    for n in 1..=8usize {
        for c in 0..=n {
            let scores: Vec<f64> = (0..n).map(|i| (i < c) as u8 as f64).collect();
            for k in 1..=n {
                let total = binomial(n, k).unwrap();
                let closed = (total - binomial(n - c, k).unwrap()) as f64 / total as f64;
                let got = score_at_k(&scores, k).unwrap();
                ensure!(got == closed, "n={n} c={c} k={k}: {got} vs 1 - C(n-c,k)/C(n,k) = {closed}");
                binary_cases += 1;
            }
        }
    }
    Ok(format!(
        "1000 real multisets within {worst:.1e}; {binary_cases} binary cases equal pass@k; score@1=mean, score@n=max"
    ))
}

pub fn sampler_distribution() -> Check {
    let logits = LogitVector(vec![2.0, 1.0, 0.5, 0.0, -1.0]);
    let cfg = SamplerConfig {
        top_p: 0.95,
        temperature: 1.0,
        seed: 0,
        ..SamplerConfig::default()
    };
    let exp: Vec<f64> = logits.0.iter().map(|l| l.exp()).collect();
    let z: f64 = exp.iter().sum();
    let p: Vec<f64> = exp.iter().map(|e| e / z).collect();
    // Already in descending order: keep the shortest prefix reaching 0.95.
    let mut cum = 0.0;
    let keep = p.iter().position(|&x| {
        cum += x;
        cum >= 0.95
    }).unwrap() + 1;
    let mass: f64 = p[..keep].iter().sum();
    let expected: Vec<f64> = (0..p.len()).map(|i| if i < keep { p[i] / mass } else { 0.0 }).collect();

    const DRAWS: usize = 100_000;
    let mut counts = [0usize; 5];
    let mut rng = ChaCha8Rng::seed_from_u64(12345);
    for _ in 0..DRAWS {
        counts[nucleus_sample(&logits, &cfg, &mut rng).map_err(|e| e.to_string())? as usize] += 1;
    }
    let mut worst_sigma: f64 = 0.0;
    for i in 0..5 {
        let mean = DRAWS as f64 * expected[i];
        let sigma = (DRAWS as f64 * expected[i] * (1.0 - expected[i])).sqrt();
        if expected[i] == 0.0 {
            ensure!(counts[i] == 0, "token {i} outside the nucleus drawn {} times", counts[i]);
            continue;
        }
        let z = (counts[i] as f64 - mean).abs() / sigma;
        worst_sigma = worst_sigma.max(z);
        ensure!(z <= 3.0, "token {i}: {} draws, expected {mean:.0} ± {sigma:.0}", counts[i]);
    }

    let cold = SamplerConfig {
        temperature: 1e-6,
        ..cfg
    };
    for v in 0..100 {
        let n = rng.random_range(2..=64);
        let vec: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let argmax = (0..n).fold(0, |b, i| if vec[i] > vec[b] { i } else { b });
        let got = nucleus_sample(&LogitVector(vec), &cold, &mut rng).map_err(|e| e.to_string())?;
        ensure!(got as usize == argmax, "vector {v}: sampled {got}, argmax {argmax}");
    }
    Ok(format!("nucleus keeps {keep}/5, counts {counts:?}, max deviation {worst_sigma:.2}σ; argmax on 100/100"))
}

pub fn budget_arithmetic() -> Check {
    let vocab = std::sync::Arc::new(char_vocab());
    let model = MockBackend::new(vocab.clone(), &Default::default(), 0.0, 2048).unwrap();
    let fim = vocab.fim().unwrap();
    let budget = 2048 - 512;
    let floor = |f: f64| (f * budget as f64 + 1e-9).floor() as usize;
    let (aux_q, fim_q, combined_q) = (floor(0.20), floor(0.50), floor(0.40));
    ensure!((aux_q, fim_q, combined_q) == (307, 768, 614), "quotas {aux_q} {fim_q} {combined_q}");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let letters = |rng: &mut ChaCha8Rng, n: usize| -> String {
        (0..n).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect()
    };
    let tok = |s: &str| model.tokenize(s).unwrap();
    for trial in 0..50 {
        let (lp, ls, la) = (rng.random_range(0..3000), rng.random_range(0..1600), rng.random_range(0..700));
        let (prefix, suffix, aux) = (letters(&mut rng, lp), letters(&mut rng, ls), letters(&mut rng, la));
        for strategy in [Prompting::Standard, Prompting::ClassExprTypes, Prompting::Fim, Prompting::FimClassExprTypes] {
            let plan = PromptPlan::with_strategy(strategy);
            let inputs = PromptInputs {
                prefix: &prefix,
                suffix: Some(&suffix),
                aux: Some(&aux),
            };
            let built = build_prompt(&plan, &inputs, &model).map_err(|e| e.to_string())?;
            ensure!(built.ids.len() <= budget, "trial {trial} {strategy:?}: {} tokens", built.ids.len());

            let aux_ids = tok(&format!("{aux}\n"));
            let aux_keep = if strategy.uses_aux() { aux_ids.len().min(aux_q) } else { 0 };
            let sent = if strategy.uses_suffix() { 3 } else { 0 };
            let suffix_q = match strategy {
                Prompting::Fim => fim_q,
                Prompting::FimClassExprTypes => combined_q,
                _ => 0,
            };
            let suffix_keep = ls.min(suffix_q);
            let prefix_keep = lp.min(budget - sent - aux_keep - suffix_keep);
            // Left truncation keeps tails, right truncation keeps heads.
            let aux_part = &aux_ids[aux_ids.len() - aux_keep..];
            let pre_part = tok(&prefix[lp - prefix_keep..]);
            let suf_part = tok(&suffix[..suffix_keep]);
            let mut want = Vec::new();
            if sent > 0 {
                want.push(fim.prefix);
            }
            want.extend_from_slice(aux_part);
            want.extend(pre_part);
            if sent > 0 {
                want.push(fim.suffix);
                want.extend(suf_part);
                want.push(fim.middle);
            }
            ensure!(
                built.ids == want,
                "trial {trial} {strategy:?} (prefix {lp}, suffix {ls}, aux {la}): kept aux {} prefix {} suffix {}, expected {aux_keep} {prefix_keep} {suffix_keep}",
                built.aux_tokens,
                built.prefix_tokens,
                built.suffix_tokens
            );
        }
    }
    Ok(format!("50 cases x 4 strategies within {budget}; quotas aux {aux_q}, FIM suffix {fim_q}, combined {aux_q}/{combined_q}"))
}

fn read_raw_frame(r: &mut impl BufRead) -> Result<Value, String> {
    let mut header = String::new();
    r.read_line(&mut header).map_err(|e| e.to_string())?;
    let len: usize = header
        .strip_prefix("Content-Length: ")
        .and_then(|h| h.strip_suffix("\r\n"))
        .and_then(|h| h.parse().ok())
        .ok_or_else(|| format!("bad header line {header:?}"))?;
    let mut blank = String::new();
    r.read_line(&mut blank).map_err(|e| e.to_string())?;
    if blank != "\r\n" {
        return Err(format!("header not followed by CRLF: {blank:?}"));
    }
    let mut body = vec![0; len];
    r.read_exact(&mut body).map_err(|e| e.to_string())?;
    serde_json::from_slice(&body).map_err(|e| format!("body of {len} bytes is not JSON: {e}"))
}

fn send(w: &mut impl Write, v: &Value) {
    let body = v.to_string();
    write!(w, "Content-Length: {}\r\n\r\n{body}", body.len()).unwrap();
    w.flush().unwrap();
}

/// Scripted server: checks each client message and answers completions.
fn stub_server(reader: std::io::PipeReader, mut writer: std::io::PipeWriter, source: String, line: u64, character: u64) -> Result<Vec<String>, String> {
    let mut r = BufReader::new(reader);
    let mut seen = Vec::new();
    let init = read_raw_frame(&mut r)?;
    ensure!(init["method"] == "initialize", "first message {init}");
    ensure!(init["jsonrpc"] == "2.0", "missing jsonrpc version");
    ensure!(init["params"]["rootUri"].as_str().is_some_and(|u| u.starts_with("file:///")), "rootUri {}", init["params"]["rootUri"]);
    ensure!(init["params"]["capabilities"].is_object(), "no capabilities");
    send(&mut writer, &json!({"jsonrpc": "2.0", "id": init["id"], "result": {"capabilities": {"completionProvider": {"triggerCharacters": ["."]}}}}));
    seen.push("initialize".to_string());
    let inited = read_raw_frame(&mut r)?;
    ensure!(inited["method"] == "initialized" && inited.get("id").is_none(), "expected initialized notification, got {inited}");
    seen.push("initialized".into());
    // Server-initiated request; the client must answer it.
    send(&mut writer, &json!({"jsonrpc": "2.0", "id": 900, "method": "workspace/configuration", "params": {"items": []}}));

    let mut opened = false;
    loop {
        let msg = read_raw_frame(&mut r)?;
        match (msg.get("method").and_then(Value::as_str), msg.get("id")) {
            (None, Some(id)) => {
                ensure!(id == 900 && msg["result"].is_null(), "unexpected reply {msg}");
                seen.push("reply".into());
            }
            (Some("textDocument/didOpen"), None) => {
                let doc = &msg["params"]["textDocument"];
                ensure!(doc["languageId"] == "java" && doc["version"] == 1, "didOpen {doc}");
                ensure!(doc["text"] == source.as_str(), "didOpen text differs");
                ensure!(doc["uri"].as_str().is_some_and(|u| u.ends_with("/src/Main.java")), "uri {}", doc["uri"]);
                opened = true;
                seen.push("didOpen".into());
            }
            (Some("textDocument/completion"), Some(id)) => {
                ensure!(opened, "completion before didOpen");
                let pos = &msg["params"]["position"];
                ensure!(pos["line"] == line && pos["character"] == character, "position {pos}, expected {line}:{character}");
                send(&mut writer, &json!({"jsonrpc": "2.0", "id": id, "result": {"isIncomplete": false, "items": [
                    {"label": "withIp(String ip) : Builder", "insertText": "withIp", "kind": 2},
                    {"label": "withPort(int port)", "kind": 2},
                    {"label": "ip", "kind": 5},
                    {"label": "Builder", "kind": 7},
                    {"label": "if", "kind": 14}
                ]}}));
                seen.push("completion".into());
            }
            (Some("shutdown"), Some(id)) => {
                send(&mut writer, &json!({"jsonrpc": "2.0", "id": id, "result": null}));
                seen.push("shutdown".into());
            }
            (Some("exit"), None) => {
                seen.push("exit".into());
                return Ok(seen);
            }
            _ => return Err(format!("unexpected message {msg}")),
        }
    }
}

pub fn wire_conformance() -> Check {
    let start = Instant::now();
    // Multi-byte text before the dot exercises UTF-16 columns.
    let source = "class Main {\n  void f() {\n    String s = \"é\"; builder.\n  }\n}\n".to_string();
    let dot = source.find("builder.").unwrap() + "builder".len();
    let line = 2u64;
    let character = source[..=dot].lines().last().unwrap().encode_utf16().count() as u64;
    let (client_read, server_write) = std::io::pipe().map_err(|e| e.to_string())?;
    let (server_read, client_write) = std::io::pipe().map_err(|e| e.to_string())?;
    let src = source.clone();
    let server = std::thread::spawn(move || stub_server(server_read, server_write, src, line, character));

    let root = Path::new("/tmp/stub root");
    let client = LspClient::connect(client_read, client_write, root, Duration::from_secs(5), Duration::from_secs(5))
        .map_err(|e| e.to_string())?;
    let q = SuggestionQuery::at_dot("src/Main.java", source.clone(), dot).map_err(|e| e.to_string())?;
    ensure!(
        matches!(client.query(&q), Err(mgd_core::suggest::SuggestError::DocumentNotOpen(_))),
        "query before open must fail"
    );
    client.open_document("src/Main.java", &source).map_err(|e| e.to_string())?;
    let names = client.query(&q).map_err(|e| e.to_string())?;
    let names: Vec<&str> = names.iter().collect();
    ensure!(names == ["ip", "withIp", "withPort"], "extracted {names:?}");
    client.shutdown().map_err(|e| e.to_string())?;
    let seen = server.join().map_err(|_| "stub server panicked".to_string())??;
    // The reply to the server's request is sent from the reader thread, so
    // its position is only bounded by shutdown.
    let reply_at = seen.iter().position(|m| m == "reply");
    let shutdown_at = seen.iter().position(|m| m == "shutdown");
    ensure!(reply_at.is_some() && reply_at < shutdown_at, "server request unanswered: {seen:?}");
    let ordered: Vec<&str> = seen.iter().map(String::as_str).filter(|m| *m != "reply").collect();
    ensure!(
        ordered == ["initialize", "initialized", "didOpen", "completion", "shutdown", "exit"],
        "message order {seen:?}"
    );
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.1} s");
    Ok(format!("initialize/didOpen/completion framed correctly at {line}:{character}; names {names:?}; {secs:.2} s"))
}

/// (ground truth, generation, NIM, ISM as (num, den), PM as (num, den)).
const METRIC_PAIRS: [(&str, &str, u8, (u32, u32), (u32, u32)); 20] = [
    ("withIp(ip);\n}", "withIp(ip);\n}", 1, (2, 2), (6, 6)),
    ("withIp(ip);\n}", "host(ip);\n}", 0, (0, 2), (0, 6)),
    ("a(b, c)", "a(b, x)", 1, (2, 3), (4, 6)),
    ("a ( b , c ) ; d = e", "a ( b , x ( ) ;", 1, (2, 5), (4, 10)),
    ("x.y();", "x.z();", 1, (1, 2), (2, 6)),
    ("build();", "build ( ) ;", 1, (1, 1), (4, 4)),
    ("getName().trim()", "getName().length()", 1, (1, 2), (4, 7)),
    ("size() > 0", "size() >= 0", 1, (1, 1), (3, 5)),
    ("value + 1", "value + 1.0", 1, (1, 1), (2, 3)),
    ("name.equals(\"a\")", "name.equals(\"b\")", 1, (2, 2), (4, 6)),
    ("x", "", 0, (0, 1), (0, 1)),
    ("foo(bar, baz, qux)", "foo(bar, baz)", 1, (3, 4), (5, 8)),
    ("a // note\n.b()", "a.b()", 1, (2, 2), (5, 5)),
    ("count++;", "count--;", 1, (1, 1), (1, 3)),
    ("withPort(port)", "withIp(port)", 0, (0, 2), (0, 4)),
    ("i < n; i++", "i <= n", 1, (2, 3), (1, 6)),
    ("list.get(0)", "list.get(0).x", 1, (2, 2), (6, 6)),
    ("ip;", "ip ;", 1, (1, 1), (2, 2)),
    ("var v = 1;", "var w = 1;", 1, (1, 2), (1, 5)),
    ("s = \"x.y\";", "s = \"x\";", 1, (1, 1), (2, 4)),
];

fn snippet() -> impl Strategy<Value = String> {
    let piece = proptest::sample::select(vec![
        "x", "withIp", "_a1", "$v", "if", "return", "this", "0", "42L", "0x1F", "3.5e2", "\"s\"", "\"a.b\"", "'c'",
        "(", ")", "{", "}", "[", "]", ";", ",", ".", "->", "::", "+=", ">>>=", "!", "@", " ", "\n", "\t",
        "// c\n", "/* c */", "é", "#",
    ]);
    proptest::collection::vec(piece, 0..24).prop_map(|v| v.concat())
}

pub fn metric_definitions() -> Check {
    for (i, &(gt, gen, nim, (in_, id), (pn, pd))) in METRIC_PAIRS.iter().enumerate() {
        let (got_n, got_i, got_p) = (metrics::nim(gt, gen), metrics::ism(gt, gen), metrics::pm(gt, gen));
        ensure!(got_n == nim, "pair {i} {gt:?}/{gen:?}: NIM {got_n}, expected {nim}");
        ensure!(got_i == in_ as f64 / id as f64, "pair {i} {gt:?}/{gen:?}: ISM {got_i}, expected {in_}/{id}");
        ensure!(got_p == pn as f64 / pd as f64, "pair {i} {gt:?}/{gen:?}: PM {got_p}, expected {pn}/{pd}");
    }
    let mut runner = TestRunner::new(PropConfig {
        cases: 512,
        ..PropConfig::default()
    });
    let strategy = snippet();
    for _ in 0..512 {
        let x = strategy.new_tree(&mut runner).map_err(|e| e.to_string())?.current();
        let lexed = !mgd_core::javalex::lex(&x).is_empty();
        ensure!(metrics::ism(&x, &x) == 1.0, "ism({x:?}, itself) != 1");
        ensure!(metrics::pm(&x, &x) == 1.0, "pm({x:?}, itself) != 1");
        ensure!(metrics::nim(&x, &x) == lexed as u8, "nim({x:?}, itself) != {}", lexed as u8);
    }
    Ok("20 hand pairs exact (incl. ISM 2/3, PM 0.4); self-identity on 512 fuzzed snippets".into())
}

pub fn neutrality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let words = ["a", "b", "foo", "bar", "x1", " ", "=", "+", "(", ")", ";", "\n", "1", "if", "}", "{"];
    let mut tokens: Vec<String> = words.iter().map(|s| s.to_string()).collect();
    tokens.push(".".into());
    let vocab = std::sync::Arc::new(Vocabulary::new(tokens).unwrap());
    let delims = DelimiterSet::java();
    let mut plan = PromptPlan::default();
    plan.generation_budget = 24;
    let mut triggers_seen = 0;
    for p in 0..100 {
        // Every rule leaves `.` at the base logit, far below the rest.
        let mut rules = Vec::new();
        for suffix in ["", ";", " ", "a", "foo", ")", "\n"] {
            let mut logits = serde_json::Map::new();
            for w in words {
                if rng.random_bool(0.7) {
                    logits.insert(w.to_string(), json!(rng.random_range(0.0..3.0)));
                }
            }
            rules.push(json!({"suffix": suffix, "logits": logits}));
        }
        let table = json!({"base_logit": -100.0, "rules": rules}).to_string();
        let model = mock(vocab.clone(), &table);
        let n_pieces = rng.random_range(1..12);
        let mut prompt: String = (0..n_pieces).map(|_| words[rng.random_range(0..words.len())]).collect();
        if rng.random_bool(0.5) {
            // Dots inside the prompt, never at its end.
            prompt = format!("a.b{prompt}");
        }
        prompt.push(';');
        let mut c = case("N.java", "x.", "}");
        c.prefix = prompt;
        let provider = fixture_provider("N.java", c.prefix.len().saturating_sub(1), &["never"]);
        let off = Decoder::new(&plan, &model, &delims);
        let on = off.with_monitor(&provider, MonitorConfig::default());
        let sampler = SamplerConfig {
            temperature: DEFAULT_SCHEDULE[p % 6],
            seed: p as u64,
            ..SamplerConfig::default()
        };
        let r_off = generate(&c, &off, &sampler, 0);
        let r_on = generate(&c, &on, &sampler, 0);
        triggers_seen += r_on.events.iter().filter(|e| matches!(e, MonitorEvent::Trigger { .. })).count();
        ensure!(r_on.token_ids == r_off.token_ids, "prompt {p} {:?}: streams differ", c.prefix);
        ensure!(r_on.text == r_off.text, "prompt {p}: texts differ");
    }
    ensure!(triggers_seen == 0, "{triggers_seen} triggers fired");
    Ok("100 trigger-free prompts: token streams byte-identical with monitor on and off".into())
}

const COMPLEXITY_TABLE: [(&str, usize, usize); 50] = [
    ("x", 1, 1), ("i", 1, 1), ("id", 2, 2), ("Ip", 1, 1), ("ip", 2, 2),
    ("get", 1, 3), ("Node", 1, 1), ("Port", 1, 1), ("with", 1, 1), ("port", 4, 4),
    ("host", 4, 4), ("Name", 1, 4), ("getName", 2, 1), ("setName", 2, 5), ("withIp", 2, 2),
    ("withPort", 2, 2), ("isMax", 2, 5), ("toString", 2, 6), ("ServerNode", 2, 2), ("getNodeId", 3, 6),
    ("setValue", 2, 2), ("maxCount", 4, 8), ("MaxValue", 2, 4), ("withServer", 2, 2), ("getServerNode", 3, 5),
    ("serverName", 7, 8), ("isEmpty", 6, 7), ("newServerNode", 5, 5), ("getIpPort", 3, 5), ("builder", 7, 6),
    ("setMaxCount", 3, 9), ("withPortCount", 3, 7), ("toStringValue", 3, 7), ("getNameString", 3, 5), ("SERVER_PORT", 11, 11),
    ("x1", 2, 2), ("a_b", 3, 3), ("$tmp", 4, 4), ("getId", 2, 5), ("withIpPort", 3, 3),
    ("getServerNodeCount", 4, 10), ("serverNodeBuilder", 14, 11), ("setServerNodeIpPort", 5, 5), ("qwertyuiopasdfghjklz", 20, 19), ("toValueString", 3, 7),
    ("setter", 4, 3), ("ing", 3, 1), ("Nodes", 2, 2), ("Value", 1, 1), ("ab", 2, 2),
];

fn toy_tokenizer(words: &[&str]) -> Vocabulary {
    let mut toks: Vec<String> = ('a'..='z').chain('A'..='Z').chain('0'..='9').map(String::from).collect();
    toks.extend(["_", "$"].map(String::from));
    toks.extend(words.iter().map(|w| w.to_string()));
    Vocabulary::new(toks).unwrap()
}

pub fn identifier_complexity_buckets() -> Check {
    let a = toy_tokenizer(&[
        "get", "set", "Name", "Id", "Server", "Node", "Port", "Ip", "with", "Count", "Value", "Max", "is", "to", "String",
    ]);
    let b = toy_tokenizer(&["getName", "Server", "Node", "with", "Ip", "Port", "set", "Value", "er", "ing"]);
    let toks: [&dyn SubwordTokenizer; 2] = [&a, &b];
    let mut cases = Vec::new();
    let mut hand_counts = [0usize; 4];
    for (i, &(name, ca, cb)) in COMPLEXITY_TABLE.iter().enumerate() {
        ensure!(a.count_subtokens(name) == ca, "{name}: tokenizer A gives {}, hand count {ca}", a.count_subtokens(name));
        ensure!(b.count_subtokens(name) == cb, "{name}: tokenizer B gives {}, hand count {cb}", b.count_subtokens(name));
        let c = identifier_complexity(name, &toks);
        let hand = (ca + cb) as f64 / 2.0;
        ensure!(c == hand, "{name}: complexity {c}, hand {hand}");
        let hand_bucket = match hand {
            h if (1.0..2.0).contains(&h) => Some(0),
            h if (2.0..3.0).contains(&h) => Some(1),
            h if (3.0..4.0).contains(&h) => Some(2),
            h if (4.0..18.0).contains(&h) => Some(3),
            _ => None,
        };
        let got = bucket_of(c).map(|b| metrics::COMPLEXITY_BUCKETS.iter().position(|x| *x == b).unwrap());
        ensure!(got == hand_bucket, "{name}: bucket {got:?}, hand {hand_bucket:?}");
        if let Some(b) = hand_bucket {
            hand_counts[b] += 1;
        }
        cases.push(TrialScores {
            case_id: format!("c{i}"),
            cr: vec![None],
            nim: vec![(i % 2) as u8],
            ism: vec![0.0],
            pm: vec![0.0],
            complexity: Some(c),
        });
    }
    let report = nim_by_complexity(&cases, &[1]).map_err(|e| e.to_string())?;
    let labels: Vec<&str> = report.iter().map(|r| r.bucket.as_str()).collect();
    ensure!(labels == ["[1, 2)", "[2, 3)", "[3, 4)", "[4, 18)"], "buckets {labels:?}");
    let counts: Vec<usize> = report.iter().map(|r| r.cases).collect();
    ensure!(counts == hand_counts, "bucket sizes {counts:?}, hand {hand_counts:?}");
    let empty = nim_by_complexity(&[], &[1]).map_err(|e| e.to_string())?;
    ensure!(empty.len() == 4, "empty report has {} buckets", empty.len());
    Ok(format!("50 identifiers match hand counts; bucket sizes {counts:?}, all four buckets reported"))
}

fn have(tool: &str) -> bool {
    std::process::Command::new("sh")
        .arg("-c")
        .arg(format!("command -v {tool}"))
        .stdout(std::process::Stdio::null())
        .status()
        .is_ok_and(|s| s.success())
}

/// `Ok(None)` when no Java compiler is installed.
pub fn cr_plumbing() -> Result<Option<String>, String> {
    if !have("javac") {
        return Ok(None);
    }
    let f = builder_fixture();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    for name in ["ServerNode.java", "ServerNodeFactory.java"] {
        std::fs::copy(f.dir.join("repo").join(name), tmp.path().join(name)).map_err(|e| e.to_string())?;
    }
    let build = metrics::BuildCommand {
        command: "out=$(mktemp -d) && javac -d \"$out\" *.java; status=$?; rm -rf \"$out\"; exit $status".into(),
        timeout_s: 300,
    };
    let c = &f.case;
    let good = metrics::cr(tmp.path(), &c.file, &c.prefix, c.ground_truth_body(), &c.suffix, Some(&build));
    let bad = metrics::cr(tmp.path(), &c.file, &c.prefix, "@@@", &c.suffix, Some(&build));
    ensure!(good.value == Some(1), "ground truth: {good:?}");
    ensure!(bad.value == Some(0), "@@@: {bad:?}");
    let restored = std::fs::read_to_string(tmp.path().join(&c.file)).map_err(|e| e.to_string())?;
    ensure!(restored == format!("{}{}{}", c.prefix, c.ground_truth, c.suffix), "file not restored");
    Ok(Some("javac: ground truth CR=1, \"@@@\" CR=0, file restored".into()))
}
