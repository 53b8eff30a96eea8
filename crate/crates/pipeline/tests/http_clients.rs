//! LLM and text-to-image clients against a scripted local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use image::RgbImage;
use vizproto_pipeline::config::{LlmSettings, T2iSettings};
use vizproto_pipeline::dataset::ClassEntry;
use vizproto_pipeline::imagegen::{GenError, GenerateRequest, HttpImageGenerator, ImageGenerator};
use vizproto_pipeline::promptgen::{
    request_prompts, ChatProvider, HttpChatProvider, LlmError, PromptRequest, ResponseFormat,
};

#[derive(Debug, Clone)]
struct Recorded {
    authorization: Option<String>,
    body: serde_json::Value,
}

struct Reply {
    status: u16,
    content_type: &'static str,
    body: Vec<u8>,
}

fn reply(status: u16, content_type: &'static str, body: impl Into<Vec<u8>>) -> Reply {
    Reply {
        status,
        content_type,
        body: body.into(),
    }
}

/// Serves `replies` in order, one per connection, and records each request.
fn serve(replies: Vec<Reply>) -> (String, Arc<Mutex<Vec<Recorded>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for reply in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((name, value)) = line.split_once(':') {
                    match name.to_ascii_lowercase().as_str() {
                        "content-length" => length = value.trim().parse().unwrap(),
                        "authorization" => authorization = Some(value.trim().to_owned()),
                        _ => {}
                    }
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Recorded {
                authorization,
                body: serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {} X\r\ncontent-type: {}\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
                reply.status,
                reply.content_type,
                reply.body.len()
            )
            .unwrap();
            stream.write_all(&reply.body).unwrap();
        }
    });
    (url, seen)
}

fn completion(content: &str) -> Reply {
    let body = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]});
    reply(200, "application/json", body.to_string())
}

fn llm(url: String, retries: u32) -> HttpChatProvider {
    HttpChatProvider::from_settings(&LlmSettings {
        url: Some(url),
        api_key: Some("sk-test".into()),
        max_retries: retries,
        backoff_ms: 1,
        timeout_secs: 5,
        ..LlmSettings::default()
    })
    .unwrap()
}

#[test]
fn chat_provider_sends_openai_shape_and_parses_prompts() {
    let lines: Vec<String> = (1..=10).map(|i| format!("{i}. a boxer dog, view {i}")).collect();
    let (url, seen) = serve(vec![completion(&lines.join("\n"))]);
    let provider = llm(url, 0);
    let set = request_prompts(
        &provider,
        &PromptRequest::new("PET", "Boxer", 10),
        &ClassEntry::from_dir_name("Boxer"),
        ResponseFormat::Auto,
    )
    .unwrap();
    assert_eq!(set.prompts.len(), 10);
    assert_eq!(set.prompts[9].text, "a boxer dog, view 10");
    assert_eq!(set.provider_id, "http:grok-3");

    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer sk-test"));
    let body = &seen[0].body;
    assert_eq!(body["model"], "grok-3");
    assert_eq!(body["messages"][0]["role"], "system");
    assert!(body["messages"][0]["content"].as_str().unwrap().contains("Boxer"));
    assert_eq!(body["messages"][1]["role"], "user");
    assert!(body.get("temperature").is_none(), "sampling left at the provider default");
}

#[test]
fn chat_provider_retries_transient_failures() {
    let (url, seen) = serve(vec![
        reply(503, "text/plain", "busy"),
        reply(429, "text/plain", "slow down"),
        completion("1. ok"),
    ]);
    let provider = llm(url, 3);
    let chat = PromptRequest::new("D", "c", 1).to_chat("").unwrap();
    assert_eq!(provider.complete(&chat).unwrap(), "1. ok");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn chat_provider_does_not_retry_auth_failures() {
    let (url, seen) = serve(vec![reply(401, "text/plain", "no"), completion("1. never")]);
    let provider = llm(url, 3);
    let chat = PromptRequest::new("D", "c", 1).to_chat("").unwrap();
    assert!(matches!(provider.complete(&chat), Err(LlmError::Auth(401))));
    thread::sleep(Duration::from_millis(20));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn chat_provider_reports_malformed_bodies() {
    let (url, _) = serve(vec![reply(200, "application/json", "{\"nope\":1}")]);
    let chat = PromptRequest::new("D", "c", 1).to_chat("").unwrap();
    assert!(matches!(llm(url, 0).complete(&chat), Err(LlmError::Malformed(_))));
}

#[test]
fn unconfigured_endpoints() {
    assert!(matches!(
        HttpChatProvider::from_settings(&LlmSettings::default()),
        Err(LlmError::NotConfigured)
    ));
    assert!(matches!(
        HttpImageGenerator::from_settings(&T2iSettings::default()),
        Err(GenError::NotConfigured)
    ));
}

fn png(w: u32, h: u32) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    RgbImage::new(w, h).write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

fn t2i(url: String, retries: u32) -> HttpImageGenerator {
    HttpImageGenerator::from_settings(&T2iSettings {
        url: Some(url),
        api_key: Some("t2i-key".into()),
        retries,
        timeout_secs: 5,
        ..T2iSettings::default()
    })
    .unwrap()
    .with_backoff(Duration::from_millis(1))
}

#[test]
fn image_generator_posts_parameters_and_returns_png() {
    let (url, seen) = serve(vec![reply(200, "image/png", png(6, 4))]);
    let request = GenerateRequest {
        prompt: "a boxer dog".into(),
        seed: u64::MAX - 3,
        guidance_scale: 7.5,
        num_inference_steps: 30,
        width: 512,
        height: 512,
    };
    let bytes = t2i(url, 0).generate(&request).unwrap();
    assert_eq!(image::load_from_memory(&bytes).unwrap().width(), 6);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer t2i-key"));
    let body: GenerateRequest = serde_json::from_value(seen[0].body.clone()).unwrap();
    assert_eq!(body, request);
}

#[test]
fn image_generator_retries_then_gives_up() {
    let (url, seen) = serve(vec![
        reply(500, "text/plain", "oom"),
        reply(500, "text/plain", "oom"),
        reply(500, "text/plain", "oom"),
    ]);
    let request = GenerateRequest {
        prompt: "x".into(),
        seed: 1,
        guidance_scale: 7.5,
        num_inference_steps: 30,
        width: 8,
        height: 8,
    };
    match t2i(url, 2).generate(&request) {
        Err(GenError::Status { status: 500, body }) => assert_eq!(body, "oom"),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 3);
}
