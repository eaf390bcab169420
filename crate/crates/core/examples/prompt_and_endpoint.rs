//! Prompt construction and a chat-completions call against a local stub.
//!
//! cargo run --example prompt_and_endpoint

use groundcheck::corpus::{make_blank_image, BenchmarkExample, EvaluationItem, ImageRef};
use groundcheck::inference::{build_prompt, format_prompt_hash, query_model, Condition, DecodeParams, EndpointConfig, PromptTemplate};

fn stub_server() -> String {
    let server = tiny_http::Server::http("127.0.0.1:0").expect("bind");
    let port = server.server_addr().to_ip().expect("ip").port();
    std::thread::spawn(move || {
        for (i, mut request) in server.incoming_requests().enumerate() {
            let mut body = String::new();
            let _ = std::io::Read::read_to_string(request.as_reader(), &mut body);
            // The first call is rate limited, so the client retries.
            let response = if i == 0 {
                tiny_http::Response::from_string("slow down").with_status_code(429)
            } else {
                let reply = serde_json::json!({
                    "choices": [{"message": {"role": "assistant",
                        "content": "<think>The liver shows a hypodense lesion.</think><answer>B</answer>"}}]
                });
                tiny_http::Response::from_string(reply.to_string())
            };
            let _ = request.respond(response);
        }
    });
    format!("http://127.0.0.1:{port}/v1")
}

fn main() -> anyhow::Result<()> {
    let example = BenchmarkExample {
        example_id: "q1".into(),
        question: "Which organ contains the lesion?".into(),
        image: ImageRef::inline_base64(base64_png()),
        gold_answer: "Liver".into(),
        answer_options: Some(vec!["Spleen".into(), "Liver".into(), "Kidney".into()]),
        modality: Some("ct".into()),
        benchmark_id: "demo".into(),
    };
    let item = EvaluationItem {
        real_image: example.image.clone(),
        blank_image: make_blank_image(),
        shuffle_image: ImageRef::file("images/q2.png"),
        shuffle_source_id: "q2".into(),
        sample_seed: 0,
        base: example,
    };
    let template = PromptTemplate::default();
    for condition in Condition::ALL {
        let prompt = build_prompt(&item, condition, &template, DecodeParams::default())?;
        println!("{condition:<8} prompt hash {}", format_prompt_hash(prompt.prompt_hash()));
    }
    let prompt = build_prompt(&item, Condition::Real, &template, DecodeParams::default())?;
    println!("\n--- user turn ---\n{}\n", prompt.user_text);

    let mut cfg = EndpointConfig::new(stub_server(), "demo-vlm");
    cfg.backoff_ms = 10;
    let completion = query_model(&cfg, &prompt)?;
    println!("after {} attempts: {}", completion.attempts, completion.text);
    Ok(())
}

fn base64_png() -> String {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.encode(groundcheck::corpus::blank_png_bytes())
}
