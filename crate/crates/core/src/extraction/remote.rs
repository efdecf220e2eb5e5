//! Chat-completion client for model-based extraction.

use parking_lot::{Condvar, Mutex};
use serde_json::json;

use super::{parse_extractor_output, ConversationTurn, ExtractError, Extractor, ExtractorConfig, Role};
use crate::model::CandidateFact;

/// System prompt; `{max_facts}` is filled in per request.
pub const EXTRACTION_PROMPT: &str = include_str!("../../assets/extraction_prompt.txt");

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    used: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock();
        while *used >= self.limit {
            self.freed.wait(&mut used);
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock() -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug)]
pub struct RemoteExtractor {
    agent: ureq::Agent,
    cfg: ExtractorConfig,
    token: Option<String>,
    prompt: String,
    in_flight: InFlight,
}

impl RemoteExtractor {
    /// `token` is sent as a bearer credential when present.
    pub fn new(cfg: ExtractorConfig, token: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout()))
            .http_status_as_error(true)
            .build()
            .into();
        let prompt = EXTRACTION_PROMPT.replace("{max_facts}", &cfg.max_facts.to_string());
        let in_flight = InFlight {
            used: Mutex::new(0),
            freed: Condvar::new(),
            limit: cfg.max_in_flight.max(1),
        };
        Self {
            agent,
            cfg,
            token,
            prompt,
            in_flight,
        }
    }

    /// Reads the token from the environment variable named in the config.
    pub fn from_config(cfg: ExtractorConfig) -> Self {
        let token = cfg.token_env.as_deref().and_then(|name| std::env::var(name).ok());
        Self::new(cfg, token)
    }

    pub fn request_body(&self, turns: &[ConversationTurn]) -> serde_json::Value {
        let conversation: Vec<String> = turns
            .iter()
            .map(|t| {
                let who = match t.role {
                    Role::User => "user",
                    Role::Agent => "agent",
                };
                format!("{who}: {}", t.text)
            })
            .collect();
        json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": [
                {"role": "system", "content": self.prompt},
                {"role": "user", "content": conversation.join("\n")},
            ],
        })
    }
}

impl Extractor for RemoteExtractor {
    fn extract_raw(&self, turns: &[ConversationTurn]) -> Result<Vec<CandidateFact>, ExtractError> {
        let body = self.request_body(turns);
        let reply: serde_json::Value = {
            let _permit = self.in_flight.acquire();
            let mut request = self.agent.post(&self.cfg.endpoint);
            if let Some(token) = &self.token {
                request = request.header("Authorization", &format!("Bearer {token}"));
            }
            request
                .send_json(&body)
                .map_err(|e| ExtractError::Transport(e.to_string()))?
                .body_mut()
                .read_json()
                .map_err(|e| ExtractError::Output(e.to_string()))?
        };
        let content = reply["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| ExtractError::Output("reply has no choices[0].message.content".into()))?;
        let source: String = turns
            .iter()
            .filter(|t| t.role == Role::User)
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let candidates = parse_extractor_output(content, self.cfg.max_facts)
            .map_err(|e| ExtractError::Output(e.to_string()))?;
        Ok(candidates.into_iter().map(|c| c.with_source(source.clone())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves one canned HTTP response and hands back the request it saw.
    fn serve_once(status: &str, body: &str) -> (String, mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let response = format!(
            "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            body.len()
        );
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut head = String::new();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            head.push_str(&String::from_utf8(body).unwrap());
            reader.get_mut().write_all(response.as_bytes()).unwrap();
            tx.send(head).unwrap();
        });
        (url, rx)
    }

    fn config(endpoint: String) -> ExtractorConfig {
        ExtractorConfig {
            mode: super::super::ExtractorMode::Remote,
            endpoint,
            model: "test-model".into(),
            timeout_ms: 2_000,
            ..ExtractorConfig::default()
        }
    }

    #[test]
    fn sends_contract_and_parses_reply() {
        let content = r#"[{"subject":"user","relation":"lives_in","value":"Toronto","confidence":0.95,"scope":"user"}]"#;
        let reply = json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string();
        let (url, seen) = serve_once("200 OK", &reply);
        let ex = RemoteExtractor::new(config(url), Some("sekrit".into()));
        let out = ex.extract_raw(&[ConversationTurn::user("I just moved to Toronto")]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].source_text, "I just moved to Toronto");
        let request = seen.recv().unwrap();
        assert!(request.starts_with("POST /v1/chat/completions"));
        assert!(request.to_ascii_lowercase().contains("authorization: bearer sekrit"));
        let body: serde_json::Value = serde_json::from_str(&request[request.find("\r\n\r\n").unwrap() + 4..]).unwrap();
        assert_eq!(body["temperature"], 0.1);
        assert_eq!(body["model"], "test-model");
        assert!(body["messages"][0]["content"].as_str().unwrap().contains("at most 10 facts"));
        assert_eq!(body["messages"][1]["content"], "user: I just moved to Toronto");
    }

    #[test]
    fn server_error_and_bad_content_fail() {
        let (url, _seen) = serve_once("500 Internal Server Error", "{}");
        let ex = RemoteExtractor::new(config(url), None);
        assert!(matches!(ex.extract_raw(&[ConversationTurn::user("x")]), Err(ExtractError::Transport(_))));

        let reply = json!({"choices": [{"message": {"content": "I cannot help with that."}}]}).to_string();
        let (url, _seen) = serve_once("200 OK", &reply);
        let ex = RemoteExtractor::new(config(url), None);
        assert!(matches!(ex.extract_raw(&[ConversationTurn::user("x")]), Err(ExtractError::Output(_))));
    }

    #[test]
    fn unreachable_endpoint_degrades_to_empty() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let cfg = config(format!("http://127.0.0.1:{port}/v1/chat/completions"));
        let ex = RemoteExtractor::new(cfg.clone(), None);
        let out = super::super::extract(&ex, &[ConversationTurn::user("I live in Paris")], &cfg, None, None);
        assert!(out.is_empty());
    }
}
