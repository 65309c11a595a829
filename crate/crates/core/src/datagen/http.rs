//! Providers backed by an OpenAI-compatible HTTP API.
//!
//! Chat requests go to `POST {base_url}/chat/completions` with body
//!
//! ```json
//! {"model": "...", "temperature": 0.2,
//!  "messages": [{"role": "system", "content": "..."}, {"role": "user", "content": "..."}]}
//! ```
//!
//! and the reply text is read from `choices[0].message.content`. Embeddings go to
//! `POST {base_url}/embeddings` with `{"model": "...", "input": ["...", ...]}` and are
//! read from `data[i].embedding`, ordered by `data[i].index`.
//!
//! Environment: `LLM_BASE_URL`, `LLM_MODEL`, `LLM_API_KEY` (optional),
//! `LLM_EMBED_MODEL` (defaults to `LLM_MODEL`), `LLM_EMBED_DIM` (default 1024).

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::embed::EmbeddingProvider;
use super::provider::{parse_candidates, parse_score, prompts, Candidate, ClusterRequest, GenerationProvider};
use crate::data::ChunkedDocument;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    pub embed_model: String,
    pub embed_dim: usize,
    pub api_key: Option<String>,
    pub temperature: f64,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        let model = model.into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            embed_model: model.clone(),
            model,
            embed_dim: 1024,
            api_key: None,
            temperature: 0.2,
            timeout: Duration::from_secs(120),
        }
    }

    pub fn from_env() -> Result<Self> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let need = |k: &str| var(k).ok_or_else(|| Error::Config(format!("environment variable {k} is not set")));
        let mut c = Self::new(need("LLM_BASE_URL")?, need("LLM_MODEL")?);
        c.api_key = var("LLM_API_KEY");
        if let Some(m) = var("LLM_EMBED_MODEL") {
            c.embed_model = m;
        }
        if let Some(d) = var("LLM_EMBED_DIM") {
            c.embed_dim = d.parse().map_err(|_| Error::Config(format!("bad LLM_EMBED_DIM {d:?}")))?;
        }
        Ok(c)
    }
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<Message<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    content: String,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedItem>,
}

#[derive(Deserialize)]
struct EmbedItem {
    index: usize,
    embedding: Vec<f64>,
}

const SYSTEM: &str = "You are a careful assistant that builds and grades reading-comprehension data.";

pub struct HttpProvider {
    config: HttpConfig,
    agent: ureq::Agent,
}

fn provider_err(e: impl std::fmt::Display) -> Error {
    Error::Provider(e.to_string())
}

fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut s = template.to_string();
    for (k, v) in pairs {
        s = s.replace(&format!("{{{k}}}"), v);
    }
    s
}

fn evidence_list(c: &Candidate) -> String {
    c.evidence.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(", ")
}

impl HttpProvider {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(config.timeout)).build().into();
        Self { config, agent }
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, path: &str, body: &B) -> Result<R> {
        let url = format!("{}/{path}", self.config.base_url);
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        req.send_json(body).map_err(provider_err)?.body_mut().read_json().map_err(provider_err)
    }

    /// One chat completion; returns the reply text.
    pub fn chat(&self, prompt: &str) -> Result<String> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: vec![Message { role: "system", content: SYSTEM }, Message { role: "user", content: prompt }],
            temperature: self.config.temperature,
        };
        let r: ChatResponse = self.post("chat/completions", &body)?;
        r.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::Provider("reply without choices".into()))
    }
}

impl EmbeddingProvider for HttpProvider {
    fn dim(&self) -> usize {
        self.config.embed_dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let r: EmbedResponse = self.post("embeddings", &EmbedRequest { model: &self.config.embed_model, input: texts })?;
        let mut out = vec![Vec::new(); texts.len()];
        for item in r.data {
            if item.index >= texts.len() || item.embedding.len() != self.config.embed_dim {
                return Err(Error::Provider(format!(
                    "embedding {} has dimension {}, expected {}",
                    item.index,
                    item.embedding.len(),
                    self.config.embed_dim
                )));
            }
            out[item.index] = item.embedding;
        }
        if out.iter().any(Vec::is_empty) {
            return Err(Error::Provider("missing embeddings in reply".into()));
        }
        Ok(out)
    }
}

impl GenerationProvider for HttpProvider {
    fn generate_candidates(&self, cluster: &ClusterRequest<'_>, k: usize) -> Result<Vec<Candidate>> {
        let prompt = fill(prompts::GENERATE, &[("cluster", &cluster.render()), ("k", &k.to_string())]);
        parse_candidates(&self.chat(&prompt)?)
    }

    fn judge_quality(&self, cluster: &ClusterRequest<'_>, _index: usize, c: &Candidate) -> Result<u8> {
        let prompt = fill(
            prompts::JUDGE_QUALITY,
            &[
                ("cluster", &cluster.render()),
                ("question", &c.question),
                ("answer", &c.answer),
                ("evidence", &evidence_list(c)),
            ],
        );
        parse_score(&self.chat(&prompt)?)
    }

    fn judge_easiness(&self, doc: &ChunkedDocument, c: &Candidate) -> Result<u8> {
        let prompt = fill(
            prompts::JUDGE_EASINESS,
            &[("context", &doc.full_text()), ("question", &c.question), ("answer", &c.answer)],
        );
        parse_score(&self.chat(&prompt)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves `replies` in order, one per connection, and forwards each request body.
    fn serve(replies: Vec<String>) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for reply in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
                let mut len = 0;
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    if h.trim().is_empty() {
                        break;
                    }
                    if let Some(v) = h.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                tx.send((path, String::from_utf8(body).unwrap())).unwrap();
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    reply.len(),
                    reply
                )
                .unwrap();
            }
        });
        (url, rx)
    }

    fn chat_reply(text: &str) -> String {
        serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
    }

    #[test]
    fn chat_round_trip() {
        let gen_reply = chat_reply("[{\"question\":\"Q?\",\"answer\":\"A\",\"evidence\":[1,2]}]");
        let (url, rx) = serve(vec![gen_reply, chat_reply("I would say 9."), chat_reply("3")]);
        let mut config = HttpConfig::new(url, "m");
        config.api_key = Some("secret".into());
        let p = HttpProvider::new(config);
        let req = ClusterRequest { doc_id: "d", cluster_index: 0, chunks: vec!["one", "two"] };
        let c = p.generate_candidates(&req, 1).unwrap();
        assert_eq!(c[0].question, "Q?");
        let (path, body) = rx.recv().unwrap();
        assert_eq!(path, "/chat/completions");
        let v: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["model"], "m");
        assert_eq!(v["messages"][1]["role"], "user");
        assert!(v["messages"][1]["content"].as_str().unwrap().contains("<CHUNK_2>two</CHUNK_2>"));

        assert_eq!(p.judge_quality(&req, 0, &c[0]).unwrap(), 9);
        let doc = ChunkedDocument::new("d", vec!["one".into(), "two".into()]).unwrap();
        assert_eq!(p.judge_easiness(&doc, &c[0]).unwrap(), 3);
    }

    #[test]
    fn embeddings_are_reordered_and_checked() {
        let reply = serde_json::json!({"data": [
            {"index": 1, "embedding": [0.0, 1.0]},
            {"index": 0, "embedding": [1.0, 0.0]}
        ]})
        .to_string();
        let short = serde_json::json!({"data": [{"index": 0, "embedding": [1.0]}]}).to_string();
        let (url, rx) = serve(vec![reply, short]);
        let mut config = HttpConfig::new(url, "m");
        config.embed_dim = 2;
        let p = HttpProvider::new(config);
        let v = p.embed(&["a".into(), "b".into()]).unwrap();
        assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(rx.recv().unwrap().0, "/embeddings");
        assert!(p.embed(&["a".into()]).is_err());
    }

    #[test]
    fn unreachable_server_is_a_provider_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        drop(listener);
        let p = HttpProvider::new(HttpConfig::new(url, "m"));
        assert!(matches!(p.chat("hi"), Err(Error::Provider(_))));
    }
}
