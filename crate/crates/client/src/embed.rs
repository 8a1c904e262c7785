use clinex_core::embedding::{normalize, EmbedError, Embedder};
use serde_json::{json, Value};

use crate::client::{agent, join_url, post_json, with_retries};

/// Embeddings from an OpenAI-compatible `/embeddings` endpoint, batched and L2-normalised.
pub struct RemoteEmbedder {
    endpoint: String,
    model: String,
    agent: ureq::Agent,
    timeout_secs: f64,
    batch_size: usize,
    max_retries: u32,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteEmbedder {
            endpoint: endpoint.into(),
            model: model.into(),
            agent: agent(60.0),
            timeout_secs: 60.0,
            batch_size: 64,
            max_retries: 3,
        }
    }

    pub fn with_batch_size(mut self, n: usize) -> Self {
        self.batch_size = n.max(1);
        self
    }

    fn batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let url = join_url(&self.endpoint, "embeddings");
        let body = json!({"model": self.model, "input": texts});
        let (value, _) = with_retries(self.max_retries, 200, || post_json(&self.agent, &url, &body, self.timeout_secs))
            .map_err(|e| EmbedError::Unavailable(e.to_string()))?;
        let data = value
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::Unavailable("response lacks `data`".into()))?;
        let mut out: Vec<(u64, Vec<f64>)> = data
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let idx = item.get("index").and_then(Value::as_u64).unwrap_or(i as u64);
                let vec = item
                    .get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| EmbedError::Unavailable("item lacks `embedding`".into()))?
                    .iter()
                    .map(|x| x.as_f64().ok_or_else(|| EmbedError::Unavailable("non-numeric embedding".into())))
                    .collect::<Result<Vec<f64>, _>>()?;
                Ok((idx, vec))
            })
            .collect::<Result<_, EmbedError>>()?;
        if out.len() != texts.len() {
            return Err(EmbedError::Unavailable(format!("asked for {} vectors, got {}", texts.len(), out.len())));
        }
        out.sort_by_key(|(i, _)| *i);
        Ok(out
            .into_iter()
            .map(|(_, mut v)| {
                normalize(&mut v);
                v
            })
            .collect())
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText);
        }
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            out.extend(self.batch(chunk)?);
        }
        Ok(out)
    }
}
