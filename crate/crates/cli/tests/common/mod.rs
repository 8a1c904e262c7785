#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use clinex::Corpus;
use clinex_client::{MockServer, Script};
use clinex_core::config::{load_task_config, ModelRegistry};
use clinex_core::{Embedder, HashedNgramEmbedder, ModelSpec, TaskSpec};

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

pub fn task(name: &str) -> TaskSpec {
    load_task_config(fixture(&format!("{name}/task.yaml"))).unwrap()
}

pub fn corpus(name: &str) -> Corpus {
    Corpus::load(fixture(&format!("{name}/corpus"))).unwrap()
}

pub fn mock(script: &str) -> MockServer {
    MockServer::start(Script::load(fixture(script)).unwrap(), 0).unwrap()
}

/// Registry models pointed at `url`, in registry order; all of them when `ids` is empty.
pub fn models(url: &str, ids: &[&str]) -> Vec<ModelSpec> {
    let reg = ModelRegistry::load(fixture("models.yaml")).unwrap();
    reg.models
        .into_iter()
        .filter(|m| ids.is_empty() || ids.contains(&m.id.as_str()))
        .map(|mut m| {
            m.endpoint = url.to_string();
            m.limits.backoff_ms = 1;
            m
        })
        .collect()
}

pub fn embedder() -> Arc<dyn Embedder> {
    Arc::new(HashedNgramEmbedder::default())
}
