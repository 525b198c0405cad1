//! Workload files: a JSON array of inference requests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use crate::graph::{parse_graph, validate_graph, Bindings, ModelGraph};
use crate::models::synthetic_from_spec;
use crate::scheduler::{InferenceRequest, RequestKind};
use crate::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    #[default]
    Static,
    Generative,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadEntry {
    pub request_id: String,
    /// Graph JSON path (relative to the workload file), a registered model name, or
    /// `synthetic:<kind>:k=v,...`.
    pub model_file: String,
    #[serde(default = "one")]
    pub batch: u64,
    #[serde(default)]
    pub arrival_cycle: u64,
    #[serde(default)]
    pub kind: EntryKind,
    pub prompt_len: Option<u64>,
    pub gen_tokens: Option<u64>,
    pub tenant: Option<String>,
    #[serde(default)]
    pub bindings: Bindings,
}

fn one() -> u64 {
    1
}

/// Finds and caches model graphs by the names workloads use.
#[derive(Debug, Default)]
pub struct ModelResolver {
    base_dir: PathBuf,
    registered: BTreeMap<String, PathBuf>,
    cache: BTreeMap<String, Arc<ModelGraph>>,
}

impl ModelResolver {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            base_dir: base_dir.into(),
            ..Default::default()
        }
    }

    /// Make a model file resolvable by its path, file name and file stem.
    pub fn register(&mut self, path: &Path) {
        let p = path.to_path_buf();
        self.registered.insert(path.display().to_string(), p.clone());
        if let Some(name) = path.file_name() {
            self.registered.insert(name.to_string_lossy().into_owned(), p.clone());
        }
        if let Some(stem) = path.file_stem() {
            self.registered.insert(stem.to_string_lossy().into_owned(), p);
        }
    }

    pub fn resolve(&mut self, model_file: &str) -> Result<Arc<ModelGraph>, SimError> {
        if let Some(g) = self.cache.get(model_file) {
            return Ok(g.clone());
        }
        let graph = if let Some(spec) = model_file.strip_prefix("synthetic:") {
            synthetic_from_spec(spec)?
        } else {
            let path = self.registered.get(model_file).cloned().unwrap_or_else(|| self.base_dir.join(model_file));
            let text = std::fs::read_to_string(&path).map_err(|e| SimError::Workload(format!("cannot read model {}: {e}", path.display())))?;
            parse_graph(&text)?
        };
        let report = validate_graph(&graph);
        if !report.is_empty() {
            let msgs: Vec<String> = report.violations.iter().map(ToString::to_string).collect();
            return Err(SimError::Workload(format!("model `{model_file}` is invalid: {}", msgs.join("; "))));
        }
        let g = Arc::new(graph);
        self.cache.insert(model_file.to_string(), g.clone());
        Ok(g)
    }
}

impl WorkloadEntry {
    pub fn into_request(self, model: Arc<ModelGraph>) -> Result<InferenceRequest, SimError> {
        let kind = match self.kind {
            EntryKind::Static => {
                if self.prompt_len.is_some() || self.gen_tokens.is_some() {
                    return Err(SimError::Workload(format!(
                        "request `{}`: prompt_len/gen_tokens only apply to generative requests",
                        self.request_id
                    )));
                }
                RequestKind::Static
            }
            EntryKind::Generative => match (self.prompt_len, self.gen_tokens) {
                (Some(prompt_len), Some(gen_tokens)) => RequestKind::Generative { prompt_len, gen_tokens },
                _ => {
                    return Err(SimError::Workload(format!(
                        "request `{}`: generative requests need prompt_len and gen_tokens",
                        self.request_id
                    )))
                }
            },
        };
        Ok(InferenceRequest {
            tenant: self.tenant.unwrap_or_else(|| self.request_id.clone()),
            request_id: self.request_id,
            model,
            batch: self.batch,
            arrival: self.arrival_cycle,
            kind,
            bindings: self.bindings,
            program: None,
        })
    }
}

pub fn parse_workload(text: &str, models: &mut ModelResolver) -> Result<Vec<InferenceRequest>, SimError> {
    let entries: Vec<WorkloadEntry> = serde_json::from_str(text).map_err(|e| SimError::Workload(format!("line {}, column {}: {e}", e.line(), e.column())))?;
    entries
        .into_iter()
        .map(|e| {
            let model = models.resolve(&e.model_file)?;
            e.into_request(model)
        })
        .collect()
}

/// Read a workload file; relative model paths resolve against its directory.
pub fn load_workload(path: &Path, model_files: &[PathBuf]) -> Result<Vec<InferenceRequest>, SimError> {
    let text = std::fs::read_to_string(path).map_err(|e| SimError::Workload(format!("cannot read {}: {e}", path.display())))?;
    let mut models = ModelResolver::new(path.parent().unwrap_or(Path::new(".")));
    for m in model_files {
        models.register(m);
    }
    parse_workload(&text, &mut models)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_parse_with_defaults() {
        let text = r#"[
            {"request_id": "a", "model_file": "synthetic:gemm:m=8,k=8,n=8"},
            {"request_id": "g", "model_file": "synthetic:transformer_block:d_model=64,heads=4,kv_heads=4",
             "batch": 2, "arrival_cycle": 10, "kind": "generative", "prompt_len": 16, "gen_tokens": 3, "tenant": "t0"}
        ]"#;
        let reqs = parse_workload(text, &mut ModelResolver::default()).unwrap();
        assert_eq!(reqs[0].batch, 1);
        assert_eq!(reqs[0].tenant, "a");
        assert_eq!(reqs[1].kind, RequestKind::Generative { prompt_len: 16, gen_tokens: 3 });
        assert_eq!(reqs[1].tenant, "t0");
    }

    #[test]
    fn bad_entries_are_rejected() {
        let mut m = ModelResolver::default();
        assert!(parse_workload(r#"[{"request_id": "a"}]"#, &mut m).is_err());
        assert!(parse_workload(r#"[{"request_id": "a", "model_file": "synthetic:gemm:m=8,k=8,n=8", "kind": "generative"}]"#, &mut m).is_err());
        assert!(parse_workload(r#"[{"request_id": "a", "model_file": "missing.json"}]"#, &mut m).is_err());
    }
}
