//! Embedding sources: the deterministic mock, a precomputed record file and
//! the remote embedding service client.

mod codec;
mod remote;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::semantic::{mock_embed, EmbeddingMatrix, SemanticError, SentenceVector};

pub use codec::{read_matrix_f32le, write_matrix_f32le};
pub use remote::{
    EmbedMode, EmbedRequest, HealthResponse, RemoteEmbedder, RetryPolicy, SentenceResponse,
    TokenResponse, PROTOCOL_VERSION,
};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding service at {endpoint} unreachable after {attempts} attempt(s): {message}")]
    Connectivity {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("protocol error from {endpoint}: {message}")]
    Protocol { endpoint: String, message: String },
    #[error("protocol version mismatch: expected {expected}, got {got}")]
    VersionMismatch { expected: u32, got: u32 },
    #[error("embedding dimension {got} disagrees with session dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no precomputed {kind} embedding for text {text:?}")]
    MissingText { kind: &'static str, text: String },
    #[error("{path}:{line}: {message}")]
    FileFormat {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid embeddings source {0:?}: expected mock, file:PATH or service:URL")]
    InvalidSource(String),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Produces unit-normalized embeddings, one per input text, in input order.
pub trait Embedder {
    fn sentences(&self, texts: &[&str]) -> Result<Vec<SentenceVector>, EmbedError>;
    fn tokens(&self, texts: &[&str]) -> Result<Vec<EmbeddingMatrix>, EmbedError>;
}

/// Hash-seeded stand-in encoder; see [`mock_embed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self { dim: 64, seed: 0 }
    }
}

impl Embedder for MockEmbedder {
    fn sentences(&self, texts: &[&str]) -> Result<Vec<SentenceVector>, EmbedError> {
        Ok(texts.iter().map(|t| mock_embed(t, self.dim, self.seed).1).collect())
    }

    fn tokens(&self, texts: &[&str]) -> Result<Vec<EmbeddingMatrix>, EmbedError> {
        Ok(texts.iter().map(|t| mock_embed(t, self.dim, self.seed).0).collect())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRecord {
    text: String,
    #[serde(default)]
    vector: Option<Vec<f64>>,
    #[serde(default)]
    tokens: Option<Vec<Vec<f64>>>,
}

/// Precomputed embeddings keyed by exact text.
///
/// The file is line-delimited JSON, one `{"text", "vector", "tokens"}` object
/// per line; either vector field may be omitted. Vectors are normalized on load.
#[derive(Debug, Clone, Default)]
pub struct FileEmbedder {
    sentences: HashMap<String, SentenceVector>,
    tokens: HashMap<String, EmbeddingMatrix>,
}

impl FileEmbedder {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path)?);
        let mut out = Self::default();
        let mut dim: Option<usize> = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fail = |message: String| EmbedError::FileFormat {
                path: path.to_path_buf(),
                line: lineno,
                message,
            };
            let rec: FileRecord = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
            let mut check_dim = |d: usize| match dim {
                None => {
                    dim = Some(d);
                    Ok(())
                }
                Some(expected) if expected == d => Ok(()),
                Some(expected) => Err(fail(format!("dimension {d} differs from {expected}"))),
            };
            if let Some(v) = rec.vector {
                check_dim(v.len())?;
                let v = SentenceVector::new(v)
                    .and_then(|v| v.normalized())
                    .map_err(|e| fail(e.to_string()))?;
                out.sentences.insert(rec.text.clone(), v);
            }
            if let Some(rows) = rec.tokens {
                let m = EmbeddingMatrix::from_rows(&rows)
                    .and_then(EmbeddingMatrix::normalize)
                    .map_err(|e| fail(e.to_string()))?;
                check_dim(m.dim())?;
                out.tokens.insert(rec.text, m);
            }
        }
        Ok(out)
    }
}

impl Embedder for FileEmbedder {
    fn sentences(&self, texts: &[&str]) -> Result<Vec<SentenceVector>, EmbedError> {
        texts
            .iter()
            .map(|t| {
                self.sentences.get(*t).cloned().ok_or_else(|| EmbedError::MissingText {
                    kind: "sentence",
                    text: t.to_string(),
                })
            })
            .collect()
    }

    fn tokens(&self, texts: &[&str]) -> Result<Vec<EmbeddingMatrix>, EmbedError> {
        texts
            .iter()
            .map(|t| {
                self.tokens.get(*t).cloned().ok_or_else(|| EmbedError::MissingText {
                    kind: "token",
                    text: t.to_string(),
                })
            })
            .collect()
    }
}

/// Where embeddings come from, as given on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbeddingSource {
    Mock,
    File(PathBuf),
    Service(String),
}

impl std::str::FromStr for EmbeddingSource {
    type Err = EmbedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "mock" {
            Ok(Self::Mock)
        } else if let Some(p) = s.strip_prefix("file:").filter(|p| !p.is_empty()) {
            Ok(Self::File(PathBuf::from(p)))
        } else if let Some(u) = s.strip_prefix("service:").filter(|u| !u.is_empty()) {
            Ok(Self::Service(u.to_string()))
        } else {
            Err(EmbedError::InvalidSource(s.to_string()))
        }
    }
}

impl EmbeddingSource {
    /// Opens the source. `mock` is used for the mock embedder's dimension and seed.
    pub fn open(&self, mock: MockEmbedder) -> Result<Box<dyn Embedder>, EmbedError> {
        Ok(match self {
            Self::Mock => Box::new(mock),
            Self::File(p) => Box::new(FileEmbedder::load(p)?),
            Self::Service(url) => Box::new(RemoteEmbedder::new(url.clone(), RetryPolicy::default())),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn source_parsing() {
        assert_eq!("mock".parse::<EmbeddingSource>().unwrap(), EmbeddingSource::Mock);
        assert_eq!(
            "file:/tmp/e.jsonl".parse::<EmbeddingSource>().unwrap(),
            EmbeddingSource::File("/tmp/e.jsonl".into())
        );
        assert_eq!(
            "service:http://127.0.0.1:8000".parse::<EmbeddingSource>().unwrap(),
            EmbeddingSource::Service("http://127.0.0.1:8000".into())
        );
        assert!("file:".parse::<EmbeddingSource>().is_err());
        assert!("bert".parse::<EmbeddingSource>().is_err());
    }

    #[test]
    fn file_embedder_loads_and_normalizes() {
        let dir = std::env::temp_dir().join(format!("semreward-file-embed-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("emb.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(f, r#"{{"text": "left lung", "vector": [3.0, 4.0], "tokens": [[1.0, 0.0], [0.0, 2.0]]}}"#).unwrap();
        writeln!(f).unwrap();
        writeln!(f, r#"{{"text": "yes", "vector": [0.0, 1.0]}}"#).unwrap();
        drop(f);

        let e = FileEmbedder::load(&path).unwrap();
        let s = e.sentences(&["left lung", "yes"]).unwrap();
        assert!((s[0].values()[0] - 0.6).abs() < 1e-12);
        let t = e.tokens(&["left lung"]).unwrap();
        assert_eq!(t[0].rows(), 2);
        assert!(t[0].is_normalized());
        assert!(matches!(
            e.tokens(&["yes"]),
            Err(EmbedError::MissingText { kind: "token", .. })
        ));

        let bad = dir.join("bad.jsonl");
        std::fs::write(&bad, "{\"text\": \"a\", \"vector\": [1.0, 0.0]}\n{\"text\": \"b\", \"vector\": [1.0]}\n").unwrap();
        match FileEmbedder::load(&bad) {
            Err(EmbedError::FileFormat { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn mock_embedder_is_deterministic() {
        let m = MockEmbedder { dim: 16, seed: 9 };
        let a = m.sentences(&["x ray", "x ray"]).unwrap();
        assert_eq!(a[0], a[1]);
        assert_eq!(m.tokens(&["x ray"]).unwrap()[0].rows(), 2);
    }
}
