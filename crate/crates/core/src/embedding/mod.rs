//! Text encoders, the on-disk embedding cache and cosine similarity.

mod baseline;

use std::fs;
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::seeds::{derive_seed, sha256_hex};

pub use baseline::{
    baseline_predict, default_grid, grid_search_baseline, predict_all, score_pool,
    BaselineConfig, GridSearchResult, GridRow, ScoredPair, SimilarityMode,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub source_model: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>, source_model: impl Into<String>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding vector".into()));
        }
        Ok(EmbeddingVector {
            values,
            source_model: source_model.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Cosine similarity computed in f64 and clamped to [-1, 1].
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine_f32(&a.values, &b.values)
}

pub fn cosine_f32(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "cosine similarity of vectors with dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine similarity with a zero vector".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub trait EmbeddingBackend: Send + Sync {
    fn model(&self) -> &str;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>>;
}

/// Offline encoder: each text maps to a pseudo-random unit vector seeded by
/// (seed, model, text).
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    model: String,
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(model: impl Into<String>, dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        HashEmbedder {
            model: model.into(),
            dim,
            seed,
        }
    }

    pub fn vector(&self, text: &str) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[&self.model, text]));
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                return v.iter().map(|x| (x / norm) as f32).collect();
            }
        }
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn model(&self) -> &str {
        &self.model
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpEmbedderConfig {
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub max_retries: usize,
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for HttpEmbedderConfig {
    fn default() -> Self {
        HttpEmbedderConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "text-embedding-3-small".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_retries: 3,
            initial_backoff_ms: 500,
            timeout_secs: 60,
        }
    }
}

/// `POST {base_url}/embeddings` client.
pub struct HttpEmbedder {
    config: HttpEmbedderConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(config: HttpEmbedderConfig) -> Result<Self> {
        let api_key = std::env::var(&config.api_key_env).ok();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpEmbedder {
            config,
            api_key,
            client,
        })
    }

    fn decode(value: &serde_json::Value, n: usize) -> Result<Vec<Vec<f32>>> {
        let data = value["data"]
            .as_array()
            .ok_or_else(|| Error::Format("embedding response has no data array".into()))?;
        if data.len() != n {
            return Err(Error::Format(format!(
                "asked for {n} embeddings, got {}",
                data.len()
            )));
        }
        data.iter()
            .map(|item| {
                item["embedding"]
                    .as_array()
                    .ok_or_else(|| Error::Format("embedding entry is not an array".into()))?
                    .iter()
                    .map(|x| {
                        x.as_f64()
                            .map(|v| v as f32)
                            .ok_or_else(|| Error::Format("non-numeric embedding value".into()))
                    })
                    .collect()
            })
            .collect()
    }
}

impl EmbeddingBackend for HttpEmbedder {
    fn model(&self) -> &str {
        &self.config.model
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let url = format!("{}/embeddings", self.config.base_url.trim_end_matches('/'));
        let body = json!({"model": self.config.model, "input": texts});
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                thread::sleep(backoff);
                backoff *= 2;
            }
            let mut req = self.client.post(&url).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Err(e) => last = e.to_string(),
                Ok(resp) if resp.status().is_client_error() => {
                    return Err(Error::Config(format!(
                        "embedding endpoint rejected the request ({})",
                        resp.status()
                    )))
                }
                Ok(resp) if !resp.status().is_success() => last = format!("HTTP {}", resp.status()),
                Ok(resp) => match resp.json::<serde_json::Value>() {
                    Ok(v) => return Self::decode(&v, texts.len()),
                    Err(e) => last = e.to_string(),
                },
            }
        }
        Err(Error::BackendUnavailable {
            attempts: self.config.max_retries + 1,
            message: last,
        })
    }
}

const VECTOR_MAGIC: &[u8; 4] = b"KTEV";

/// Vectors stored as `<root>/<model>/<sha256(text)>.bin`: magic, u32 LE dim,
/// then little-endian f32 values. A `DIM` file pins the namespace width.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    root: PathBuf,
}

impl EmbeddingCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        EmbeddingCache { root: root.into() }
    }

    fn namespace(&self, model: &str) -> PathBuf {
        let safe: String = model
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect();
        self.root.join(format!("{safe}-{}", &sha256_hex(model.as_bytes())[..8]))
    }

    pub fn namespace_dim(&self, model: &str) -> Option<usize> {
        fs::read_to_string(self.namespace(model).join("DIM"))
            .ok()
            .and_then(|s| s.trim().parse().ok())
    }

    pub fn lookup(&self, model: &str, text: &str) -> Option<Vec<f32>> {
        let path = self.namespace(model).join(format!("{}.bin", sha256_hex(text.as_bytes())));
        decode_vector(&fs::read(path).ok()?)
    }

    pub fn store(&self, model: &str, text: &str, values: &[f32]) -> Result<()> {
        let ns = self.namespace(model);
        fs::create_dir_all(&ns).map_err(|e| Error::io(&ns, e))?;
        match self.namespace_dim(model) {
            Some(d) if d != values.len() => {
                return Err(Error::Config(format!(
                    "embedding dim {} does not match cached namespace dim {d} for model `{model}`",
                    values.len()
                )))
            }
            Some(_) => {}
            None => {
                let dim_path = ns.join("DIM");
                fs::write(&dim_path, values.len().to_string()).map_err(|e| Error::io(&dim_path, e))?;
            }
        }
        let path = ns.join(format!("{}.bin", sha256_hex(text.as_bytes())));
        let mut tmp = tempfile::NamedTempFile::new_in(&ns).map_err(|e| Error::io(&ns, e))?;
        std::io::Write::write_all(&mut tmp, &encode_vector(values)).map_err(|e| Error::io(&path, e))?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }
}

fn encode_vector(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + values.len() * 4);
    out.extend_from_slice(VECTOR_MAGIC);
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_vector(bytes: &[u8]) -> Option<Vec<f32>> {
    if bytes.len() < 8 || &bytes[..4] != VECTOR_MAGIC {
        return None;
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().ok()?) as usize;
    if bytes.len() != 8 + dim * 4 {
        return None;
    }
    Some(
        bytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

/// Backend plus optional cache.
pub struct Embedder {
    backend: Box<dyn EmbeddingBackend>,
    cache: Option<EmbeddingCache>,
}

impl Embedder {
    pub fn new(backend: Box<dyn EmbeddingBackend>, cache: Option<EmbeddingCache>) -> Self {
        Embedder { backend, cache }
    }

    pub fn model(&self) -> &str {
        self.backend.model()
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed_many(&[text])?.remove(0))
    }

    /// Embeds every text; cache hits skip the backend, misses go out in one batch.
    pub fn embed_many(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        if let Some(t) = texts.iter().find(|t| t.trim().is_empty()) {
            return Err(Error::Contract(format!("cannot embed empty text {t:?}")));
        }
        let model = self.backend.model().to_string();
        let mut out: Vec<Option<Vec<f32>>> = texts
            .iter()
            .map(|t| self.cache.as_ref().and_then(|c| c.lookup(&model, t)))
            .collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<&str> = missing.iter().map(|&i| texts[i]).collect();
            let fresh = self.backend.embed_batch(&batch)?;
            for (&i, v) in missing.iter().zip(fresh) {
                if let Some(cache) = &self.cache {
                    cache.store(&model, texts[i], &v)?;
                }
                out[i] = Some(v);
            }
        }
        let vectors: Vec<EmbeddingVector> = out
            .into_iter()
            .map(|v| EmbeddingVector::new(v.expect("filled"), model.clone()))
            .collect::<Result<_>>()?;
        if let Some(first) = vectors.first() {
            if vectors.iter().any(|v| v.dim() != first.dim()) {
                return Err(Error::Config(format!("model `{model}` returned mixed dims")));
            }
        }
        Ok(vectors)
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec(), "t").unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = ev(&[1.0, 2.0, 3.0]);
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap(), 0.0);
        // 32 / sqrt(14 * 77)
        let hand = 32.0 / (14.0f64 * 77.0).sqrt();
        let got = cosine_similarity(&a, &ev(&[4.0, 5.0, 6.0])).unwrap();
        assert!((got - 0.974631846).abs() < 1e-6);
        assert!((got - hand).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&ev(&[0.0, 0.0]), &ev(&[1.0, 0.0])),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            cosine_similarity(&ev(&[1.0]), &ev(&[1.0, 0.0])),
            Err(Error::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_bounded_and_scale_free(
            a in proptest::collection::vec(-10.0f32..10.0, 5),
            b in proptest::collection::vec(-10.0f32..10.0, 5),
            alpha in 0.5f32..4.0,
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
            let (va, vb) = (ev(&a), ev(&b));
            let ab = cosine_similarity(&va, &vb).unwrap();
            prop_assert_eq!(ab, cosine_similarity(&vb, &va).unwrap());
            prop_assert!(ab.abs() <= 1.0 + 1e-12);
            let scaled: Vec<f32> = a.iter().map(|x| x * alpha).collect();
            let sc = cosine_similarity(&ev(&scaled), &vb).unwrap();
            prop_assert!((sc - ab).abs() < 1e-5);
        }
    }

    #[test]
    fn hash_embedder_is_reproducible_unit_norm() {
        let e = HashEmbedder::new("hash", 16, 5);
        let a = e.vector("some text");
        assert_eq!(a, HashEmbedder::new("hash", 16, 5).vector("some text"));
        assert_ne!(a, e.vector("other text"));
        let norm: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    struct Counting(std::sync::atomic::AtomicUsize, HashEmbedder);

    impl EmbeddingBackend for Counting {
        fn model(&self) -> &str {
            self.1.model()
        }
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
            self.0.fetch_add(texts.len(), std::sync::atomic::Ordering::SeqCst);
            self.1.embed_batch(texts)
        }
    }

    #[test]
    fn cache_serves_repeat_texts() {
        let dir = tempfile::tempdir().unwrap();
        let backend = std::sync::Arc::new(Counting(Default::default(), HashEmbedder::new("h", 8, 1)));
        struct Shared(std::sync::Arc<Counting>);
        impl EmbeddingBackend for Shared {
            fn model(&self) -> &str { self.0.model() }
            fn embed_batch(&self, t: &[&str]) -> Result<Vec<Vec<f32>>> { self.0.embed_batch(t) }
        }
        let e = Embedder::new(Box::new(Shared(backend.clone())), Some(EmbeddingCache::new(dir.path())));
        let a = e.embed_text("alpha").unwrap();
        let b = e.embed_text("alpha").unwrap();
        let c = e.embed_text("beta").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), c.dim());
        assert_eq!(backend.0.load(std::sync::atomic::Ordering::SeqCst), 2);
    }

    #[test]
    fn namespace_dim_mismatch_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::new(dir.path());
        cache.store("m", "x", &[1.0, 2.0]).unwrap();
        assert_eq!(cache.lookup("m", "x"), Some(vec![1.0, 2.0]));
        assert!(matches!(cache.store("m", "y", &[1.0, 2.0, 3.0]), Err(Error::Config(_))));
    }

    #[test]
    fn empty_text_is_rejected() {
        let e = Embedder::new(Box::new(HashEmbedder::new("h", 4, 0)), None);
        assert!(e.embed_text("  ").is_err());
    }

    #[test]
    fn http_embedder_decodes_response() {
        use crate::judge::http_mock::serve;
        let reply = serde_json::json!({"data": [{"embedding": [0.5, 0.25]}, {"embedding": [1.0, 0.0]}]});
        let server = serve(vec![(500, "{}".into()), (200, reply.to_string())]);
        let e = HttpEmbedder::new(HttpEmbedderConfig {
            base_url: server.url.clone(),
            initial_backoff_ms: 1,
            api_key_env: "KNOWTAG_TEST_NO_SUCH_KEY".into(),
            ..Default::default()
        })
        .unwrap();
        let out = e.embed_batch(&["a", "b"]).unwrap();
        assert_eq!(out, vec![vec![0.5, 0.25], vec![1.0, 0.0]]);
        let sent: serde_json::Value =
            serde_json::from_str(&server.bodies.lock().unwrap()[1]).unwrap();
        assert_eq!(sent["input"], serde_json::json!(["a", "b"]));
    }
}
