//! Model bundle: every fitted artifact needed to score, explain and suggest,
//! in one file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "EXPACCEL" | u32 format_version | u64 manifest_len | manifest JSON
//! | f64 blob section | sha256 of all preceding bytes (32 bytes)
//! ```
//!
//! The manifest holds metadata and, for every matrix or vector, an offset and
//! shape into the blob section. Matrices are stored column-major. Floats in
//! the blob are raw IEEE-754 bits, so a load/save round trip is bit-exact.

use std::path::Path;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attributes::{AttributeDictionary, AttributeLexicon};
use crate::embedding::CenteringStats;
use crate::error::{Error, Result};
use crate::impact::{BinThresholds, CvPoint, ImpactModel};
use crate::pipeline::TrainConfig;
use crate::projection::ProjectionModel;
use crate::ranker::{FitDiagnostics, RankerModel, Weighting};

pub const MAGIC: &[u8; 8] = b"EXPACCEL";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMetadata {
    /// From `SOURCE_DATE_EPOCH` when set, so reruns stay byte-identical.
    pub created_at_unix: Option<u64>,
    pub config: TrainConfig,
    pub config_hash: String,
    pub training_source: String,
    pub n_training_experiments: usize,
    pub n_training_arms: usize,
    pub library_version: String,
    /// Adjustments made during training (clamped q, fallbacks).
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub format_version: u32,
    pub provider_id: String,
    pub centering: CenteringStats,
    pub projection: ProjectionModel,
    pub ranker: RankerModel,
    pub dictionary: AttributeDictionary,
    pub lexicon: AttributeLexicon,
    pub impact: ImpactModel,
    pub bin_thresholds: BinThresholds,
    pub metadata: BundleMetadata,
}

impl ModelBundle {
    pub fn p(&self) -> usize {
        self.centering.dim()
    }

    pub fn q(&self) -> usize {
        self.projection.q()
    }

    pub fn m(&self) -> usize {
        self.dictionary.m()
    }

    /// Checks every dimensional relationship between the parts.
    pub fn validate(&self) -> Result<()> {
        let (p, q, m) = (self.p(), self.q(), self.m());
        let checks = [
            ("projection columns", self.projection.p(), p),
            ("projection sample mean", self.projection.sample_mean.len(), p),
            ("explained variance", self.projection.explained_variance.len(), q),
            ("ranker coefficients", self.ranker.q(), q),
            ("dictionary columns", self.dictionary.p(), p),
            ("dictionary names", self.dictionary.names.len(), m),
            ("lexicon size", self.lexicon.len(), m),
            ("re-expressed coefficients", self.impact.beta_prime.len(), p),
            ("impact coefficients", self.impact.beta_dprime.len(), m),
            ("sign vector", self.impact.sign_vector.len(), m),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Err(Error::BundleFormat(format!("{what}: dimension {got}, expected {want}")));
            }
        }
        if self.lexicon.names() != self.dictionary.names {
            return Err(Error::BundleFormat("lexicon and dictionary attribute order differ".into()));
        }
        Ok(())
    }

    /// The manifest as JSON, without blob contents.
    pub fn manifest_json(&self) -> Result<serde_json::Value> {
        let mut blobs = BlobWriter::default();
        Ok(serde_json::to_value(self.manifest(&mut blobs))?)
    }

    fn manifest(&self, blobs: &mut BlobWriter) -> Manifest {
        Manifest {
            format_version: self.format_version,
            provider_id: self.provider_id.clone(),
            dims: Dims {
                p: self.p(),
                q: self.q(),
                m: self.m(),
            },
            centering: CenteringPart {
                corpus_size: self.centering.corpus_size,
                corpus_tag: self.centering.corpus_tag.clone(),
                mean: blobs.vector(&self.centering.mean),
            },
            projection: ProjectionPart {
                fit_corpus_tag: self.projection.fit_corpus_tag.clone(),
                pi: blobs.matrix(&self.projection.pi),
                sample_mean: blobs.vector(&self.projection.sample_mean),
                explained_variance: blobs.slice(&self.projection.explained_variance),
            },
            ranker: RankerPart {
                ridge: self.ranker.ridge,
                weighting: self.ranker.weighting,
                diagnostics: self.ranker.diagnostics.clone(),
                beta: blobs.vector(&self.ranker.beta),
                fixed_effect_ids: self.ranker.fixed_effects.keys().cloned().collect(),
                fixed_effect_values: blobs.slice(&self.ranker.fixed_effects.values().copied().collect::<Vec<_>>()),
            },
            dictionary: DictionaryPart {
                names: self.dictionary.names.clone(),
                provider_id: self.dictionary.provider_id.clone(),
                v: blobs.matrix(&self.dictionary.v),
            },
            lexicon: self.lexicon.clone(),
            impact: ImpactPart {
                lambda: self.impact.lambda,
                sign_vector: self.impact.sign_vector.clone(),
                cv_folds: self.impact.cv_folds,
                cv_seed: self.impact.cv_seed,
                beta_prime: blobs.vector(&self.impact.beta_prime),
                beta_dprime: blobs.vector(&self.impact.beta_dprime),
                cv_lambda: blobs.slice(&self.impact.cv_trace.iter().map(|c| c.lambda).collect::<Vec<_>>()),
                cv_error: blobs.slice(&self.impact.cv_trace.iter().map(|c| c.mean_error).collect::<Vec<_>>()),
            },
            bin_thresholds: self.bin_thresholds,
            metadata: self.metadata.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut blobs = BlobWriter::default();
        let manifest = serde_json::to_vec(&self.manifest(&mut blobs))?;
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + blobs.bytes.len() + CHECKSUM_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&blobs.bytes);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BundleFormat("missing magic header".into()));
        }
        if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
            return Err(Error::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let manifest_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let manifest_end = HEADER_LEN
            .checked_add(manifest_len)
            .filter(|e| *e <= body.len())
            .ok_or_else(|| Error::BundleFormat("manifest length exceeds file".into()))?;
        let manifest: Manifest = serde_json::from_slice(&body[HEADER_LEN..manifest_end])?;
        if manifest.format_version != version {
            return Err(Error::BundleFormat("header and manifest versions differ".into()));
        }
        let blobs = BlobReader {
            bytes: &body[manifest_end..],
        };
        let m = manifest;
        let fe_values = blobs.slice(&m.ranker.fixed_effect_values)?;
        if fe_values.len() != m.ranker.fixed_effect_ids.len() {
            return Err(Error::BundleFormat("fixed effect ids and values differ in length".into()));
        }
        let cv_lambda = blobs.slice(&m.impact.cv_lambda)?;
        let cv_error = blobs.slice(&m.impact.cv_error)?;
        if cv_lambda.len() != cv_error.len() {
            return Err(Error::BundleFormat("cv trace columns differ in length".into()));
        }
        let bundle = ModelBundle {
            format_version: version,
            provider_id: m.provider_id,
            centering: CenteringStats {
                mean: blobs.vector(&m.centering.mean)?,
                corpus_size: m.centering.corpus_size,
                corpus_tag: m.centering.corpus_tag,
            },
            projection: ProjectionModel {
                pi: blobs.matrix(&m.projection.pi)?,
                sample_mean: blobs.vector(&m.projection.sample_mean)?,
                explained_variance: blobs.slice(&m.projection.explained_variance)?,
                fit_corpus_tag: m.projection.fit_corpus_tag,
            },
            ranker: RankerModel {
                beta: blobs.vector(&m.ranker.beta)?,
                fixed_effects: m.ranker.fixed_effect_ids.into_iter().zip(fe_values).collect::<IndexMap<_, _>>(),
                ridge: m.ranker.ridge,
                weighting: m.ranker.weighting,
                diagnostics: m.ranker.diagnostics,
            },
            dictionary: AttributeDictionary {
                v: blobs.matrix(&m.dictionary.v)?,
                names: m.dictionary.names,
                provider_id: m.dictionary.provider_id,
            },
            lexicon: m.lexicon,
            impact: ImpactModel {
                beta_prime: blobs.vector(&m.impact.beta_prime)?,
                beta_dprime: blobs.vector(&m.impact.beta_dprime)?,
                lambda: m.impact.lambda,
                sign_vector: m.impact.sign_vector,
                cv_trace: cv_lambda
                    .into_iter()
                    .zip(cv_error)
                    .map(|(lambda, mean_error)| CvPoint { lambda, mean_error })
                    .collect(),
                cv_folds: m.impact.cv_folds,
                cv_seed: m.impact.cv_seed,
            },
            bin_thresholds: m.bin_thresholds,
            metadata: m.metadata,
        };
        if (bundle.p(), bundle.q(), bundle.m()) != (m.dims.p, m.dims.q, m.dims.m) {
            return Err(Error::BundleFormat("manifest dims disagree with stored matrices".into()));
        }
        bundle.validate()?;
        Ok(bundle)
    }
}

/// Writes through a temporary file so a crash never leaves half a bundle.
pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let bytes = bundle.to_bytes()?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    ModelBundle::from_bytes(&std::fs::read(path)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Blob {
    /// Offset in f64 elements from the start of the blob section.
    offset: usize,
    rows: usize,
    cols: usize,
}

#[derive(Default)]
struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, values: impl Iterator<Item = f64>, rows: usize, cols: usize) -> Blob {
        let offset = self.bytes.len() / 8;
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        Blob { offset, rows, cols }
    }

    fn matrix(&mut self, m: &DMatrix<f64>) -> Blob {
        self.push(m.iter().copied(), m.nrows(), m.ncols())
    }

    fn vector(&mut self, v: &DVector<f64>) -> Blob {
        self.push(v.iter().copied(), v.len(), 1)
    }

    fn slice(&mut self, v: &[f64]) -> Blob {
        self.push(v.iter().copied(), v.len(), 1)
    }
}

struct BlobReader<'a> {
    bytes: &'a [u8],
}

impl BlobReader<'_> {
    fn slice(&self, b: &Blob) -> Result<Vec<f64>> {
        let n = b.rows.checked_mul(b.cols).ok_or_else(|| Error::BundleFormat("blob shape overflows".into()))?;
        let start = b.offset.checked_mul(8);
        let end = start.and_then(|s| n.checked_mul(8).and_then(|len| s.checked_add(len)));
        let (Some(start), Some(end)) = (start, end) else {
            return Err(Error::BundleFormat("blob range overflows".into()));
        };
        let raw = self
            .bytes
            .get(start..end)
            .ok_or_else(|| Error::BundleFormat(format!("blob at {} out of range", b.offset)))?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn matrix(&self, b: &Blob) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_vec(b.rows, b.cols, self.slice(b)?))
    }

    fn vector(&self, b: &Blob) -> Result<DVector<f64>> {
        if b.cols != 1 {
            return Err(Error::BundleFormat("expected a column vector".into()));
        }
        Ok(DVector::from_vec(self.slice(b)?))
    }
}

#[derive(Serialize, Deserialize)]
struct Dims {
    p: usize,
    q: usize,
    m: usize,
}

#[derive(Serialize, Deserialize)]
struct CenteringPart {
    corpus_size: usize,
    corpus_tag: String,
    mean: Blob,
}

#[derive(Serialize, Deserialize)]
struct ProjectionPart {
    fit_corpus_tag: String,
    pi: Blob,
    sample_mean: Blob,
    explained_variance: Blob,
}

#[derive(Serialize, Deserialize)]
struct RankerPart {
    ridge: f64,
    weighting: Weighting,
    diagnostics: FitDiagnostics,
    beta: Blob,
    fixed_effect_ids: Vec<String>,
    fixed_effect_values: Blob,
}

#[derive(Serialize, Deserialize)]
struct DictionaryPart {
    names: Vec<String>,
    provider_id: String,
    v: Blob,
}

#[derive(Serialize, Deserialize)]
struct ImpactPart {
    lambda: f64,
    sign_vector: Vec<i8>,
    cv_folds: Option<usize>,
    cv_seed: Option<u64>,
    beta_prime: Blob,
    beta_dprime: Blob,
    cv_lambda: Blob,
    cv_error: Blob,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    provider_id: String,
    dims: Dims,
    centering: CenteringPart,
    projection: ProjectionPart,
    ranker: RankerPart,
    dictionary: DictionaryPart,
    lexicon: AttributeLexicon,
    impact: ImpactPart,
    bin_thresholds: BinThresholds,
    metadata: BundleMetadata,
}

/// A random but dimensionally consistent bundle, for tests.
#[doc(hidden)]
pub fn random_bundle(p: usize, q: usize, m: usize, seed: u64) -> ModelBundle {
    use crate::attributes::Attribute;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = |r: usize, c: usize| DMatrix::<f64>::from_fn(r, c, |_, _| rng.sample(StandardNormal));
    let names: Vec<String> = (0..m).map(|i| format!("attr_{i}")).collect();
    let lexicon = AttributeLexicon::new(
        names
            .iter()
            .map(|n| Attribute {
                name: n.clone(),
                description: format!("{n} description"),
                phrases: vec![format!("{n} phrase")],
            })
            .collect(),
    )
    .expect("valid lexicon");
    let col = |m: DMatrix<f64>| -> DVector<f64> { m.column(0).into_owned() };
    ModelBundle {
        format_version: FORMAT_VERSION,
        provider_id: "hash-test".into(),
        centering: CenteringStats {
            mean: col(g(p, 1)),
            corpus_size: 10,
            corpus_tag: "training".into(),
        },
        projection: ProjectionModel {
            pi: g(q, p),
            sample_mean: col(g(p, 1)),
            explained_variance: col(g(q, 1)).iter().map(|x| x.abs()).collect(),
            fit_corpus_tag: "target".into(),
        },
        ranker: RankerModel {
            beta: col(g(q, 1)),
            fixed_effects: (0..3).map(|i| (format!("exp{i}"), g(1, 1)[0])).collect(),
            ridge: 1e-6,
            weighting: Weighting::Uniform,
            diagnostics: FitDiagnostics {
                residual_variance: 0.1,
                n_experiments: 3,
                n_arms: 9,
            },
        },
        dictionary: AttributeDictionary {
            v: g(m, p),
            names: names.clone(),
            provider_id: "hash-test".into(),
        },
        lexicon,
        impact: ImpactModel {
            beta_prime: col(g(p, 1)),
            beta_dprime: col(g(m, 1)),
            lambda: 0.01,
            sign_vector: col(g(m, 1)).iter().map(|x| if *x > 0.0 { 1 } else { -1 }).collect(),
            cv_trace: (0..5).map(|i| CvPoint { lambda: 1.0 / (i + 1) as f64, mean_error: g(1, 1)[0].abs() }).collect(),
            cv_folds: Some(5),
            cv_seed: Some(seed),
        },
        bin_thresholds: BinThresholds::default(),
        metadata: BundleMetadata {
            created_at_unix: None,
            config: TrainConfig::default(),
            config_hash: "0".repeat(64),
            training_source: "random".into(),
            n_training_experiments: 3,
            n_training_arms: 9,
            library_version: env!("CARGO_PKG_VERSION").into(),
            notes: vec![],
        },
    }
}
