//! Marketing-attribute lexicon, the attribute embedding dictionary V, and
//! per-treatment attribute scores s = V·φ.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embedding::Embedder;
use crate::error::{check_dim, Error, Result};

const SAMPLE_LEXICON: &str = include_str!("../assets/sample_lexicon.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub description: String,
    pub phrases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeLexicon {
    pub attributes: Vec<Attribute>,
}

impl AttributeLexicon {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Validation("lexicon has no attributes".into()));
        }
        let mut seen = HashSet::new();
        for a in &attributes {
            if !seen.insert(a.name.as_str()) {
                return Err(Error::Validation(format!("duplicate attribute `{}`", a.name)));
            }
            if a.phrases.iter().all(|p| p.trim().is_empty()) {
                return Err(Error::Validation(format!("attribute `{}` has no phrases", a.name)));
            }
        }
        Ok(Self { attributes })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let attributes: Vec<Attribute> = serde_json::from_str(json)?;
        Self::new(attributes)
    }

    /// The lexicon bundled with the crate.
    pub fn sample() -> Self {
        Self::from_json(SAMPLE_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.name.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Attribute> {
        self.attributes.iter().find(|a| a.name == name)
    }
}

pub fn load_lexicon(path: &Path) -> Result<AttributeLexicon> {
    AttributeLexicon::from_json(&std::fs::read_to_string(path)?)
}

/// m×p matrix of demeaned attribute embeddings, one row per attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeDictionary {
    pub v: DMatrix<f64>,
    pub names: Vec<String>,
    pub provider_id: String,
}

impl AttributeDictionary {
    pub fn m(&self) -> usize {
        self.v.nrows()
    }

    pub fn p(&self) -> usize {
        self.v.ncols()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Row a = mean of attribute a's phrase embeddings minus the grand mean
    /// over every phrase of every attribute (phrase-weighted).
    pub fn from_phrase_embeddings(
        names: Vec<String>,
        phrase_embeddings: &[Vec<DVector<f64>>],
        provider_id: impl Into<String>,
    ) -> Result<Self> {
        check_dim(names.len(), phrase_embeddings.len())?;
        let p = phrase_embeddings
            .iter()
            .flatten()
            .next()
            .map(|v| v.len())
            .ok_or_else(|| Error::Validation("no phrase embeddings".into()))?;
        let mut grand = DVector::zeros(p);
        let mut total = 0usize;
        let mut rows = DMatrix::zeros(names.len(), p);
        for (a, group) in phrase_embeddings.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::Validation(format!("attribute `{}` has no phrases", names[a])));
            }
            let mut sum = DVector::zeros(p);
            for v in group {
                check_dim(p, v.len())?;
                sum += v;
            }
            grand += &sum;
            total += group.len();
            rows.row_mut(a).copy_from(&(sum / group.len() as f64).transpose());
        }
        grand /= total as f64;
        for mut row in rows.row_iter_mut() {
            row -= grand.transpose();
        }
        Ok(Self {
            v: rows,
            names,
            provider_id: provider_id.into(),
        })
    }
}

/// Embeds every phrase with `embedder` (the same provider used for
/// treatments) and builds V.
pub fn build_dictionary(embedder: &Embedder, lexicon: &AttributeLexicon) -> Result<AttributeDictionary> {
    let mut groups = Vec::with_capacity(lexicon.len());
    for a in &lexicon.attributes {
        let phrases: Vec<String> = a
            .phrases
            .iter()
            .filter(|p| !p.trim().is_empty())
            .cloned()
            .collect();
        let vs = embedder.embed_batch(&phrases)?;
        groups.push(vs.into_iter().map(|v| v.values).collect::<Vec<_>>());
    }
    AttributeDictionary::from_phrase_embeddings(lexicon.names(), &groups, embedder.provider_id())
}

/// s = V·φ for a centered treatment embedding φ.
pub fn attribute_scores(dict: &AttributeDictionary, phi: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(dict.p(), phi.len())?;
    Ok(&dict.v * phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{FileProvider, HashProvider};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn dv(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn lexicon_loading() {
        let json = r#"[{"name":"a","description":"A","phrases":["x","y","z"]},
                       {"name":"b","description":"B","phrases":["u","v","w"]}]"#;
        assert_eq!(AttributeLexicon::from_json(json).unwrap().len(), 2);

        let dup = r#"[{"name":"a","description":"","phrases":["x"]},{"name":"a","description":"","phrases":["y"]}]"#;
        let err = AttributeLexicon::from_json(dup).unwrap_err().to_string();
        assert!(err.contains("`a`"), "{err}");

        let empty = r#"[{"name":"a","description":"","phrases":[]}]"#;
        assert!(AttributeLexicon::from_json(empty).is_err());
    }

    #[test]
    fn sample_lexicon_has_reference_attributes() {
        let lex = AttributeLexicon::sample();
        assert!(lex.len() >= 15);
        let action = lex.get("action_oriented").unwrap();
        assert!(action.phrases.iter().any(|p| p == "start now"));
        assert!(action.phrases.iter().any(|p| p == "take action"));
        assert!(action.phrases.iter().any(|p| p == "get started today"));
        let fomo = lex.get("fear_of_missing_out").unwrap();
        for p in ["miss", "trend", "join", "popular"] {
            assert!(fomo.phrases.iter().any(|x| x == p), "{p}");
        }
    }

    #[test]
    fn single_phrase_dictionary_is_zero() {
        let d = AttributeDictionary::from_phrase_embeddings(vec!["a".into()], &[vec![dv(&[1.0, 2.0])]], "t").unwrap();
        assert_eq!(d.v, DMatrix::zeros(1, 2));
    }

    #[test]
    fn symmetric_pair() {
        let e = dv(&[0.5, -1.0, 2.0]);
        let d = AttributeDictionary::from_phrase_embeddings(
            vec!["a".into(), "b".into()],
            &[vec![e.clone()], vec![-e.clone()]],
            "t",
        )
        .unwrap();
        assert_eq!(d.v.row(0).transpose(), e);
        assert_eq!(d.v.row(1).transpose(), -e);
    }

    #[test]
    fn unequal_phrase_counts_match_double_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let counts = [1usize, 3, 5];
        let p = 6;
        let groups: Vec<Vec<DVector<f64>>> = counts
            .iter()
            .map(|&c| (0..c).map(|_| DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0))).collect())
            .collect();
        let d = AttributeDictionary::from_phrase_embeddings(
            vec!["a".into(), "b".into(), "c".into()],
            &groups,
            "t",
        )
        .unwrap();
        let total: usize = counts.iter().sum();
        for a in 0..3 {
            for j in 0..p {
                let mut own = 0.0;
                for v in &groups[a] {
                    own += v[j];
                }
                own /= counts[a] as f64;
                let mut all = 0.0;
                for g in &groups {
                    for v in g {
                        all += v[j];
                    }
                }
                all /= total as f64;
                assert!((d.v[(a, j)] - (own - all)).abs() < 1e-12);
            }
        }
        // phrase-weighted rows sum to zero
        let mut acc = DVector::zeros(p);
        for a in 0..3 {
            acc += d.v.row(a).transpose() * counts[a] as f64;
        }
        assert!(acc.amax() < 1e-8);
    }

    #[test]
    fn build_from_provider_is_reproducible() {
        let lex = AttributeLexicon::sample();
        let e1 = Embedder::uncached(Arc::new(HashProvider::new(16, 3)));
        let e2 = Embedder::uncached(Arc::new(HashProvider::new(16, 3)));
        let d1 = build_dictionary(&e1, &lex).unwrap();
        let d2 = build_dictionary(&e2, &lex).unwrap();
        assert_eq!(d1.m(), lex.len());
        assert_eq!(d1.p(), 16);
        assert!(d1.v.iter().zip(d2.v.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn missing_phrase_embedding_propagates() {
        let lex = AttributeLexicon::from_json(r#"[{"name":"a","description":"","phrases":["known","unknown"]}]"#).unwrap();
        let e = Embedder::uncached(Arc::new(FileProvider::from_pairs(vec![("known".into(), vec![1.0])], "f")));
        assert!(matches!(build_dictionary(&e, &lex), Err(Error::MissingEmbedding(_))));
    }

    #[test]
    fn scores_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let v = DMatrix::from_fn(4, 9, |_, _| rng.random_range(-1.0..1.0));
        let d = AttributeDictionary { v: v.clone(), names: (0..4).map(|i| i.to_string()).collect(), provider_id: "t".into() };
        assert_eq!(attribute_scores(&d, &DVector::zeros(9)).unwrap(), DVector::zeros(4));

        let phi = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
        let s = attribute_scores(&d, &phi).unwrap();
        for a in 0..4 {
            let mut acc = 0.0;
            for j in 0..9 {
                acc += v[(a, j)] * phi[j];
            }
            assert!((s[a] - acc).abs() < 1e-12);
        }

        // orthonormal rows: scoring row j gives e_j
        let q = DMatrix::from_fn(9, 9, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let ortho = AttributeDictionary { v: q.rows(0, 3).into_owned(), names: vec!["a".into(), "b".into(), "c".into()], provider_id: "t".into() };
        let s = attribute_scores(&ortho, &ortho.v.row(1).transpose()).unwrap();
        assert!((s - dv(&[0.0, 1.0, 0.0])).amax() < 1e-12);

        assert!(attribute_scores(&d, &DVector::zeros(3)).is_err());

        // linear in φ
        let phi2 = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
        let lhs = attribute_scores(&d, &(&phi * 2.0 - &phi2)).unwrap();
        let rhs = attribute_scores(&d, &phi).unwrap() * 2.0 - attribute_scores(&d, &phi2).unwrap();
        assert!((lhs - rhs).amax() < 1e-12);
    }
}
