//! Class prototypes and nearest-prototype classification.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::schedule::AggregateMode;
use crate::vector::{dot, narrow, normalize_wide, FeatureVector};

/// Mean of a class's generated-image features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_id: String,
    pub feature: FeatureVector,
    /// Number of sources that went into the mean.
    pub source_count: usize,
    /// Indices into the candidate source list that were left out.
    pub excluded_sources: BTreeSet<usize>,
}

/// Averages the non-excluded `sources` in input order.
pub fn build_prototype(
    class_id: &str,
    sources: &[FeatureVector],
    excluded: &BTreeSet<usize>,
    mode: AggregateMode,
) -> Result<ClassPrototype> {
    let included: Vec<&FeatureVector> = sources
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(i))
        .map(|(_, f)| f)
        .collect();
    let Some(first) = included.first() else {
        return Err(CoreError::EmptyPrototype {
            class_id: class_id.to_owned(),
        });
    };
    let d = first.dim();
    let mut acc = vec![0.0f64; d];
    for f in &included {
        f.check_dim(d)?;
        for (a, &v) in acc.iter_mut().zip(f.as_slice()) {
            *a += f64::from(v);
        }
    }
    let count = included.len() as f64;
    acc.iter_mut().for_each(|a| *a /= count);
    let feature = match mode {
        AggregateMode::Renormalize => normalize_wide(&acc).map_err(|_| {
            CoreError::domain(format!("prototype for class `{class_id}` has zero norm"))
        })?,
        AggregateMode::Raw => narrow(&acc)?,
    };
    Ok(ClassPrototype {
        class_id: class_id.to_owned(),
        feature,
        source_count: included.len(),
        excluded_sources: excluded
            .iter()
            .copied()
            .filter(|&i| i < sources.len())
            .collect(),
    })
}

/// Dense test-image × class score matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: Vec<String>, cols: Vec<String>, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != rows.len() * cols.len() {
            return Err(CoreError::LengthMismatch {
                expected: rows.len() * cols.len(),
                actual: scores.len(),
            });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(CoreError::domain("score matrix has non-finite entries"));
        }
        Ok(Self { rows, cols, scores })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.cols.len() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let n = self.cols.len();
        &self.scores[row * n..(row + 1) * n]
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    /// SHA-256 over ids and the little-endian score bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for id in self.rows.iter().chain(&self.cols) {
            h.update((id.len() as u64).to_le_bytes());
            h.update(id.as_bytes());
        }
        for s in &self.scores {
            h.update(s.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Inner product of every test feature with every prototype. Rows are scored in parallel.
pub fn score_all(
    test_ids: &[String],
    test_features: &[FeatureVector],
    prototypes: &[ClassPrototype],
) -> Result<ScoreMatrix> {
    if test_ids.len() != test_features.len() {
        return Err(CoreError::LengthMismatch {
            expected: test_ids.len(),
            actual: test_features.len(),
        });
    }
    let Some(first) = prototypes.first() else {
        return Err(CoreError::domain("scoring needs at least one prototype"));
    };
    let d = first.feature.dim();
    for p in prototypes {
        p.feature.check_dim(d)?;
    }
    for t in test_features {
        t.check_dim(d)?;
    }
    let scores: Vec<f64> = test_features
        .par_iter()
        .flat_map_iter(|t| {
            prototypes
                .iter()
                .map(move |p| dot(t.as_slice(), p.feature.as_slice()))
        })
        .collect();
    ScoreMatrix::new(
        test_ids.to_vec(),
        prototypes.iter().map(|p| p.class_id.clone()).collect(),
        scores,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub test_image_id: String,
    pub predicted_class: String,
    pub score: f64,
    /// Second-best class and `score - runner_up_score`; absent with a single class.
    pub runner_up: Option<(String, f64)>,
}

impl Prediction {
    pub fn margin(&self) -> Option<f64> {
        self.runner_up.as_ref().map(|(_, m)| *m)
    }
}

fn beats(score: f64, class: &str, best_score: f64, best_class: &str) -> bool {
    score > best_score || (score == best_score && class < best_class)
}

/// Row-wise argmax. Equal scores go to the lexicographically smallest class id.
pub fn predict(scores: &ScoreMatrix) -> Vec<Prediction> {
    (0..scores.n_rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best: Option<usize> = None;
            let mut second: Option<usize> = None;
            for (c, &s) in row.iter().enumerate() {
                let class = &scores.cols[c];
                match best {
                    Some(b) if !beats(s, class, row[b], &scores.cols[b]) => {
                        if second.is_none_or(|sc| beats(s, class, row[sc], &scores.cols[sc])) {
                            second = Some(c);
                        }
                    }
                    _ => {
                        second = best;
                        best = Some(c);
                    }
                }
            }
            let best = best.expect("score matrix has at least one column");
            Prediction {
                test_image_id: scores.rows[r].clone(),
                predicted_class: scores.cols[best].clone(),
                score: row[best],
                runner_up: second.map(|s| (scores.cols[s].clone(), row[best] - row[s])),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Fraction of correctly classified test images.
    pub overall: f64,
    /// Unweighted mean of `per_class` over classes with at least one test image.
    pub macro_avg: f64,
    pub per_class: BTreeMap<String, f64>,
    pub n_test: usize,
}

/// Overall, per-class and macro accuracy. `ground_truth` maps test image id to class id.
pub fn accuracy(predictions: &[Prediction], ground_truth: &HashMap<String, String>) -> Result<Accuracy> {
    if predictions.is_empty() {
        return Err(CoreError::domain("accuracy over an empty prediction set"));
    }
    let mut per_class: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut correct = 0usize;
    for p in predictions {
        let truth = ground_truth.get(&p.test_image_id).ok_or_else(|| {
            CoreError::domain(format!("no ground-truth label for `{}`", p.test_image_id))
        })?;
        let hit = usize::from(*truth == p.predicted_class);
        correct += hit;
        let entry = per_class.entry(truth.as_str()).or_default();
        entry.0 += hit;
        entry.1 += 1;
    }
    let per_class: BTreeMap<String, f64> = per_class
        .into_iter()
        .map(|(c, (hit, n))| (c.to_owned(), hit as f64 / n as f64))
        .collect();
    let macro_avg = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(Accuracy {
        overall: correct as f64 / predictions.len() as f64,
        macro_avg,
        per_class,
        n_test: predictions.len(),
    })
}
