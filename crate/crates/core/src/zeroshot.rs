//! Nearest-caption labelling.
//!
//! Rows of both matrices are unit-norm, so cosine similarity is a dot
//! product. The frozen model's logit scale is a positive rescaling and does
//! not change the argmax, so it is not modelled.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataio::{CaptionSet, EmbeddingDataset};
use crate::error::{Error, Result};

/// Hard zero-shot labels for a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub hard_labels: Vec<f64>,
    pub assigned_index: Vec<usize>,
    #[serde(skip)]
    pub similarity: Option<Array2<f64>>,
}

impl ZeroShotResult {
    pub fn len(&self) -> usize {
        self.assigned_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assigned_index.is_empty()
    }
}

/// Assigns every row to its most similar caption; ties go to the lowest index.
pub fn assign(dataset: &EmbeddingDataset, captions: &CaptionSet) -> Result<ZeroShotResult> {
    assign_impl(dataset, captions, false)
}

/// Like [`assign`], also keeping the full `n x m` similarity matrix.
pub fn assign_with_similarity(dataset: &EmbeddingDataset, captions: &CaptionSet) -> Result<ZeroShotResult> {
    assign_impl(dataset, captions, true)
}

fn assign_impl(dataset: &EmbeddingDataset, captions: &CaptionSet, keep: bool) -> Result<ZeroShotResult> {
    if dataset.dim() != captions.dim() {
        return Err(Error::Shape(format!(
            "dataset has dimension {} but captions have dimension {}",
            dataset.dim(),
            captions.dim()
        )));
    }
    let sim = dataset.embeddings().dot(&captions.embeddings().t());
    let assigned_index: Vec<usize> = sim
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &s) in row.iter().enumerate().skip(1) {
                if s > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let hard_labels = assigned_index.iter().map(|&j| captions.values()[j]).collect();
    Ok(ZeroShotResult {
        hard_labels,
        assigned_index,
        similarity: keep.then_some(sim),
    })
}

/// Fraction of samples assigned to each caption.
pub fn predicted_histogram(result: &ZeroShotResult, captions: &CaptionSet) -> Result<Vec<f64>> {
    index_histogram(&result.assigned_index, captions.len())
}

pub(crate) fn index_histogram(indices: &[usize], m: usize) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hist = vec![0.0; m];
    for &j in indices {
        if j >= m {
            return Err(Error::Shape(format!("caption index {j} out of range for {m} captions")));
        }
        hist[j] += 1.0;
    }
    let n = indices.len() as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    Ok(hist)
}
