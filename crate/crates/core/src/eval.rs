//! Multi-view evaluation: softmax scores averaged over every crop × clip view.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, ViewsConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub top1: f64,
    pub top5: f64,
    pub per_class: Vec<f64>,
    pub samples: usize,
}

/// Row-wise softmax of `(n, c)` logits, in f64.
pub fn softmax_rows(logits: &Tensor<f32>) -> Vec<Vec<f64>> {
    let c = *logits.shape().last().expect("rank >= 1");
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Mean of per-view softmax scores, summed in view order.
pub fn average_scores(logits: &Tensor<f32>) -> Vec<f64> {
    let rows = softmax_rows(logits);
    let mut mean = vec![0.0; rows[0].len()];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    mean
}

/// Classes ordered by descending score; ties go to the lower index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Averaged scores of every record, evaluated in parallel across records.
/// With `shuffle_seed` the frames of every view are shuffled with a
/// per-record stream derived from it.
pub fn score_dataset(
    model: &Model<f32>,
    dataset: &Dataset,
    views: &ViewsConfig,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Vec<f64>>> {
    dataset
        .records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut clips = data::make_views(rec, views)?;
            if let Some(seed) = shuffle_seed {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                for c in &mut clips {
                    *c = data::shuffle_frames(c, &mut rng)?;
                }
            }
            Ok(average_scores(&model.infer(&data::stack(&clips)?)?))
        })
        .collect()
}

/// Top-1, top-5 and per-class accuracy of the view-averaged predictions.
pub fn evaluate_multiview(
    model: &Model<f32>,
    dataset: &Dataset,
    views: &ViewsConfig,
    shuffle_seed: Option<u64>,
) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    let scores = score_dataset(model, dataset, views, shuffle_seed)?;
    let labels: Vec<usize> = dataset.records.iter().map(|r| r.label).collect();
    Ok(accuracy(&scores, &labels, dataset.num_classes))
}

pub fn accuracy(scores: &[Vec<f64>], labels: &[usize], num_classes: usize) -> EvalResult {
    let (mut top1, mut top5) = (0usize, 0usize);
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (s, &label) in scores.iter().zip(labels) {
        let rank = ranking(s);
        totals[label] += 1;
        if rank[0] == label {
            top1 += 1;
            hits[label] += 1;
        }
        if rank.iter().take(5).any(|&k| k == label) {
            top5 += 1;
        }
    }
    let n = labels.len().max(1) as f64;
    EvalResult {
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect(),
        samples: labels.len(),
    }
}
