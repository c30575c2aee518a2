//! Fixtures shared by the benchmarks.

use ndarray::{Array2, Array4};
use uvl_core::corpus::{synth_corpus, SynthConfig};
use uvl_core::objectives::{KeySet, Label};
use uvl_core::{Corpus, Vocabulary};

/// Deterministic unit rows without an RNG dependency.
pub fn unit_rows(n: usize, d: usize, salt: u64) -> Array2<f64> {
    let mut a = Array2::from_shape_fn((n, d), |(i, j)| {
        let x = (i as u64 * 2654435761 + j as u64 * 40503 + salt * 97) % 1000;
        x as f64 / 500.0 - 1.0
    });
    for mut r in a.rows_mut() {
        let norm = r.dot(&r).sqrt().max(1e-9);
        r /= norm;
    }
    a
}

/// Batch embeddings, labels and a key set with `bank` extra entries.
pub fn contrastive_inputs(batch: usize, bank: usize, dim: usize) -> (Array2<f64>, Array2<f64>, Vec<Label>, KeySet) {
    let v = unit_rows(batch, dim, 1);
    let w = unit_rows(batch, dim, 2);
    let y: Vec<Label> = (0..batch as u64).map(|i| i % 5).collect();
    let bv = unit_rows(bank, dim, 3);
    let bw = unit_rows(bank, dim, 4);
    let keys = KeySet {
        visual: ndarray::concatenate![ndarray::Axis(0), v, bv],
        text: ndarray::concatenate![ndarray::Axis(0), w, bw],
        labels: y.iter().copied().chain((0..bank as u64).map(|i| i % 7)).collect(),
    };
    (v, w, y, keys)
}

/// Mixed synthetic corpus and its vocabulary.
pub fn corpus(per_class: usize) -> (Corpus, Vocabulary) {
    let c = synth_corpus(&SynthConfig {
        n_classes: 8,
        n_per_class: per_class,
        video_fraction: 0.5,
        ..Default::default()
    })
    .expect("valid synth config");
    let v = c.vocabulary();
    (c, v)
}

pub fn visuals(corpus: &Corpus, video: bool, n: usize) -> Vec<Array4<f64>> {
    corpus
        .triplets
        .iter()
        .filter(|t| (t.visual.shape()[0] > 1) == video)
        .take(n)
        .map(|t| t.visual.clone())
        .collect()
}
