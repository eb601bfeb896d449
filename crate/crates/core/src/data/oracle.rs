//! Nearest-prototype retrieval on synthetic corpora.
//!
//! Knowing the hidden prototypes and text map, the oracle decodes the query's
//! target prototype, labels every frame by its nearest prototype, and returns
//! the maximum-sum run of frames where `+1` marks a target frame and `-1`
//! any other. It bounds what a learned model can reach on the same data.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::corpus::Corpus;
use super::synthetic::SyntheticCorpus;
use crate::spans::Span;

pub struct PrototypeOracle {
    prototypes: Array2<f64>,
    query_images: Array2<f64>,
}

fn nearest(rows: &Array2<f64>, x: ArrayView1<f64>) -> usize {
    rows.outer_iter()
        .map(|r| {
            let d = &r - &x;
            d.dot(&d)
        })
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, d)| if d < best.1 { (i, d) } else { best })
        .0
}

impl PrototypeOracle {
    pub fn new(synthetic: &SyntheticCorpus) -> Self {
        PrototypeOracle {
            prototypes: synthetic.prototypes.clone(),
            query_images: synthetic.prototypes.dot(&synthetic.text_map),
        }
    }

    /// Target prototype decoded from the sum of the valid query tokens.
    pub fn decode_query(&self, corpus: &Corpus, i: usize) -> usize {
        let q = corpus.query_features(i);
        let mut sum = Array1::zeros(q.values.ncols());
        for (row, &ok) in q.values.outer_iter().zip(&q.mask) {
            if ok {
                sum += &row;
            }
        }
        nearest(&self.query_images, sum.view())
    }

    /// Nearest prototype of every valid frame.
    pub fn classify_frames(&self, corpus: &Corpus, i: usize) -> Vec<usize> {
        let v = corpus.frame_features(i);
        v.values
            .axis_iter(Axis(0))
            .take(corpus.samples[i].video_len)
            .map(|row| nearest(&self.prototypes, row))
            .collect()
    }

    pub fn retrieve(&self, corpus: &Corpus, i: usize) -> Span {
        let target = self.decode_query(corpus, i);
        let classes = self.classify_frames(corpus, i);
        let n = classes.len();
        let (mut best, mut best_range) = (f64::NEG_INFINITY, (0, 0));
        let (mut run, mut run_start) = (0.0, 0);
        for (f, &c) in classes.iter().enumerate() {
            if run <= 0.0 {
                run = 0.0;
                run_start = f;
            }
            run += if c == target { 1.0 } else { -1.0 };
            if run > best {
                best = run;
                best_range = (run_start, f);
            }
        }
        let (a, b) = best_range;
        Span::new((a + b + 1) as f64 / (2.0 * n as f64), (b + 1 - a) as f64 / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::SimilarityLabels;
    use crate::data::synthetic::{generate_corpus, SyntheticConfig};
    use crate::spans::iou;

    #[test]
    fn recovers_planted_structure_at_default_noise() {
        let cfg = SyntheticConfig {
            n_samples: 300,
            n_test_samples: 0,
            seed: 11,
            ..SyntheticConfig::default()
        };
        let g = generate_corpus(&cfg).unwrap();
        let oracle = PrototypeOracle::new(&g);
        let (mut correct, mut total, mut hits) = (0usize, 0usize, 0usize);
        for i in 0..g.corpus.len() {
            assert_eq!(oracle.decode_query(&g.corpus, i), g.targets[i]);
            let ann = &g.corpus.samples[i].annotation;
            let labels = SimilarityLabels::from_spans(&ann.gt, &vec![true; cfg.n_frames]);
            for (c, &inside) in oracle.classify_frames(&g.corpus, i).iter().zip(&labels.y) {
                correct += usize::from((*c == g.targets[i]) == inside);
                total += 1;
            }
            hits += usize::from(iou(&oracle.retrieve(&g.corpus, i), &ann.gt[0]) > 0.5);
        }
        assert!(correct as f64 / total as f64 >= 0.95);
        assert!(hits as f64 / g.corpus.len() as f64 >= 0.95);
    }
}
