//! Training targets, set matching and the denoising loss.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{NoisySpanSet, PredictionSet};
use crate::diffusion::{q_sample, NoiseDraw, NoiseSchedule};
use crate::error::{Error, Result};
use crate::spans::{giou_loss, giou_loss_with_grad, scale_down, scale_up, ScaledSpan, Span};
use crate::tape::sigmoid;

/// Weights of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_iou: f64,
    pub lambda_ce: f64,
    pub lambda_sim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_l1: 10.0,
            lambda_iou: 1.0,
            lambda_ce: 4.0,
            lambda_sim: 4.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_l1, self.lambda_iou, self.lambda_ce, self.lambda_sim];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Assignment of every ground truth to a distinct prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// `(gt_index, pred_index)` in increasing ground-truth order.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_pred: Vec<usize>,
}

/// Noised ground truth padded with pure-noise spans, in random order.
///
/// Ground-truth spans are scaled to `[-scale, scale]`, noised at intensity
/// `m`, clamped and mapped back to `[0, 1]`. Remaining slots are standard
/// normal draws in the scaled domain, clamped the same way.
pub fn pad_inputs<R: Rng + ?Sized>(
    gt: &[Span],
    n_spans: usize,
    m: usize,
    schedule: &NoiseSchedule,
    scale: f64,
    rng: &mut R,
) -> Result<NoisySpanSet> {
    if gt.is_empty() {
        return Err(Error::InvalidArgument("need at least one ground-truth span".into()));
    }
    if gt.len() > n_spans {
        return Err(Error::TooManyTargets {
            rows: gt.len(),
            cols: n_spans,
        });
    }
    let mut spans = Vec::with_capacity(n_spans);
    for s in gt {
        let noised = q_sample(scale_up(*s, scale), m, schedule, NoiseDraw::sample(rng))?;
        spans.push(scale_down(noised, scale));
    }
    while spans.len() < n_spans {
        let eps = NoiseDraw::sample(rng);
        spans.push(scale_down(
            ScaledSpan {
                center: eps.center,
                width: eps.width,
            },
            scale,
        ));
    }
    spans.shuffle(rng);
    Ok(NoisySpanSet { spans, intensity: m })
}

/// Matching cost of one prediction against one ground truth.
pub fn match_cost(pred: &Span, confidence_logit: f64, gt: &Span, w: &LossWeights) -> f64 {
    let l1 = (pred.center - gt.center).abs() + (pred.width - gt.width).abs();
    w.lambda_l1 * l1 + w.lambda_iou * giou_loss(pred, gt) - w.lambda_ce * sigmoid(confidence_logit)
}

/// `K × N_r` cost matrix of every ground truth against every prediction.
pub fn cost_matrix(preds: &PredictionSet, gts: &[Span], w: &LossWeights) -> Array2<f64> {
    Array2::from_shape_fn((gts.len(), preds.len()), |(i, j)| {
        match_cost(&preds.spans[j], preds.confidence[j], &gts[i], w)
    })
}

/// Optimal assignment of `rows` to distinct `cols` (rows ≤ cols), as the
/// column chosen for each row and the total cost summed in row order.
fn solve_assignment(costs: &Array2<f64>, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    let m = cols.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let a = |i: usize, j: usize| costs[[rows[i - 1], cols[j - 1]]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut choice = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            choice[p[j] - 1] = cols[j - 1];
        }
    }
    let total = choice
        .iter()
        .enumerate()
        .map(|(i, &c)| costs[[rows[i], c]])
        .sum();
    (total, choice)
}

/// Minimum-cost assignment of every ground-truth row to a distinct
/// prediction column.
///
/// Among optimal assignments the one whose column sequence (in row order)
/// is lexicographically smallest is returned.
pub fn hungarian_match(costs: &Array2<f64>) -> Result<MatchResult> {
    let (k, n) = costs.dim();
    if k > n {
        return Err(Error::TooManyTargets { rows: k, cols: n });
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("matching costs must be finite".into()));
    }
    let all_rows: Vec<usize> = (0..k).collect();
    let mut free: Vec<usize> = (0..n).collect();
    let (optimum, _) = solve_assignment(costs, &all_rows, &free);
    let tol = 1e-9 * (1.0 + optimum.abs());

    let mut pairs = Vec::with_capacity(k);
    let mut fixed = 0.0;
    for i in 0..k {
        let rest_rows: Vec<usize> = (i + 1..k).collect();
        let mut chosen = None;
        for (slot, &j) in free.iter().enumerate() {
            let rest_cols: Vec<usize> = free.iter().copied().filter(|&c| c != j).collect();
            let (rest, _) = solve_assignment(costs, &rest_rows, &rest_cols);
            if fixed + costs[[i, j]] + rest <= optimum + tol {
                chosen = Some(slot);
                break;
            }
        }
        // The optimum is always reachable, so some column qualifies.
        let slot = chosen.expect("optimal completion exists");
        let j = free.remove(slot);
        fixed += costs[[i, j]];
        pairs.push((i, j));
    }
    Ok(MatchResult {
        pairs,
        unmatched_pred: free,
    })
}

/// Value of the denoising loss with gradients for every prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct VmrLoss {
    pub value: f64,
    pub l1: f64,
    pub giou: f64,
    pub ce: f64,
    /// `d value / d (center, width)` per prediction.
    pub span_grad: Vec<[f64; 2]>,
    /// `d value / d logit` per prediction.
    pub confidence_grad: Vec<f64>,
    pub matching: MatchResult,
}

fn bce_with_logit(z: f64, label: f64) -> f64 {
    z.max(0.0) - label * z + (-z.abs()).exp().ln_1p()
}

/// Matched L1 and gIoU terms plus binary cross entropy on every
/// confidence (label 1 for matched predictions), weighted and divided by
/// the number of ground-truth spans.
pub fn vmr_loss(preds: &PredictionSet, gts: &[Span], w: &LossWeights) -> Result<VmrLoss> {
    if gts.is_empty() {
        return Err(Error::InvalidArgument("need at least one ground-truth span".into()));
    }
    if preds.spans.len() != preds.confidence.len() {
        return Err(Error::Shape("one confidence per predicted span".into()));
    }
    let matching = hungarian_match(&cost_matrix(preds, gts, w))?;
    let norm = 1.0 / gts.len() as f64;
    let n = preds.len();
    let mut span_grad = vec![[0.0; 2]; n];
    let mut confidence_grad = vec![0.0; n];
    let mut labels = vec![0.0; n];
    let (mut l1, mut giou) = (0.0, 0.0);
    for &(g, p) in &matching.pairs {
        let pred = &preds.spans[p];
        let gt = &gts[g];
        let dc = pred.center - gt.center;
        let dw = pred.width - gt.width;
        l1 += dc.abs() + dw.abs();
        let (gl, gg) = giou_loss_with_grad(pred, gt);
        giou += gl;
        span_grad[p][0] += norm * (w.lambda_l1 * dc.signum() + w.lambda_iou * gg[0]);
        span_grad[p][1] += norm * (w.lambda_l1 * dw.signum() + w.lambda_iou * gg[1]);
        labels[p] = 1.0;
    }
    let mut ce = 0.0;
    for (i, &z) in preds.confidence.iter().enumerate() {
        ce += bce_with_logit(z, labels[i]);
        confidence_grad[i] = norm * w.lambda_ce * (sigmoid(z) - labels[i]);
    }
    let value = norm * (w.lambda_l1 * l1 + w.lambda_iou * giou + w.lambda_ce * ce);
    Ok(VmrLoss {
        value,
        l1: l1 * norm,
        giou: giou * norm,
        ce: ce * norm,
        span_grad,
        confidence_grad,
        matching,
    })
}

/// `lambda_sim · sim + vmr`.
pub fn total_loss(sim: f64, vmr: f64, w: &LossWeights) -> f64 {
    w.lambda_sim * sim + vmr
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DEFAULT_COSINE_OFFSET;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn pad_boundaries() {
        let sched = NoiseSchedule::cosine(100, DEFAULT_COSINE_OFFSET).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = vec![Span::new(0.3, 0.2), Span::new(0.7, 0.1)];
        let out = pad_inputs(&gt, 2, 50, &sched, 2.0, &mut rng).unwrap();
        assert_eq!(out.spans.len(), 2);
        assert!(pad_inputs(&gt, 1, 50, &sched, 2.0, &mut rng).is_err());
        assert!(pad_inputs(&[], 3, 50, &sched, 2.0, &mut rng).is_err());
    }

    #[test]
    fn pad_without_noise_keeps_ground_truth() {
        let clean = NoiseSchedule::from_alpha_bars(vec![1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = Span::new(0.3, 0.2);
        let out = pad_inputs(&[gt], 5, 1, &clean, 2.0, &mut rng).unwrap();
        let hit = out
            .spans
            .iter()
            .any(|s| (s.center - gt.center).abs() < 1e-12 && (s.width - gt.width).abs() < 1e-12);
        assert!(hit);
    }

    #[test]
    fn pad_outputs_stay_in_unit_range() {
        let sched = NoiseSchedule::cosine(1000, DEFAULT_COSINE_OFFSET).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let w = rng.random_range(0.01..1.0);
            let c = rng.random_range(w / 2.0..=1.0 - w / 2.0);
            let m = rng.random_range(1..=1000);
            let out = pad_inputs(&[Span::new(c, w)], 5, m, &sched, 2.0, &mut rng).unwrap();
            for s in out.spans {
                assert!((0.0..=1.0).contains(&s.center) && (0.0..=1.0).contains(&s.width));
            }
        }
    }

    #[test]
    fn cost_examples() {
        let w = LossWeights::default();
        let gt = Span::new(0.4, 0.3);
        assert!((match_cost(&gt, 50.0, &gt, &w) + 4.0).abs() < 1e-12);
        assert!((match_cost(&gt, 0.0, &gt, &w) + 2.0).abs() < 1e-12);
        // Same overlap geometry shifted further away costs more.
        let near = match_cost(&Span::new(0.45, 0.3), 0.0, &gt, &w);
        let far = match_cost(&Span::new(0.5, 0.3), 0.0, &gt, &w);
        assert!(far > near);
    }

    #[test]
    fn matcher_examples() {
        let one = Array2::from_elem((1, 1), 3.0);
        assert_eq!(hungarian_match(&one).unwrap().pairs, vec![(0, 0)]);
        let two = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let r = hungarian_match(&two).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert!(r.unmatched_pred.is_empty());
        let wide = Array2::from_shape_vec((1, 3), vec![5.0, 1.0, 1.0]).unwrap();
        let r = hungarian_match(&wide).unwrap();
        assert_eq!(r.pairs, vec![(0, 1)]);
        assert_eq!(r.unmatched_pred, vec![0, 2]);
        assert!(hungarian_match(&Array2::zeros((3, 2))).is_err());
    }

    #[test]
    fn matcher_tie_break_is_lexicographic() {
        let flat = Array2::from_elem((2, 3), 1.0);
        assert_eq!(hungarian_match(&flat).unwrap().pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn vmr_composed_example() {
        let w = LossWeights::default();
        let gt = Span::new(0.3, 0.2);
        let preds = PredictionSet {
            spans: vec![Span::new(0.9, 0.05), Span::new(0.35, 0.2)],
            confidence: vec![0.0, 0.0],
        };
        let loss = vmr_loss(&preds, &[gt], &w).unwrap();
        assert_eq!(loss.matching.pairs, vec![(0, 1)]);
        let expected = 10.0 * (0.05 + 0.0)
            + giou_loss(&Span::new(0.35, 0.2), &gt)
            + 4.0 * (-(0.5f64).ln() - (0.5f64).ln());
        assert!((loss.value - expected).abs() < 1e-12, "{} vs {expected}", loss.value);
    }

    #[test]
    fn vmr_near_perfect_prediction() {
        let w = LossWeights::default();
        let gt = Span::new(0.5, 0.4);
        let preds = PredictionSet {
            spans: vec![gt, Span::new(0.1, 0.1), Span::new(0.8, 0.2)],
            confidence: vec![logit(0.999), logit(0.001), logit(0.001)],
        };
        let loss = vmr_loss(&preds, &[gt], &w).unwrap();
        let expected = 4.0 * (-(0.999f64).ln() - 2.0 * (0.999f64).ln());
        assert!((loss.value - expected).abs() < 1e-9);
        assert!(loss.value < 0.02);
        assert_eq!(loss.l1, 0.0);
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 3.5, &w), 3.5);
        let off = LossWeights {
            lambda_sim: 0.0,
            ..w
        };
        assert_eq!(total_loss(10.0, 3.5, &off), 3.5);
    }
}
