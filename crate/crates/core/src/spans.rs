//! Geometry of normalized 1-D temporal spans.
//!
//! Spans are stored as `(center, width)` fractions of the video duration.
//! The `(start, end)` form only shows up at I/O and metric boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest width used in any overlap computation.
pub const MIN_WIDTH: f64 = 1e-6;

/// Default diffusion-domain scale.
pub const DEFAULT_SCALE: f64 = 2.0;

const BOUNDS_TOL: f64 = 1e-12;

/// A temporal segment as normalized `(center, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub center: f64,
    pub width: f64,
}

/// A span mapped into the diffusion domain `[-scale, scale]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledSpan {
    pub center: f64,
    pub width: f64,
}

impl Span {
    /// Builds a span without validation. Predictions and intermediate
    /// diffusion states use this.
    pub const fn new(center: f64, width: f64) -> Self {
        Span { center, width }
    }

    /// Builds a ground-truth span, checking that it lies inside the video.
    pub fn ground_truth(center: f64, width: f64) -> Result<Self> {
        let span = Span { center, width };
        span.validate()?;
        Ok(span)
    }

    /// Inverse of [`Span::interval`].
    pub fn from_interval(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) {
            return Err(Error::InvalidSpan(format!("non-finite interval [{start}, {end}]")));
        }
        if end < start {
            return Err(Error::InvalidSpan(format!("end {end} precedes start {start}")));
        }
        Ok(Span {
            center: (start + end) / 2.0,
            width: end - start,
        })
    }

    /// Checks the ground-truth invariants: finite, width at least
    /// [`MIN_WIDTH`], interval inside `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let (start, end) = self.interval();
        if !(self.center.is_finite() && self.width.is_finite()) {
            return Err(Error::InvalidSpan(format!("non-finite span {self:?}")));
        }
        if self.width < MIN_WIDTH {
            return Err(Error::InvalidSpan(format!(
                "width {} below minimum {MIN_WIDTH}",
                self.width
            )));
        }
        if start < -BOUNDS_TOL || end > 1.0 + BOUNDS_TOL {
            return Err(Error::InvalidSpan(format!(
                "interval [{start}, {end}] leaves the video"
            )));
        }
        Ok(())
    }

    /// `(start, end)` with `start = center - width/2`, `end = center + width/2`.
    pub fn interval(&self) -> (f64, f64) {
        let half = self.width / 2.0;
        (self.center - half, self.center + half)
    }

    pub fn start(&self) -> f64 {
        self.interval().0
    }

    pub fn end(&self) -> f64 {
        self.interval().1
    }

    /// Clips the derived interval to the video extent `[0, 1]`.
    pub fn clamp_to_video(&self) -> Span {
        let (start, end) = self.interval();
        let start = start.clamp(0.0, 1.0);
        let end = end.clamp(0.0, 1.0);
        Span {
            center: (start + end) / 2.0,
            width: end - start,
        }
    }

    /// Width with the [`MIN_WIDTH`] floor applied.
    fn floored(&self) -> Span {
        Span {
            center: self.center,
            width: self.width.max(MIN_WIDTH),
        }
    }
}

/// Maps a `[0, 1]` value to `(2x - 1) * scale`.
pub fn scale_up_value(x: f64, scale: f64) -> f64 {
    (2.0 * x - 1.0) * scale
}

/// Clamps to `[-scale, scale]`, then maps to `(y / scale + 1) / 2`.
pub fn scale_down_value(y: f64, scale: f64) -> f64 {
    unscale_raw_value(y.clamp(-scale, scale), scale)
}

/// The unclamped inverse of [`scale_up_value`].
pub fn unscale_raw_value(y: f64, scale: f64) -> f64 {
    (y / scale + 1.0) / 2.0
}

pub fn scale_up(span: Span, scale: f64) -> ScaledSpan {
    ScaledSpan {
        center: scale_up_value(span.center, scale),
        width: scale_up_value(span.width, scale),
    }
}

/// Clamped map back to `[0, 1]`.
pub fn scale_down(scaled: ScaledSpan, scale: f64) -> Span {
    Span {
        center: scale_down_value(scaled.center, scale),
        width: scale_down_value(scaled.width, scale),
    }
}

/// Unclamped map back; results may leave `[0, 1]`.
pub fn unscale_raw(scaled: ScaledSpan, scale: f64) -> Span {
    Span {
        center: unscale_raw_value(scaled.center, scale),
        width: unscale_raw_value(scaled.width, scale),
    }
}

impl ScaledSpan {
    pub fn clamp(&self, scale: f64) -> ScaledSpan {
        ScaledSpan {
            center: self.center.clamp(-scale, scale),
            width: self.width.clamp(-scale, scale),
        }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.center, self.width]
    }

    pub fn from_array(v: [f64; 2]) -> Self {
        ScaledSpan {
            center: v[0],
            width: v[1],
        }
    }
}

struct Overlap {
    inter: f64,
    union: f64,
    hull: f64,
}

fn overlap(a: &Span, b: &Span) -> Overlap {
    let (a, b) = (a.floored(), b.floored());
    let (sa, ea) = a.interval();
    let (sb, eb) = b.interval();
    let inter = (ea.min(eb) - sa.max(sb)).max(0.0);
    let hull = ea.max(eb) - sa.min(sb);
    // Overlapping 1-D intervals have a union equal to their hull.
    let union = if inter > 0.0 { hull } else { a.width + b.width };
    Overlap { inter, union, hull }
}

/// Intersection over union of two spans, in `[0, 1]`.
pub fn iou(a: &Span, b: &Span) -> f64 {
    let o = overlap(a, b);
    o.inter / o.union
}

/// `1 - gIoU`, in `[0, 2]`.
pub fn giou_loss(a: &Span, b: &Span) -> f64 {
    let o = overlap(a, b);
    let giou = o.inter / o.union - (o.hull - o.union) / o.hull;
    1.0 - giou
}

/// [`giou_loss`] and its gradient with respect to `pred`'s `(center, width)`.
///
/// At kinks (coincident endpoints) the one-sided derivative that treats
/// `pred`'s endpoint as the active one is returned.
pub fn giou_loss_with_grad(pred: &Span, target: &Span) -> (f64, [f64; 2]) {
    let p = pred.floored();
    let t = target.floored();
    let (sp, ep) = p.interval();
    let (st, et) = t.interval();

    let raw_inter = ep.min(et) - sp.max(st);
    let inter = raw_inter.max(0.0);
    let union = p.width + t.width - inter;
    let hull = ep.max(et) - sp.min(st);
    let loss = giou_loss(pred, target);

    // Partial derivatives with respect to the predicted start and end.
    let active = raw_inter > 0.0;
    let d_inter_e = if active && ep <= et { 1.0 } else { 0.0 };
    let d_inter_s = if active && sp >= st { -1.0 } else { 0.0 };
    let d_union_e = 1.0 - d_inter_e;
    let d_union_s = -1.0 - d_inter_s;
    let d_hull_e = if ep >= et { 1.0 } else { 0.0 };
    let d_hull_s = if sp <= st { -1.0 } else { 0.0 };

    let grad_endpoint = |d_inter: f64, d_union: f64, d_hull: f64| {
        let d_iou = (d_inter * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * hull - union * d_hull) / (hull * hull);
        -d_iou - d_ratio
    };
    let g_e = grad_endpoint(d_inter_e, d_union_e, d_hull_e);
    let g_s = grad_endpoint(d_inter_s, d_union_s, d_hull_s);

    let d_center = g_s + g_e;
    let d_width = if pred.width >= MIN_WIDTH {
        (g_e - g_s) / 2.0
    } else {
        0.0
    };
    (loss, [d_center, d_width])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(s: f64, e: f64) -> Span {
        Span::from_interval(s, e).unwrap()
    }

    #[test]
    fn interval_conversion() {
        assert_eq!(Span::new(0.5, 1.0).interval(), (0.0, 1.0));
        let (s, e) = Span::new(0.3, 0.2).interval();
        assert!((s - 0.2).abs() < 1e-15 && (e - 0.4).abs() < 1e-15);
        let back = Span::from_interval(0.2, 0.4).unwrap();
        assert!((back.center - 0.3).abs() < 1e-15);
        assert!((back.width - 0.2).abs() < 1e-15);
        assert!(Span::from_interval(0.5, 0.4).is_err());
    }

    #[test]
    fn ground_truth_validation() {
        assert!(Span::ground_truth(0.5, 1.0).is_ok());
        assert!(Span::ground_truth(0.05, 0.2).is_err());
        assert!(Span::ground_truth(0.5, 0.0).is_err());
        assert!(Span::ground_truth(f64::NAN, 0.1).is_err());
    }

    #[test]
    fn scaling_examples() {
        assert_eq!(scale_up_value(0.5, 2.0), 0.0);
        assert_eq!(scale_up_value(1.0, 2.0), 2.0);
        assert_eq!(scale_up_value(0.25, 2.0), -1.0);
        assert_eq!(scale_down_value(0.0, 2.0), 0.5);
        assert_eq!(scale_down_value(3.0, 2.0), 1.0);
        assert_eq!(scale_down_value(-2.0, 2.0), 0.0);
        assert_eq!(unscale_raw_value(3.0, 2.0), 1.25);
    }

    #[test]
    fn iou_examples() {
        let a = iv(0.2, 0.4);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&iv(0.0, 0.2), &iv(0.8, 1.0)), 0.0);
        assert!((iou(&a, &iv(0.3, 0.6)) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn giou_examples() {
        let a = iv(0.2, 0.4);
        assert_eq!(giou_loss(&a, &a), 0.0);
        assert!((giou_loss(&iv(0.0, 0.2), &iv(0.8, 1.0)) - 1.6).abs() < 1e-12);
        assert!((giou_loss(&a, &iv(0.3, 0.6)) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_width_does_not_divide_by_zero() {
        let p = Span::new(0.5, 0.0);
        assert!((iou(&p, &p) - 1.0).abs() < 1e-9);
        assert!(giou_loss(&p, &Span::new(0.1, 0.0)).is_finite());
    }

    #[test]
    fn clamp_to_video_clips_interval() {
        let s = Span::new(0.95, 0.3).clamp_to_video();
        assert!((s.start() - 0.8).abs() < 1e-12);
        assert!((s.end() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn giou_grad_matches_finite_differences() {
        let cases = [
            (Span::new(0.35, 0.2), Span::new(0.3, 0.2)),
            (Span::new(0.2, 0.1), Span::new(0.7, 0.3)),
            (Span::new(0.5, 0.6), Span::new(0.45, 0.2)),
            (Span::new(0.61, 0.13), Span::new(0.4, 0.37)),
        ];
        let h = 1e-6;
        for (p, t) in cases {
            let (_, g) = giou_loss_with_grad(&p, &t);
            let fd_c = (giou_loss(&Span::new(p.center + h, p.width), &t)
                - giou_loss(&Span::new(p.center - h, p.width), &t))
                / (2.0 * h);
            let fd_w = (giou_loss(&Span::new(p.center, p.width + h), &t)
                - giou_loss(&Span::new(p.center, p.width - h), &t))
                / (2.0 * h);
            assert!((g[0] - fd_c).abs() < 1e-6, "{p:?} {t:?}: {} vs {fd_c}", g[0]);
            assert!((g[1] - fd_w).abs() < 1e-6, "{p:?} {t:?}: {} vs {fd_w}", g[1]);
        }
    }
}
