//! Noise schedule, forward noising and the DDIM reverse update.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::spans::ScaledSpan;

/// Offset `s` of the cosine schedule.
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;

/// Upper bound applied to every `beta`.
pub const MAX_BETA: f64 = 0.999;

/// Training intensities.
pub const DEFAULT_INTENSITIES: usize = 1000;

/// Per-intensity variance schedule.
///
/// `beta[m - 1]` holds the variance added at intensity `m`; `alpha_bar[m]`
/// is the signal retained after `m` steps, with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: `alpha_bar(m) = f(m) / f(0)` with
    /// `f(m) = cos²(((m / M + s) / (1 + s)) · π/2)`, betas clipped to
    /// [`MAX_BETA`] and `alpha_bar` recomputed as the running product.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(offset > 0.0) {
            return Err(Error::InvalidArgument(format!("cosine offset must be positive, got {offset}")));
        }
        let f = |m: usize| {
            let t = (m as f64 / steps as f64 + offset) / (1.0 + offset);
            let c = (t * std::f64::consts::FRAC_PI_2).cos();
            c * c
        };
        let f0 = f(0);
        let mut beta = Vec::with_capacity(steps);
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut prev_closed = 1.0;
        let mut running = 1.0;
        for m in 1..=steps {
            let closed = f(m) / f0;
            let b = (1.0 - closed / prev_closed).min(MAX_BETA);
            prev_closed = closed;
            running *= 1.0 - b;
            beta.push(b);
            alpha_bar.push(running);
        }
        Ok(NoiseSchedule { beta, alpha_bar })
    }

    /// Total number of intensities `M`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// Variance added at intensity `m` (1-based).
    pub fn beta(&self, m: usize) -> f64 {
        self.beta[m - 1]
    }

    pub fn alpha_bar(&self, m: usize) -> f64 {
        self.alpha_bar[m]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_intensity(&self, m: usize, lo: usize) -> Result<()> {
        if m < lo || m > self.steps() {
            return Err(Error::IntensityOutOfRange {
                m,
                lo,
                hi: self.steps(),
            });
        }
        Ok(())
    }

    /// Test hook: a schedule with arbitrary `alpha_bar` values.
    #[doc(hidden)]
    pub fn from_alpha_bars(alpha_bar: Vec<f64>) -> Self {
        assert!(alpha_bar.len() >= 2 && alpha_bar[0] == 1.0);
        let beta = alpha_bar
            .windows(2)
            .map(|w| 1.0 - w[1] / w[0])
            .collect();
        NoiseSchedule { beta, alpha_bar }
    }
}

/// Standard-normal noise for one span.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseDraw {
    pub center: f64,
    pub width: f64,
}

impl NoiseDraw {
    pub const ZERO: NoiseDraw = NoiseDraw {
        center: 0.0,
        width: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        NoiseDraw {
            center: rng.sample(StandardNormal),
            width: rng.sample(StandardNormal),
        }
    }
}

/// One-shot forward noising `sqrt(ab) * x0 + sqrt(1 - ab) * eps`. The
/// result is not clamped.
pub fn q_sample(x0: ScaledSpan, m: usize, schedule: &NoiseSchedule, eps: NoiseDraw) -> Result<ScaledSpan> {
    schedule.check_intensity(m, 1)?;
    let ab = schedule.alpha_bar(m);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(ScaledSpan {
        center: signal * x0.center + noise * eps.center,
        width: signal * x0.width + noise * eps.width,
    })
}

/// DDIM update from intensity `m` to `m_prev` given the predicted clean
/// span. `eta = 0` is deterministic.
pub fn ddim_step(
    x_m: ScaledSpan,
    x0_pred: ScaledSpan,
    m: usize,
    m_prev: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    eps: NoiseDraw,
) -> Result<ScaledSpan> {
    if m_prev >= m {
        return Err(Error::InvalidArgument(format!(
            "ddim step must descend, got {m} -> {m_prev}"
        )));
    }
    schedule.check_intensity(m, 1)?;
    let ab = schedule.alpha_bar(m);
    let ab_prev = schedule.alpha_bar(m_prev);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let denom = (1.0 - ab).sqrt();
    let step = |x: f64, x0: f64, e: f64| {
        let eps_pred = (x - ab.sqrt() * x0) / denom;
        ab_prev.sqrt() * x0 + dir * eps_pred + sigma * e
    };
    Ok(ScaledSpan {
        center: step(x_m.center, x0_pred.center, eps.center),
        width: step(x_m.width, x0_pred.width, eps.width),
    })
}

/// Uniform training intensity in `[1, M]`.
pub fn sample_intensity<R: Rng + ?Sized>(steps: usize, rng: &mut R) -> usize {
    rng.random_range(1..=steps)
}

/// `count` evenly spaced integer intensities from `M` down to 1 inclusive.
pub fn intensity_ladder(total: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > total {
        return Err(Error::InvalidArgument(format!(
            "inference steps must be in [1, {total}], got {count}"
        )));
    }
    if count == 1 {
        return Ok(vec![total]);
    }
    let span = (total - 1) as f64;
    Ok((0..count)
        .map(|k| total - (k as f64 * span / (count - 1) as f64).round() as usize)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_schedule_shape() {
        for steps in [1, 10, 1000] {
            let s = NoiseSchedule::cosine(steps, DEFAULT_COSINE_OFFSET).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            assert_eq!(s.alpha_bars().len(), steps + 1);
        }
        let s = NoiseSchedule::cosine(1000, DEFAULT_COSINE_OFFSET).unwrap();
        assert!(s.alpha_bar(1000) < 1e-4);
        for m in 1..=1000 {
            assert!(s.alpha_bar(m) < s.alpha_bar(m - 1), "not decreasing at {m}");
            assert!(s.beta(m) > 0.0 && s.beta(m) <= MAX_BETA);
        }
        assert!(NoiseSchedule::cosine(0, 0.008).is_err());
    }

    #[test]
    fn alpha_bar_is_running_product() {
        let s = NoiseSchedule::cosine(200, DEFAULT_COSINE_OFFSET).unwrap();
        let mut prod = 1.0;
        for m in 1..=200 {
            prod *= 1.0 - s.beta(m);
            assert!((prod - s.alpha_bar(m)).abs() <= 1e-15 * prod.max(1e-300) + 1e-300);
        }
    }

    #[test]
    fn q_sample_examples() {
        let unit = NoiseSchedule::from_alpha_bars(vec![1.0, 1.0, 0.25]);
        let x0 = ScaledSpan { center: 1.0, width: -0.5 };
        assert_eq!(q_sample(x0, 1, &unit, NoiseDraw::ZERO).unwrap(), x0);
        let eps = NoiseDraw { center: 1.0, width: 1.0 };
        let out = q_sample(x0, 2, &unit, eps).unwrap();
        assert!((out.center - (0.5 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((out.center - 1.3660).abs() < 1e-4);
        assert!(q_sample(x0, 0, &unit, eps).is_err());
        assert!(q_sample(x0, 3, &unit, eps).is_err());
    }

    #[test]
    fn ddim_terminal_step_returns_prediction() {
        let s = NoiseSchedule::cosine(100, DEFAULT_COSINE_OFFSET).unwrap();
        let x = ScaledSpan { center: 0.7, width: -1.3 };
        let x0 = ScaledSpan { center: -0.2, width: 0.4 };
        let out = ddim_step(x, x0, 10, 0, &s, 0.0, NoiseDraw::ZERO).unwrap();
        assert_eq!(out, x0);
        assert!(ddim_step(x, x0, 10, 10, &s, 0.0, NoiseDraw::ZERO).is_err());
    }

    #[test]
    fn ddim_with_true_x0_follows_forward_marginal() {
        let s = NoiseSchedule::cosine(1000, DEFAULT_COSINE_OFFSET).unwrap();
        let x0 = ScaledSpan { center: 0.8, width: -1.1 };
        let eps = NoiseDraw { center: 0.3, width: -1.7 };
        let (m, m_prev) = (700, 350);
        let x_m = q_sample(x0, m, &s, eps).unwrap();
        let out = ddim_step(x_m, x0, m, m_prev, &s, 0.0, NoiseDraw::ZERO).unwrap();
        let expected = q_sample(x0, m_prev, &s, eps).unwrap();
        assert!((out.center - expected.center).abs() < 1e-12);
        assert!((out.width - expected.width).abs() < 1e-12);
    }

    #[test]
    fn ddim_eta_zero_ignores_noise() {
        let s = NoiseSchedule::cosine(1000, DEFAULT_COSINE_OFFSET).unwrap();
        let x = ScaledSpan { center: 0.1, width: 0.2 };
        let x0 = ScaledSpan { center: 0.5, width: -0.5 };
        let a = ddim_step(x, x0, 500, 400, &s, 0.0, NoiseDraw { center: 5.0, width: -3.0 }).unwrap();
        let b = ddim_step(x, x0, 500, 400, &s, 0.0, NoiseDraw::ZERO).unwrap();
        assert_eq!(a.center.to_bits(), b.center.to_bits());
        assert_eq!(a.width.to_bits(), b.width.to_bits());
        let c = ddim_step(x, x0, 500, 400, &s, 1.0, NoiseDraw { center: 5.0, width: -3.0 }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn intensity_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| sample_intensity(1, &mut rng) == 1));
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<_> = (0..50).map(|_| sample_intensity(1000, &mut a)).collect();
        let ys: Vec<_> = (0..50).map(|_| sample_intensity(1000, &mut b)).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn intensity_draws_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut buckets = [0usize; 10];
        let n = 1_000_000;
        for _ in 0..n {
            let m = sample_intensity(1000, &mut rng);
            assert!((1..=1000).contains(&m));
            buckets[(m - 1) / 100] += 1;
        }
        for b in buckets {
            let frac = b as f64 / n as f64;
            assert!((frac - 0.1).abs() < 0.005, "bucket fraction {frac}");
        }
    }

    #[test]
    fn ladder_shape() {
        assert_eq!(intensity_ladder(1000, 1).unwrap(), vec![1000]);
        assert_eq!(intensity_ladder(1000, 2).unwrap(), vec![1000, 1]);
        let l = intensity_ladder(1000, 50).unwrap();
        assert_eq!(l.len(), 50);
        assert_eq!((l[0], l[49]), (1000, 1));
        assert!(l.windows(2).all(|w| w[0] > w[1]));
        assert!(intensity_ladder(10, 11).is_err());
        assert!(intensity_ladder(10, 0).is_err());
    }
}
