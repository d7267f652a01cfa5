//! Cosine noise schedule, v-parameterization and deterministic DDIM.

use serde::{Deserialize, Serialize};

use crate::rng::{gaussian_tokens, stream};
use crate::tokens::TokenArray;

pub const COSINE_OFFSET: f64 = 0.008;
pub const BETA_MIN: f64 = 1e-8;
pub const BETA_MAX: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScheduleError {
    #[error("invalid schedule counts T={t} S={s} (need 1 <= S <= T)")]
    InvalidCounts { t: usize, s: usize },
    #[error("array shapes differ: {0} vs {1} rows")]
    ShapeMismatch(usize, usize),
    #[error("timestep {t} outside 0..{len}")]
    StepOutOfRange { t: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub alpha_bar: Vec<f64>,
    pub beta: Vec<f64>,
    pub snr: Vec<f64>,
    pub p2_weight: Vec<f64>,
    /// Ascending DDIM grid; always ends at `steps − 1`.
    pub sampling_steps: Vec<usize>,
}

fn cosine_f(t: f64, total: f64) -> f64 {
    let x = ((t / total + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

/// Evenly spaced indices `round(i·(T−1)/(S−1))`; `[T−1]` for `S = 1`.
pub fn ddim_grid(t: usize, s: usize) -> Vec<usize> {
    if s == 1 {
        return vec![t - 1];
    }
    let mut grid: Vec<usize> = (0..s)
        .map(|i| ((i as f64) * (t - 1) as f64 / (s - 1) as f64).round() as usize)
        .collect();
    grid.dedup();
    grid
}

pub fn build_schedule(t: usize, s: usize) -> Result<DiffusionSchedule, ScheduleError> {
    if t == 0 || s == 0 || s > t {
        return Err(ScheduleError::InvalidCounts { t, s });
    }
    let total = t as f64;
    let f0 = cosine_f(0.0, total);
    let alpha_bar: Vec<f64> = (0..t).map(|i| cosine_f((i + 1) as f64, total) / f0).collect();
    let beta = (0..t)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            (1.0 - alpha_bar[i] / prev).clamp(BETA_MIN, BETA_MAX)
        })
        .collect();
    let snr: Vec<f64> = alpha_bar.iter().map(|a| a / (1.0 - a)).collect();
    let p2_weight = snr.iter().map(|r| 1.0 / (1.0 + r)).collect();
    Ok(DiffusionSchedule { steps: t, alpha_bar, beta, snr, p2_weight, sampling_steps: ddim_grid(t, s) })
}

impl DiffusionSchedule {
    fn coeffs(&self, t: usize) -> Result<(f64, f64), ScheduleError> {
        let a = *self.alpha_bar.get(t).ok_or(ScheduleError::StepOutOfRange { t, len: self.steps })?;
        Ok((a.sqrt(), (1.0 - a).sqrt()))
    }

    /// Replaces the sampling grid with `s` evenly spaced steps.
    pub fn with_sampling_steps(&self, s: usize) -> Result<DiffusionSchedule, ScheduleError> {
        if s == 0 || s > self.steps {
            return Err(ScheduleError::InvalidCounts { t: self.steps, s });
        }
        Ok(DiffusionSchedule { sampling_steps: ddim_grid(self.steps, s), ..self.clone() })
    }
}

fn combine(
    x: &[TokenArray],
    y: &[TokenArray],
    cx: f64,
    cy: f64,
) -> Result<Vec<TokenArray>, ScheduleError> {
    if x.len() != y.len() {
        return Err(ScheduleError::ShapeMismatch(x.len(), y.len()));
    }
    Ok(x.iter().zip(y).map(|(a, b)| std::array::from_fn(|c| cx * a[c] + cy * b[c])).collect())
}

/// `y_t = √ᾱ·y0 + √(1−ᾱ)·ε`
pub fn q_sample(
    schedule: &DiffusionSchedule,
    y0: &[TokenArray],
    t: usize,
    eps: &[TokenArray],
) -> Result<Vec<TokenArray>, ScheduleError> {
    let (sa, sb) = schedule.coeffs(t)?;
    combine(y0, eps, sa, sb)
}

/// `v = √ᾱ·ε − √(1−ᾱ)·y0`
pub fn v_target(
    schedule: &DiffusionSchedule,
    y0: &[TokenArray],
    eps: &[TokenArray],
    t: usize,
) -> Result<Vec<TokenArray>, ScheduleError> {
    let (sa, sb) = schedule.coeffs(t)?;
    combine(eps, y0, sa, -sb)
}

/// `ŷ0 = √ᾱ·y_t − √(1−ᾱ)·v`
pub fn reconstruct_y0(
    schedule: &DiffusionSchedule,
    y_t: &[TokenArray],
    v: &[TokenArray],
    t: usize,
) -> Result<Vec<TokenArray>, ScheduleError> {
    let (sa, sb) = schedule.coeffs(t)?;
    combine(y_t, v, sa, -sb)
}

/// Ramp from 1 at the first forecast step to 3 at the last.
pub fn horizon_weights(h: usize) -> Vec<f64> {
    if h <= 1 {
        return vec![1.0; h];
    }
    (0..h).map(|k| 1.0 + 2.0 * k as f64 / (h - 1) as f64).collect()
}

/// Deterministic (η = 0) DDIM from a given starting noise. The denoiser maps
/// `(y_t, t)` to a predicted `v`; conditioning lives in its closure.
pub fn ddim_from_noise<E, F>(
    schedule: &DiffusionSchedule,
    y_start: Vec<TokenArray>,
    mut denoiser: F,
) -> Result<Vec<TokenArray>, E>
where
    F: FnMut(&[TokenArray], usize) -> Result<Vec<TokenArray>, E>,
    E: From<ScheduleError>,
{
    let grid = &schedule.sampling_steps;
    let mut y = y_start;
    for i in (0..grid.len()).rev() {
        let t = grid[i];
        let v = denoiser(&y, t)?;
        let y0_hat = reconstruct_y0(schedule, &y, &v, t)?;
        let (sa, sb) = schedule.coeffs(t)?;
        let a_prev = if i == 0 { 1.0 } else { schedule.alpha_bar[grid[i - 1]] };
        let (pa, pb) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
        y = y
            .iter()
            .zip(&y0_hat)
            .map(|(yt, x0)| {
                std::array::from_fn(|c| {
                    let eps_hat = (yt[c] - sa * x0[c]) / sb;
                    pa * x0[c] + pb * eps_hat
                })
            })
            .collect();
    }
    Ok(y)
}

/// DDIM starting from `N(0, I)` noise of `h` tokens drawn from `seed`.
pub fn ddim_sample<E, F>(schedule: &DiffusionSchedule, h: usize, seed: u64, denoiser: F) -> Result<Vec<TokenArray>, E>
where
    F: FnMut(&[TokenArray], usize) -> Result<Vec<TokenArray>, E>,
    E: From<ScheduleError>,
{
    let noise = gaussian_tokens(&mut stream(seed), h);
    ddim_from_noise(schedule, noise, denoiser)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<TokenArray> {
        (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect()
    }

    #[test]
    fn schedule_tables() {
        let s = build_schedule(1000, 50).unwrap();
        // Independent evaluation of the cosine formula.
        let f = |t: f64| (((t / 1000.0 + 0.008) / 1.008) * std::f64::consts::PI / 2.0).cos().powi(2);
        assert!((s.alpha_bar[0] - f(1.0) / f(0.0)).abs() < 1e-15);
        assert!(s.alpha_bar[0] > 0.999 && (s.alpha_bar[0] - 0.9999587).abs() < 1e-7);
        assert!(s.alpha_bar[999] < 1e-3);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.snr.windows(2).all(|w| w[1] < w[0]));
        assert!(s.p2_weight.windows(2).all(|w| w[1] > w[0]));
        assert!(s.beta.iter().all(|b| *b > 0.0 && *b <= 0.999));
        assert_eq!(s.sampling_steps.len(), 50);
        assert_eq!(*s.sampling_steps.last().unwrap(), 999);
        assert!(s.sampling_steps.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn grid_edge_cases() {
        assert_eq!(ddim_grid(1000, 1), vec![999]);
        assert_eq!(ddim_grid(10, 10), (0..10).collect::<Vec<_>>());
        assert_eq!(ddim_grid(5, 3), vec![0, 2, 4]);
        assert_eq!(build_schedule(10, 11), Err(ScheduleError::InvalidCounts { t: 10, s: 11 }));
        assert_eq!(build_schedule(0, 0), Err(ScheduleError::InvalidCounts { t: 0, s: 0 }));
    }

    #[test]
    fn forward_limits() {
        let s = build_schedule(1000, 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y0 = random_tokens(&mut rng, 8);
        let zero = vec![[0.0; 9]; 8];
        let a = s.alpha_bar[300];
        let yt = q_sample(&s, &y0, 300, &zero).unwrap();
        assert!(yt.iter().flatten().zip(y0.iter().flatten()).all(|(p, q)| (p - a.sqrt() * q).abs() < 1e-15));
        let eps = random_tokens(&mut rng, 8);
        let yt = q_sample(&s, &zero, 300, &eps).unwrap();
        assert!(yt.iter().flatten().zip(eps.iter().flatten()).all(|(p, q)| (p - (1.0 - a).sqrt() * q).abs() < 1e-15));
        assert_eq!(q_sample(&s, &y0, 0, &eps[..3]), Err(ScheduleError::ShapeMismatch(8, 3)));
        assert!(matches!(q_sample(&s, &y0, 1000, &eps), Err(ScheduleError::StepOutOfRange { .. })));
    }

    #[test]
    fn v_target_limits() {
        let s = build_schedule(1000, 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y0 = random_tokens(&mut rng, 4);
        let eps = random_tokens(&mut rng, 4);
        // √(1−ᾱ₀) ≈ 6.4e-3 and |y0| < 2.
        let early = v_target(&s, &y0, &eps, 0).unwrap();
        assert!(early.iter().flatten().zip(eps.iter().flatten()).all(|(v, e)| (v - e).abs() < 1.5e-2));
        let late = v_target(&s, &y0, &eps, 999).unwrap();
        assert!(late.iter().flatten().zip(y0.iter().flatten()).all(|(v, y)| (v + y).abs() < 1e-9));
    }

    #[test]
    fn reconstruction_identity_every_step() {
        let s = build_schedule(1000, 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in 0..1000 {
            let y0 = random_tokens(&mut rng, 8);
            let eps = random_tokens(&mut rng, 8);
            let yt = q_sample(&s, &y0, t, &eps).unwrap();
            let v = v_target(&s, &y0, &eps, t).unwrap();
            let back = reconstruct_y0(&s, &yt, &v, t).unwrap();
            for (a, b) in back.iter().flatten().zip(y0.iter().flatten()) {
                assert!((a - b).abs() <= 1e-12, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn horizon_weight_values() {
        assert_eq!(horizon_weights(1), vec![1.0]);
        assert_eq!(horizon_weights(2), vec![1.0, 3.0]);
        let w = horizon_weights(8);
        let want = [7.0, 9.0, 11.0, 13.0, 15.0, 17.0, 19.0, 21.0].map(|x| x / 7.0);
        assert!(w.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn ddim_is_deterministic() {
        let s = build_schedule(1000, 50).unwrap();
        let den = |y: &[TokenArray], t: usize| -> Result<Vec<TokenArray>, ScheduleError> {
            Ok(y.iter().map(|r| r.map(|x| 0.3 * x + t as f64 * 1e-4)).collect())
        };
        let a = ddim_sample(&s, 8, 11, den).unwrap();
        let b = ddim_sample(&s, 8, 11, den).unwrap();
        let c = ddim_sample(&s, 8, 12, den).unwrap();
        let bits = |v: &Vec<TokenArray>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }
}
