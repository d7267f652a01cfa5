use foresight_core::rng::{gaussian, gaussian_tokens, stream};
use foresight_core::schedule::{build_schedule, ddim_from_noise, q_sample, DiffusionSchedule, ScheduleError};
use foresight_core::tokens::TokenArray;

/// Denoiser that knows the clean target: infers ε from `y_t` and returns the
/// exact v.
fn oracle<'a>(
    s: &DiffusionSchedule,
    y0: &'a [TokenArray],
) -> impl FnMut(&[TokenArray], usize) -> Result<Vec<TokenArray>, ScheduleError> + 'a {
    let s = s.clone();
    move |y: &[TokenArray], t: usize| {
        let a = s.alpha_bar[t];
        Ok(y.iter()
            .zip(y0)
            .map(|(yt, x0)| {
                std::array::from_fn(|c| {
                    let eps = (yt[c] - a.sqrt() * x0[c]) / (1.0 - a).sqrt();
                    a.sqrt() * eps - (1.0 - a).sqrt() * x0[c]
                })
            })
            .collect())
    }
}

fn max_err(a: &[TokenArray], b: &[TokenArray]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn fixed_target() -> Vec<TokenArray> {
    (0..8).map(|k| std::array::from_fn(|c| ((k * 9 + c) as f64 * 0.37).sin() * 1.5)).collect()
}

#[test]
fn oracle_recovers_target() {
    let y0 = fixed_target();
    let base = build_schedule(1000, 50).unwrap();
    let noise = gaussian_tokens(&mut stream(5), 8);
    let out = ddim_from_noise(&base, noise.clone(), oracle(&base, &y0)).unwrap();
    assert!(max_err(&out, &y0) < 1e-2);
    let fine = base.with_sampling_steps(1000).unwrap();
    let out = ddim_from_noise(&fine, noise.clone(), oracle(&fine, &y0)).unwrap();
    assert!(max_err(&out, &y0) < 1e-6);

    // With an exact oracle every step lands on y0 up to rounding, so the
    // error can only shrink or stay at the rounding floor as S grows.
    let mut prev = f64::INFINITY;
    for s in [10, 25, 50, 200, 1000] {
        let sch = base.with_sampling_steps(s).unwrap();
        let e = max_err(&ddim_from_noise(&sch, noise.clone(), oracle(&sch, &y0)).unwrap(), &y0);
        assert!(e <= prev.max(1e-12), "S={s}: {e} after {prev}");
        prev = e;
    }
}

/// For per-channel Gaussian data `N(m, sd²)` the posterior mean is closed
/// form and the deterministic sampler's continuous limit maps the starting
/// noise to `m + sd·(y_T − √ᾱ_T m)/√(ᾱ_T sd² + 1 − ᾱ_T)`. Discretization
/// error must fall as the grid is refined.
#[test]
fn gaussian_posterior_converges_with_grid() {
    let (m, sd) = (0.7, 0.4);
    let base = build_schedule(1000, 50).unwrap();
    let noise = gaussian_tokens(&mut stream(9), 8);
    let a_t = base.alpha_bar[999];
    let limit: Vec<TokenArray> = noise
        .iter()
        .map(|r| r.map(|y| m + sd * (y - a_t.sqrt() * m) / (a_t * sd * sd + 1.0 - a_t).sqrt()))
        .collect();
    let mut prev = f64::INFINITY;
    for s in [10, 25, 50, 200, 1000] {
        let sch = base.with_sampling_steps(s).unwrap();
        let ab = sch.alpha_bar.clone();
        let den = move |y: &[TokenArray], t: usize| -> Result<Vec<TokenArray>, ScheduleError> {
            let a = ab[t];
            let gain = a.sqrt() * sd * sd / (a * sd * sd + 1.0 - a);
            Ok(y.iter()
                .map(|r| r.map(|yt| {
                    let x0 = m + gain * (yt - a.sqrt() * m);
                    (a.sqrt() * yt - x0) / (1.0 - a).sqrt()
                }))
                .collect())
        };
        let e = max_err(&ddim_from_noise(&sch, noise.clone(), den).unwrap(), &limit);
        assert!(e < prev, "S={s}: {e} not below {prev}");
        prev = e;
    }
    assert!(prev < 5e-3, "fine-grid error {prev}");
}

#[test]
fn forward_variance_monte_carlo() {
    let s = build_schedule(1000, 50).unwrap();
    let mut rng = stream(77);
    let t = 400;
    let a = s.alpha_bar[t];
    // y0 per channel drawn once with a known spread, reused for all draws.
    let y0: Vec<TokenArray> = (0..100_000).map(|i| [if i % 2 == 0 { 1.0 } else { -1.0 }; 9]).collect();
    let eps: Vec<TokenArray> = (0..y0.len()).map(|_| std::array::from_fn(|_| gaussian(&mut rng))).collect();
    let yt = q_sample(&s, &y0, t, &eps).unwrap();
    for c in 0..9 {
        let n = yt.len() as f64;
        let mean = yt.iter().map(|r| r[c]).sum::<f64>() / n;
        let var = yt.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
        let want = a * 1.0 + (1.0 - a);
        assert!((var - want).abs() / want < 0.02, "channel {c}: {var} vs {want}");
    }
}
