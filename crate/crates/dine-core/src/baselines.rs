//! Analytic and numeric ground truths used for validation: closed-form
//! capacities, discrete and spectral water-filling, the moving-average
//! feedback capacity via its quartic root, Gaussian quantile transforms,
//! and empirical distribution distances.

use crate::channels::ChannelModel;
use crate::error::{Error, Result};

/// Frequency-grid resolution for spectral water-filling.
pub const DEFAULT_N_FREQ: usize = 1024;

const BISECT_ITERS: usize = 200;

// ---------------------------------------------------------------------------
// Closed forms
// ---------------------------------------------------------------------------

/// 0.5 ln(1 + P / sigma2), in nats.
pub fn awgn_capacity(p: f64, sigma2: f64) -> Result<f64> {
    if p < 0.0 {
        return Err(Error::InvalidParameter {
            name: "power",
            value: p,
            constraint: "P >= 0",
        });
    }
    if sigma2 <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "sigma2",
            value: sigma2,
            constraint: "sigma2 > 0",
        });
    }
    Ok(0.5 * (1.0 + p / sigma2).ln())
}

/// Sanity ceiling for the peak-power regime: a peak bound |X| < A implies
/// E[X^2] <= A^2, so 0.5 ln(1 + A^2/sigma2) upper-bounds the capacity.
pub fn peak_awgn_upper_bound(a: f64, sigma2: f64) -> Result<f64> {
    if a <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "amplitude",
            value: a,
            constraint: "A > 0",
        });
    }
    awgn_capacity(a * a, sigma2)
}

// ---------------------------------------------------------------------------
// Water-filling
// ---------------------------------------------------------------------------

/// Power allocation over parallel noise modes at a common water level.
#[derive(Debug, Clone)]
pub struct WaterFillSolution {
    pub water_level: f64,
    pub powers: Vec<f64>,
    pub capacity_nats: f64,
}

/// Solve sum_k max(nu - N_k, 0) = P by bisection and allocate
/// p_k = max(nu - N_k, 0). Complementary slackness holds by construction.
pub fn water_fill(noise_levels: &[f64], p: f64) -> Result<WaterFillSolution> {
    if noise_levels.is_empty() {
        return Err(Error::EmptyInput("water_fill"));
    }
    for &n in noise_levels {
        if n <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "noise_level",
                value: n,
                constraint: "N_k > 0",
            });
        }
    }
    if p < 0.0 {
        return Err(Error::InvalidParameter {
            name: "power",
            value: p,
            constraint: "P >= 0",
        });
    }
    let min_n = noise_levels.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_n = noise_levels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total = |nu: f64| -> f64 {
        noise_levels.iter().map(|&n| (nu - n).max(0.0)).sum()
    };
    let (mut lo, mut hi) = (min_n, max_n + p);
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if total(mid) > p {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let nu = 0.5 * (lo + hi);
    let powers: Vec<f64> = noise_levels.iter().map(|&n| (nu - n).max(0.0)).collect();
    let capacity_nats = powers
        .iter()
        .zip(noise_levels)
        .map(|(&pk, &nk)| 0.5 * (1.0 + pk / nk).ln())
        .sum();
    Ok(WaterFillSolution {
        water_level: nu,
        powers,
        capacity_nats,
    })
}

/// Water-fill a continuous noise spectrum sampled on [0, pi] with trapezoid
/// weights (the spectra here are even in the frequency). `psd[j]` is the
/// noise power at grid point j; the budget is the per-symbol power.
fn spectral_water_fill(psd: &[f64], budget: f64) -> (f64, f64) {
    let n = psd.len();
    let h = 1.0 / (n - 1) as f64; // normalized so weights sum to 1
    let weight = |j: usize| if j == 0 || j == n - 1 { 0.5 * h } else { h };
    let allocated = |nu: f64| -> f64 {
        psd.iter()
            .enumerate()
            .map(|(j, &nj)| weight(j) * (nu - nj).max(0.0))
            .sum()
    };
    let min_n = psd.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_n = psd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (min_n, max_n + budget);
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if allocated(mid) > budget {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let nu = 0.5 * (lo + hi);
    let capacity = psd
        .iter()
        .enumerate()
        .map(|(j, &nj)| weight(j) * 0.5 * (1.0 + (nu - nj).max(0.0) / nj).ln())
        .sum();
    (capacity, nu)
}

fn check_spectral_args(alpha: f64, p: f64, n_freq: usize) -> Result<()> {
    if alpha.abs() >= 1.0 {
        return Err(Error::InvalidParameter {
            name: "alpha",
            value: alpha,
            constraint: "|alpha| < 1",
        });
    }
    if p < 0.0 {
        return Err(Error::InvalidParameter {
            name: "power",
            value: p,
            constraint: "P >= 0",
        });
    }
    if n_freq < 64 {
        return Err(Error::InvalidParameter {
            name: "n_freq",
            value: n_freq as f64,
            constraint: "n_freq >= 64",
        });
    }
    Ok(())
}

/// Feedforward capacity of the order-1 moving-average Gaussian channel via
/// water-filling over the noise spectrum |1 + alpha e^{j w}|^2.
pub fn ma1_ff_capacity(alpha: f64, p: f64, n_freq: usize) -> Result<f64> {
    check_spectral_args(alpha, p, n_freq)?;
    let psd: Vec<f64> = (0..n_freq)
        .map(|j| {
            let w = std::f64::consts::PI * j as f64 / (n_freq - 1) as f64;
            1.0 + alpha * alpha + 2.0 * alpha * w.cos()
        })
        .collect();
    Ok(spectral_water_fill(&psd, p).0)
}

/// Feedforward capacity of the MIMO AR(1) Gaussian channel with `dim`
/// identical branches (noise spectrum 1/|1 - alpha e^{j w}|^2 per branch)
/// and a total power budget across branches and frequencies.
pub fn ar1_ff_capacity(alpha: f64, p: f64, dim: usize, n_freq: usize) -> Result<f64> {
    check_spectral_args(alpha, p, n_freq)?;
    if dim == 0 {
        return Err(Error::InvalidParameter {
            name: "dim",
            value: 0.0,
            constraint: "dim >= 1",
        });
    }
    let psd: Vec<f64> = (0..n_freq)
        .map(|j| {
            let w = std::f64::consts::PI * j as f64 / (n_freq - 1) as f64;
            1.0 / (1.0 + alpha * alpha - 2.0 * alpha * w.cos())
        })
        .collect();
    // identical branches: the common water level splits the budget evenly
    Ok(dim as f64 * spectral_water_fill(&psd, p / dim as f64).0)
}

/// Feedback capacity of the order-1 moving-average Gaussian channel:
/// -ln(x0) where x0 in (0,1) is the root of P x^2 = (1 - x^2)(1 - |alpha| x)^2.
/// At alpha = 0 the quartic degenerates to P x^2 = 1 - x^2 and the value
/// reduces to the memoryless capacity.
pub fn ma1_fb_capacity(alpha: f64, p: f64) -> Result<f64> {
    if alpha.abs() >= 1.0 {
        return Err(Error::InvalidParameter {
            name: "alpha",
            value: alpha,
            constraint: "|alpha| < 1",
        });
    }
    if p <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "power",
            value: p,
            constraint: "P > 0",
        });
    }
    let a = alpha.abs();
    let f = |x: f64| p * x * x - (1.0 - x * x) * (1.0 - a * x) * (1.0 - a * x);
    let (mut lo, mut hi) = (1e-12, 1.0 - 1e-12);
    if !(f(lo) < 0.0 && f(hi) > 0.0) {
        return Err(Error::NoSignChange { lo, hi });
    }
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(-(0.5 * (lo + hi)).ln())
}

// ---------------------------------------------------------------------------
// Gaussian special functions
// ---------------------------------------------------------------------------

const FRAC_2_SQRT_PI: f64 = 1.128_379_167_095_512_6; // 2/sqrt(pi)

/// Error function via its Taylor series (small arguments) or the Laplace
/// continued fraction of erfc (large arguments).
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x <= 2.0 {
        erf_series(x)
    } else {
        1.0 - erfc_cf(x)
    }
}

pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x <= 2.0 {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

fn erf_series(x: f64) -> f64 {
    // 2/sqrt(pi) * sum_n (-1)^n x^(2n+1) / (n! (2n+1))
    let x2 = x * x;
    let mut coeff = x; // x^(2n+1)/n!
    let mut sum = x;
    let mut n = 1.0;
    loop {
        coeff *= x2 / n;
        let term = coeff / (2.0 * n + 1.0);
        let signed = if (n as u64) % 2 == 1 { -term } else { term };
        sum += signed;
        if term < 1e-18 * sum.abs().max(1e-300) {
            break;
        }
        n += 1.0;
    }
    FRAC_2_SQRT_PI * sum
}

fn erfc_cf(x: f64) -> f64 {
    // sqrt(pi) e^{x^2} erfc(x) = 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let mut f = x;
    for k in (1..=60).rev() {
        f = x + (k as f64 / 2.0) / f;
    }
    (-x * x).exp() / (std::f64::consts::PI.sqrt() * f)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile: rational initial guess polished with one
/// Newton step against [`normal_cdf`]. Absolute error below 1e-9 on (0,1).
pub fn normal_quantile(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidParameter {
            name: "u",
            value: u,
            constraint: "0 < u < 1",
        });
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let mut x = if u < P_LOW {
        let q = (-2.0 * u.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if u <= 1.0 - P_LOW {
        let q = u - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - u).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    };
    x -= (normal_cdf(x) - u) / normal_pdf(x);
    Ok(x)
}

/// Inverse triangular transform for diagonal Gaussians: the map factorizes
/// per dimension as x_k = mean_k + std_k * quantile(u_k).
pub fn kr_gaussian_inverse(u: &[f64], mean: &[f64], std: &[f64]) -> Result<Vec<f64>> {
    if u.len() != mean.len() || u.len() != std.len() {
        return Err(Error::DimensionMismatch {
            what: "kr_gaussian_inverse",
            expected: u.len(),
            actual: mean.len().min(std.len()),
        });
    }
    u.iter()
        .zip(mean.iter().zip(std))
        .map(|(&uk, (&mk, &sk))| Ok(mk + sk * normal_quantile(uk)?))
        .collect()
}

/// Forward transform: u_k = Phi((x_k - mean_k)/std_k).
pub fn kr_gaussian_forward(x: &[f64], mean: &[f64], std: &[f64]) -> Result<Vec<f64>> {
    if x.len() != mean.len() || x.len() != std.len() {
        return Err(Error::DimensionMismatch {
            what: "kr_gaussian_forward",
            expected: x.len(),
            actual: mean.len().min(std.len()),
        });
    }
    Ok(x.iter()
        .zip(mean.iter().zip(std))
        .map(|(&xk, (&mk, &sk))| normal_cdf((xk - mk) / sk))
        .collect())
}

// ---------------------------------------------------------------------------
// Empirical distribution distances
// ---------------------------------------------------------------------------

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("NaN in samples"));
    s
}

/// Empirical 2-Wasserstein distance between 1-D samples: the sorted-sample
/// coupling is optimal, so this is the RMS difference of order statistics.
/// Unequal sample counts are quantile-matched on a midpoint grid.
pub fn wasserstein2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("wasserstein2_1d"));
    }
    let sa = sorted(a);
    let sb = sorted(b);
    let sq = if sa.len() == sb.len() {
        sa.iter()
            .zip(&sb)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            / sa.len() as f64
    } else {
        let n = sa.len().max(sb.len());
        let quantile = |s: &[f64], u: f64| -> f64 {
            let idx = ((u * s.len() as f64) as usize).min(s.len() - 1);
            s[idx]
        };
        (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) / n as f64;
                let d = quantile(&sa, u) - quantile(&sb, u);
                d * d
            })
            .sum::<f64>()
            / n as f64
    };
    Ok(sq.sqrt())
}

/// One-sample Kolmogorov-Smirnov statistic against N(mean, std^2).
pub fn ks_statistic_normal(samples: &[f64], mean: f64, std: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("ks_statistic_normal"));
    }
    let s = sorted(samples);
    let n = s.len() as f64;
    let mut d = 0.0_f64;
    for (i, &x) in s.iter().enumerate() {
        let f = normal_cdf((x - mean) / std);
        d = d.max(f - i as f64 / n).max((i as f64 + 1.0) / n - f);
    }
    Ok(d)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic_two_sample(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("ks_statistic_two_sample"));
    }
    let sa = sorted(a);
    let sb = sorted(b);
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0_f64;
    while i < sa.len() && j < sb.len() {
        if sa[i] <= sb[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

// ---------------------------------------------------------------------------
// Baseline dispatch
// ---------------------------------------------------------------------------

/// A capacity question: channel, budget, and feedback availability.
#[derive(Debug, Clone)]
pub struct CapacityQuery {
    pub channel: ChannelModel,
    pub power: Option<f64>,
    pub amplitude: Option<f64>,
    pub feedback: bool,
}

impl CapacityQuery {
    /// Resolve to (capacity or bound in nats, method name).
    pub fn evaluate(&self) -> Result<(f64, &'static str)> {
        self.channel.validate()?;
        match (&self.channel, self.power, self.amplitude) {
            (ChannelModel::Awgn { sigma2, .. }, Some(p), None) => {
                // feedback does not increase memoryless capacity
                Ok((awgn_capacity(p, *sigma2)?, "closed_form"))
            }
            (ChannelModel::Awgn { sigma2, .. }, None, Some(a)) => {
                Ok((peak_awgn_upper_bound(a, *sigma2)?, "peak_power_upper_bound"))
            }
            (ChannelModel::Ma1 { alpha, .. }, Some(p), None) => {
                if self.feedback {
                    Ok((ma1_fb_capacity(*alpha, p)?, "quartic_root"))
                } else {
                    Ok((
                        ma1_ff_capacity(*alpha, p, DEFAULT_N_FREQ)?,
                        "spectral_water_filling",
                    ))
                }
            }
            (ChannelModel::Ar1Mimo { alpha, dim }, Some(p), None) => {
                if self.feedback {
                    Err(Error::Config(
                        "no feedback baseline for the MIMO AR(1) channel".into(),
                    ))
                } else {
                    Ok((
                        ar1_ff_capacity(*alpha, p, *dim, DEFAULT_N_FREQ)?,
                        "spectral_water_filling",
                    ))
                }
            }
            _ => Err(Error::Config(
                "query needs exactly one of power or amplitude, and amplitude only for awgn"
                    .into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_2: f64 = std::f64::consts::LN_2;

    #[test]
    fn awgn_capacity_examples() {
        assert!((awgn_capacity(1.0, 1.0).unwrap() - 0.346_573_590_279_972_64).abs() < 1e-15);
        assert_eq!(awgn_capacity(0.0, 1.0).unwrap(), 0.0);
        assert!((awgn_capacity(3.0, 1.0).unwrap() - LN_2).abs() < 1e-15);
        assert!(awgn_capacity(1.0, 0.0).is_err());
        assert!(awgn_capacity(-1.0, 1.0).is_err());
    }

    #[test]
    fn peak_bound_examples() {
        assert!((peak_awgn_upper_bound(1.0, 1.0).unwrap() - 0.346_573_590_279_972_64).abs() < 1e-15);
        assert!(peak_awgn_upper_bound(1e-9, 1.0).unwrap() < 1e-15);
        assert!(peak_awgn_upper_bound(0.0, 1.0).is_err());
    }

    #[test]
    fn water_fill_hand_examples() {
        let s = water_fill(&[1.0, 2.0], 1.0).unwrap();
        assert!((s.water_level - 2.0).abs() < 1e-9);
        assert!((s.powers[0] - 1.0).abs() < 1e-9);
        assert!(s.powers[1].abs() < 1e-9);
        assert!((s.capacity_nats - 0.346_573_590_279_972_64).abs() < 1e-9);

        let s2 = water_fill(&[1.0, 1.0], 2.0).unwrap();
        assert!((s2.powers[0] - 1.0).abs() < 1e-9);
        assert!((s2.powers[1] - 1.0).abs() < 1e-9);
        assert!((s2.capacity_nats - LN_2).abs() < 1e-9);

        let s3 = water_fill(&[0.5, 3.0], 0.0).unwrap();
        assert_eq!(s3.capacity_nats, 0.0);
        assert!(water_fill(&[], 1.0).is_err());
    }

    #[test]
    fn water_fill_kkt_residuals() {
        let noise = [0.3, 1.7, 0.9, 2.5, 0.45];
        for &p in &[0.1, 1.0, 5.0, 25.0] {
            let s = water_fill(&noise, p).unwrap();
            let budget: f64 = s.powers.iter().sum();
            assert!((budget - p).abs() < 1e-9, "budget residual {}", budget - p);
            for (pk, nk) in s.powers.iter().zip(&noise) {
                assert!(*pk >= 0.0);
                let slack = pk * (s.water_level - nk - pk);
                assert!(slack.abs() < 1e-8, "slackness {slack}");
            }
        }
        // capacity nondecreasing in P
        let caps: Vec<f64> = [0.1, 0.5, 1.0, 2.0, 4.0]
            .iter()
            .map(|&p| water_fill(&noise, p).unwrap().capacity_nats)
            .collect();
        assert!(caps.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn ma1_ff_flat_spectrum_reduces_to_awgn() {
        for &p in &[0.5, 1.0, 2.0] {
            let c = ma1_ff_capacity(0.0, p, 512).unwrap();
            assert!((c - awgn_capacity(p, 1.0).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn ma1_ff_grid_convergence() {
        let a = ma1_ff_capacity(0.5, 1.0, 512).unwrap();
        let b = ma1_ff_capacity(0.5, 1.0, 1024).unwrap();
        assert!((a - b).abs() < 1e-6, "grid drift {}", (a - b).abs());
    }

    #[test]
    fn ma1_fb_reduces_to_awgn_at_alpha_zero() {
        for &p in &[0.25, 1.0, 2.0, 10.0] {
            let fb = ma1_fb_capacity(0.0, p).unwrap();
            let awgn = awgn_capacity(p, 1.0).unwrap();
            assert!((fb - awgn).abs() < 1e-9, "p={p}: {fb} vs {awgn}");
        }
    }

    #[test]
    fn ma1_feedback_never_hurts_and_both_increase_in_power() {
        let mut prev_ff = 0.0;
        let mut prev_fb = 0.0;
        for &p in &[0.5, 1.0, 2.0, 4.0] {
            for &alpha in &[0.1, 0.5, 0.9, -0.5] {
                let ff = ma1_ff_capacity(alpha, p, 512).unwrap();
                let fb = ma1_fb_capacity(alpha, p).unwrap();
                assert!(fb >= ff - 1e-6, "alpha={alpha} p={p}: fb {fb} < ff {ff}");
            }
            let ff = ma1_ff_capacity(0.5, p, 512).unwrap();
            let fb = ma1_fb_capacity(0.5, p).unwrap();
            assert!(ff > prev_ff && fb > prev_fb);
            prev_ff = ff;
            prev_fb = fb;
        }
    }

    #[test]
    fn ma1_fb_frozen_value() {
        // bisection oracle for alpha = 0.5, P = 1 (quartic confirmed by the
        // alpha = 0 reduction and the ordering property)
        let fb = ma1_fb_capacity(0.5, 1.0).unwrap();
        assert!((fb - 0.546_190_717).abs() < 1e-6, "fb = {fb}");
        // sign symmetry
        assert!((ma1_fb_capacity(-0.5, 1.0).unwrap() - fb).abs() < 1e-12);
    }

    #[test]
    fn mimo_branches_match_scalar_symmetry() {
        let c4 = ar1_ff_capacity(0.4, 1.0, 4, 512).unwrap();
        let c1 = ar1_ff_capacity(0.4, 0.25, 1, 512).unwrap();
        assert!((c4 - 4.0 * c1).abs() < 1e-9);

        // discrete corroboration: water-filling over 4 copies of the same
        // mode set equals 4x the scalar allocation with a quarter budget
        let noise = [0.4, 0.9, 1.7];
        let mut four = Vec::new();
        for _ in 0..4 {
            four.extend_from_slice(&noise);
        }
        let joint = water_fill(&four, 2.0).unwrap();
        let single = water_fill(&noise, 0.5).unwrap();
        assert!((joint.capacity_nats - 4.0 * single.capacity_nats).abs() < 1e-9);
    }

    #[test]
    fn erf_matches_reference_values() {
        // reference values from standard tables
        let cases = [
            (0.5, 0.520_499_877_813_046_5),
            (1.0, 0.842_700_792_949_714_9),
            (2.0, 0.995_322_265_018_952_7),
            (3.0, 0.999_977_909_503_001_4),
        ];
        for (x, want) in cases {
            assert!((erf(x) - want).abs() < 1e-13, "erf({x}) = {}", erf(x));
            assert!((erf(-x) + want).abs() < 1e-13);
        }
        assert!((erfc(3.0) - 2.209_049_699_858_544e-5).abs() < 1e-16);
    }

    #[test]
    fn normal_cdf_and_quantile_roundtrip() {
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((normal_cdf(-3.0) - 1.349_898_031_630_094_6e-3).abs() < 1e-15);

        assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
        assert!((normal_quantile(0.841_344_746_068_543).unwrap() - 1.0).abs() < 1e-9);
        assert!((normal_quantile(0.975).unwrap() - 1.959_963_984_540_054).abs() < 1e-9);
        assert!((normal_quantile(0.025).unwrap() + 1.959_963_984_540_054).abs() < 1e-9);
        assert!((normal_quantile(1e-6).unwrap() + 4.753_424_308_822_899).abs() < 1e-8);
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());

        for &u in &[0.001, 0.1, 0.37, 0.5, 0.82, 0.9999] {
            let x = normal_quantile(u).unwrap();
            assert!((normal_cdf(x) - u).abs() < 1e-12, "roundtrip at {u}");
        }
    }

    #[test]
    fn kr_map_examples_and_roundtrip() {
        let x = kr_gaussian_inverse(&[0.5, 0.5], &[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert_eq!(x, vec![0.0, 0.0]);

        let x1 = kr_gaussian_inverse(&[0.841_345], &[0.0], &[1.0]).unwrap();
        assert!((x1[0] - 1.0).abs() < 1e-4);

        let mean = [0.3, -1.0];
        let std = [0.7, 2.0];
        let u0 = [0.12, 0.93];
        let x = kr_gaussian_inverse(&u0, &mean, &std).unwrap();
        let u1 = kr_gaussian_forward(&x, &mean, &std).unwrap();
        for (a, b) in u0.iter().zip(&u1) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(kr_gaussian_inverse(&[0.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein2_1d(&[3.0, 1.0, 2.0], &[2.0, 3.0, 1.0]).unwrap(), 0.0);
        assert!((wasserstein2_1d(&[0.0, 1.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(wasserstein2_1d(&[], &[1.0]).is_err());
        // translation property within sampling error is exact for same data
        let a = [0.1, -0.4, 2.0, 0.9];
        let shifted: Vec<f64> = a.iter().map(|v| v + 0.35).collect();
        assert!((wasserstein2_1d(&a, &shifted).unwrap() - 0.35).abs() < 1e-12);
    }

    #[test]
    fn ks_statistics_behave() {
        let n = 4000;
        let gauss: Vec<f64> = (0..n)
            .map(|i| normal_quantile((i as f64 + 0.5) / n as f64).unwrap())
            .collect();
        let d = ks_statistic_normal(&gauss, 0.0, 1.0).unwrap();
        assert!(d < 0.01, "stratified normal sample should fit, d = {d}");
        let d_bad = ks_statistic_normal(&gauss, 1.0, 1.0).unwrap();
        assert!(d_bad > 0.3);

        let uniform: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let d2 = ks_statistic_two_sample(&gauss, &uniform).unwrap();
        assert!(d2 > 0.2);
    }

    #[test]
    fn capacity_query_dispatch() {
        let q = CapacityQuery {
            channel: ChannelModel::Ma1 { alpha: 0.0, dim: 1 },
            power: Some(1.0),
            amplitude: None,
            feedback: true,
        };
        let (c, method) = q.evaluate().unwrap();
        assert!((c - 0.346_573_590_279_972_64).abs() < 1e-9);
        assert_eq!(method, "quartic_root");

        let bad = CapacityQuery {
            channel: ChannelModel::Ma1 { alpha: 0.5, dim: 1 },
            power: None,
            amplitude: Some(1.0),
            feedback: false,
        };
        assert!(bad.evaluate().is_err());
    }
}
