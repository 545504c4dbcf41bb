//! Small numeric helpers shared across the crate.

/// log(sum(exp(x_i))) with max-subtraction so large inputs cannot overflow.
///
/// Returns `f64::NEG_INFINITY` for an empty slice.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// log(sum(w_i * exp(x_i))) for nonnegative weights, max-subtracted.
pub fn weighted_logsumexp(pairs: &[(f64, f64)]) -> f64 {
    let max = pairs
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .fold(f64::NEG_INFINITY, |a, &(v, _)| a.max(v));
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = pairs
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|&(v, w)| w * (v - max).exp())
        .sum();
    max + sum.ln()
}

/// Standard normal quantile function (Acklam's rational approximation,
/// relative error below 1.2e-9 over (0, 1)).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile argument must lie in (0, 1)");
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

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    }
}

/// Standard normal CDF via the Abramowitz–Stegun erf approximation
/// (absolute error below 1.5e-7; used for rank-test p-values only).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

/// Wilson score interval for a binomial proportion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilsonInterval {
    pub low: f64,
    pub high: f64,
}

pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> WilsonInterval {
    assert!(trials > 0, "wilson interval needs at least one trial");
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    WilsonInterval {
        low: (center - half).max(0.0),
        high: (center + half).min(1.0),
    }
}

/// Two-sided 99% normal quantile, used for exit-rate confidence reporting.
pub const Z_99: f64 = 2.5758293035489004;

/// Kendall rank correlation (tau-b) with a tie-corrected normal
/// approximation for the two-sided p-value.
#[derive(Debug, Clone, Copy)]
pub struct KendallTau {
    pub tau: f64,
    pub p_value: f64,
    pub pairs: usize,
}

pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Option<KendallTau> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = xs[i].partial_cmp(&xs[j])?;
            let dy = ys[i].partial_cmp(&ys[j])?;
            use std::cmp::Ordering::Equal;
            if dx == Equal || dy == Equal {
                continue;
            }
            if dx == dy {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let tie_groups = |vals: &[f64]| -> Vec<i64> {
        let mut sorted: Vec<f64> = vals.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut groups = Vec::new();
        let mut run = 1i64;
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                run += 1;
            } else {
                if run > 1 {
                    groups.push(run);
                }
                run = 1;
            }
        }
        if run > 1 {
            groups.push(run);
        }
        groups
    };
    let tx = tie_groups(xs);
    let ty = tie_groups(ys);
    let nf = n as i64;
    let n0 = nf * (nf - 1) / 2;
    let n1: i64 = tx.iter().map(|t| t * (t - 1) / 2).sum();
    let n2: i64 = ty.iter().map(|t| t * (t - 1) / 2).sum();
    let s = (concordant - discordant) as f64;
    let den = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    if den == 0.0 {
        return None;
    }
    let tau = s / den;

    // Tie-corrected variance of S under independence (Kendall 1970).
    let sum3 = |g: &[i64], f: fn(i64) -> i64| -> f64 { g.iter().map(|&t| f(t) as f64).sum() };
    let v0 = (nf * (nf - 1) * (2 * nf + 5)) as f64;
    let vt = sum3(&tx, |t| t * (t - 1) * (2 * t + 5));
    let vu = sum3(&ty, |t| t * (t - 1) * (2 * t + 5));
    let t2x = sum3(&tx, |t| t * (t - 1));
    let t2y = sum3(&ty, |t| t * (t - 1));
    let t3x = sum3(&tx, |t| t * (t - 1) * (t - 2));
    let t3y = sum3(&ty, |t| t * (t - 1) * (t - 2));
    let nff = nf as f64;
    let mut var = (v0 - vt - vu) / 18.0 + t2x * t2y / (2.0 * nff * (nff - 1.0));
    if n > 2 {
        var += t3x * t3y / (9.0 * nff * (nff - 1.0) * (nff - 2.0));
    }
    let p_value = if var > 0.0 {
        let z = s / var.sqrt();
        2.0 * (1.0 - normal_cdf(z.abs()))
    } else {
        1.0
    };
    Some(KendallTau {
        tau,
        p_value,
        pairs: n,
    })
}
