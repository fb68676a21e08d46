//! Rank, moment and significance helpers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::EvalError;
use crate::numcore::RngStream;
use crate::phantom::Image;

/// Area under the ROC curve as the Mann–Whitney statistic; tied scores
/// share their average rank.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite("score"));
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let pos_rank: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l != 0).map(|(r, _)| r).sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank - p * (p + 1.0) / 2.0) / (p * n))
}

fn moments(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>), EvalError> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n <= d || d == 0 {
        return Err(EvalError::TooFewSamples { n, dim: d });
    }
    let mut mean = DVector::zeros(d);
    for r in rows {
        if r.len() != d {
            return Err(EvalError::Length(r.len(), d));
        }
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite("covariance"));
    }
    Ok((mean, cov))
}

/// Principal square root of a symmetric positive semi-definite matrix;
/// negative eigenvalues from round-off are clipped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets:
/// `‖μ_A−μ_B‖² + Tr(Σ_A + Σ_B − 2(Σ_A Σ_B)^{1/2})`.
///
/// The trace of the cross term is taken as `Tr((Σ_A^{1/2} Σ_B Σ_A^{1/2})^{1/2})`,
/// which has the same eigenvalues as `Σ_A Σ_B` but is symmetric.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, EvalError> {
    let (ma, ca) = moments(a)?;
    let (mb, cb) = moments(b)?;
    if ma.len() != mb.len() {
        return Err(EvalError::Length(ma.len(), mb.len()));
    }
    let ra = psd_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(EvalError::NonFinite("distance"));
    }
    Ok(d.max(0.0))
}

pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over every `8×8` window (stride 1) for images in `[0, 1]`.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, EvalError> {
    if a.dims() != b.dims() {
        return Err(EvalError::Length(a.pixels().len(), b.pixels().len()));
    }
    let (h, w) = a.dims();
    let win = SSIM_WINDOW.min(h).min(w);
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..=h - win {
        for c in 0..=w - win {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in r..r + win {
                for j in c..c + win {
                    let (x, y) = (a.get(i, j), b.get(i, j));
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (mu_a, mu_b) = (sa / n, sb / n);
            let var_a = (saa / n - mu_a * mu_a).max(0.0);
            let var_b = (sbb / n - mu_b * mu_b).max(0.0);
            let cov = sab / n - mu_a * mu_b;
            total += ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub const DEFAULT_SSIM_PAIRS: usize = 1000;

/// Mean SSIM over random distinct pairs; lower means more diverse. The set
/// is put into a canonical order first and pairs are drawn from a stream
/// keyed only by the seed of `stream`, so neither the set order nor the
/// stream label changes the result. When `n_pairs` covers every pair, all
/// pairs are used.
pub fn ssim_diversity(images: &[Image], n_pairs: usize, stream: &RngStream) -> Result<f64, EvalError> {
    let n = images.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples { n, dim: 1 });
    }
    let mut sorted: Vec<&Image> = images.iter().collect();
    sorted.sort_by(|a, b| {
        a.pixels()
            .iter()
            .zip(b.pixels())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let all = n * (n - 1) / 2;
    let mut pairs = Vec::new();
    if n_pairs >= all {
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((i, j));
            }
        }
    } else {
        let mut s = RngStream::new(stream.seed(), "eval/ssim-pairs");
        while pairs.len() < n_pairs.max(1) {
            let i = s.below(n);
            let j = s.below(n);
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    let mut total = 0.0;
    for &(i, j) in &pairs {
        total += ssim(sorted[i], sorted[j])?;
    }
    Ok(total / pairs.len() as f64)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

/// One-sample t statistic and one-sided p-value for `H1: mean > mu0`.
pub fn t_test_greater(xs: &[f64], mu0: f64) -> Result<(f64, f64), EvalError> {
    let n = xs.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples { n, dim: 1 });
    }
    let sd = std_dev(xs);
    let m = mean(xs);
    if sd == 0.0 {
        let p = if m > mu0 { 0.0 } else { 1.0 };
        return Ok((if m > mu0 { f64::INFINITY } else { f64::NEG_INFINITY }, p));
    }
    let t = (m - mu0) / (sd / (n as f64).sqrt());
    Ok((t, 1.0 - student_t_cdf(t, (n - 1) as f64)))
}

/// CDF of Student's t distribution with `nu` degrees of freedom.
pub fn student_t_cdf(t: f64, nu: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let x = nu / (nu + t * t);
    let tail = 0.5 * reg_inc_beta(nu / 2.0, 0.5, x);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7.
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by continued fraction.
fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}
