//! Closed-form Gaussian integrals: normal CDFs up to dimension three and
//! truncated zeroth/first/second moments over the signed orthant-style
//! pieces produced by [`crate::geometry`].
//!
//! The building blocks are the univariate normal CDF, Genz's double-precision
//! bivariate routine (after Drezner & Wesolowsky), and a conditioned
//! one-dimensional quadrature for the trivariate rectangle. Moments of a
//! truncated multivariate normal follow the classical differentiation
//! identities: with `p₀ = P(y ≥ a)` for `y ~ N(0, Σ)`,
//!
//! * `E[y · 1] = Σ F` where `F_k = φ(a_k; Σ_kk) · P(y_{−k} ≥ a_{−k} | y_k = a_k)`,
//! * `E[y yᵀ · 1] = p₀ Σ + Σ H Σ` where `H = G + diag((a ⊙ F − (Σ ⊙ G) 1) / diag Σ)`
//!   and `G_kl` (for `k ≠ l`) is the bivariate density at `(a_k, a_l)` times
//!   the survival of the doubly-conditioned remainder, `G_kk = 0`.
//!
//! Entries of `a` equal to `−∞` are unconstrained coordinates: all
//! computations happen on the finite sub-block and are zero-padded, which the
//! identities above absorb exactly.

use nalgebra::{DMatrix, DVector};
use libm::erfc;

use crate::error::{Error, Result};
use crate::geometry::SignedOrthantPiece;
use crate::network::spd_cholesky;

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.8378770664093454835606594728112353;
/// `√(2π)`.
pub const SQRT_2PI: f64 = 2.5066282746310005024157652848110453;

/// Standard normal CDF `Φ(x)`.
pub fn phid(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density `φ(x)`.
pub fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Log-density of `N(mean, cov)` at `x`.
pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = spd_cholesky(cov, "mvn_logpdf covariance")?;
    let logdet = 2.0 * chol.l().diagonal().map(f64::ln).sum();
    let d = x - mean;
    let quad = d.dot(&chol.solve(&d));
    Ok(-0.5 * (x.len() as f64 * LN_2PI + logdet + quad))
}

// Gauss–Legendre (weight, node) pairs used by the bivariate routine; the
// nodes are the negative half of the symmetric rules with 6, 12 and 20
// points — each pair is evaluated at `1 − x` and `1 + x`.
const GL6: [(f64, f64); 3] = [
    (0.1713244923791705, -0.9324695142031522),
    (0.3607615730481384, -0.6612093864662647),
    (0.4679139345726904, -0.2386191860831970),
];
const GL12: [(f64, f64); 6] = [
    (0.04717533638651177, -0.9815606342467191),
    (0.1069393259953183, -0.9041172563704750),
    (0.1600783285433464, -0.7699026741943050),
    (0.2031674267230659, -0.5873179542866171),
    (0.2334925365383547, -0.3678314989981802),
    (0.2491470458134029, -0.1252334085114692),
];
const GL20: [(f64, f64); 10] = [
    (0.01761400713915212, -0.9931285991850949),
    (0.04060142980038694, -0.9639719272779138),
    (0.06267204833410906, -0.9122344282513259),
    (0.08327674157670475, -0.8391169718222188),
    (0.1019301198172404, -0.7463319064601508),
    (0.1181945319615184, -0.6360536807265150),
    (0.1316886384491766, -0.5108670019508271),
    (0.1420961093183821, -0.3737060887154196),
    (0.1491729864726037, -0.2277858511416451),
    (0.1527533871307259, -0.07652652113349733),
];

/// `P(X > h, Y > k)` for standard bivariate normal variables with
/// correlation `r` — Genz's double-precision algorithm built on Drezner &
/// Wesolowsky's integral representation, with the Gauss–Legendre rule picked
/// by `|r|` and a tail-stabilized series for `|r| > 0.925`. Accurate to
/// about 5·10⁻¹⁶; exact at `r = ±1`.
pub fn bvnd(dh: f64, dk: f64, r: f64) -> f64 {
    // Saturated limits keep the series free of ∞·0.
    if dh > 37.0 || dk > 37.0 {
        return 0.0;
    }
    if dh < -37.0 {
        return phid(-dk);
    }
    if dk < -37.0 {
        return phid(-dh);
    }
    let r = r.clamp(-1.0, 1.0);
    let quad: &[(f64, f64)] = if r.abs() < 0.3 {
        &GL6
    } else if r.abs() < 0.75 {
        &GL12
    } else {
        &GL20
    };
    let h = dh;
    let mut k = dk;
    let mut hk = h * k;
    let mut bvn = 0.0;
    let two_pi = 2.0 * std::f64::consts::PI;

    if r.abs() < 0.925 {
        if r.abs() > 0.0 {
            let hs = (h * h + k * k) / 2.0;
            let asr = r.asin();
            for &(w, x) in quad {
                for is in [-1.0f64, 1.0] {
                    let sn = (asr * (is * x + 1.0) / 2.0).sin();
                    bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
                }
            }
            bvn = bvn * asr / (2.0 * two_pi);
        }
        bvn += phid(-h) * phid(-k);
    } else {
        // Only k (and the product) flips sign for negative correlation; the
        // final assembly below compensates.
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        if r.abs() < 1.0 {
            let a_s = (1.0 - r) * (1.0 + r);
            let mut a = a_s.sqrt();
            let b_s = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 16.0;
            let asr = -(b_s / a_s + hk) / 2.0;
            if asr > -100.0 {
                bvn = a
                    * asr.exp()
                    * (1.0 - c * (b_s - a_s) * (1.0 - d * b_s / 5.0) / 3.0
                        + c * d * a_s * a_s / 5.0);
            }
            if -hk < 100.0 {
                let b = b_s.sqrt();
                bvn -= (-hk / 2.0).exp()
                    * SQRT_2PI
                    * phid(-b / a)
                    * b
                    * (1.0 - c * b_s * (1.0 - d * b_s / 5.0) / 3.0);
            }
            a /= 2.0;
            for &(w, x) in quad {
                for is in [-1.0f64, 1.0] {
                    let xs = (a * (is * x + 1.0)).powi(2);
                    let rs = (1.0 - xs).sqrt();
                    let asr = -(b_s / xs + hk) / 2.0;
                    if asr > -100.0 {
                        bvn += a
                            * w
                            * asr.exp()
                            * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                                - (1.0 + c * xs * (1.0 + d * xs)));
                    }
                }
            }
            bvn = -bvn / two_pi;
        }
        if r > 0.0 {
            bvn += phid(-h.max(k));
        } else {
            bvn = -bvn;
            if k > h {
                bvn += phid(k) - phid(h);
            }
        }
    }
    bvn.clamp(0.0, 1.0)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` with absolute tolerance
/// `tol` (Richardson-corrected).
pub(crate) fn adaptive_simpson(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 48)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &mut impl FnMut(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
}

/// `P(y ≥ lower)` for `y ~ N(0, sigma)`. Entries of `lower` equal to `−∞`
/// are marginalized away; the remaining dimension must be at most three.
/// A `+∞` entry makes the event empty (probability zero).
pub fn rect_cdf(lower: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    if lower.iter().any(|&v| v == f64::INFINITY) {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..lower.len()).filter(|&i| lower[i].is_finite()).collect();
    match idx.len() {
        0 => Ok(1.0),
        1 => {
            let i = idx[0];
            Ok(phid(-lower[i] / sigma[(i, i)].sqrt()))
        }
        2 => {
            let (i, j) = (idx[0], idx[1]);
            let si = sigma[(i, i)].sqrt();
            let sj = sigma[(j, j)].sqrt();
            let r = sigma[(i, j)] / (si * sj);
            Ok(bvnd(lower[i] / si, lower[j] / sj, r))
        }
        3 => {
            let a = DVector::from_fn(3, |q, _| lower[idx[q]]);
            let s = DMatrix::from_fn(3, 3, |p, q| sigma[(idx[p], idx[q])]);
            rect_cdf3(&a, &s)
        }
        n => Err(Error::InvalidInput(format!(
            "rectangle probabilities support dimension ≤ 3, got {n}"
        ))),
    }
}

/// Trivariate upper-rectangle probability by conditioning on the first
/// coordinate and integrating a bivariate slice with adaptive Simpson.
fn rect_cdf3(a: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let s0 = sigma[(0, 0)].sqrt();
    if a[0] / s0 > 13.0 {
        return Ok(0.0);
    }
    // Conditional of (y1, y2) given y0 = t: mean (s10, s20)·t/s00, fixed cov.
    let k10 = sigma[(0, 1)] / sigma[(0, 0)];
    let k20 = sigma[(0, 2)] / sigma[(0, 0)];
    let c11 = sigma[(1, 1)] - sigma[(0, 1)] * k10;
    let c22 = sigma[(2, 2)] - sigma[(0, 2)] * k20;
    let c12 = sigma[(1, 2)] - sigma[(0, 1)] * k20;
    let (c1, c2) = (c11.max(1e-300).sqrt(), c22.max(1e-300).sqrt());
    let rc = (c12 / (c1 * c2)).clamp(-1.0, 1.0);

    let lo = (a[0] / s0).max(-13.0);
    let hi = 13.0f64;
    if lo >= hi {
        return Ok(0.0);
    }
    let mut integrand = |u: f64| {
        let t = u * s0; // standardized conditioning variable
        let h1 = (a[1] - k10 * t) / c1;
        let h2 = (a[2] - k20 * t) / c2;
        phi(u) * bvnd(h1, h2, rc)
    };
    // Pre-split so the adaptive pass cannot miss a narrow density bump.
    let panels = 8;
    let step = (hi - lo) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let pa = lo + p as f64 * step;
        total += adaptive_simpson(&mut integrand, pa, pa + step, 1e-12 / panels as f64);
    }
    Ok(total.clamp(0.0, 1.0))
}

/// Bivariate normal density at `(u, v)` with zero mean and covariance `c`.
fn binormal_pdf(u: f64, v: f64, c: &DMatrix<f64>) -> Result<f64> {
    let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
    if det <= 0.0 {
        return Err(Error::Numerical(format!(
            "degenerate 2×2 covariance (det = {det:.3e})"
        )));
    }
    let q = (c[(1, 1)] * u * u - 2.0 * c[(0, 1)] * u * v + c[(0, 0)] * v * v) / det;
    Ok((-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt()))
}

/// The vector `F` of the first-moment identity: `F_k` is the density of
/// `y_k` at `a_k` times the survival probability of the remaining
/// coordinates conditioned on `y_k = a_k`. All entries of `a` must be
/// finite; dimension at most three.
pub fn f_vector(a: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = a.len();
    let mut f = DVector::zeros(n);
    for k in 0..n {
        let var = sigma[(k, k)];
        let dens = (-0.5 * a[k] * a[k] / var).exp() / (SQRT_2PI * var.sqrt());
        if dens == 0.0 {
            continue;
        }
        let rest: Vec<usize> = (0..n).filter(|&i| i != k).collect();
        let tail = if rest.is_empty() {
            1.0
        } else {
            let b = DVector::from_fn(rest.len(), |i, _| {
                a[rest[i]] - sigma[(rest[i], k)] / var * a[k]
            });
            let cond = DMatrix::from_fn(rest.len(), rest.len(), |i, j| {
                sigma[(rest[i], rest[j])] - sigma[(rest[i], k)] * sigma[(k, rest[j])] / var
            });
            rect_cdf(&b, &cond)?
        };
        f[k] = dens * tail;
    }
    Ok(f)
}

/// The symmetric matrix `G` of the second-moment identity: `G_kl` (for
/// `k ≠ l`) is the bivariate density of `(y_k, y_l)` at `(a_k, a_l)` times
/// the survival of the remaining coordinates conditioned on both; the
/// diagonal is zero by convention.
pub fn g_matrix(a: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.len();
    let mut g = DMatrix::zeros(n, n);
    for k in 0..n {
        for l in k + 1..n {
            let c = DMatrix::from_fn(2, 2, |p, q| {
                let ip = if p == 0 { k } else { l };
                let iq = if q == 0 { k } else { l };
                sigma[(ip, iq)]
            });
            let dens2 = binormal_pdf(a[k], a[l], &c)?;
            if dens2 == 0.0 {
                continue;
            }
            let rest: Vec<usize> = (0..n).filter(|&i| i != k && i != l).collect();
            let tail = if rest.is_empty() {
                1.0
            } else {
                // Condition the remainder on (y_k, y_l) = (a_k, a_l).
                let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
                let cinv_a = DVector::from_column_slice(&[
                    (c[(1, 1)] * a[k] - c[(0, 1)] * a[l]) / det,
                    (c[(0, 0)] * a[l] - c[(0, 1)] * a[k]) / det,
                ]);
                let b = DVector::from_fn(rest.len(), |i, _| {
                    let m = rest[i];
                    a[m] - sigma[(m, k)] * cinv_a[0] - sigma[(m, l)] * cinv_a[1]
                });
                let cond = DMatrix::from_fn(rest.len(), rest.len(), |i, j| {
                    let (mi, mj) = (rest[i], rest[j]);
                    let si = DVector::from_column_slice(&[sigma[(mi, k)], sigma[(mi, l)]]);
                    let sj = DVector::from_column_slice(&[sigma[(mj, k)], sigma[(mj, l)]]);
                    let cinv_sj = DVector::from_column_slice(&[
                        (c[(1, 1)] * sj[0] - c[(0, 1)] * sj[1]) / det,
                        (c[(0, 0)] * sj[1] - c[(0, 1)] * sj[0]) / det,
                    ]);
                    sigma[(mi, mj)] - si.dot(&cinv_sj)
                });
                rect_cdf(&b, &cond)?
            };
            g[(k, l)] = dens2 * tail;
            g[(l, k)] = g[(k, l)];
        }
    }
    Ok(g)
}

/// Zeroth/first/second truncated moments of `N(0, sigma)` over the upper
/// rectangle `{y ≥ a}`:
/// `(p₀, E[y·1_{y≥a}], E[y yᵀ·1_{y≥a}])`. Entries `a_k = −∞` are
/// unconstrained (any `+∞` gives all-zero moments); the finite sub-dimension
/// must be at most three.
pub fn orthant_moments(
    a: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let (p0, f, h) = orthant_stats(a, sigma)?;
    let m1 = sigma * &f;
    let m2 = symmetrize(&(p0 * sigma + sigma * &h * sigma));
    Ok((p0, m1, m2))
}

/// `(p₀, F, H)` for the upper rectangle `{y ≥ a}` under `N(0, sigma)`,
/// computed on the finite sub-block of `a` and zero-padded to full size.
fn orthant_stats(
    a: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let s = a.len();
    if a.iter().any(|&v| v == f64::INFINITY) {
        return Ok((0.0, DVector::zeros(s), DMatrix::zeros(s, s)));
    }
    let idx: Vec<usize> = (0..s).filter(|&i| a[i].is_finite()).collect();
    let k = idx.len();
    if k == 0 {
        return Ok((1.0, DVector::zeros(s), DMatrix::zeros(s, s)));
    }
    let aj = DVector::from_fn(k, |i, _| a[idx[i]]);
    let tj = DMatrix::from_fn(k, k, |i, j| sigma[(idx[i], idx[j])]);

    let p0 = rect_cdf(&aj, &tj)?;
    let f = f_vector(&aj, &tj)?;
    let g = g_matrix(&aj, &tj)?;
    let mut h = g.clone();
    for q in 0..k {
        let coupled: f64 = (0..k).map(|l| tj[(q, l)] * g[(q, l)]).sum();
        h[(q, q)] = (aj[q] * f[q] - coupled) / tj[(q, q)];
    }

    let mut f_full = DVector::zeros(s);
    let mut h_full = DMatrix::zeros(s, s);
    for (i, &p) in idx.iter().enumerate() {
        f_full[p] = f[i];
        for (j, &q) in idx.iter().enumerate() {
            h_full[(p, q)] = h[(i, j)];
        }
    }
    Ok((p0, f_full, h_full))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Zeroth, first and second moments of a Gaussian over a region.
#[derive(Debug, Clone)]
pub struct RegionMoments {
    /// `∫_K φ(u) du` — the Gaussian mass of the region.
    pub e0: f64,
    /// `∫_K u φ(u) du`.
    pub e1: DVector<f64>,
    /// `∫_K u uᵀ φ(u) du`.
    pub e2: DMatrix<f64>,
}

/// Moments of `N(0, sigma)` over the translated region `K = ω − shift`,
/// where `ω` is described by its signed decomposition `pieces`.
///
/// Each piece `{z : R z ≥ l}` becomes `{u : R u ≥ l − R·shift}` and, through
/// `y = R u` with `y ~ N(0, R Σ Rᵀ)`, an upper rectangle; the rectangle
/// moments map back via `Σ Rᵀ F` and `p₀ Σ + Σ (Rᵀ H R) Σ`, so only the `F`
/// and `H` accumulators are carried across pieces.
pub fn region_moments(
    pieces: &[SignedOrthantPiece],
    shift: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<RegionMoments> {
    let s = sigma.nrows();
    let mut e0 = 0.0;
    let mut f_acc = DVector::zeros(s);
    let mut h_acc = DMatrix::zeros(s, s);
    for piece in pieces {
        let lower = piece.lower_shifted(shift);
        let t = symmetrize(&(&piece.rows * sigma * piece.rows.transpose()));
        let (p0, f, h) = orthant_stats(&lower, &t)?;
        e0 += piece.sign * p0;
        f_acc += piece.sign * piece.rows.transpose() * f;
        h_acc += piece.sign * piece.rows.transpose() * h * &piece.rows;
    }
    let e1 = sigma * f_acc;
    let e2 = symmetrize(&(sigma * h_acc * sigma + e0 * sigma));
    Ok(RegionMoments { e0, e1, e2 })
}
