//! Independent numerical oracles: brute-force estimators the analytic
//! pipeline is validated against.
//!
//! Nothing here reuses the partition/moment machinery (beyond polytope
//! H-representations for section bounds): marginals come from plain prior
//! Monte Carlo, posterior functionals from self-normalized importance
//! sampling with cluster-bootstrap standard errors, region moments from
//! two-grid composite Simpson quadrature over exact polytope sections, and
//! M-step maximizers from derivative-free Newton / golden-section search.
//!
//! All samplers are deterministic in their seed and independent of the rayon
//! thread count: samples are generated in fixed-size batches, each from its
//! own counter-derived RNG stream, and reduced in batch order.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{RegionMoments, LN_2PI, SQRT_2PI};
use crate::geometry::PolytopeH;
use crate::network::{GenerativeNetwork, NoiseModel};
use crate::rng;

/// Samples generated per RNG stream; fixed so results do not depend on the
/// thread count.
const MC_BATCH: usize = 8192;

/// A scalar Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct OracleEstimate {
    /// The point estimate.
    pub value: f64,
    /// Standard error of the estimate.
    pub stderr: f64,
    /// Number of samples used.
    pub n: usize,
}

/// A vector-valued importance-sampling estimate.
#[derive(Debug, Clone)]
pub struct IsEstimate {
    /// Self-normalized point estimates.
    pub value: DVector<f64>,
    /// Bootstrap standard errors, one per component.
    pub stderr: DVector<f64>,
    /// Effective sample size `(Σw)²/Σw²`; below ~50 the estimate is
    /// unreliable.
    pub ess: f64,
    /// Number of proposal samples.
    pub n: usize,
}

/// Log-density of the observation model `x | z ~ N(g(z), Σ_x)` evaluated
/// with cached inverse/log-determinant.
fn obs_logpdf(
    x: &DVector<f64>,
    g: &DVector<f64>,
    sx_inv: &DMatrix<f64>,
    logdet_x: f64,
) -> f64 {
    let d = x - g;
    let quad = d.dot(&(sx_inv * &d));
    -0.5 * (x.len() as f64 * LN_2PI + logdet_x + quad)
}

/// Monte-Carlo estimate of the marginal density `p(x) = E_{z~N(0,Σ_z)}
/// [φ(x; g(z), Σ_x)]`, log-stabilized: with `m = max_i log w_i` the estimate
/// is `e^m · mean(e^{log w_i − m})`, immune to underflow of individual
/// weights.
pub fn mc_marginal(
    net: &GenerativeNetwork,
    noise: &NoiseModel,
    x: &DVector<f64>,
    n: usize,
    seed: u64,
) -> Result<OracleEstimate> {
    if n == 0 {
        return Err(Error::InvalidInput("mc_marginal needs n ≥ 1".into()));
    }
    let logs = sample_obs_logweights(net, noise, x, n, seed);
    let m = logs
        .iter()
        .flatten()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return Ok(OracleEstimate { value: 0.0, stderr: 0.0, n });
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for batch in &logs {
        for &lw in batch {
            let u = (lw - m).exp();
            sum += u;
            sum_sq += u * u;
        }
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    Ok(OracleEstimate {
        value: m.exp() * mean,
        stderr: m.exp() * (var / nf).sqrt(),
        n,
    })
}

/// Per-batch log observation weights `log φ(x; g(z_b,i), Σ_x)` for prior
/// samples `z ~ N(0, Σ_z)`, batch `b` drawn from stream `(seed, b)`.
fn sample_obs_logweights(
    net: &GenerativeNetwork,
    noise: &NoiseModel,
    x: &DVector<f64>,
    n: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let s = net.latent_dim();
    let chol_z = noise.chol_z_l();
    let sx_inv = noise.sigma_x_inv();
    let logdet_x = noise.logdet_sigma_x();
    let n_batches = n.div_ceil(MC_BATCH);
    (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, b as u64);
            let len = MC_BATCH.min(n - b * MC_BATCH);
            let mut out = Vec::with_capacity(len);
            let mut scratch = net.scratch();
            for _ in 0..len {
                let z = &chol_z * rng::standard_normal_vector(&mut r, s);
                let g = net.forward_into(&z, &mut scratch);
                out.push(obs_logpdf(x, g, sx_inv, logdet_x));
            }
            out
        })
        .collect()
}

/// Self-normalized importance-sampling estimate of `E[f(z) | x]` with the
/// prior `N(0, Σ_z)` as proposal and `φ(x; g(z), Σ_x)` as unnormalized
/// weight. Standard errors come from a cluster bootstrap over sample
/// batches (200 resamples), which avoids holding per-sample values.
pub fn is_posterior_expectation<F>(
    net: &GenerativeNetwork,
    noise: &NoiseModel,
    x: &DVector<f64>,
    n: usize,
    seed: u64,
    out_dim: usize,
    f: F,
) -> Result<IsEstimate>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    if n == 0 {
        return Err(Error::InvalidInput("importance sampler needs n ≥ 1".into()));
    }
    let s = net.latent_dim();
    let chol_z = noise.chol_z_l();
    let sx_inv = noise.sigma_x_inv();
    let logdet_x = noise.logdet_sigma_x();
    let n_batches = n.div_ceil(MC_BATCH);

    // Pass 1: the global maximum log-weight, for stabilization.
    let m = sample_obs_logweights(net, noise, x, n, seed)
        .iter()
        .flatten()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return Err(Error::Numerical(
            "importance sampler: all weights underflowed to zero".into(),
        ));
    }

    // Pass 2: regenerate the same samples (streams are deterministic) and
    // accumulate per-batch weight and weighted-functional sums.
    struct BatchSums {
        sw: f64,
        sw2: f64,
        swf: DVector<f64>,
    }
    let sums: Vec<BatchSums> = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, b as u64);
            let len = MC_BATCH.min(n - b * MC_BATCH);
            let mut scratch = net.scratch();
            let mut sw = 0.0;
            let mut sw2 = 0.0;
            let mut swf = DVector::zeros(out_dim);
            for _ in 0..len {
                let z = &chol_z * rng::standard_normal_vector(&mut r, s);
                let g = net.forward_into(&z, &mut scratch);
                let w = (obs_logpdf(x, g, sx_inv, logdet_x) - m).exp();
                if w > 0.0 {
                    sw += w;
                    sw2 += w * w;
                    swf += w * f(&z);
                }
            }
            BatchSums { sw, sw2, swf }
        })
        .collect();

    let total_w: f64 = sums.iter().map(|b| b.sw).sum();
    let total_w2: f64 = sums.iter().map(|b| b.sw2).sum();
    if total_w <= 0.0 {
        return Err(Error::Numerical(
            "importance sampler: total weight is zero".into(),
        ));
    }
    let mut total_wf = DVector::zeros(out_dim);
    for b in &sums {
        total_wf += &b.swf;
    }
    let value = &total_wf / total_w;
    let ess = total_w * total_w / total_w2;

    // Cluster bootstrap over batches.
    let resamples = 200;
    let mut boot = rng::stream(seed ^ 0x626f_6f74, 0);
    let mut acc = DVector::zeros(out_dim);
    let mut acc_sq = DVector::zeros(out_dim);
    use rand::Rng as _;
    for _ in 0..resamples {
        let mut rw = 0.0;
        let mut rwf = DVector::zeros(out_dim);
        for _ in 0..n_batches {
            let pick = boot.gen_range(0..n_batches);
            rw += sums[pick].sw;
            rwf += &sums[pick].swf;
        }
        let theta = if rw > 0.0 { rwf / rw } else { value.clone() };
        acc += &theta;
        acc_sq += theta.component_mul(&theta);
    }
    let rf = resamples as f64;
    let stderr = DVector::from_fn(out_dim, |i, _| {
        ((acc_sq[i] / rf - (acc[i] / rf).powi(2)).max(0.0)).sqrt()
    });

    Ok(IsEstimate { value, stderr, ess, n })
}

/// Importance-sampling estimate of the posterior mean and second moment:
/// the first `S` components are `E[z | x]`, the remaining `S²` the row-major
/// entries of `E[z zᵀ | x]`.
pub fn is_posterior_moments(
    net: &GenerativeNetwork,
    noise: &NoiseModel,
    x: &DVector<f64>,
    n: usize,
    seed: u64,
) -> Result<IsEstimate> {
    let s = net.latent_dim();
    is_posterior_expectation(net, noise, x, n, seed, s + s * s, |z| {
        let mut out = DVector::zeros(s + s * s);
        for i in 0..s {
            out[i] = z[i];
            for j in 0..s {
                out[s + i * s + j] = z[i] * z[j];
            }
        }
        out
    })
}

/// Monte-Carlo estimate of the prior mass of the region carrying `code`:
/// the fraction of `z ~ N(0, Σ_z)` samples whose activation code matches,
/// with binomial standard error.
pub fn mc_region_mass(
    net: &GenerativeNetwork,
    noise: &NoiseModel,
    code: &crate::network::ActivationCode,
    n: usize,
    seed: u64,
) -> Result<OracleEstimate> {
    if n == 0 {
        return Err(Error::InvalidInput("mc_region_mass needs n ≥ 1".into()));
    }
    let s = net.latent_dim();
    let chol_z = noise.chol_z_l();
    let n_batches = n.div_ceil(MC_BATCH);
    let hits: usize = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, b as u64);
            let len = MC_BATCH.min(n - b * MC_BATCH);
            let mut h = 0usize;
            for _ in 0..len {
                let z = &chol_z * rng::standard_normal_vector(&mut r, s);
                if net.activation_code(&z) == *code {
                    h += 1;
                }
            }
            h
        })
        .sum();
    let p = hits as f64 / n as f64;
    Ok(OracleEstimate {
        value: p,
        stderr: (p * (1.0 - p) / n as f64).sqrt(),
        n,
    })
}

/// The lower/upper bounds of a 1-D polytope `{z : n·z ≤ c}`.
fn interval_bounds(poly: &PolytopeH) -> Result<(f64, f64)> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for i in 0..poly.num_faces() {
        let n = poly.normals[(i, 0)];
        let c = poly.offsets[i];
        if n > 0.0 {
            hi = hi.min(c / n);
        } else if n < 0.0 {
            lo = lo.max(c / n);
        } else if c < 0.0 {
            return Err(Error::InvalidInput("infeasible interval".into()));
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidInput(
            "interval quadrature needs a bounded region".into(),
        ));
    }
    Ok((lo, hi))
}

/// Exact section `{u₁ : (u₁, y) ∈ poly}` of a 2-D polytope at height `y`;
/// `None` when empty.
fn section_bounds(poly: &PolytopeH, y: f64) -> Option<(f64, f64)> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for i in 0..poly.num_faces() {
        let (n1, n2) = (poly.normals[(i, 0)], poly.normals[(i, 1)]);
        let rhs = poly.offsets[i] - n2 * y;
        if n1 > 1e-14 {
            hi = hi.min(rhs / n1);
        } else if n1 < -1e-14 {
            lo = lo.max(rhs / n1);
        } else if rhs < 0.0 {
            return None;
        }
    }
    (lo < hi && lo.is_finite() && hi.is_finite()).then_some((lo, hi))
}

/// Composite-Simpson integral of `f` over `[a, b]` with `2m` panels.
fn simpson(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64, m: usize) -> f64 {
    let n = 2 * m;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Two-grid composite-Simpson estimate of the moments of `N(0, sigma)` over
/// the translated polytope `K = poly − shift` (latent dimension ≤ 2),
/// returning the Richardson-corrected moments and a per-component error
/// estimate `|I_{2m} − I_m| / 15` (maximum over components).
///
/// The outer integral runs over the second coordinate with panels split at
/// the polytope's vertex ordinates — sections change their active faces only
/// there, so each panel's integrand is smooth; sections themselves are exact
/// interval bounds from the H-representation, and the inner integral is also
/// composite Simpson. Base resolution `m` panels per segment and per section.
pub fn quad_region_moments(
    poly: &PolytopeH,
    shift: &DVector<f64>,
    sigma: &DMatrix<f64>,
    m: usize,
) -> Result<(RegionMoments, f64)> {
    let s = poly.dim();
    // Translate the polytope: rows n·u ≤ c − n·shift.
    let shifted = PolytopeH {
        normals: poly.normals.clone(),
        offsets: DVector::from_fn(poly.num_faces(), |i, _| {
            poly.offsets[i] - poly.normals.row(i).transpose().dot(shift)
        }),
        origins: poly.origins.clone(),
        infeasible: poly.infeasible,
    };
    match s {
        1 => {
            let (lo, hi) = interval_bounds(&shifted)?;
            let var = sigma[(0, 0)];
            let dens = move |u: f64| (-0.5 * u * u / var).exp() / (SQRT_2PI * var.sqrt());
            let moments = |mm: usize| -> (f64, f64, f64) {
                (
                    simpson(&mut |u| dens(u), lo, hi, mm),
                    simpson(&mut |u| u * dens(u), lo, hi, mm),
                    simpson(&mut |u| u * u * dens(u), lo, hi, mm),
                )
            };
            let c = moments(m);
            let fine = moments(2 * m);
            let vals = [
                richardson(c.0, fine.0),
                richardson(c.1, fine.1),
                richardson(c.2, fine.2),
            ];
            let err = vals.iter().map(|v| v.1).fold(0.0f64, f64::max);
            Ok((
                RegionMoments {
                    e0: vals[0].0,
                    e1: DVector::from_element(1, vals[1].0),
                    e2: DMatrix::from_element(1, 1, vals[2].0),
                },
                err,
            ))
        }
        2 => {
            let verts = crate::geometry::vertex_enumeration(&shifted);
            if verts.len() < 3 {
                return Err(Error::InvalidInput(
                    "2-D quadrature needs a full-dimensional region".into(),
                ));
            }
            let mut ys: Vec<f64> = verts.iter().map(|v| v[1]).collect();
            ys.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            ys.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

            let det = sigma[(0, 0)] * sigma[(1, 1)] - sigma[(0, 1)] * sigma[(1, 0)];
            if det <= 0.0 {
                return Err(Error::NotSpd("quadrature covariance".into()));
            }
            let norm = 1.0 / (2.0 * std::f64::consts::PI * det.sqrt());
            let dens = move |u1: f64, u2: f64| {
                let q = (sigma[(1, 1)] * u1 * u1 - 2.0 * sigma[(0, 1)] * u1 * u2
                    + sigma[(0, 0)] * u2 * u2)
                    / det;
                norm * (-0.5 * q).exp()
            };

            // moment layout: e0, e1x, e1y, e2xx, e2xy, e2yy
            let integrate = |mm: usize| -> [f64; 6] {
                let mut acc = [0.0; 6];
                for seg in ys.windows(2) {
                    let (ya, yb) = (seg[0], seg[1]);
                    if yb - ya < 1e-13 {
                        continue;
                    }
                    for idx in 0..6 {
                        let mut outer = |y: f64| -> f64 {
                            let Some((xlo, xhi)) = section_bounds(&shifted, y) else {
                                return 0.0;
                            };
                            let mut inner = |u: f64| -> f64 {
                                let d = dens(u, y);
                                match idx {
                                    0 => d,
                                    1 => u * d,
                                    2 => y * d,
                                    3 => u * u * d,
                                    4 => u * y * d,
                                    _ => y * y * d,
                                }
                            };
                            simpson(&mut inner, xlo, xhi, mm)
                        };
                        acc[idx] += simpson(&mut outer, ya, yb, mm);
                    }
                }
                acc
            };
            let coarse = integrate(m);
            let fine = integrate(2 * m);
            let mut vals = [0.0; 6];
            let mut err = 0.0f64;
            for i in 0..6 {
                let (v, e) = richardson(coarse[i], fine[i]);
                vals[i] = v;
                err = err.max(e);
            }
            Ok((
                RegionMoments {
                    e0: vals[0],
                    e1: DVector::from_column_slice(&[vals[1], vals[2]]),
                    e2: DMatrix::from_row_slice(2, 2, &[vals[3], vals[4], vals[4], vals[5]]),
                },
                err,
            ))
        }
        other => Err(Error::InvalidInput(format!(
            "quadrature oracle supports latent dimension ≤ 2, got {other}"
        ))),
    }
}

/// Richardson extrapolation for an O(h⁴) rule: corrected value and error
/// estimate from a coarse/fine pair.
fn richardson(coarse: f64, fine: f64) -> (f64, f64) {
    let delta = (fine - coarse) / 15.0;
    (fine + delta, delta.abs())
}

/// Derivative-free Newton ascent of `f` from `x0`: central-difference
/// gradient and Hessian with step `h`, with step-halving safeguards. Exact
/// (to roundoff) in two iterations when `f` is a concave quadratic, which is
/// what the frozen EM objectives are.
pub fn maximize_newton(
    f: &impl Fn(&DVector<f64>) -> f64,
    x0: &DVector<f64>,
    h: f64,
    iters: usize,
) -> DVector<f64> {
    let dim = x0.len();
    let mut x = x0.clone();
    for _ in 0..iters {
        let fx = f(&x);
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let (fp, fm) = (f(&xp), f(&xm));
            grad[i] = (fp - fm) / (2.0 * h);
            hess[(i, i)] = (fp - 2.0 * fx + fm) / (h * h);
            for j in i + 1..dim {
                let mut xpp = x.clone();
                let mut xpm = x.clone();
                let mut xmp = x.clone();
                let mut xmm = x.clone();
                xpp[i] += h;
                xpp[j] += h;
                xpm[i] += h;
                xpm[j] -= h;
                xmp[i] -= h;
                xmp[j] += h;
                xmm[i] -= h;
                xmm[j] -= h;
                let v = (f(&xpp) - f(&xpm) - f(&xmp) + f(&xmm)) / (4.0 * h * h);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        let Some(step) = hess.lu().solve(&(-&grad)) else {
            break;
        };
        // Halve until the step improves (guards non-quadratic corners).
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &x + scale * &step;
            if f(&cand) >= fx {
                x = cand;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted || (scale * step.norm()) < 1e-12 {
            break;
        }
    }
    x
}

/// Golden-section maximization of a unimodal scalar function on `[lo, hi]`.
pub fn maximize_golden(f: &impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}
