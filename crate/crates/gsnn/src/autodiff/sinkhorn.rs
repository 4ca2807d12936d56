//! Entropic optimal transport between sample sets.
//!
//! Cost is squared Euclidean, marginals are uniform, and the returned value is
//! the transport cost `Σ P∘C` of the plan after a fixed number of scaling
//! iterations. Two equivalent evaluators exist: a pure log-domain loop that
//! stores per-iteration potentials (differentiable by unrolling), and an
//! absorption-stabilized multiplicative loop for large instances where only
//! the value is needed. They follow the same iteration and agree to float
//! precision; a test pins that.

use rayon::prelude::*;

use super::SinkhornRecord;
use crate::{Error, Result};

/// Above this many cost entries the value-only path switches to the
/// absorption-stabilized loop.
const STABILIZED_THRESHOLD: usize = 1 << 16;

/// Potential magnitude that triggers absorption into the kernel.
const ABSORB_TAU: f64 = 1e30;

/// Squared Euclidean cost matrix, row-major `(t, s)`.
pub fn cost_matrix(x: &[f64], y: &[f64], t: usize, s: usize, k: usize) -> Result<Vec<f64>> {
    let mut c = vec![0.0; t * s];
    for i in 0..t {
        let xi = &x[i * k..(i + 1) * k];
        for j in 0..s {
            let yj = &y[j * k..(j + 1) * k];
            let d2: f64 = xi
                .iter()
                .zip(yj)
                .map(|(a, b)| {
                    let d = a - b;
                    d * d
                })
                .sum();
            c[i * s + j] = d2;
        }
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sinkhorn cost matrix is not finite".into()));
    }
    Ok(c)
}

/// Default regularization: 0.1 times the median pairwise squared distance,
/// floored away from zero.
pub fn resolve_eps(eps: Option<f64>, cost: &[f64]) -> f64 {
    match eps {
        Some(e) => e.max(1e-9),
        None => {
            let mut sorted = cost.to_vec();
            sorted.sort_by(f64::total_cmp);
            let mid = sorted.len() / 2;
            let median = if sorted.len() % 2 == 0 {
                0.5 * (sorted[mid - 1] + sorted[mid])
            } else {
                sorted[mid]
            };
            (0.1 * median).max(1e-6)
        }
    }
}

pub(crate) struct LogDomainRun {
    pub value: f64,
    pub f_hist: Vec<Vec<f64>>,
    pub g_hist: Vec<Vec<f64>>,
}

/// Fixed-iteration log-domain scaling. When `keep_history` is set, the per
/// iteration potentials are stored for the unrolled backward pass.
pub(crate) fn log_domain_run(
    cost: &[f64],
    t: usize,
    s: usize,
    eps: f64,
    iters: usize,
    keep_history: bool,
) -> LogDomainRun {
    let lna = (1.0 / t as f64).ln();
    let lnb = (1.0 / s as f64).ln();
    let mut f = vec![0.0; t];
    let mut g = vec![0.0; s];
    let mut f_hist = Vec::new();
    let mut g_hist = Vec::new();
    for step in 0..iters {
        for i in 0..t {
            let row = &cost[i * s..(i + 1) * s];
            let mut m = f64::NEG_INFINITY;
            for j in 0..s {
                let v = lnb + (g[j] - row[j]) / eps;
                if v > m {
                    m = v;
                }
            }
            let mut acc = 0.0;
            for j in 0..s {
                acc += (lnb + (g[j] - row[j]) / eps - m).exp();
            }
            f[i] = -eps * (m + acc.ln());
        }
        for j in 0..s {
            let mut m = f64::NEG_INFINITY;
            for i in 0..t {
                let v = lna + (f[i] - cost[i * s + j]) / eps;
                if v > m {
                    m = v;
                }
            }
            let mut acc = 0.0;
            for i in 0..t {
                acc += (lna + (f[i] - cost[i * s + j]) / eps - m).exp();
            }
            g[j] = -eps * (m + acc.ln());
        }
        if keep_history {
            f_hist.push(f.clone());
            g_hist.push(g.clone());
        }
        let _ = step;
    }
    let value = plan_cost(cost, &f, &g, t, s, eps, lna, lnb);
    LogDomainRun {
        value,
        f_hist,
        g_hist,
    }
}

fn plan_cost(
    cost: &[f64],
    f: &[f64],
    g: &[f64],
    t: usize,
    s: usize,
    eps: f64,
    lna: f64,
    lnb: f64,
) -> f64 {
    let mut total = 0.0;
    for i in 0..t {
        let row = &cost[i * s..(i + 1) * s];
        let mut acc = 0.0;
        for j in 0..s {
            let p = (lna + lnb + (f[i] + g[j] - row[j]) / eps).exp();
            acc += p * row[j];
        }
        total += acc;
    }
    total
}

/// Value-only entropic cost from a prebuilt cost matrix.
pub fn cost_from_matrix(cost: &[f64], t: usize, s: usize, eps: f64, iters: usize) -> f64 {
    if t * s > STABILIZED_THRESHOLD {
        stabilized_run(cost, t, s, eps, iters)
    } else {
        log_domain_run(cost, t, s, eps, iters, false).value
    }
}

/// Value-only entropic cost between two flat sample sets.
pub fn sinkhorn_cost(
    x: &[f64],
    y: &[f64],
    t: usize,
    s: usize,
    k: usize,
    eps: Option<f64>,
    iters: usize,
) -> Result<f64> {
    let cost = cost_matrix(x, y, t, s, k)?;
    let eps = resolve_eps(eps, &cost);
    Ok(cost_from_matrix(&cost, t, s, eps, iters))
}

/// Multiplicative scaling against the exponentiated kernel, absorbing the
/// potentials whenever the scalings leave a safe range. Iterates are the same
/// fixed points as the log-domain loop.
fn stabilized_run(cost: &[f64], t: usize, s: usize, eps: f64, iters: usize) -> f64 {
    let a = 1.0 / t as f64;
    let b = 1.0 / s as f64;
    // Absorbed potentials divided by eps, i.e. kernel exponents.
    let mut fa = vec![0.0; t];
    let mut ga = vec![0.0; s];
    let mut u = vec![1.0f64; t];
    let mut v = vec![1.0f64; s];
    let mut kt = vec![0.0; t * s];
    let mut ktt = vec![0.0; t * s];

    let rebuild = |kt: &mut Vec<f64>, ktt: &mut Vec<f64>, fa: &[f64], ga: &[f64]| {
        kt.par_chunks_mut(s).enumerate().for_each(|(i, row)| {
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = (fa[i] + ga[j] - cost[i * s + j] / eps).exp();
            }
        });
        ktt.par_chunks_mut(t).enumerate().for_each(|(j, col)| {
            for (i, slot) in col.iter_mut().enumerate() {
                *slot = (fa[i] + ga[j] - cost[i * s + j] / eps).exp();
            }
        });
    };
    // One exact log-domain half-step to seed the kernel so that initial
    // underflow cannot zero out whole rows.
    let lnb = b.ln();
    for (i, slot) in fa.iter_mut().enumerate() {
        let row = &cost[i * s..(i + 1) * s];
        let mut m = f64::NEG_INFINITY;
        for &c in row.iter().take(s) {
            let val = lnb - c / eps;
            if val > m {
                m = val;
            }
        }
        let mut acc = 0.0;
        for &c in row.iter().take(s) {
            acc += (lnb - c / eps - m).exp();
        }
        // fa = f/eps directly
        *slot = -(m + acc.ln());
    }
    rebuild(&mut kt, &mut ktt, &fa, &ga);
    // fa already holds the result of the first f-update; run its matching
    // g-update, then the remaining iterations.
    let mut first = true;
    for _ in 0..iters {
        if !first {
            u.par_iter_mut().enumerate().for_each(|(i, ui)| {
                let row = &kt[i * s..(i + 1) * s];
                let dot: f64 = row.iter().zip(&v).map(|(k, vj)| k * vj).sum();
                *ui = a / dot;
            });
        }
        first = false;
        v.par_iter_mut().enumerate().for_each(|(j, vj)| {
            let col = &ktt[j * t..(j + 1) * t];
            let dot: f64 = col.iter().zip(&u).map(|(k, ui)| k * ui).sum();
            *vj = b / dot;
        });
        let um = u.iter().fold(1.0f64, |m, &x| m.max(x.abs()).max(1.0 / x.abs()));
        let vm = v.iter().fold(1.0f64, |m, &x| m.max(x.abs()).max(1.0 / x.abs()));
        if um > ABSORB_TAU || vm > ABSORB_TAU || !um.is_finite() || !vm.is_finite() {
            for (fi, ui) in fa.iter_mut().zip(u.iter_mut()) {
                *fi += ui.ln();
                *ui = 1.0;
            }
            for (gj, vj) in ga.iter_mut().zip(v.iter_mut()) {
                *gj += vj.ln();
                *vj = 1.0;
            }
            rebuild(&mut kt, &mut ktt, &fa, &ga);
        }
    }
    for (fi, ui) in fa.iter_mut().zip(&u) {
        *fi += ui.ln();
    }
    for (gj, vj) in ga.iter_mut().zip(&v) {
        *gj += vj.ln();
    }
    (0..t)
        .into_par_iter()
        .map(|i| {
            let row = &cost[i * s..(i + 1) * s];
            let mut acc = 0.0;
            for (j, &c) in row.iter().enumerate() {
                let p = (fa[i] + ga[j] - c / eps).exp();
                acc += p * c;
            }
            acc
        })
        .sum()
}

/// Unrolled reverse pass: replays the iteration stack top-down, recomputing
/// the softmax weights from the stored potentials.
pub(crate) fn backward(
    record: &SinkhornRecord,
    x: &[f64],
    y: &[f64],
    t: usize,
    s: usize,
    k: usize,
    seed: f64,
) -> (Vec<f64>, Vec<f64>) {
    let eps = record.eps;
    let cost = &record.cost;
    let iters = record.f_hist.len();
    let lna = (1.0 / t as f64).ln();
    let lnb = (1.0 / s as f64).ln();
    let f_final = &record.f_hist[iters - 1];
    let g_final = &record.g_hist[iters - 1];

    // Partials of Σ P∘C with the potentials held at their final values.
    let mut cbar = vec![0.0; t * s];
    let mut fbar = vec![0.0; t];
    let mut gbar_next = vec![0.0; s];
    for i in 0..t {
        for j in 0..s {
            let c = cost[i * s + j];
            let p = (lna + lnb + (f_final[i] + g_final[j] - c) / eps).exp();
            cbar[i * s + j] = p * (1.0 - c / eps);
            fbar[i] += p * c / eps;
            gbar_next[j] += p * c / eps;
        }
    }

    // Walk the iterations backward. Iteration step ℓ computed f^ℓ from
    // g^{ℓ-1}, then g^ℓ from f^ℓ.
    for step in (0..iters).rev() {
        let f_l = &record.f_hist[step];
        let g_l = &record.g_hist[step];
        // g^ℓ stage: softmax weights s_ij over i.
        for j in 0..s {
            let gb = gbar_next[j];
            if gb != 0.0 {
                for i in 0..t {
                    let w = (lna + (f_l[i] - cost[i * s + j] + g_l[j]) / eps).exp();
                    fbar[i] -= gb * w;
                    cbar[i * s + j] += gb * w;
                }
            }
        }
        // f^ℓ stage: softmax weights t_ij over j, distributing into g^{ℓ-1}.
        let g_prev: Option<&Vec<f64>> = if step > 0 {
            Some(&record.g_hist[step - 1])
        } else {
            None
        };
        let zeros = vec![0.0; s];
        let gp = g_prev.map_or(&zeros[..], |v| &v[..]);
        let mut gbar_prev = vec![0.0; s];
        for i in 0..t {
            let fb = fbar[i];
            if fb != 0.0 {
                for j in 0..s {
                    let w = (lnb + (gp[j] - cost[i * s + j] + f_l[i]) / eps).exp();
                    gbar_prev[j] -= fb * w;
                    cbar[i * s + j] += fb * w;
                }
            }
        }
        gbar_next = gbar_prev;
        fbar = vec![0.0; t];
    }

    // Chain through C_ij = ‖x_i − y_j‖².
    let mut gx = vec![0.0; t * k];
    let mut gy = vec![0.0; s * k];
    for i in 0..t {
        for j in 0..s {
            let cb = cbar[i * s + j] * seed;
            if cb == 0.0 {
                continue;
            }
            for p in 0..k {
                let diff = x[i * k + p] - y[j * k + p];
                gx[i * k + p] += cb * 2.0 * diff;
                gy[j * k + p] -= cb * 2.0 * diff;
            }
        }
    }
    (gx, gy)
}
