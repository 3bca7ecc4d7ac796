//! Reference computations written independently of the library.
#![allow(dead_code)]

/// Singular values of a row-major `rows x cols` matrix from cyclic Jacobi rotations on
/// `A^T A`, sorted descending.
pub fn jacobi_singular_values(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let n = cols;
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] = (0..rows).map(|r| a[r * cols + i] * a[r * cols + j]).sum();
        }
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| g[i * n + j] * g[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = g[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (g[q * n + q] - g[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let gkp = g[k * n + p];
                    let gkq = g[k * n + q];
                    g[k * n + p] = c * gkp - s * gkq;
                    g[k * n + q] = s * gkp + c * gkq;
                }
                for k in 0..n {
                    let gpk = g[p * n + k];
                    let gqk = g[q * n + k];
                    g[p * n + k] = c * gpk - s * gqk;
                    g[q * n + k] = s * gpk + c * gqk;
                }
            }
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|i| g[i * n + i].max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv.truncate(rows.min(cols));
    sv
}

/// `exp` of the Shannon entropy of the normalized squared singular values.
pub fn entropy_rank(sv: &[f64]) -> f64 {
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let h: f64 = sv
        .iter()
        .map(|s| s * s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h.exp()
}

pub type M2 = [[f64; 2]; 2];

pub fn mul2(a: M2, b: M2) -> M2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

pub fn fro2(a: M2) -> f64 {
    a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// `||AB - BA|| / (||A|| ||B|| + eps)` written out entry by entry.
pub fn commutator_coefficient_2x2(a: M2, b: M2, eps: f64) -> f64 {
    let ab = mul2(a, b);
    let ba = mul2(b, a);
    let d = [[ab[0][0] - ba[0][0], ab[0][1] - ba[0][1]], [ab[1][0] - ba[1][0], ab[1][1] - ba[1][1]]];
    fro2(d) / (fro2(a) * fro2(b) + eps)
}

/// `1 + 0.5 tanh(gamma (w - 1))` with tanh spelled out through exponentials.
pub fn gate_oracle(w: f64, gamma: f64) -> f64 {
    let x = gamma * (w - 1.0);
    let t = ((2.0 * x).exp() - 1.0) / ((2.0 * x).exp() + 1.0);
    1.0 + 0.5 * t
}

/// Naive left-to-right sum per entry.
pub fn naive_sum(deltas: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; deltas[0].len()];
    for d in deltas {
        for (o, v) in out.iter_mut().zip(d) {
            *o += v;
        }
    }
    out
}
