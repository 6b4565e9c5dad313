//! Helpers shared by integration tests.

pub fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Accelerated proximal gradient on the dense design, intercept unpenalized.
/// Written against the objective only, sharing no code with the solver.
pub fn proximal_oracle(x: &[Vec<f64>], y: &[f64], w: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let n = y.len();
    let p = x.first().map_or(0, Vec::len);
    let wt: f64 = w.iter().sum();
    // Lipschitz bound from the Frobenius norm of [1 X].
    let frob: f64 = (0..n).map(|i| w[i] * (1.0 + x[i].iter().map(|v| v * v).sum::<f64>())).sum();
    let step = 4.0 * wt / frob;
    let grad = |b0: f64, b: &[f64]| {
        let mut g0 = 0.0;
        let mut g = vec![0.0; p];
        for i in 0..n {
            let eta = b0 + x[i].iter().zip(b).map(|(a, c)| a * c).sum::<f64>();
            let r = w[i] * (expit(eta) - y[i]) / wt;
            g0 += r;
            for j in 0..p {
                g[j] += r * x[i][j];
            }
        }
        (g0, g)
    };
    let (mut b0, mut b) = (0.0, vec![0.0; p]);
    let (mut z0, mut z) = (0.0, vec![0.0; p]);
    let mut t = 1.0f64;
    for _ in 0..200_000 {
        let (g0, g) = grad(z0, &z);
        let nb0 = z0 - step * g0;
        let nb: Vec<f64> = z
            .iter()
            .zip(&g)
            .map(|(zj, gj)| {
                let u = zj - step * gj;
                u.signum() * (u.abs() - step * lambda).max(0.0)
            })
            .collect();
        let nt = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / nt;
        let moved = (nb0 - b0).abs() + nb.iter().zip(&b).map(|(a, c)| (a - c).abs()).sum::<f64>();
        z0 = nb0 + mom * (nb0 - b0);
        z = nb.iter().zip(&b).map(|(a, c)| a + mom * (a - c)).collect();
        b0 = nb0;
        b = nb;
        t = nt;
        if moved < 1e-13 {
            break;
        }
    }
    (b0, b)
}

pub fn dense_eta(x: &[Vec<f64>], b0: f64, b: &[f64]) -> Vec<f64> {
    x.iter().map(|r| b0 + r.iter().zip(b).map(|(a, c)| a * c).sum::<f64>()).collect()
}
