use opdgeo::store::RunDir;

fn main() {
    let run = RunDir::open(std::path::Path::new("/tmp/cli-probe/runs"), "opd-s11-3a5d0292").unwrap();
    let delta = run.load_delta(0, 2).unwrap();
    for (path, m) in delta.iter() {
        if m.is_zero() || !(m.rows() == 16 || m.cols() == 16) { continue; }
        // Re-run one-sided Jacobi, reporting the max relative off-diagonal per sweep.
        let (rows, n) = if m.rows() >= m.cols() { (m.rows(), m.cols()) } else { (m.cols(), m.rows()) };
        let get = |i: usize, j: usize| if m.rows() >= m.cols() { m.get(i, j) } else { m.get(j, i) };
        let mut a: Vec<Vec<f64>> = (0..n).map(|j| (0..rows).map(|i| get(i, j)).collect()).collect();
        let dot = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(p, q)| p * q).sum() };
        println!("== {path} ({rows}x{n})");
        for sweep in 0..24 {
            let mut max_rel: f64 = 0.0;
            let mut rotated = 0;
            for p in 0..n - 1 {
                for q in (p + 1)..n {
                    let (first, second) = a.split_at_mut(q);
                    let cp = &mut first[p];
                    let cq = &mut second[0];
                    let alpha = dot(cp, cp);
                    let beta = dot(cq, cq);
                    let gamma = dot(cp, cq);
                    if alpha == 0.0 || beta == 0.0 { continue; }
                    let rel = gamma.abs() / (alpha * beta).sqrt();
                    max_rel = max_rel.max(rel);
                    if rel <= f64::EPSILON { continue; }
                    rotated += 1;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..rows {
                        let (xp, xq) = (cp[i], cq[i]);
                        cp[i] = c * xp - s * xq;
                        cq[i] = s * xp + c * xq;
                    }
                }
            }
            println!("  sweep {sweep}: rotations {rotated}, max_rel_gamma {max_rel:.3e}");
            if rotated == 0 { break; }
        }
    }
}
