//! Adaptive Gauss–Kronrod (7/15) quadrature.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

#[derive(Clone, Copy, Debug)]
pub struct QuadratureOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_depth: u32,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-6, abs_tol: 1e-12, max_depth: 40 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
    pub evals: usize,
}

fn gk15(f: &mut dyn FnMut(f64) -> Result<f64>, a: f64, b: f64) -> Result<(f64, f64)> {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c)?;
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for k in 0..7 {
        let x = h * XGK[k];
        let s = f(c - x)? + f(c + x)?;
        kronrod += WGK[k] * s;
        if k % 2 == 1 {
            gauss += WG[k / 2] * s;
        }
    }
    Ok((kronrod * h, ((kronrod - gauss) * h).abs()))
}

/// ∫_a^b f, splitting first at the given interior `breaks` (e.g. kinks of f).
pub fn integrate(
    f: &mut dyn FnMut(f64) -> Result<f64>,
    a: f64,
    b: f64,
    breaks: &[f64],
    opts: &QuadratureOptions,
) -> Result<Quadrature> {
    let mut edges = vec![a];
    edges.extend(breaks.iter().copied().filter(|&x| x > a && x < b));
    edges.push(b);
    edges.sort_by(f64::total_cmp);
    let mut panels = Vec::new();
    let mut evals = 0;
    for w in edges.windows(2).filter(|w| w[1] > w[0]) {
        panels.push((w[0], w[1], gk15(f, w[0], w[1])?));
        evals += 15;
    }
    // global refinement: split the panel with the largest error estimate
    let mut depth: Vec<u32> = vec![0; panels.len()];
    loop {
        let value: f64 = panels.iter().map(|p| p.2 .0).sum();
        let error: f64 = panels.iter().map(|p| p.2 .1).sum();
        if error <= opts.abs_tol.max(opts.rel_tol * value.abs()) {
            return Ok(Quadrature { value, error, evals });
        }
        let (worst, _) = panels
            .iter()
            .enumerate()
            .filter(|(k, _)| depth[*k] < opts.max_depth)
            .max_by(|x, y| x.1 .2 .1.total_cmp(&y.1 .2 .1))
            .ok_or_else(|| Error::Unsupported(format!("quadrature did not converge (error estimate {error:.3e})")))?;
        let (lo, hi, _) = panels[worst];
        let mid = 0.5 * (lo + hi);
        let left = gk15(f, lo, mid)?;
        let right = gk15(f, mid, hi)?;
        evals += 30;
        let d = depth[worst] + 1;
        panels[worst] = (lo, mid, left);
        depth[worst] = d;
        panels.push((mid, hi, right));
        depth.push(d);
    }
}

/// Running integrals ∫_a^{t_k} f for increasing `times` ≥ a, one quadrature per
/// interval between consecutive times.
pub fn integrate_cumulative(
    f: &mut dyn FnMut(f64) -> Result<f64>,
    a: f64,
    times: &[f64],
    breaks: &[f64],
    opts: &QuadratureOptions,
) -> Result<Vec<f64>> {
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|&t| t < a) {
        return Err(Error::InvalidConfig("sample times must be sorted and not before the start".into()));
    }
    let mut out = Vec::with_capacity(times.len());
    let (mut lo, mut acc) = (a, 0.0);
    for &t in times {
        if t > lo {
            acc += integrate(f, lo, t, breaks, opts)?.value;
            lo = t;
        }
        out.push(acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn polynomial_exact() {
        let q = integrate(&mut |x| Ok(x.powi(5) - 2.0 * x), 0.0, 2.0, &[], &QuadratureOptions::default()).unwrap();
        assert!((q.value - (64.0 / 6.0 - 4.0)).abs() < 1e-13);
    }

    #[test]
    fn kinked_integrand_with_breaks() {
        // each period contributes its midpoint times ∫|cos| = 2, so ∫_0^{Nπ} t|cos t| dt = N²π
        let n = 7.0;
        let breaks: Vec<f64> = (0..7).map(|m| (m as f64 + 0.5) * PI).collect();
        let q = integrate(&mut |t| Ok(t * t.cos().abs()), 0.0, n * PI, &breaks, &QuadratureOptions::default()).unwrap();
        assert!((q.value - n * n * PI).abs() < 1e-6 * q.value);
    }

    #[test]
    fn kinks_without_breaks_still_converge() {
        let q = integrate(&mut |t| Ok((t - 0.3).abs()), 0.0, 1.0, &[], &QuadratureOptions::default()).unwrap();
        assert!((q.value - (0.045 + 0.245)).abs() < 1e-6);
    }

    #[test]
    fn cumulative_matches_single_integrals() {
        let mut f = |t: f64| Ok(t.cos().abs());
        let times = [0.0, 0.5, 2.0, 2.0, 7.5];
        let run = integrate_cumulative(&mut f, 0.0, &times, &[PI / 2.0, 1.5 * PI], &QuadratureOptions::default()).unwrap();
        for (t, v) in times.iter().zip(&run) {
            let want = integrate(&mut f, 0.0, *t, &[PI / 2.0, 1.5 * PI], &QuadratureOptions::default()).unwrap().value;
            assert!((v - want).abs() < 1e-9, "{t}: {v} vs {want}");
        }
        assert!(integrate_cumulative(&mut f, 0.0, &[1.0, 0.5], &[], &QuadratureOptions::default()).is_err());
    }

    #[test]
    fn errors_propagate() {
        let r = integrate(&mut |t| if t > 0.5 { Err(Error::Unsupported("x".into())) } else { Ok(1.0) }, 0.0, 1.0, &[], &QuadratureOptions::default());
        assert!(r.is_err());
    }
}
