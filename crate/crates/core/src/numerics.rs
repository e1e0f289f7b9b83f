//! Small numerical kernels shared across the engine: deterministic
//! reductions, stable exponential integrals, fixed quadrature rules and a
//! power iteration for Hermitian Gram matrices.
//!
//! Reductions are *pairwise* in a fixed recursive order. This keeps every
//! ensemble statistic bit-identical regardless of how many worker threads
//! produced the inputs (the inputs are always collected into their natural
//! order first) while also carrying a much smaller rounding constant than a
//! left-to-right fold.

use num_complex::Complex64;

/// Below this length a straight sequential fold is used as the recursion
/// base case.
const PAIRWISE_BASE: usize = 16;

/// Deterministic pairwise sum of `f(x)` over a slice.
pub fn pairwise_map_sum<T, F: Fn(&T) -> f64>(xs: &[T], f: &F) -> f64 {
    if xs.len() <= PAIRWISE_BASE {
        let mut acc = 0.0;
        for x in xs {
            acc += f(x);
        }
        acc
    } else {
        let mid = xs.len() / 2;
        pairwise_map_sum(&xs[..mid], f) + pairwise_map_sum(&xs[mid..], f)
    }
}

/// Deterministic pairwise sum of a float slice.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    pairwise_map_sum(xs, &|x| *x)
}

/// Mean of a slice via pairwise summation. Empty slices yield 0.
pub fn pairwise_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        pairwise_sum(xs) / xs.len() as f64
    }
}

/// Mean and standard error of the mean, both from pairwise reductions.
/// Returns (mean, stderr); stderr is 0 for fewer than two samples.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let mean = pairwise_mean(xs);
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = pairwise_map_sum(xs, &|x| {
        let d = *x - mean;
        d * d
    }) / ((xs.len() - 1) as f64);
    (mean, (var / xs.len() as f64).sqrt())
}

/// φ₁(z) = (e^z − 1)/z with a series branch near the removable singularity.
pub fn phi1(z: Complex64) -> Complex64 {
    if z.norm() < 1e-4 {
        // 1 + z/2 + z²/6 + z³/24 + z⁴/120; truncation error below 1e-22.
        let z2 = z * z;
        Complex64::new(1.0, 0.0) + z * 0.5 + z2 / 6.0 + z2 * z / 24.0 + z2 * z2 / 120.0
    } else {
        expm1_complex(z) / z
    }
}

/// e^z − 1 without the catastrophic cancellation of `z.exp() − 1` for small
/// arguments: every term below is O(|z|).
fn expm1_complex(z: Complex64) -> Complex64 {
    let (x, y) = (z.re, z.im);
    let half = (y * 0.5).sin();
    // e^x cos y − 1 = expm1(x) cos y − 2 sin²(y/2)
    let re = x.exp_m1() * y.cos() - 2.0 * half * half;
    let im = x.exp() * y.sin();
    Complex64::new(re, im)
}

/// Real-argument φ₁.
pub fn phi1_real(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 + x * 0.5 + x * x / 6.0 + x * x * x / 24.0 + x * x * x * x / 120.0
    } else {
        x.exp_m1() / x
    }
}

/// ∫₀^t e^{2ρ s} ds, the squared-semigroup growth integral of one mode with
/// real part ρ. Equals t exactly when ρ = 0.
pub fn growth_integral(rho: f64, t: f64) -> f64 {
    t * phi1_real(2.0 * rho * t)
}

/// ∫₀^t ∫₀^s e^{2ρ τ} dτ ds = t² φ₂(2ρt) with φ₂(u) = (φ₁(u) − 1)/u.
/// Equals t²/2 exactly when ρ = 0.
pub fn growth_integral_antiderivative(rho: f64, t: f64) -> f64 {
    let u = 2.0 * rho * t;
    let phi2 = if u.abs() < 1e-3 {
        // Σ_{m≥0} u^m/(m+2)!; truncation below 1e-18 at the cutoff.
        0.5 + u / 6.0 + u * u / 24.0 + u * u * u / 120.0 + u * u * u * u / 720.0
    } else {
        (phi1_real(u) - 1.0) / u
    };
    t * t * phi2
}

/// 8-point Gauss–Legendre nodes (positive half) and weights on [−1, 1].
const GL8_NODES: [f64; 4] = [
    0.18343464249564980,
    0.52553240991632899,
    0.79666647741362674,
    0.96028985649753623,
];
const GL8_WEIGHTS: [f64; 4] = [
    0.36268378337836198,
    0.31370664587788729,
    0.22238103445337447,
    0.10122853629037626,
];

/// 16-point Gauss–Legendre nodes (positive half) and weights on [−1, 1].
const GL16_NODES: [f64; 8] = [
    0.09501250983763744,
    0.28160355077925891,
    0.45801677765722739,
    0.61787624440264375,
    0.75540440835500303,
    0.86563120238783174,
    0.94457502307323258,
    0.98940093499164993,
];
const GL16_WEIGHTS: [f64; 8] = [
    0.18945061045506850,
    0.18260341504492359,
    0.16915651939500254,
    0.14959598881657673,
    0.12462897125553387,
    0.09515851168249278,
    0.06225352393864789,
    0.02715245941175409,
];

/// Integrate `f` over [a, b] with a single 8-point Gauss–Legendre panel.
pub fn gauss8<F: FnMut(f64) -> f64>(a: f64, b: f64, mut f: F) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut acc = 0.0;
    for i in 0..4 {
        let dx = half * GL8_NODES[i];
        acc += GL8_WEIGHTS[i] * (f(mid - dx) + f(mid + dx));
    }
    acc * half
}

/// Integrate `f` over [a, b] with `panels` composite 16-point panels.
pub fn gauss16_composite<F: FnMut(f64) -> f64>(a: f64, b: f64, panels: usize, mut f: F) -> f64 {
    let width = (b - a) / panels as f64;
    let mut acc = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * width;
        let half = 0.5 * width;
        let mid = lo + half;
        for i in 0..8 {
            let dx = half * GL16_NODES[i];
            acc += GL16_WEIGHTS[i] * (f(mid - dx) + f(mid + dx)) * half;
        }
    }
    acc
}

/// Exact value of ∫₀^dt |y e^{μ s} + f (e^{μ s} − 1)/μ|² ds — the squared
/// modulus of one mode of an exponentially integrated step with frozen
/// forcing `f` started from `y`.
///
/// A closed form is used when |μ| dt is large enough for it to be stable;
/// otherwise the integrand is an entire function with tiny argument and a
/// single 8-point Gauss panel is exact to machine precision.
pub fn mild_step_sq_integral(mu: Complex64, y: Complex64, f: Complex64, dt: f64) -> f64 {
    debug_assert!(dt >= 0.0);
    if dt == 0.0 {
        return 0.0;
    }
    let scaled = mu.norm() * dt;
    if scaled >= 1e-3 {
        // ∫|y e^{μs} + f g(s)|² with g(s) = (e^{μs} − 1)/μ:
        //   |y|² I₂ + 2 Re(y f̄ (I₂ − I₁)/μ̄) + |f|² (I₂ − 2 Re I₁ + dt)/|μ|²
        // where I₂ = ∫ e^{2 Re μ s} ds and I₁ = ∫ e^{μ s} ds.
        let i2 = growth_integral(mu.re, dt);
        let i1 = dt * phi1(mu * dt);
        let cross = (Complex64::new(i2, 0.0) - i1) / mu.conj();
        let tail = (i2 - 2.0 * i1.re + dt) / mu.norm_sqr();
        (y.norm_sqr() * i2 + 2.0 * (y * f.conj() * cross).re + f.norm_sqr() * tail).max(0.0)
    } else {
        gauss8(0.0, dt, |s| {
            let e = (mu * s).exp();
            let g = s * phi1(mu * s);
            (y * e + f * g).norm_sqr()
        })
        .max(0.0)
    }
}

/// Largest eigenvalue of a Hermitian positive semidefinite matrix given in
/// row-major order, by power iteration from a fixed deterministic start.
pub fn hermitian_top_eigenvalue(matrix: &[Complex64], dim: usize) -> f64 {
    assert_eq!(matrix.len(), dim * dim, "matrix shape mismatch");
    if dim == 0 {
        return 0.0;
    }
    // Mildly graded start vector so no coordinate hyperplane traps it.
    let mut v: Vec<Complex64> = (0..dim)
        .map(|i| Complex64::new(1.0 + i as f64 / dim as f64, 0.0))
        .collect();
    normalize(&mut v);
    let mut lambda = 0.0f64;
    for _ in 0..20_000 {
        let mut w = vec![Complex64::new(0.0, 0.0); dim];
        for (i, wi) in w.iter_mut().enumerate() {
            let row = &matrix[i * dim..(i + 1) * dim];
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, m) in row.iter().enumerate() {
                acc += m * v[j];
            }
            *wi = acc;
        }
        // Rayleigh quotient v*·(Gv) is real for Hermitian G.
        let mut rq = 0.0;
        for i in 0..dim {
            rq += (v[i].conj() * w[i]).re;
        }
        let settled = (rq - lambda).abs() <= 1e-13 * rq.abs().max(1e-300);
        lambda = rq;
        let norm = normalize(&mut w);
        if norm == 0.0 {
            return 0.0;
        }
        v = w;
        if settled {
            break;
        }
    }
    lambda.max(0.0)
}

fn normalize(v: &mut [Complex64]) -> f64 {
    let norm = pairwise_map_sum(v, &|z| z.norm_sqr()).sqrt();
    if norm > 0.0 {
        for z in v.iter_mut() {
            *z /= norm;
        }
    }
    norm
}

/// Uniform grid 0 = t_0 < … < t_J = horizon with J = `steps`.
pub fn uniform_grid(horizon: f64, steps: usize) -> Vec<f64> {
    assert!(steps > 0 && horizon > 0.0, "grid needs steps > 0, horizon > 0");
    (0..=steps)
        .map(|j| horizon * j as f64 / steps as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pairwise_sum_matches_sequential_on_small_inputs() {
        let xs = [1.5, -2.25, 3.0, 0.125];
        assert_eq!(pairwise_sum(&xs), 1.5 - 2.25 + 3.0 + 0.125);
    }

    #[test]
    fn pairwise_sum_is_exact_on_integers() {
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500_500.0);
    }

    #[test]
    fn phi1_branches_agree_at_crossover() {
        // Just above the series cutoff phi1 takes the direct branch; the
        // reference is the Taylor series, whose truncation error there is
        // far below double precision.
        for &z in &[
            Complex64::new(1.1e-4, 0.0),
            Complex64::new(0.0, 1.1e-4),
            Complex64::new(-8e-5, 8e-5),
        ] {
            let direct = phi1(z);
            let mut reference = Complex64::new(0.0, 0.0);
            let mut term = Complex64::new(1.0, 0.0);
            for k in 1..=8 {
                reference += term;
                term = term * z / (k as f64 + 1.0);
            }
            assert_relative_eq!(direct.re, reference.re, max_relative = 1e-13);
            assert!((direct.im - reference.im).abs() <= 1e-13 * reference.norm());
        }
    }

    #[test]
    fn growth_integral_matches_quadrature() {
        for &(rho, t) in &[(-3.0, 0.7), (0.0, 1.3), (0.4, 2.0), (-900.0, 1.0)] {
            let exact = growth_integral(rho, t);
            let quad = gauss16_composite(0.0, t, 64, |s| (2.0 * rho * s).exp());
            assert_relative_eq!(exact, quad, max_relative = 1e-9);
        }
    }

    #[test]
    fn growth_integral_antiderivative_matches_quadrature() {
        for &(rho, t) in &[(-3.0, 0.7), (0.0, 1.3), (0.4, 2.0), (-1e-5, 0.01)] {
            let exact = growth_integral_antiderivative(rho, t);
            let quad = gauss16_composite(0.0, t, 64, |s| growth_integral(rho, s));
            assert_relative_eq!(exact, quad, max_relative = 1e-9);
        }
    }

    #[test]
    fn mild_step_integral_branches_agree() {
        // Near the branch cutoff both evaluations must coincide.
        let y = Complex64::new(0.8, -0.3);
        let f = Complex64::new(-0.2, 0.5);
        for &mu in &[
            Complex64::new(-0.9e-3, 0.4e-3),
            Complex64::new(-2.0, 1.0),
            Complex64::new(0.0, 3.0),
        ] {
            let dt = 0.9e-3 / mu.norm().max(1e-3);
            let closed = mild_step_sq_integral(mu, y, f, dt);
            let quad = gauss16_composite(0.0, dt, 8, |s| {
                let e = (mu * s).exp();
                let g = s * phi1(mu * s);
                (y * e + f * g).norm_sqr()
            });
            assert_relative_eq!(closed, quad, max_relative = 1e-9);
        }
    }

    #[test]
    fn power_iteration_recovers_dominant_eigenvalue() {
        // Hermitian 3×3 with known spectrum: diag(5, 2, 1) conjugated by a
        // unitary-ish rotation built by hand.
        let m = [
            Complex64::new(3.5, 0.0),
            Complex64::new(1.5, 0.5),
            Complex64::new(0.0, 0.0),
            Complex64::new(1.5, -0.5),
            Complex64::new(3.5, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(1.0, 0.0),
        ];
        // Eigenvalues of [[3.5, 1.5+0.5i], [1.5−0.5i, 3.5]] are 3.5 ± √2.5.
        let expected = 3.5 + 2.5f64.sqrt();
        let top = hermitian_top_eigenvalue(&m, 3);
        assert_relative_eq!(top, expected, max_relative = 1e-10);
    }

    #[test]
    fn uniform_grid_hits_endpoints_exactly() {
        let g = uniform_grid(1.0, 64);
        assert_eq!(g.len(), 65);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[64], 1.0);
        assert_eq!(g[32], 0.5);
    }
}
