//! Gauss-Legendre quadrature with a process-wide rule cache.
//!
//! Angular integrals over antenna correlation kernels are the hot consumer:
//! the integrands behave like `exp(i * omega * sin(x))` where `omega` grows
//! with the antenna index, so the required node count scales with the
//! oscillation budget `|omega| * half_width`. [`oscillatory_order`] encodes
//! that policy in one place and [`integrate_oscillatory`] applies it; callers
//! that assemble whole matrices from the raw nodes use [`gauss_legendre`]
//! directly with the order the policy picked for their worst-case entry.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Largest order [`gauss_legendre`] will construct. Node computation is
/// O(order^2) and rules are cached for the life of the process, so this cap
/// mostly guards against absurd requests eating memory.
pub const MAX_ORDER: usize = 16_384;

/// Largest order the oscillatory auto-selection is allowed to pick. Beyond
/// this the integrand is considered too oscillatory to resolve honestly and
/// the caller gets an error instead of a silently inaccurate value.
pub const MAX_OSCILLATORY_ORDER: usize = 4_096;

/// Nodes and weights of an `n`-point Gauss-Legendre rule on `[-1, 1]`.
///
/// Nodes are in strictly ascending order and exactly antisymmetric:
/// `nodes[i] == -nodes[n - 1 - i]`, with matching weights. The rule
/// integrates polynomials up to degree `2n - 1` exactly.
#[derive(Debug)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    /// Number of nodes.
    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes on `[-1, 1]`, ascending.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Weights matching [`Self::nodes`]; they sum to 2.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Integrate `f` over `[a, b]` with this rule.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let centre = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        let mut acc = 0.0;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(centre + half * x);
        }
        half * acc
    }

    /// Integrate a complex-valued `f` over `[a, b]` with this rule.
    pub fn integrate_complex<F: FnMut(f64) -> Complex64>(
        &self,
        a: f64,
        b: f64,
        mut f: F,
    ) -> Complex64 {
        let centre = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        let mut acc = Complex64::ZERO;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            acc += f(centre + half * x) * w;
        }
        acc * half
    }
}

/// Return the `order`-point Gauss-Legendre rule, computing and caching it on
/// first use. Clones of the same order share one allocation.
pub fn gauss_legendre(order: usize) -> Result<Arc<QuadratureRule>> {
    if order == 0 || order > MAX_ORDER {
        return Err(Error::validation(format!(
            "quadrature order must be in 1..={MAX_ORDER}, got {order}"
        )));
    }
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<QuadratureRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    if let Some(rule) = guard.get(&order) {
        return Ok(Arc::clone(rule));
    }
    let rule = Arc::new(build_rule(order));
    guard.insert(order, Arc::clone(&rule));
    Ok(rule)
}

/// Evaluate the Legendre polynomial `P_n` and its derivative at `x` via the
/// three-term recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    debug_assert!(n >= 1);
    let mut p_prev = 1.0; // P_0
    let mut p = x; // P_1
    for k in 2..=n {
        let kf = k as f64;
        let p_next = ((2.0 * kf - 1.0) * x * p - (kf - 1.0) * p_prev) / kf;
        p_prev = p;
        p = p_next;
    }
    if n == 1 {
        return (x, 1.0);
    }
    // P_n'(x) = n (x P_n - P_{n-1}) / (x^2 - 1); the roots never touch +-1.
    let dp = (n as f64) * (x * p - p_prev) / (x * x - 1.0);
    (p, dp)
}

fn build_rule(order: usize) -> QuadratureRule {
    let mut nodes = vec![0.0; order];
    let mut weights = vec![0.0; order];
    let half = order.div_ceil(2);
    for i in 0..half {
        // Tricomi-style seed for the (i+1)-th largest root, then Newton.
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (order as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(order, z);
            dp = d;
            let step = p / dp;
            z -= step;
            if step.abs() <= 1e-15 {
                let (p, d) = legendre_with_derivative(order, z);
                dp = d;
                z -= p / dp;
                break;
            }
        }
        if z.abs() < 1e-14 {
            z = 0.0; // middle node of an odd-order rule
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = -z;
        nodes[order - 1 - i] = z;
        weights[i] = w;
        weights[order - 1 - i] = w;
    }
    QuadratureRule { nodes, weights }
}

fn check_interval(a: f64, b: f64) -> Result<()> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::validation(format!(
            "integration interval must be finite, got [{a}, {b}]"
        )));
    }
    if a > b {
        return Err(Error::validation(format!(
            "integration interval is reversed: [{a}, {b}]"
        )));
    }
    Ok(())
}

/// Integrate `f` over `[a, b]` with a single `order`-point Gauss-Legendre
/// panel.
pub fn integrate<F: FnMut(f64) -> f64>(f: F, a: f64, b: f64, order: usize) -> Result<f64> {
    check_interval(a, b)?;
    Ok(gauss_legendre(order)?.integrate(a, b, f))
}

/// Pick a Gauss-Legendre order that resolves an integrand oscillating at
/// angular rate up to `omega` over an interval of half-width `half_width`.
///
/// Orders snap to powers of two from 64 up to [`MAX_OSCILLATORY_ORDER`] so
/// the rule cache stays small across sweeps. The selection keeps the order
/// comfortably above the `e * omega * half_width / 4` threshold where
/// Gauss-Legendre enters its superexponential convergence regime, so the
/// result is accurate to near machine precision, not merely "converging".
pub fn oscillatory_order(omega: f64, half_width: f64) -> Result<usize> {
    if !omega.is_finite() || !half_width.is_finite() {
        return Err(Error::validation(format!(
            "oscillation rate and half-width must be finite, got omega={omega}, half_width={half_width}"
        )));
    }
    let budget = omega.abs() * half_width.abs();
    let needed = (1.2 * budget).ceil() as usize + 16;
    let mut order = 64;
    while order < needed {
        order *= 2;
        if order > MAX_OSCILLATORY_ORDER {
            return Err(Error::numerical(format!(
                "integrand with oscillation budget {budget:.1} needs more than \
                 {MAX_OSCILLATORY_ORDER} quadrature nodes"
            )));
        }
    }
    Ok(order)
}

/// Integrate a complex-valued integrand whose phase varies at angular rate up
/// to `omega`, choosing the quadrature order via [`oscillatory_order`].
pub fn integrate_oscillatory<F: FnMut(f64) -> Complex64>(
    f: F,
    a: f64,
    b: f64,
    omega: f64,
) -> Result<Complex64> {
    check_interval(a, b)?;
    let order = oscillatory_order(omega, 0.5 * (b - a))?;
    Ok(gauss_legendre(order)?.integrate_complex(a, b, f))
}
