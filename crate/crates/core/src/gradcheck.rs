//! Central-finite-difference validation of autodiff gradients.
//!
//! The checks are closure-based: the caller supplies a pure `eval` that
//! recomputes the scalar loss at a perturbed point (re-running the forward
//! pass), plus the autodiff gradient to validate. Coordinate probes are
//! limited and chosen deterministically (largest-gradient entries plus an
//! even stride), and a directional probe along the normalized gradient
//! exercises every coordinate at once, which is the robust test at 32-bit.

use ndarray::ArrayD;

use crate::tensor::Element;

/// Worst relative error seen and how many probes contributed.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: usize,
}

/// Relative error with a floor that keeps near-zero pairs comparable.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(floor)
}

fn perturbed<F: Element>(theta: &ArrayD<F>, idx: usize, delta: f64) -> ArrayD<F> {
    let mut t = theta.clone();
    let s = t.as_slice_mut().expect("standard layout");
    s[idx] = s[idx] + F::f(delta);
    t
}

/// Picks up to `max_coords` flat indices: half with the largest |grad|,
/// the rest spread evenly across the array.
fn probe_indices<F: Element>(grad: &ArrayD<F>, max_coords: usize) -> Vec<usize> {
    let n = grad.len();
    if n <= max_coords {
        return (0..n).collect();
    }
    let gs = grad.as_slice().expect("standard layout");
    let mut by_mag: Vec<usize> = (0..n).collect();
    by_mag.sort_by(|&a, &b| {
        gs[b].abs()
            .partial_cmp(&gs[a].abs())
            .expect("finite gradient")
            .then(a.cmp(&b))
    });
    let k_top = max_coords / 2;
    let mut picked: Vec<usize> = by_mag[..k_top].to_vec();
    let stride = n / (max_coords - k_top);
    picked.extend((0..n).step_by(stride.max(1)).take(max_coords - k_top));
    picked.sort_unstable();
    picked.dedup();
    picked
}

/// Per-coordinate central differences of `eval` against `grad`.
pub fn check_coords<F: Element>(
    theta: &ArrayD<F>,
    grad: &ArrayD<F>,
    h: f64,
    max_coords: usize,
    mut eval: impl FnMut(&ArrayD<F>) -> F,
) -> GradCheckReport {
    assert_eq!(theta.shape(), grad.shape(), "gradient shape mismatch");
    let gs = grad.as_slice().expect("standard layout");
    let mut worst: f64 = 0.0;
    let idxs = probe_indices(grad, max_coords);
    for &i in &idxs {
        let lp = eval(&perturbed(theta, i, h)).to_f64();
        let lm = eval(&perturbed(theta, i, -h)).to_f64();
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max(rel_err(gs[i].to_f64(), fd, grad_floor::<F>()));
    }
    GradCheckReport {
        max_rel_err: worst,
        probes: idxs.len(),
    }
}

/// Directional derivative along the normalized gradient: compares ‖g‖ to
/// the central difference of `eval` along g/‖g‖. A zero gradient returns 0
/// only if the function is flat along an arbitrary basis direction too.
pub fn check_directional<F: Element>(
    theta: &ArrayD<F>,
    grad: &ArrayD<F>,
    h: f64,
    mut eval: impl FnMut(&ArrayD<F>) -> F,
) -> f64 {
    assert_eq!(theta.shape(), grad.shape(), "gradient shape mismatch");
    let norm = grad.iter().fold(0.0, |s, &v| s + v.to_f64() * v.to_f64()).sqrt();
    if norm == 0.0 {
        let e0 = eval(&perturbed(theta, 0, h)).to_f64();
        let e1 = eval(&perturbed(theta, 0, -h)).to_f64();
        return rel_err(0.0, (e0 - e1) / (2.0 * h), grad_floor::<F>());
    }
    let step = grad.mapv(|v| F::f(v.to_f64() / norm * h));
    let lp = eval(&(theta + &step)).to_f64();
    let lm = eval(&(theta - &step)).to_f64();
    let fd = (lp - lm) / (2.0 * h);
    rel_err(norm, fd, grad_floor::<F>())
}

/// Denominator floor for relative errors, matched to the element width.
fn grad_floor<F: Element>() -> f64 {
    match F::DTYPE {
        "f32" => 1e-3,
        _ => 1e-8,
    }
}

/// Step size giving a balanced truncation/round-off trade for the width.
pub fn default_step<F: Element>() -> f64 {
    match F::DTYPE {
        "f32" => 1e-2,
        _ => 1e-5,
    }
}
