//! Alternating proximal-gradient solver for the ℓ1-regularised model.
//!
//! One sweep updates `U`, then `V`, then `C` (using the freshly updated `U` and
//! `V`), each by a gradient step on its ½-scaled data term followed by soft
//! thresholding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_adjoint, conv2d_same, FilterBank};
use crate::error::{Error, Result};
use crate::model::{build_joint, objective_value, AnalysisBanks, FeatureTriple, FusionPair, PriorWeights};
use crate::raster::{FeatureStack, MultibandImage};
use crate::scalar::Scalar;

/// Power-iteration count used for automatic step sizes.
pub const AUTO_STEP_ITERS: usize = 20;
const PROBE_SEED: u64 = 0x5eed_0f_57e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepSizes {
    /// `1 / σ̂²` per bank, `σ̂` from power iteration on the problem grid.
    Auto,
    Explicit { eta_u: f64, eta_v: f64, eta_c: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub weights: PriorWeights,
    pub steps: StepSizes,
    pub max_sweeps: usize,
    /// Stop once the relative objective decrease of a sweep drops below this.
    /// Zero disables the test.
    pub rel_tol: f64,
    pub track_objective: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            weights: PriorWeights {
                lambda_u: 1e-3,
                lambda_v: 1e-3,
                lambda_c: 1e-3,
            },
            steps: StepSizes::Auto,
            max_sweeps: 100,
            rel_tol: 0.0,
            track_objective: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if let StepSizes::Explicit { eta_u, eta_v, eta_c } = self.steps {
            for (name, v) in [("eta_u", eta_u), ("eta_v", eta_v), ("eta_c", eta_c)] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::invalid(format!("{name} must be positive, got {v}")));
                }
            }
        }
        if !(self.rel_tol >= 0.0) {
            return Err(Error::invalid(format!("rel_tol must be >= 0, got {}", self.rel_tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverTrace {
    /// Objective at the initial point followed by one value per sweep. Empty
    /// when neither tracking nor the stopping test asked for it.
    pub objective_per_sweep: Vec<f64>,
    pub sweeps_run: usize,
    pub converged: bool,
    /// Step sizes actually used for `U`, `V`, `C`.
    pub steps: [f64; 3],
}

/// `Du† (Σ Dc ⊗ C + Σ Du ⊗ U − P)`: gradient of `½‖P − Dc⊗C − Du⊗U‖²` in `U`.
pub fn gradient_u<T: Scalar>(
    c: &FeatureStack<T>,
    u: &FeatureStack<T>,
    pair: &FusionPair<T>,
    banks: &AnalysisBanks<T>,
) -> Result<FeatureStack<T>> {
    let mut residual = conv2d_same(c, &banks.d_common)?;
    residual.axpy(T::one(), &conv2d_same(u, &banks.d_unique)?)?;
    residual.axpy(-T::one(), &pair.pan)?;
    conv2d_adjoint(&residual, &banks.d_unique)
}

/// `Hv† (Σ Hc ⊗ C + Σ Hv ⊗ V − M̃)`
pub fn gradient_v<T: Scalar>(
    c: &FeatureStack<T>,
    v: &FeatureStack<T>,
    pair: &FusionPair<T>,
    banks: &AnalysisBanks<T>,
) -> Result<FeatureStack<T>> {
    let mut residual = conv2d_same(c, &banks.h_common)?;
    residual.axpy(T::one(), &conv2d_same(v, &banks.h_unique)?)?;
    residual.axpy(-T::one(), &pair.ms_up)?;
    conv2d_adjoint(&residual, &banks.h_unique)
}

/// `Lc† (Σ Lc ⊗ C − N)` on the joint operands from [`build_joint`].
pub fn gradient_c<T: Scalar>(
    c: &FeatureStack<T>,
    n: &MultibandImage<T>,
    l_common: &FilterBank<T>,
) -> Result<FeatureStack<T>> {
    if n.bands() != l_common.out_bands() {
        return Err(Error::shape(format!(
            "gradient_c: joint image has {} bands, bank produces {}",
            n.bands(),
            l_common.out_bands()
        )));
    }
    let mut residual = conv2d_same(c, l_common)?;
    residual.axpy(-T::one(), n)?;
    conv2d_adjoint(&residual, l_common)
}

/// Elementwise `sign(x) · max(|x| − τ, 0)`, the proximal map of `τ‖·‖₁`.
pub fn soft_threshold<T: Scalar>(x: &FeatureStack<T>, tau: f64) -> Result<FeatureStack<T>> {
    if !(tau >= 0.0) {
        return Err(Error::invalid(format!("threshold must be >= 0, got {tau}")));
    }
    let t = T::of(tau);
    Ok(x.map(|v| soft_threshold_scalar(v, t)))
}

#[inline]
pub fn soft_threshold_scalar<T: Scalar>(x: T, tau: T) -> T {
    let m = x.abs() - tau;
    if m > T::zero() {
        m.copysign(x)
    } else {
        T::zero()
    }
}

/// Power-iteration estimate of `‖A‖²` for the convolution operator of `bank`
/// on a `height x width` grid, from a fixed-seed probe.
pub fn estimate_operator_norm_sq(bank: &FilterBank<f64>, iters: usize, probe_dims: (usize, usize)) -> Result<f64> {
    if iters == 0 {
        return Err(Error::invalid("power iteration needs at least one iteration"));
    }
    if bank.is_zero() {
        return Err(Error::UnboundedStep);
    }
    let (h, w) = probe_dims;
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    let mut x = MultibandImage::<f64>::from_fn(h, w, bank.in_bands(), |_, _, _| rng.gen_range(-1.0..1.0));
    let mut estimate = 0.0;
    for _ in 0..iters {
        let norm = x.norm_sq().sqrt();
        if norm == 0.0 {
            break;
        }
        x = x.scale(1.0 / norm);
        let ax = conv2d_same(&x, bank)?;
        // Rayleigh quotient of AᵀA at the unit vector x
        estimate = ax.norm_sq();
        x = conv2d_adjoint(&ax, bank)?;
    }
    if estimate <= 0.0 {
        return Err(Error::UnboundedStep);
    }
    Ok(estimate)
}

/// Step size `1 / σ̂²` guaranteeing descent of the ½-scaled data term.
pub fn estimate_step_size<T: Scalar>(bank: &FilterBank<T>, iters: usize, probe_dims: (usize, usize)) -> Result<f64> {
    Ok(1.0 / estimate_operator_norm_sq(&bank.cast(), iters, probe_dims)?)
}

fn resolve_steps<T: Scalar>(pair: &FusionPair<T>, banks: &AnalysisBanks<T>, steps: StepSizes) -> Result<[f64; 3]> {
    Ok(match steps {
        StepSizes::Explicit { eta_u, eta_v, eta_c } => [eta_u, eta_v, eta_c],
        StepSizes::Auto => {
            let dims = (pair.height(), pair.width());
            [
                estimate_step_size(&banks.d_unique, AUTO_STEP_ITERS, dims)?,
                estimate_step_size(&banks.h_unique, AUTO_STEP_ITERS, dims)?,
                estimate_step_size(&banks.joint_common()?, AUTO_STEP_ITERS, dims)?,
            ]
        }
    })
}

/// One `U, V, C` sweep in place.
pub fn sweep<T: Scalar>(
    pair: &FusionPair<T>,
    banks: &AnalysisBanks<T>,
    features: &mut FeatureTriple<T>,
    steps: [f64; 3],
    weights: &PriorWeights,
) -> Result<()> {
    let [eta_u, eta_v, eta_c] = steps;

    let gu = gradient_u(&features.c, &features.u, pair, banks)?;
    features.u.axpy(T::of(-eta_u), &gu)?;
    features.u = soft_threshold(&features.u, eta_u * weights.lambda_u)?;

    let gv = gradient_v(&features.c, &features.v, pair, banks)?;
    features.v.axpy(T::of(-eta_v), &gv)?;
    features.v = soft_threshold(&features.v, eta_v * weights.lambda_v)?;

    let (n, l_common) = build_joint(pair, features, banks)?;
    let gc = gradient_c(&features.c, &n, &l_common)?;
    features.c.axpy(T::of(-eta_c), &gc)?;
    features.c = soft_threshold(&features.c, eta_c * weights.lambda_c)?;
    Ok(())
}

/// Runs sweeps from all-zero features until `max_sweeps` or the relative
/// objective decrease falls below `rel_tol`.
pub fn solve<T: Scalar>(
    pair: &FusionPair<T>,
    banks: &AnalysisBanks<T>,
    cfg: &SolverConfig,
) -> Result<(FeatureTriple<T>, SolverTrace)> {
    cfg.validate()?;
    banks.validate()?;
    if pair.bands() != banks.bands() {
        return Err(Error::shape(format!(
            "MS has {} bands, banks model {}",
            pair.bands(),
            banks.bands()
        )));
    }
    let steps = resolve_steps(pair, banks, cfg.steps)?;
    let mut features = FeatureTriple::zeros(pair.height(), pair.width(), banks.features());
    let needs_objective = cfg.track_objective || cfg.rel_tol > 0.0;

    let mut trace = SolverTrace {
        objective_per_sweep: Vec::new(),
        sweeps_run: 0,
        converged: false,
        steps,
    };
    if needs_objective {
        trace
            .objective_per_sweep
            .push(objective_value(pair, &features, banks, &cfg.weights)?);
    }

    for i in 1..=cfg.max_sweeps {
        sweep(pair, banks, &mut features, steps, &cfg.weights)?;
        trace.sweeps_run = i;
        if !features.is_finite() {
            return Err(Error::Divergence(format!("sweep {i}")));
        }
        if needs_objective {
            let obj = objective_value(pair, &features, banks, &cfg.weights)?;
            if !obj.is_finite() {
                return Err(Error::Divergence(format!("sweep {i}")));
            }
            let prev = *trace.objective_per_sweep.last().unwrap();
            trace.objective_per_sweep.push(obj);
            if cfg.rel_tol > 0.0 && (prev - obj) / prev.max(f64::MIN_POSITIVE) < cfg.rel_tol {
                trace.converged = true;
                break;
            }
        }
    }
    Ok((features, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synthesize_ms, synthesize_pan};

    fn problem(seed: u64, h: usize, w: usize, k: usize, b: usize) -> (FusionPair<f64>, AnalysisBanks<f64>, FeatureTriple<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let banks = AnalysisBanks::random_uniform(3, k, b, 0.5, &mut rng);
        let f = FeatureTriple {
            c: FeatureStack::random_uniform(h, w, k, -1.0, 1.0, &mut rng),
            u: FeatureStack::random_uniform(h, w, k, -1.0, 1.0, &mut rng),
            v: FeatureStack::random_uniform(h, w, k, -1.0, 1.0, &mut rng),
        };
        let pair = FusionPair::new(
            MultibandImage::random_uniform(h, w, 1, -1.0, 1.0, &mut rng),
            MultibandImage::random_uniform(h, w, b, -1.0, 1.0, &mut rng),
        )
        .unwrap();
        (pair, banks, f)
    }

    /// Central differences of the objective (λ = 0) along one coordinate.
    fn fd(pair: &FusionPair<f64>, banks: &AnalysisBanks<f64>, f: &FeatureTriple<f64>, which: char, idx: usize) -> f64 {
        let eps = 1e-5;
        let eval = |delta: f64| {
            let mut g = f.clone();
            let stack = match which {
                'u' => &mut g.u,
                'v' => &mut g.v,
                _ => &mut g.c,
            };
            stack.samples_mut()[idx] += delta;
            objective_value(pair, &g, banks, &PriorWeights::zero()).unwrap()
        };
        (eval(eps) - eval(-eps)) / (2.0 * eps)
    }

    fn max_rel_err(analytic: &FeatureStack<f64>, numeric: impl Fn(usize) -> f64) -> f64 {
        let scale = analytic.max_abs().max(1e-8);
        (0..analytic.samples().len())
            .map(|i| (analytic.samples()[i] - numeric(i)).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (pair, banks, f) = problem(1, 4, 4, 2, 2);
        let gu = gradient_u(&f.c, &f.u, &pair, &banks).unwrap();
        assert!(max_rel_err(&gu, |i| fd(&pair, &banks, &f, 'u', i)) <= 1e-4);
        let gv = gradient_v(&f.c, &f.v, &pair, &banks).unwrap();
        assert!(max_rel_err(&gv, |i| fd(&pair, &banks, &f, 'v', i)) <= 1e-4);
        let (n, l) = build_joint(&pair, &f, &banks).unwrap();
        let gc = gradient_c(&f.c, &n, &l).unwrap();
        assert!(max_rel_err(&gc, |i| fd(&pair, &banks, &f, 'c', i)) <= 1e-4);
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let (_, banks, f) = problem(2, 5, 5, 3, 2);
        let pair = FusionPair::new(
            synthesize_pan(&f.c, &f.u, &banks).unwrap(),
            synthesize_ms(&f.c, &f.v, &banks).unwrap(),
        )
        .unwrap();
        assert!(gradient_u(&f.c, &f.u, &pair, &banks).unwrap().max_abs() < 1e-12);
        assert!(gradient_v(&f.c, &f.v, &pair, &banks).unwrap().max_abs() < 1e-12);
        let (n, l) = build_joint(&pair, &f, &banks).unwrap();
        assert!(gradient_c(&f.c, &n, &l).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn term_dropout_reduces_to_single_adjoint() {
        let (pair, banks, f) = problem(3, 5, 4, 1, 2);
        let zero = FeatureStack::zeros(5, 4, 1);
        let g = gradient_u(&zero, &f.u, &pair, &banks).unwrap();
        let direct = conv2d_adjoint(
            &conv2d_same(&f.u, &banks.d_unique).unwrap().sub(&pair.pan).unwrap(),
            &banks.d_unique,
        )
        .unwrap();
        assert_eq!(g, direct);
        let g = gradient_v(&zero, &f.v, &pair, &banks).unwrap();
        let direct = conv2d_adjoint(
            &conv2d_same(&f.v, &banks.h_unique).unwrap().sub(&pair.ms_up).unwrap(),
            &banks.h_unique,
        )
        .unwrap();
        assert_eq!(g, direct);
    }

    #[test]
    fn joint_gradient_is_sum_of_block_gradients() {
        let (pair, banks, f) = problem(4, 5, 5, 3, 3);
        let (n, l) = build_joint(&pair, &f, &banks).unwrap();
        let gc = gradient_c(&f.c, &n, &l).unwrap();
        // PAN block: Dc†(Dc⊗C + Du⊗U − P); MS block: Hc†(Hc⊗C + Hv⊗V − M̃)
        let pan_res = crate::model::synthesize_pan(&f.c, &f.u, &banks).unwrap().sub(&pair.pan).unwrap();
        let ms_res = crate::model::synthesize_ms(&f.c, &f.v, &banks).unwrap().sub(&pair.ms_up).unwrap();
        let expected = conv2d_adjoint(&pan_res, &banks.d_common)
            .unwrap()
            .add(&conv2d_adjoint(&ms_res, &banks.h_common).unwrap())
            .unwrap();
        assert!(gc.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn soft_threshold_values() {
        let x = FeatureStack::<f64>::from_vec(1, 3, 1, vec![1.5, -0.3, -2.0]).unwrap();
        let y = soft_threshold(&x, 1.0).unwrap();
        assert_eq!(y.samples(), &[0.5, 0.0, -1.0]);
        let y = soft_threshold(&x, 0.5).unwrap();
        assert_eq!(y.samples()[1], 0.0);
        assert!(matches!(soft_threshold(&x, -0.1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn soft_threshold_beats_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let x: f64 = rng.gen_range(-3.0..3.0);
            let tau: f64 = rng.gen_range(0.0..2.0);
            let u = soft_threshold_scalar(x, tau);
            let obj = |v: f64| 0.5 * (v - x).powi(2) + tau * v.abs();
            let best = (0..=6000)
                .map(|i| -3.0 + i as f64 * 1e-3)
                .map(obj)
                .fold(f64::INFINITY, f64::min);
            assert!(obj(u) <= best + 1e-12);
        }
    }

    #[test]
    fn step_size_trivial_banks() {
        let two = FilterBank::<f64>::from_vec(1, 1, 1, vec![2.0]).unwrap();
        assert!((estimate_step_size(&two, 5, (4, 4)).unwrap() - 0.25).abs() < 1e-12);
        let delta = FilterBank::<f64>::delta(3, 1);
        assert!((estimate_step_size(&delta, 5, (4, 4)).unwrap() - 1.0).abs() < 1e-12);
        let zero = FilterBank::<f64>::zeros(3, 2, 1);
        assert!(matches!(estimate_step_size(&zero, 5, (4, 4)), Err(Error::UnboundedStep)));
        assert!(estimate_step_size(&delta, 0, (4, 4)).is_err());
    }

    #[test]
    fn step_size_refines_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bank = FilterBank::<f64>::random_uniform(3, 4, 2, 1.0, &mut rng);
        let steps: Vec<f64> = (1..15).map(|i| estimate_step_size(&bank, i, (8, 8)).unwrap()).collect();
        for w in steps.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn zero_problem_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let banks = AnalysisBanks::<f64>::random_uniform(3, 2, 2, 0.5, &mut rng);
        let pair = FusionPair::new(MultibandImage::zeros(6, 6, 1), MultibandImage::zeros(6, 6, 2)).unwrap();
        let (f, trace) = solve(&pair, &banks, &SolverConfig::default()).unwrap();
        assert_eq!(f, FeatureTriple::zeros(6, 6, 2));
        assert!(trace.objective_per_sweep.iter().all(|&o| o == 0.0));
    }

    #[test]
    fn large_lambda_zero_is_fixed_point() {
        let (pair, banks, _) = problem(10, 6, 6, 3, 2);
        let thr_u = conv2d_adjoint(&pair.pan, &banks.d_unique).unwrap().max_abs();
        let thr_v = conv2d_adjoint(&pair.ms_up, &banks.h_unique).unwrap().max_abs();
        let n = MultibandImage::concat_bands(&[&pair.pan, &pair.ms_up]).unwrap();
        let thr_c = conv2d_adjoint(&n, &banks.joint_common().unwrap()).unwrap().max_abs();
        let cfg = SolverConfig {
            weights: PriorWeights::new(thr_u * 1.001, thr_v * 1.001, thr_c * 1.001).unwrap(),
            max_sweeps: 1,
            ..SolverConfig::default()
        };
        let (f, _) = solve(&pair, &banks, &cfg).unwrap();
        assert_eq!(f, FeatureTriple::zeros(6, 6, 3));
        // slightly below the threshold something survives
        let cfg = SolverConfig {
            weights: PriorWeights::new(thr_u * 0.9, thr_v * 0.9, thr_c * 0.9).unwrap(),
            max_sweeps: 1,
            ..SolverConfig::default()
        };
        let (f, _) = solve(&pair, &banks, &cfg).unwrap();
        assert!(f.u.max_abs() > 0.0);
    }

    #[test]
    fn zero_residual_and_zero_tau_sweep_is_identity() {
        let (_, banks, f) = problem(11, 5, 5, 2, 2);
        let pair = FusionPair::new(
            synthesize_pan(&f.c, &f.u, &banks).unwrap(),
            synthesize_ms(&f.c, &f.v, &banks).unwrap(),
        )
        .unwrap();
        let mut g = f.clone();
        sweep(&pair, &banks, &mut g, [0.1, 0.1, 0.1], &PriorWeights::zero()).unwrap();
        assert!(g.u.max_abs_diff(&f.u).unwrap() < 1e-12);
        assert!(g.v.max_abs_diff(&f.v).unwrap() < 1e-12);
        assert!(g.c.max_abs_diff(&f.c).unwrap() < 1e-12);
    }

    #[test]
    fn divergence_is_reported() {
        let (pair, banks, _) = problem(12, 6, 6, 2, 2);
        let cfg = SolverConfig {
            steps: StepSizes::Explicit {
                eta_u: 1e6,
                eta_v: 1e6,
                eta_c: 1e6,
            },
            weights: PriorWeights::zero(),
            max_sweeps: 200,
            ..SolverConfig::default()
        };
        let err = solve(&pair.cast::<f32>(), &banks.cast::<f32>(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence(ref s) if s.starts_with("sweep")), "{err}");
    }

    #[test]
    fn rel_tol_stops_early() {
        let (pair, banks, _) = problem(13, 6, 6, 2, 2);
        let cfg = SolverConfig {
            rel_tol: 1e-2,
            max_sweeps: 500,
            ..SolverConfig::default()
        };
        let (_, trace) = solve(&pair, &banks, &cfg).unwrap();
        assert!(trace.converged);
        assert!(trace.sweeps_run < 500);
        assert_eq!(trace.objective_per_sweep.len(), trace.sweeps_run + 1);
    }
}
