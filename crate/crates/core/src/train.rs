//! End-to-end training of the unfolded network: taped forward pass, exact
//! gradients, finite-difference verification, Adam, and the epoch loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Value, Var};
use crate::error::{Error, Result};
use crate::model::FusionPair;
use crate::net::{mse_loss, network_forward, NetworkParams, PROX_BLOCKS};
use crate::raster::MultibandImage;
use crate::scalar::Scalar;

/// One training example: network input and reference HRMS.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample<T = f32> {
    pub pair: FusionPair<T>,
    pub truth: MultibandImage<T>,
}

impl<T: Scalar> TrainingSample<T> {
    pub fn cast<U: Scalar>(&self) -> TrainingSample<U> {
        TrainingSample {
            pair: self.pair.cast(),
            truth: self.truth.cast(),
        }
    }

    fn crop(&self, row: usize, col: usize, size: usize) -> Result<Self> {
        Ok(Self {
            pair: FusionPair {
                pan: self.pair.pan.crop(row, col, size, size)?,
                ms_up: self.pair.ms_up.crop(row, col, size, size)?,
            },
            truth: self.truth.crop(row, col, size, size)?,
        })
    }
}

/// Tape handles for every parameter tensor, in checkpoint order.
struct ParamVars {
    /// Seven model banks followed by the proximal-net convolutions.
    banks: Vec<Var>,
    eta: [Var; 3],
}

impl ParamVars {
    fn register<T: Scalar>(tape: &mut Tape<T>, params: &NetworkParams<T>) -> Self {
        let banks = params
            .banks()
            .into_iter()
            .map(|b| tape.parameter(Value::Bank(b.clone())))
            .collect();
        let eta = params.eta.map(|e| tape.parameter(Value::Scalar(e)));
        Self { banks, eta }
    }

    fn d_common(&self) -> Var {
        self.banks[0]
    }
    fn d_unique(&self) -> Var {
        self.banks[1]
    }
    fn h_common(&self) -> Var {
        self.banks[2]
    }
    fn h_unique(&self) -> Var {
        self.banks[3]
    }

    /// `(conv1, conv2)` of block `b` in proximal net `net` (0 = U, 1 = V,
    /// 2 = C) at stage `t`.
    fn prox_block(&self, t: usize, net: usize, b: usize) -> (Var, Var) {
        let base = 7 + ((t * 3 + net) * PROX_BLOCKS + b) * 2;
        (self.banks[base], self.banks[base + 1])
    }

    fn collect<T: Scalar>(&self, grads: &Gradients<T>, params: &NetworkParams<T>) -> Result<NetworkParams<T>> {
        let mut out = NetworkParams::zeros(params.shape, [0.0; 3])?;
        for (slot, &var) in out.banks_mut().into_iter().zip(&self.banks) {
            if let Some(g) = grads.bank(var) {
                *slot = g.clone();
            }
        }
        for (e, &var) in out.eta.iter_mut().zip(&self.eta) {
            *e = grads.scalar(var).unwrap_or(T::zero());
        }
        Ok(out)
    }
}

fn prox_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, vars: &ParamVars, t: usize, net: usize) -> Result<Var> {
    let mut y = x;
    for b in 0..PROX_BLOCKS {
        let (w1, w2) = vars.prox_block(t, net, b);
        let h = tape.conv(y, w1)?;
        let h = tape.relu(h)?;
        let r = tape.conv(h, w2)?;
        y = tape.add(y, r)?;
    }
    Ok(y)
}

/// Records the network forward pass on `tape`, mirroring
/// [`network_forward`] operation for operation. Returns the output node.
fn record_forward<T: Scalar>(
    tape: &mut Tape<T>,
    pair: &FusionPair<T>,
    params: &NetworkParams<T>,
    vars: &ParamVars,
) -> Result<Var> {
    let k = params.shape.features;
    let (h, w) = (pair.height(), pair.width());
    let pan = tape.constant_image(pair.pan.clone());
    let ms = tape.constant_image(pair.ms_up.clone());
    let zeros = tape.constant_image(MultibandImage::zeros(h, w, k));
    let (mut c, mut u, mut v) = (zeros, zeros, zeros);
    let l_common = tape.concat_banks(&[vars.d_common(), vars.h_common()])?;

    for t in 0..params.stages.len() {
        // U
        let p_c = tape.conv(c, vars.d_common())?;
        let p_u = tape.conv(u, vars.d_unique())?;
        let s = tape.add(p_c, p_u)?;
        let eps = tape.sub(s, pan)?;
        let grad = tape.conv_adjoint(eps, vars.d_unique())?;
        let step = tape.scale(grad, vars.eta[0])?;
        let half = tape.sub(u, step)?;
        u = prox_on_tape(tape, half, vars, t, 0)?;

        // V
        let m_c = tape.conv(c, vars.h_common())?;
        let m_v = tape.conv(v, vars.h_unique())?;
        let s = tape.add(m_c, m_v)?;
        let eps = tape.sub(s, ms)?;
        let grad = tape.conv_adjoint(eps, vars.h_unique())?;
        let step = tape.scale(grad, vars.eta[1])?;
        let half = tape.sub(v, step)?;
        v = prox_on_tape(tape, half, vars, t, 1)?;

        // C on the joint operands
        let du = tape.conv(u, vars.d_unique())?;
        let pan_res = tape.sub(pan, du)?;
        let hv = tape.conv(v, vars.h_unique())?;
        let ms_res = tape.sub(ms, hv)?;
        let n = tape.concat_bands(&[pan_res, ms_res])?;
        let f_c = tape.conv(c, l_common)?;
        let eps = tape.sub(f_c, n)?;
        let grad = tape.conv_adjoint(eps, l_common)?;
        let step = tape.scale(grad, vars.eta[2])?;
        let half = tape.sub(c, step)?;
        c = prox_on_tape(tape, half, vars, t, 2)?;

        if !tape.image(c)?.is_finite() || !tape.image(u)?.is_finite() || !tape.image(v)?.is_finite() {
            return Err(Error::Divergence(format!("forward stage {}", t + 1)));
        }
    }

    let g = &vars.banks[4..7];
    let oc = tape.conv(c, g[0])?;
    let ou = tape.conv(u, g[1])?;
    let ov = tape.conv(v, g[2])?;
    let o = tape.add(oc, ou)?;
    tape.add(o, ov)
}

/// Network output computed through the tape (used to cross-check the plain
/// forward pass).
pub fn taped_forward<T: Scalar>(pair: &FusionPair<T>, params: &NetworkParams<T>) -> Result<MultibandImage<T>> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let o = record_forward(&mut tape, pair, params, &vars)?;
    Ok(tape.image(o)?.clone())
}

/// `‖O − truth‖²` for one sample and its exact gradient with respect to every
/// parameter.
pub fn loss_and_grad<T: Scalar>(
    sample: &TrainingSample<T>,
    params: &NetworkParams<T>,
) -> Result<(f64, NetworkParams<T>)> {
    if !sample.truth.same_dims(&sample.pair.ms_up) {
        return Err(Error::shape(format!(
            "truth {:?} vs upsampled MS {:?}",
            sample.truth.dims(),
            sample.pair.ms_up.dims()
        )));
    }
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let o = record_forward(&mut tape, &sample.pair, params, &vars)?;
    let truth = tape.constant_image(sample.truth.clone());
    let diff = tape.sub(o, truth)?;
    let loss = tape.square_sum(diff)?;
    let value = tape.scalar(loss)?.as_f64();
    let grads = tape.backward(loss)?;
    Ok((value, vars.collect(&grads, params)?))
}

/// Which scalars a finite-difference check perturbs.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSelection {
    /// `count` scalars drawn uniformly over all parameters.
    Sample { count: usize, seed: u64 },
    /// Explicit `(tensor, element)` pairs in checkpoint order.
    Indices(Vec<(usize, usize)>),
    /// Every scalar of the listed tensors.
    Tensors(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Same error with the fixed floor only, ignoring the loss scale.
    pub max_strict_error: f64,
    pub loss: f64,
    /// `(tensor, element)` of the worst entry.
    pub worst: (usize, usize),
}

/// Gradients below `GRADCHECK_ABS_FLOOR · max(1, |loss|)` are compared
/// absolutely: central-difference round-off grows with the loss value.
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-6;

/// Central-difference check of [`loss_and_grad`] in double precision. The
/// numeric side evaluates the plain forward pass, not the tape.
///
/// Relative error is `|analytic − numeric| / max(|analytic|, |numeric|, floor)`
/// with `floor = 1e-6 · max(1, |loss|)`.
pub fn finite_diff_check(
    selection: &ParamSelection,
    params: &NetworkParams<f64>,
    sample: &TrainingSample<f64>,
    perturbation: f64,
) -> Result<GradCheckReport> {
    if !(perturbation > 0.0 && perturbation.is_finite()) {
        return Err(Error::invalid(format!("perturbation must be positive, got {perturbation}")));
    }
    let (loss, grads) = loss_and_grad(sample, params)?;
    let floor = GRADCHECK_ABS_FLOOR * loss.abs().max(1.0);
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let picks: Vec<(usize, usize)> = match selection {
        ParamSelection::Indices(v) => v.clone(),
        ParamSelection::Tensors(ts) => ts.iter().flat_map(|&t| (0..sizes[t]).map(move |i| (t, i))).collect(),
        ParamSelection::Sample { count, seed } => {
            let total: usize = sizes.iter().sum();
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..*count)
                .map(|_| {
                    let mut flat = rng.gen_range(0..total);
                    let mut t = 0;
                    while flat >= sizes[t] {
                        flat -= sizes[t];
                        t += 1;
                    }
                    (t, flat)
                })
                .collect()
        }
    };
    let loss_at = |p: &NetworkParams<f64>| -> Result<f64> {
        let (o, _) = network_forward(&sample.pair, p)?;
        mse_loss(std::slice::from_ref(&o), std::slice::from_ref(&sample.truth))
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        max_strict_error: 0.0,
        loss,
        worst: (0, 0),
    };
    let analytic_tensors = grads.tensors();
    for &(t, i) in &picks {
        if t >= sizes.len() || i >= sizes[t] {
            return Err(Error::invalid(format!("parameter ({t}, {i}) out of range")));
        }
        let mut plus = params.clone();
        plus.tensors_mut()[t][i] += perturbation;
        let mut minus = params.clone();
        minus.tensors_mut()[t][i] -= perturbation;
        let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * perturbation);
        let analytic = analytic_tensors[t][i];
        let gap = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let err = gap / scale.max(floor);
        report.max_strict_error = report.max_strict_error.max(gap / scale.max(GRADCHECK_ABS_FLOOR));
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (t, i);
        }
        report.checked += 1;
    }
    Ok(report)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment estimates, one accumulator per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn for_params<T: Scalar>(params: &NetworkParams<T>) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self::new(&shapes)
    }

    /// One bias-corrected Adam step over matching tensor lists.
    pub fn update<T: Scalar>(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam: state tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape(format!("adam: tensor {i} length mismatch")));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for j in 0..p.len() {
                let gj = g[j].as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= T::of(lr * m_hat / (v_hat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

pub fn adam_update<T: Scalar>(
    params: &mut NetworkParams<T>,
    grads: &NetworkParams<T>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.shape != grads.shape {
        return Err(Error::shape("adam: gradient shape differs from parameters"));
    }
    let g = grads.tensors();
    state.update(&mut params.tensors_mut(), &g, lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Train on random `crop x crop` windows instead of whole samples.
    pub crop: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            decay_factor: 0.9,
            decay_every: 50,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            crop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid("decay_factor must be in (0, 1]"));
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return Err(Error::invalid("decay_every and batch_size must be >= 1"));
        }
        if self.crop == Some(0) {
            return Err(Error::invalid("crop must be >= 1"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Loss history as CSV with header `epoch,mean_loss,lr`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_loss,lr\n");
    for r in history {
        let _ = writeln!(out, "{},{},{}", r.epoch, r.mean_loss, r.lr);
    }
    out
}

/// Mini-batch Adam on `Σ_j ‖O_j − truth_j‖²`.
///
/// Each epoch reshuffles the samples with a generator seeded once from
/// `cfg.seed`; per-batch gradients are summed in sample order, so results are
/// reproducible bit for bit.
pub fn train<T: Scalar>(
    samples: &[TrainingSample<T>],
    params: NetworkParams<T>,
    cfg: &TrainConfig,
) -> Result<(NetworkParams<T>, Vec<EpochRecord>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let (h, w) = (samples[0].pair.height(), samples[0].pair.width());
    for (i, s) in samples.iter().enumerate() {
        if s.pair.bands() != params.shape.bands || s.truth.bands() != params.shape.bands {
            return Err(Error::shape(format!(
                "sample {i} has {} bands, network expects {}",
                s.pair.bands(),
                params.shape.bands
            )));
        }
        if let Some(crop) = cfg.crop {
            if s.pair.height() < crop || s.pair.width() < crop {
                return Err(Error::shape(format!("sample {i} smaller than crop {crop}")));
            }
        } else if s.pair.height() != h || s.pair.width() != w {
            return Err(Error::shape(format!("sample {i} size differs from sample 0")));
        }
    }

    let mut params = params;
    let mut adam = AdamState::for_params(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad_sum: Option<NetworkParams<T>> = None;
            for &j in batch {
                let sample = match cfg.crop {
                    Some(crop) => {
                        let s = &samples[j];
                        let r = rng.gen_range(0..=s.pair.height() - crop);
                        let c = rng.gen_range(0..=s.pair.width() - crop);
                        s.crop(r, c, crop)?
                    }
                    None => samples[j].clone(),
                };
                let (loss, grads) = loss_and_grad(&sample, &params).map_err(|e| match e {
                    Error::Divergence(what) => Error::Divergence(format!("epoch {epoch} batch {b}: {what}")),
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!("epoch {epoch} batch {b}: loss {loss}")));
                }
                epoch_loss += loss;
                match &mut grad_sum {
                    None => grad_sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.tensors_mut().into_iter().zip(grads.tensors()) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
            let grads = grad_sum.expect("non-empty batch");
            adam_update(&mut params, &grads, &mut adam, lr)?;
            if !params.is_finite() {
                return Err(Error::Divergence(format!("epoch {epoch} batch {b}: parameters")));
            }
        }
        history.push(EpochRecord {
            epoch,
            mean_loss: epoch_loss / samples.len() as f64,
            lr,
        });
    }
    Ok((params, history))
}
