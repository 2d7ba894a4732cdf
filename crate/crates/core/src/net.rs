//! Unfolded network: `T` stages, each a U-, V- and C-update built from one
//! proximal-gradient step with a learned residual proximal operator, followed
//! by HRMS synthesis from the final features.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_adjoint, conv2d_same, FilterBank};
use crate::error::{Error, Result};
use crate::model::{build_joint, reconstruct_hrms, AnalysisBanks, FeatureTriple, FusionPair, SynthesisBanks};
use crate::raster::{FeatureStack, MultibandImage};
use crate::scalar::Scalar;

/// Residual blocks per proximal network.
pub const PROX_BLOCKS: usize = 3;
/// Initial value of every step size.
pub const ETA_INIT: f64 = 0.1;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    /// Feature maps per family (`K`).
    pub features: usize,
    /// Analysis/synthesis kernel size (`s`).
    pub kernel: usize,
    /// MS bands (`B`).
    pub bands: usize,
    /// Proximal-net kernel size (`k_p`).
    pub prox_kernel: usize,
    /// Proximal-net channel count (`F`); must equal `features`.
    pub prox_channels: usize,
    /// Number of stages (`T`).
    pub stages: usize,
}

impl NetShape {
    /// Desk-scale default: `K = 8`, `3x3` kernels, two stages.
    pub fn desk(bands: usize) -> Self {
        Self {
            features: 8,
            kernel: 3,
            bands,
            prox_kernel: 3,
            prox_channels: 8,
            stages: 2,
        }
    }

    /// `8x8` kernels, 16 channels, two stages, eight bands.
    pub fn full_scale() -> Self {
        Self {
            features: 16,
            kernel: 8,
            bands: 8,
            prox_kernel: 8,
            prox_channels: 16,
            stages: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("features", self.features),
            ("kernel", self.kernel),
            ("bands", self.bands),
            ("prox_kernel", self.prox_kernel),
            ("prox_channels", self.prox_channels),
            ("stages", self.stages),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be >= 1")));
        }
        if self.prox_channels != self.features {
            return Err(Error::invalid(format!(
                "prox_channels ({}) must equal features ({})",
                self.prox_channels, self.features
            )));
        }
        Ok(())
    }

    fn header(&self) -> String {
        format!(
            "K={} s={} B={} kp={} F={} T={}",
            self.features, self.kernel, self.bands, self.prox_kernel, self.prox_channels, self.stages
        )
    }

    fn parse_header(text: &str) -> Result<Self> {
        let mut vals = [None; 6];
        let keys = ["K", "s", "B", "kp", "F", "T"];
        for tok in text.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad checkpoint header token `{tok}`")))?;
            let slot = keys
                .iter()
                .position(|&name| name == k)
                .ok_or_else(|| Error::Format(format!("unknown checkpoint header key `{k}`")))?;
            vals[slot] = Some(
                v.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad value for `{k}` in checkpoint header")))?,
            );
        }
        let get = |i: usize| vals[i].ok_or_else(|| Error::Format(format!("checkpoint header lacks `{}`", keys[i])));
        let shape = Self {
            features: get(0)?,
            kernel: get(1)?,
            bands: get(2)?,
            prox_kernel: get(3)?,
            prox_channels: get(4)?,
            stages: get(5)?,
        };
        shape.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T = f32> {
    pub conv1: FilterBank<T>,
    pub conv2: FilterBank<T>,
}

/// `x -> x + conv2(relu(conv1(x)))`, three times, bias-free.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxNetParams<T = f32> {
    pub blocks: Vec<ResBlock<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams<T = f32> {
    pub theta_u: ProxNetParams<T>,
    pub theta_v: ProxNetParams<T>,
    pub theta_c: ProxNetParams<T>,
}

/// All learnable parameters. Banks and step sizes are shared across stages;
/// only the proximal networks are per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T = f32> {
    pub shape: NetShape,
    pub analysis: AnalysisBanks<T>,
    pub synthesis: SynthesisBanks<T>,
    pub stages: Vec<StageParams<T>>,
    /// `[η1, η2, η3]` for the U-, V- and C-updates.
    pub eta: [T; 3],
}

impl<T: Scalar> ProxNetParams<T> {
    pub fn zeros(kernel: usize, channels: usize) -> Self {
        Self {
            blocks: (0..PROX_BLOCKS)
                .map(|_| ResBlock {
                    conv1: FilterBank::zeros(kernel, channels, channels),
                    conv2: FilterBank::zeros(kernel, channels, channels),
                })
                .collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.blocks[0].conv1.in_bands()
    }

    fn banks(&self) -> impl Iterator<Item = &FilterBank<T>> {
        self.blocks.iter().flat_map(|b| [&b.conv1, &b.conv2])
    }

    fn banks_mut(&mut self) -> impl Iterator<Item = &mut FilterBank<T>> {
        self.blocks.iter_mut().flat_map(|b| [&mut b.conv1, &mut b.conv2])
    }
}

impl<T: Scalar> StageParams<T> {
    fn nets(&self) -> [&ProxNetParams<T>; 3] {
        [&self.theta_u, &self.theta_v, &self.theta_c]
    }

    fn nets_mut(&mut self) -> [&mut ProxNetParams<T>; 3] {
        [&mut self.theta_u, &mut self.theta_v, &mut self.theta_c]
    }
}

impl<T: Scalar> NetworkParams<T> {
    /// Every weight zero and every step size `eta`.
    pub fn zeros(shape: NetShape, eta: [f64; 3]) -> Result<Self> {
        shape.validate()?;
        let NetShape {
            features: k,
            kernel: s,
            bands: b,
            prox_kernel: kp,
            prox_channels: f,
            stages,
        } = shape;
        Ok(Self {
            shape,
            analysis: AnalysisBanks::zeros(s, k, b),
            synthesis: SynthesisBanks::zeros(s, k, b),
            stages: (0..stages)
                .map(|_| StageParams {
                    theta_u: ProxNetParams::zeros(kp, f),
                    theta_v: ProxNetParams::zeros(kp, f),
                    theta_c: ProxNetParams::zeros(kp, f),
                })
                .collect(),
            eta: eta.map(T::of),
        })
    }

    /// Seeded initialisation: each weight uniform in `±1/sqrt(fan_in)`,
    /// step sizes [`ETA_INIT`].
    pub fn init(shape: NetShape, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(shape, [ETA_INIT; 3])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for bank in params.banks_mut() {
            let half = 1.0 / (bank.fan_in() as f64).sqrt();
            *bank = FilterBank::random_uniform(bank.size(), bank.in_bands(), bank.out_bands(), half, &mut rng);
        }
        Ok(params)
    }

    /// Filter banks in checkpoint order.
    pub fn banks(&self) -> Vec<&FilterBank<T>> {
        let a = &self.analysis;
        let g = &self.synthesis;
        let mut out = vec![
            &a.d_common,
            &a.d_unique,
            &a.h_common,
            &a.h_unique,
            &g.g_common,
            &g.g_unique_pan,
            &g.g_unique_ms,
        ];
        for stage in &self.stages {
            for net in stage.nets() {
                out.extend(net.banks());
            }
        }
        out
    }

    pub fn banks_mut(&mut self) -> Vec<&mut FilterBank<T>> {
        let a = &mut self.analysis;
        let g = &mut self.synthesis;
        let mut out = vec![
            &mut a.d_common,
            &mut a.d_unique,
            &mut a.h_common,
            &mut a.h_unique,
            &mut g.g_common,
            &mut g.g_unique_pan,
            &mut g.g_unique_ms,
        ];
        for stage in &mut self.stages {
            for net in stage.nets_mut() {
                out.extend(net.banks_mut());
            }
        }
        out
    }

    /// All parameter tensors as flat slices, in checkpoint order: the seven
    /// model banks, then per stage the U, V and C proximal nets (block by
    /// block, `conv1` before `conv2`), then `[η1, η2, η3]`.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = self.banks().into_iter().map(|b| b.weights()).collect();
        out.push(&self.eta);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let Self {
            analysis: a,
            synthesis: g,
            stages,
            eta,
            ..
        } = self;
        let mut out: Vec<&mut [T]> = vec![
            a.d_common.weights_mut(),
            a.d_unique.weights_mut(),
            a.h_common.weights_mut(),
            a.h_unique.weights_mut(),
            g.g_common.weights_mut(),
            g.g_unique_pan.weights_mut(),
            g.g_unique_ms.weights_mut(),
        ];
        for stage in stages.iter_mut() {
            for net in stage.nets_mut() {
                out.extend(net.banks_mut().map(|b| b.weights_mut()));
            }
        }
        out.push(&mut eta[..]);
        out
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            shape: self.shape,
            analysis: self.analysis.cast(),
            synthesis: self.synthesis.cast(),
            stages: self
                .stages
                .iter()
                .map(|s| StageParams {
                    theta_u: cast_prox(&s.theta_u),
                    theta_v: cast_prox(&s.theta_v),
                    theta_c: cast_prox(&s.theta_c),
                })
                .collect(),
            eta: self.eta.map(|e| U::of(e.as_f64())),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn cast_prox<T: Scalar, U: Scalar>(p: &ProxNetParams<T>) -> ProxNetParams<U> {
    ProxNetParams {
        blocks: p
            .blocks
            .iter()
            .map(|b| ResBlock {
                conv1: b.conv1.cast(),
                conv2: b.conv2.cast(),
            })
            .collect(),
    }
}

/// Exact number of learnable scalars.
pub fn count_parameters<T: Scalar>(params: &NetworkParams<T>) -> usize {
    params.tensors().iter().map(|t| t.len()).sum()
}

/// Closed form of [`count_parameters`] for a shape:
/// `s²K(2 + 5B) + T · 3 · PROX_BLOCKS · 2 · k_p²F² + 3`.
pub fn parameter_formula(shape: &NetShape) -> usize {
    let NetShape {
        features: k,
        kernel: s,
        bands: b,
        prox_kernel: kp,
        prox_channels: f,
        stages: t,
    } = *shape;
    s * s * k * (2 + 5 * b) + t * 3 * PROX_BLOCKS * 2 * kp * kp * f * f + 3
}

pub fn prox_net_apply<T: Scalar>(x: &FeatureStack<T>, p: &ProxNetParams<T>) -> Result<FeatureStack<T>> {
    if x.count() != p.channels() {
        return Err(Error::shape(format!(
            "prox net expects {} channels, got {}",
            p.channels(),
            x.count()
        )));
    }
    let mut y = x.clone();
    for block in &p.blocks {
        let hidden = conv2d_same(&y, &block.conv1)?.map(|v| v.max(T::zero()));
        y.axpy(T::one(), &conv2d_same(&hidden, &block.conv2)?)?;
    }
    Ok(y)
}

fn stage<T: Scalar>(params: &NetworkParams<T>, t: usize) -> Result<&StageParams<T>> {
    params
        .stages
        .get(t)
        .ok_or_else(|| Error::invalid(format!("stage {t} out of range (T = {})", params.stages.len())))
}

/// U-update of stage `t` (0-based).
pub fn u_net_stage<T: Scalar>(
    pair: &FusionPair<T>,
    c_prev: &FeatureStack<T>,
    u_prev: &FeatureStack<T>,
    params: &NetworkParams<T>,
    t: usize,
) -> Result<FeatureStack<T>> {
    let a = &params.analysis;
    let p_c = conv2d_same(c_prev, &a.d_common)?;
    let p_u = conv2d_same(u_prev, &a.d_unique)?;
    let eps = p_c.add(&p_u)?.sub(&pair.pan)?;
    let grad = conv2d_adjoint(&eps, &a.d_unique)?;
    let mut u_half = u_prev.clone();
    u_half.axpy(-params.eta[0], &grad)?;
    prox_net_apply(&u_half, &stage(params, t)?.theta_u)
}

/// V-update of stage `t`.
pub fn v_net_stage<T: Scalar>(
    pair: &FusionPair<T>,
    c_prev: &FeatureStack<T>,
    v_prev: &FeatureStack<T>,
    params: &NetworkParams<T>,
    t: usize,
) -> Result<FeatureStack<T>> {
    let a = &params.analysis;
    let m_c = conv2d_same(c_prev, &a.h_common)?;
    let m_v = conv2d_same(v_prev, &a.h_unique)?;
    let eps = m_c.add(&m_v)?.sub(&pair.ms_up)?;
    let grad = conv2d_adjoint(&eps, &a.h_unique)?;
    let mut v_half = v_prev.clone();
    v_half.axpy(-params.eta[1], &grad)?;
    prox_net_apply(&v_half, &stage(params, t)?.theta_v)
}

/// C-update of stage `t`, using this stage's `U` and `V`.
pub fn c_net_stage<T: Scalar>(
    pair: &FusionPair<T>,
    c_prev: &FeatureStack<T>,
    u_new: &FeatureStack<T>,
    v_new: &FeatureStack<T>,
    params: &NetworkParams<T>,
    t: usize,
) -> Result<FeatureStack<T>> {
    let current = FeatureTriple {
        c: c_prev.clone(),
        u: u_new.clone(),
        v: v_new.clone(),
    };
    let (n, l_common) = build_joint(pair, &current, &params.analysis)?;
    let eps = conv2d_same(c_prev, &l_common)?.sub(&n)?;
    let grad = conv2d_adjoint(&eps, &l_common)?;
    let mut c_half = c_prev.clone();
    c_half.axpy(-params.eta[2], &grad)?;
    prox_net_apply(&c_half, &stage(params, t)?.theta_c)
}

fn check_input<T: Scalar>(pair: &FusionPair<T>, params: &NetworkParams<T>) -> Result<()> {
    if pair.pan.bands() != 1 || pair.bands() != params.shape.bands {
        return Err(Error::shape(format!(
            "network expects 1 + {} bands, got {} + {}",
            params.shape.bands,
            pair.pan.bands(),
            pair.bands()
        )));
    }
    if pair.pan.height() != pair.ms_up.height() || pair.pan.width() != pair.ms_up.width() {
        return Err(Error::shape("PAN and upsampled MS grids differ"));
    }
    Ok(())
}

/// Runs all stages from zero features and synthesises the HRMS output.
pub fn network_forward<T: Scalar>(
    pair: &FusionPair<T>,
    params: &NetworkParams<T>,
) -> Result<(MultibandImage<T>, FeatureTriple<T>)> {
    check_input(pair, params)?;
    let mut f = FeatureTriple::zeros(pair.height(), pair.width(), params.shape.features);
    for t in 0..params.stages.len() {
        f.u = u_net_stage(pair, &f.c, &f.u, params, t)?;
        f.v = v_net_stage(pair, &f.c, &f.v, params, t)?;
        f.c = c_net_stage(pair, &f.c, &f.u, &f.v, params, t)?;
        if !f.is_finite() {
            return Err(Error::Divergence(format!("forward stage {}", t + 1)));
        }
    }
    let o = reconstruct_hrms(&f, &params.synthesis)?;
    if !o.is_finite() {
        return Err(Error::Divergence("forward synthesis".into()));
    }
    Ok((o, f))
}

/// `Σ_j ‖predicted_j − truth_j‖²`
pub fn mse_loss<T: Scalar>(predicted: &[MultibandImage<T>], truth: &[MultibandImage<T>]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(Error::shape(format!(
            "loss needs equal non-empty batches, got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    predicted.iter().zip(truth).try_fold(0.0, |acc, (p, g)| {
        Ok(acc + p.sub(g)?.samples().iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PPN1";

/// Checkpoint layout: `PPN1`, a `u32` LE header length, the UTF-8 header
/// `K=.. s=.. B=.. kp=.. F=.. T=..`, then every tensor of
/// [`NetworkParams::tensors`] in order as LE `f32`.
pub fn encode_checkpoint<T: Scalar>(params: &NetworkParams<T>) -> Vec<u8> {
    let header = params.shape.header();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetworkParams<f32>> {
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing PPN1 magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body_start = 8usize
        .checked_add(hlen)
        .ok_or_else(|| Error::DimOverflow("checkpoint header length".into()))?;
    if bytes.len() < body_start {
        return Err(Error::Truncated {
            expected: hlen,
            found: bytes.len() - 8,
        });
    }
    let header = std::str::from_utf8(&bytes[8..body_start])
        .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
    let shape = NetShape::parse_header(header)?;
    let mut params = NetworkParams::<f32>::zeros(shape, [0.0; 3])?;
    let expected = 4 * count_parameters(&params);
    let body = &bytes[body_start..];
    if body.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: body.len(),
        });
    }
    if body.len() > expected {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", body.len() - expected)));
    }
    let mut values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = values.next().unwrap();
        }
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(params: &NetworkParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NetworkParams<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{gradient_c, gradient_u, gradient_v, sweep};
    fn tiny() -> NetShape {
        NetShape {
            features: 3,
            kernel: 3,
            bands: 2,
            prox_kernel: 3,
            prox_channels: 3,
            stages: 2,
        }
    }

    fn random_pair(seed: u64, h: usize, w: usize, b: usize) -> FusionPair<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FusionPair::new(
            MultibandImage::random_uniform(h, w, 1, 0.0, 1.0, &mut rng),
            MultibandImage::random_uniform(h, w, b, 0.0, 1.0, &mut rng),
        )
        .unwrap()
    }

    /// Straight-line re-evaluation of the residual recurrence with explicit
    /// per-pixel loops for the ReLU and skip connection.
    fn prox_reference(x: &FeatureStack<f64>, p: &ProxNetParams<f64>) -> FeatureStack<f64> {
        let b0 = &p.blocks[0];
        let b1 = &p.blocks[1];
        let b2 = &p.blocks[2];
        let relu = |img: MultibandImage<f64>| MultibandImage::from_fn(img.height(), img.width(), img.bands(), |r, c, k| {
            let v = img.get(r, c, k);
            if v > 0.0 { v } else { 0.0 }
        });
        let add = |a: &MultibandImage<f64>, b: &MultibandImage<f64>| {
            MultibandImage::from_fn(a.height(), a.width(), a.bands(), |r, c, k| a.get(r, c, k) + b.get(r, c, k))
        };
        let y1 = add(x, &conv2d_same(&relu(conv2d_same(x, &b0.conv1).unwrap()), &b0.conv2).unwrap());
        let y2 = add(&y1, &conv2d_same(&relu(conv2d_same(&y1, &b1.conv1).unwrap()), &b1.conv2).unwrap());
        add(&y2, &conv2d_same(&relu(conv2d_same(&y2, &b2.conv1).unwrap()), &b2.conv2).unwrap())
    }

    #[test]
    fn prox_net_zero_weights_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = FeatureStack::<f64>::random_uniform(5, 5, 3, -1.0, 1.0, &mut rng);
        let p = ProxNetParams::zeros(3, 3);
        assert_eq!(prox_net_apply(&x, &p).unwrap(), x);
        let z = FeatureStack::<f64>::zeros(5, 5, 3);
        assert_eq!(prox_net_apply(&z, &p).unwrap(), z);
    }

    #[test]
    fn prox_net_matches_reference() {
        let params = NetworkParams::<f64>::init(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = FeatureStack::<f64>::random_uniform(6, 5, 3, -1.0, 1.0, &mut rng);
        let p = &params.stages[1].theta_v;
        let got = prox_net_apply(&x, p).unwrap();
        let want = prox_reference(&x, p);
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-6 * want.max_abs().max(1.0));
    }

    #[test]
    fn prox_net_channel_mismatch() {
        let p = ProxNetParams::<f32>::zeros(3, 4);
        assert!(matches!(prox_net_apply(&FeatureStack::zeros(3, 3, 2), &p), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_prox_stages_are_solver_steps() {
        let mut params = NetworkParams::<f64>::init(tiny(), 5).unwrap();
        for stage in &mut params.stages {
            *stage = StageParams {
                theta_u: ProxNetParams::zeros(3, 3),
                theta_v: ProxNetParams::zeros(3, 3),
                theta_c: ProxNetParams::zeros(3, 3),
            };
        }
        params.eta = [0.05, 0.07, 0.03];
        let pair = random_pair(6, 6, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = FeatureStack::<f64>::random_uniform(6, 6, 3, -1.0, 1.0, &mut rng);
        let u = FeatureStack::<f64>::random_uniform(6, 6, 3, -1.0, 1.0, &mut rng);
        let v = FeatureStack::<f64>::random_uniform(6, 6, 3, -1.0, 1.0, &mut rng);
        let a = &params.analysis;

        let got = u_net_stage(&pair, &c, &u, &params, 0).unwrap();
        let mut want = u.clone();
        want.axpy(-0.05, &gradient_u(&c, &u, &pair, a).unwrap()).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
        assert_eq!(got.dims(), u.dims());

        let got = v_net_stage(&pair, &c, &v, &params, 1).unwrap();
        let mut want = v.clone();
        want.axpy(-0.07, &gradient_v(&c, &v, &pair, a).unwrap()).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);

        let got = c_net_stage(&pair, &c, &u, &v, &params, 0).unwrap();
        let (n, l) = build_joint(&pair, &FeatureTriple { c: c.clone(), u, v }, a).unwrap();
        let mut want = c.clone();
        want.axpy(-0.03, &gradient_c(&c, &n, &l).unwrap()).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);

        // full forward equals T solver sweeps with zero thresholds
        let (_, f) = network_forward(&pair, &params).unwrap();
        let mut g = FeatureTriple::zeros(6, 6, 3);
        for _ in 0..2 {
            sweep(&pair, a, &mut g, [0.05, 0.07, 0.03], &crate::model::PriorWeights::zero()).unwrap();
        }
        assert!(f.c.max_abs_diff(&g.c).unwrap() <= 1e-12);
        assert!(f.u.max_abs_diff(&g.u).unwrap() <= 1e-12);
        assert!(f.v.max_abs_diff(&g.v).unwrap() <= 1e-12);
    }

    #[test]
    fn zero_residual_is_fixed_point() {
        let mut params = NetworkParams::<f64>::init(tiny(), 8).unwrap();
        for stage in &mut params.stages {
            stage.theta_u = ProxNetParams::zeros(3, 3);
            stage.theta_v = ProxNetParams::zeros(3, 3);
            stage.theta_c = ProxNetParams::zeros(3, 3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = FeatureTriple {
            c: FeatureStack::<f64>::random_uniform(5, 5, 3, -1.0, 1.0, &mut rng),
            u: FeatureStack::random_uniform(5, 5, 3, -1.0, 1.0, &mut rng),
            v: FeatureStack::random_uniform(5, 5, 3, -1.0, 1.0, &mut rng),
        };
        let a = &params.analysis;
        let pair = FusionPair::new(
            crate::model::synthesize_pan(&f.c, &f.u, a).unwrap(),
            crate::model::synthesize_ms(&f.c, &f.v, a).unwrap(),
        )
        .unwrap();
        let u = u_net_stage(&pair, &f.c, &f.u, &params, 0).unwrap();
        assert!(u.max_abs_diff(&f.u).unwrap() < 1e-12);
        let v = v_net_stage(&pair, &f.c, &f.v, &params, 0).unwrap();
        assert!(v.max_abs_diff(&f.v).unwrap() < 1e-12);
        let c = c_net_stage(&pair, &f.c, &f.u, &f.v, &params, 0).unwrap();
        assert!(c.max_abs_diff(&f.c).unwrap() < 1e-12);
    }

    #[test]
    fn forward_shapes_and_zero_params() {
        let shape = NetShape::desk(8);
        let params = NetworkParams::<f32>::zeros(shape, [0.1; 3]).unwrap();
        let pair = random_pair(10, 64, 64, 8).cast::<f32>();
        let (o, f) = network_forward(&pair, &params).unwrap();
        assert_eq!(o.dims(), (64, 64, 8));
        assert_eq!(f.c.dims(), (64, 64, 8));
        assert_eq!(o.max_abs(), 0.0);
    }

    #[test]
    fn one_stage_forward_is_composition() {
        let shape = NetShape { stages: 1, ..tiny() };
        let params = NetworkParams::<f64>::init(shape, 11).unwrap();
        let pair = random_pair(12, 7, 6, 2);
        let (o, _) = network_forward(&pair, &params).unwrap();
        let z = FeatureStack::zeros(7, 6, 3);
        let u = u_net_stage(&pair, &z, &z, &params, 0).unwrap();
        let v = v_net_stage(&pair, &z, &z, &params, 0).unwrap();
        let c = c_net_stage(&pair, &z, &u, &v, &params, 0).unwrap();
        let manual = reconstruct_hrms(&FeatureTriple { c, u, v }, &params.synthesis).unwrap();
        assert!(o.max_abs_diff(&manual).unwrap() <= 1e-6);
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let params = NetworkParams::<f64>::init(tiny(), 1).unwrap();
        let pair = random_pair(1, 5, 5, 3);
        assert!(matches!(network_forward(&pair, &params), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_divergence_names_stage() {
        let mut params = NetworkParams::<f32>::init(tiny(), 2).unwrap();
        params.eta = [1e30; 3];
        let pair = random_pair(2, 6, 6, 2).cast::<f32>();
        let err = network_forward(&pair, &params).unwrap_err();
        assert!(matches!(err, Error::Divergence(ref s) if s.contains("stage")), "{err}");
    }

    #[test]
    fn loss_values() {
        let a = MultibandImage::<f64>::zeros(2, 2, 1);
        assert_eq!(mse_loss(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        let mut b = a.clone();
        b.set(1, 0, 0, 2.0);
        assert_eq!(mse_loss(&[a.clone()], &[b]).unwrap(), 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<_> = (0..3).map(|_| MultibandImage::<f64>::random_uniform(3, 3, 2, -1.0, 1.0, &mut rng)).collect();
        let g: Vec<_> = (0..3).map(|_| MultibandImage::<f64>::random_uniform(3, 3, 2, -1.0, 1.0, &mut rng)).collect();
        let mut want = 0.0;
        for j in 0..3 {
            for i in 0..18 {
                want += (p[j].samples()[i] - g[j].samples()[i]).powi(2);
            }
        }
        assert!((mse_loss(&p, &g).unwrap() - want).abs() <= 1e-6 * want);
        assert!(mse_loss::<f64>(&[], &[]).is_err());
        assert!(mse_loss(&p[..2], &g).is_err());
    }

    #[test]
    fn parameter_counts() {
        let unit = NetShape {
            features: 1,
            kernel: 1,
            bands: 1,
            prox_kernel: 1,
            prox_channels: 1,
            stages: 1,
        };
        let p = NetworkParams::<f32>::zeros(unit, [0.1; 3]).unwrap();
        // banks 7, three prox nets of 3 blocks x 2 convs, 3 step sizes
        assert_eq!(count_parameters(&p), 7 + 18 + 3);
        let one = count_parameters(&NetworkParams::<f32>::zeros(tiny(), [0.1; 3]).unwrap());
        let two = count_parameters(&NetworkParams::<f32>::zeros(NetShape { stages: 4, ..tiny() }, [0.1; 3]).unwrap());
        let per_stage = 3 * 3 * 2 * 9 * 9;
        assert_eq!(two - one, 2 * per_stage);
        assert_eq!(parameter_formula(&NetShape::full_scale()), 632_835);
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = NetworkParams::<f32>::init(tiny(), 4).unwrap();
        let bytes = encode_checkpoint(&params);
        assert_eq!(&bytes[..4], b"PPN1");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, params);
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = NetworkParams::<f32>::init(tiny(), 42).unwrap();
        let b = NetworkParams::<f32>::init(tiny(), 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, NetworkParams::<f32>::init(tiny(), 43).unwrap());
        for bank in a.banks() {
            let half = 1.0 / (bank.fan_in() as f32).sqrt();
            assert!(bank.weights().iter().all(|w| w.abs() <= half));
        }
        assert_eq!(a.eta, [0.1; 3]);
    }

    #[test]
    fn shape_validation() {
        assert!(NetShape { prox_channels: 4, ..tiny() }.validate().is_err());
        assert!(NetShape { stages: 0, ..tiny() }.validate().is_err());
    }
}
