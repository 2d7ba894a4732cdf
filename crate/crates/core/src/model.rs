//! Observation and synthesis model.
//!
//! With common features `C`, PAN-unique features `U` and MS-unique features
//! `V` (each `M x N x K`):
//!
//! ```text
//! P  ≈ Σ_k Dc_k ⊗ C_k + Σ_k Du_k ⊗ U_k          (1 band)
//! M̃  ≈ Σ_k Hc_k ⊗ C_k + Σ_k Hv_k ⊗ V_k          (B bands)
//! O   = Σ_k Gc_k ⊗ C_k + Σ_k Gu_k ⊗ U_k + Σ_k Gv_k ⊗ V_k
//! ```
//!
//! The fitting objective uses ½-scaled data terms and ℓ1 priors:
//! `½‖P − P(C,U)‖² + ½‖M̃ − M(C,V)‖² + λ1‖U‖₁ + λ2‖V‖₁ + λ3‖C‖₁`.

use rand::Rng;

use crate::conv::{conv2d_same, FilterBank};
use crate::error::{Error, Result};
use crate::raster::{FeatureStack, MultibandImage};
use crate::scalar::Scalar;

/// Banks that explain the observations: `Dc, Du: K -> 1`, `Hc, Hv: K -> B`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisBanks<T = f32> {
    pub d_common: FilterBank<T>,
    pub d_unique: FilterBank<T>,
    pub h_common: FilterBank<T>,
    pub h_unique: FilterBank<T>,
}

/// Banks that fuse the features into the HRMS estimate, all `K -> B`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisBanks<T = f32> {
    pub g_common: FilterBank<T>,
    pub g_unique_pan: FilterBank<T>,
    pub g_unique_ms: FilterBank<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTriple<T = f32> {
    pub c: FeatureStack<T>,
    pub u: FeatureStack<T>,
    pub v: FeatureStack<T>,
}

/// A PAN image and the upsampled MS image on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionPair<T = f32> {
    pub pan: MultibandImage<T>,
    pub ms_up: MultibandImage<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PriorWeights {
    pub lambda_u: f64,
    pub lambda_v: f64,
    pub lambda_c: f64,
}

impl PriorWeights {
    pub fn new(lambda_u: f64, lambda_v: f64, lambda_c: f64) -> Result<Self> {
        let w = Self {
            lambda_u,
            lambda_v,
            lambda_c,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn uniform(lambda: f64) -> Result<Self> {
        Self::new(lambda, lambda, lambda)
    }

    pub fn zero() -> Self {
        Self {
            lambda_u: 0.0,
            lambda_v: 0.0,
            lambda_c: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_u", self.lambda_u),
            ("lambda_v", self.lambda_v),
            ("lambda_c", self.lambda_c),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> AnalysisBanks<T> {
    pub fn zeros(size: usize, features: usize, bands: usize) -> Self {
        Self {
            d_common: FilterBank::zeros(size, features, 1),
            d_unique: FilterBank::zeros(size, features, 1),
            h_common: FilterBank::zeros(size, features, bands),
            h_unique: FilterBank::zeros(size, features, bands),
        }
    }

    pub fn random_uniform<R: Rng>(
        size: usize,
        features: usize,
        bands: usize,
        half_width: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            d_common: FilterBank::random_uniform(size, features, 1, half_width, rng),
            d_unique: FilterBank::random_uniform(size, features, 1, half_width, rng),
            h_common: FilterBank::random_uniform(size, features, bands, half_width, rng),
            h_unique: FilterBank::random_uniform(size, features, bands, half_width, rng),
        }
    }

    pub fn features(&self) -> usize {
        self.d_common.count()
    }

    pub fn size(&self) -> usize {
        self.d_common.size()
    }

    pub fn bands(&self) -> usize {
        self.h_common.out_bands()
    }

    pub fn validate(&self) -> Result<()> {
        let (s, k, b) = (self.size(), self.features(), self.bands());
        let expect = [
            ("d_common", &self.d_common, 1),
            ("d_unique", &self.d_unique, 1),
            ("h_common", &self.h_common, b),
            ("h_unique", &self.h_unique, b),
        ];
        for (name, bank, out) in expect {
            if bank.size() != s || bank.in_bands() != k || bank.out_bands() != out {
                return Err(Error::shape(format!(
                    "analysis bank {name} is {}x{}x{}->{}, expected {s}x{s}x{k}->{out}",
                    bank.size(),
                    bank.size(),
                    bank.in_bands(),
                    bank.out_bands()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> AnalysisBanks<U> {
        AnalysisBanks {
            d_common: self.d_common.cast(),
            d_unique: self.d_unique.cast(),
            h_common: self.h_common.cast(),
            h_unique: self.h_unique.cast(),
        }
    }

    /// `Lc`: `Dc` and `Hc` stacked along the output axis, PAN channel first.
    pub fn joint_common(&self) -> Result<FilterBank<T>> {
        FilterBank::concat_out(&[&self.d_common, &self.h_common])
    }
}

impl<T: Scalar> SynthesisBanks<T> {
    pub fn zeros(size: usize, features: usize, bands: usize) -> Self {
        Self {
            g_common: FilterBank::zeros(size, features, bands),
            g_unique_pan: FilterBank::zeros(size, features, bands),
            g_unique_ms: FilterBank::zeros(size, features, bands),
        }
    }

    pub fn random_uniform<R: Rng>(
        size: usize,
        features: usize,
        bands: usize,
        half_width: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            g_common: FilterBank::random_uniform(size, features, bands, half_width, rng),
            g_unique_pan: FilterBank::random_uniform(size, features, bands, half_width, rng),
            g_unique_ms: FilterBank::random_uniform(size, features, bands, half_width, rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.g_common;
        for (name, bank) in [("g_unique_pan", &self.g_unique_pan), ("g_unique_ms", &self.g_unique_ms)] {
            if !bank.same_shape(g) {
                return Err(Error::shape(format!("synthesis bank {name} differs from g_common")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> SynthesisBanks<U> {
        SynthesisBanks {
            g_common: self.g_common.cast(),
            g_unique_pan: self.g_unique_pan.cast(),
            g_unique_ms: self.g_unique_ms.cast(),
        }
    }
}

impl<T: Scalar> FeatureTriple<T> {
    pub fn zeros(height: usize, width: usize, features: usize) -> Self {
        Self {
            c: FeatureStack::zeros(height, width, features),
            u: FeatureStack::zeros(height, width, features),
            v: FeatureStack::zeros(height, width, features),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.c.check_same_dims(&self.u, "feature triple c/u")?;
        self.c.check_same_dims(&self.v, "feature triple c/v")
    }

    pub fn cast<U: Scalar>(&self) -> FeatureTriple<U> {
        FeatureTriple {
            c: self.c.cast(),
            u: self.u.cast(),
            v: self.v.cast(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.c.is_finite() && self.u.is_finite() && self.v.is_finite()
    }
}

impl<T: Scalar> FusionPair<T> {
    pub fn new(pan: MultibandImage<T>, ms_up: MultibandImage<T>) -> Result<Self> {
        if pan.bands() != 1 {
            return Err(Error::shape(format!("PAN must have 1 band, has {}", pan.bands())));
        }
        if pan.height() != ms_up.height() || pan.width() != ms_up.width() {
            return Err(Error::shape(format!(
                "PAN {}x{} vs upsampled MS {}x{}",
                pan.height(),
                pan.width(),
                ms_up.height(),
                ms_up.width()
            )));
        }
        Ok(Self { pan, ms_up })
    }

    pub fn height(&self) -> usize {
        self.pan.height()
    }

    pub fn width(&self) -> usize {
        self.pan.width()
    }

    pub fn bands(&self) -> usize {
        self.ms_up.bands()
    }

    pub fn cast<U: Scalar>(&self) -> FusionPair<U> {
        FusionPair {
            pan: self.pan.cast(),
            ms_up: self.ms_up.cast(),
        }
    }
}

fn check_features<T: Scalar>(stack: &FeatureStack<T>, bank: &FilterBank<T>, what: &str) -> Result<()> {
    if stack.count() != bank.count() {
        return Err(Error::shape(format!(
            "{what}: {} feature maps, bank expects {}",
            stack.count(),
            bank.count()
        )));
    }
    Ok(())
}

/// Sum of two convolution terms on the same grid.
fn two_terms<T: Scalar>(
    a: &FeatureStack<T>,
    bank_a: &FilterBank<T>,
    b: &FeatureStack<T>,
    bank_b: &FilterBank<T>,
) -> Result<MultibandImage<T>> {
    a.check_same_dims(b, "feature stacks")?;
    let mut out = conv2d_same(a, bank_a)?;
    out.axpy(T::one(), &conv2d_same(b, bank_b)?)?;
    Ok(out)
}

/// `Σ Dc_k ⊗ C_k + Σ Du_k ⊗ U_k`
pub fn synthesize_pan<T: Scalar>(
    c: &FeatureStack<T>,
    u: &FeatureStack<T>,
    banks: &AnalysisBanks<T>,
) -> Result<MultibandImage<T>> {
    check_features(c, &banks.d_common, "synthesize_pan c")?;
    check_features(u, &banks.d_unique, "synthesize_pan u")?;
    two_terms(c, &banks.d_common, u, &banks.d_unique)
}

/// `Σ Hc_k ⊗ C_k + Σ Hv_k ⊗ V_k`
pub fn synthesize_ms<T: Scalar>(
    c: &FeatureStack<T>,
    v: &FeatureStack<T>,
    banks: &AnalysisBanks<T>,
) -> Result<MultibandImage<T>> {
    check_features(c, &banks.h_common, "synthesize_ms c")?;
    check_features(v, &banks.h_unique, "synthesize_ms v")?;
    two_terms(c, &banks.h_common, v, &banks.h_unique)
}

/// HRMS estimate `Σ Gc ⊗ C + Σ Gu ⊗ U + Σ Gv ⊗ V`.
pub fn reconstruct_hrms<T: Scalar>(
    features: &FeatureTriple<T>,
    g: &SynthesisBanks<T>,
) -> Result<MultibandImage<T>> {
    features.validate()?;
    check_features(&features.c, &g.g_common, "reconstruct_hrms c")?;
    check_features(&features.u, &g.g_unique_pan, "reconstruct_hrms u")?;
    check_features(&features.v, &g.g_unique_ms, "reconstruct_hrms v")?;
    let mut out = conv2d_same(&features.c, &g.g_common)?;
    out.axpy(T::one(), &conv2d_same(&features.u, &g.g_unique_pan)?)?;
    out.axpy(T::one(), &conv2d_same(&features.v, &g.g_unique_ms)?)?;
    Ok(out)
}

/// Operands of the joint common-feature subproblem.
///
/// `n` stacks the PAN residual `P − Σ Du ⊗ U` (band 0) on top of the MS
/// residual `M̃ − Σ Hv ⊗ V` (bands 1..=B); `l_common` stacks `Dc` over `Hc` in
/// the same order, so `½‖n − l_common ⊗ C‖²` equals the sum of the two
/// ½-scaled data terms as a function of `C`.
pub fn build_joint<T: Scalar>(
    pair: &FusionPair<T>,
    features: &FeatureTriple<T>,
    banks: &AnalysisBanks<T>,
) -> Result<(MultibandImage<T>, FilterBank<T>)> {
    check_features(&features.u, &banks.d_unique, "build_joint u")?;
    check_features(&features.v, &banks.h_unique, "build_joint v")?;
    let pan_res = pair.pan.sub(&conv2d_same(&features.u, &banks.d_unique)?)?;
    let ms_res = pair.ms_up.sub(&conv2d_same(&features.v, &banks.h_unique)?)?;
    let n = MultibandImage::concat_bands(&[&pan_res, &ms_res])?;
    Ok((n, banks.joint_common()?))
}

fn check_pair<T: Scalar>(pair: &FusionPair<T>, features: &FeatureTriple<T>) -> Result<()> {
    features.validate()?;
    if pair.pan.height() != features.c.height() || pair.pan.width() != features.c.width() {
        return Err(Error::shape(format!(
            "pair is {}x{}, features are {}x{}",
            pair.pan.height(),
            pair.pan.width(),
            features.c.height(),
            features.c.width()
        )));
    }
    Ok(())
}

/// Objective of the fitting problem with ℓ1 priors; always `>= 0`.
pub fn objective_value<T: Scalar>(
    pair: &FusionPair<T>,
    features: &FeatureTriple<T>,
    banks: &AnalysisBanks<T>,
    weights: &PriorWeights,
) -> Result<f64> {
    check_pair(pair, features)?;
    let pan_res = pair.pan.sub(&synthesize_pan(&features.c, &features.u, banks)?)?;
    let ms_res = pair.ms_up.sub(&synthesize_ms(&features.c, &features.v, banks)?)?;
    let data = 0.5 * (pan_res.norm_sq().as_f64() + ms_res.norm_sq().as_f64());
    let prior = weights.lambda_u * features.u.l1_norm().as_f64()
        + weights.lambda_v * features.v.l1_norm().as_f64()
        + weights.lambda_c * features.c.l1_norm().as_f64();
    Ok(data + prior)
}
