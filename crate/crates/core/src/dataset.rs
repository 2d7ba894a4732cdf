//! Seeded synthetic datasets, JSON-lines manifests, and splitting.
//!
//! Each sample draws sparse feature maps, renders PAN, the model MS and the
//! reference HRMS from a fixed generator model, then derives the MS input by
//! Wald degradation of the reference.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conv::FilterBank;
use crate::error::{Error, Result};
use crate::io::{read_raster, write_raster};
use crate::model::{reconstruct_hrms, synthesize_ms, synthesize_pan, AnalysisBanks, FeatureTriple, FusionPair, SynthesisBanks};
use crate::raster::{FeatureStack, MultibandImage};
use crate::train::TrainingSample;
use crate::wald::{blur_decimate, exp_upsample};

/// Banks that generate synthetic scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub analysis: AnalysisBanks<f32>,
    pub synthesis: SynthesisBanks<f32>,
}

fn nonnegative_bank(size: usize, features: usize, out: usize, rng: &mut ChaCha8Rng) -> FilterBank<f32> {
    let mut bank = FilterBank::zeros(size, features, out);
    for w in bank.weights_mut() {
        *w = rng.gen_range(0.0..1.0);
    }
    // each output band sums to one over taps and input channels
    for o in 0..out {
        let total: f32 = bank.weights().iter().skip(o).step_by(out).sum();
        for w in bank.weights_mut().iter_mut().skip(o).step_by(out) {
            *w /= total;
        }
    }
    bank
}

impl GeneratorModel {
    /// Nonnegative banks, each output band normalised to unit sum.
    pub fn random(size: usize, features: usize, bands: usize, seed: u64) -> Result<Self> {
        if size == 0 || features == 0 || bands == 0 {
            return Err(Error::invalid("generator needs positive size, features and bands"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = |out| nonnegative_bank(size, features, out, &mut rng);
        Ok(Self {
            analysis: AnalysisBanks {
                d_common: bank(1),
                d_unique: bank(1),
                h_common: bank(bands),
                h_unique: bank(bands),
            },
            synthesis: SynthesisBanks {
                g_common: bank(bands),
                g_unique_pan: bank(bands),
                g_unique_ms: bank(bands),
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.analysis.validate()?;
        self.synthesis.validate()?;
        let (s, k, b) = (self.analysis.size(), self.analysis.features(), self.analysis.bands());
        let g = &self.synthesis.g_common;
        if g.size() != s || g.in_bands() != k || g.out_bands() != b {
            return Err(Error::shape("synthesis banks do not match analysis banks"));
        }
        Ok(())
    }

    fn banks(&self) -> [(&'static str, &FilterBank<f32>); 7] {
        [
            ("d_common", &self.analysis.d_common),
            ("d_unique", &self.analysis.d_unique),
            ("h_common", &self.analysis.h_common),
            ("h_unique", &self.analysis.h_unique),
            ("g_common", &self.synthesis.g_common),
            ("g_unique_pan", &self.synthesis.g_unique_pan),
            ("g_unique_ms", &self.synthesis.g_unique_ms),
        ]
    }
}

#[derive(Serialize, Deserialize)]
struct BankRecord {
    name: String,
    size: usize,
    in_bands: usize,
    out_bands: usize,
    weights: Vec<f32>,
}

/// Writes the generator banks as JSON.
pub fn save_generator(model: &GeneratorModel, path: impl AsRef<Path>) -> Result<()> {
    let records: Vec<BankRecord> = model
        .banks()
        .into_iter()
        .map(|(name, b)| BankRecord {
            name: name.into(),
            size: b.size(),
            in_bands: b.in_bands(),
            out_bands: b.out_bands(),
            weights: b.weights().to_vec(),
        })
        .collect();
    let text = serde_json::to_string_pretty(&records)?;
    fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load_generator(path: impl AsRef<Path>) -> Result<GeneratorModel> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    let records: Vec<BankRecord> = serde_json::from_str(&text)?;
    let names = ["d_common", "d_unique", "h_common", "h_unique", "g_common", "g_unique_pan", "g_unique_ms"];
    if records.len() != names.len() || records.iter().zip(names).any(|(r, n)| r.name != n) {
        return Err(Error::Format(format!("generator file must list banks {names:?} in order")));
    }
    let mut banks = records
        .into_iter()
        .map(|r| FilterBank::from_vec(r.size, r.in_bands, r.out_bands, r.weights))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let mut next = || banks.next().expect("seven banks");
    let model = GeneratorModel {
        analysis: AnalysisBanks {
            d_common: next(),
            d_unique: next(),
            h_common: next(),
            h_unique: next(),
        },
        synthesis: SynthesisBanks {
            g_common: next(),
            g_unique_pan: next(),
            g_unique_ms: next(),
        },
    };
    model.validate()?;
    Ok(model)
}

/// Which upsampled MS a sample exposes as network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MsSource {
    /// Interpolated Wald-degraded reference.
    Wald,
    /// The model MS rendered from the features, as the solver assumes.
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub features: usize,
    pub kernel: usize,
    pub ratio: usize,
    /// Probability that a common-feature sample is active.
    pub sparsity: f64,
    /// Activation probability of the PAN- and MS-unique features.
    pub unique_sparsity: f64,
    pub seed: u64,
    pub ms_source: MsSource,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 60,
            height: 64,
            width: 64,
            bands: 8,
            features: 8,
            kernel: 3,
            ratio: 4,
            sparsity: 0.1,
            unique_sparsity: 0.03,
            seed: 0,
            ms_source: MsSource::Wald,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 || self.features == 0 || self.kernel == 0 {
            return Err(Error::invalid("synth dims must be positive"));
        }
        if self.ratio == 0 || !self.ratio.is_power_of_two() {
            return Err(Error::invalid(format!("ratio must be a power of two, got {}", self.ratio)));
        }
        if self.height % self.ratio != 0 || self.width % self.ratio != 0 {
            return Err(Error::shape(format!(
                "{}x{} is not divisible by ratio {}",
                self.height, self.width, self.ratio
            )));
        }
        for (name, p) in [("sparsity", self.sparsity), ("unique_sparsity", self.unique_sparsity)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Bernoulli–|Gaussian| maps; channel 0 of `c` also carries a unit
/// background so rendered bands have positive means.
pub fn sample_features<R: Rng>(
    h: usize,
    w: usize,
    k: usize,
    sparsity: f64,
    unique_sparsity: f64,
    rng: &mut R,
) -> FeatureTriple<f32> {
    let mut draw = |background: bool, sparsity: f64| -> FeatureStack<f32> {
        FeatureStack::from_fn(h, w, k, |_, _, ch| {
            let base = if background && ch == 0 { 1.0 } else { 0.0 };
            let active = rng.gen_bool(sparsity);
            let amp: f64 = StandardNormal.sample(rng);
            base + if active { amp.abs() as f32 } else { 0.0 }
        })
    };
    let c = draw(true, sparsity);
    let u = draw(false, unique_sparsity);
    let v = draw(false, unique_sparsity);
    FeatureTriple { c, u, v }
}

/// One generated scene with every raster derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub features: FeatureTriple<f32>,
    pub pan: MultibandImage<f32>,
    /// The model MS at full resolution.
    pub ms_model: MultibandImage<f32>,
    pub ms: MultibandImage<f32>,
    pub ms_up: MultibandImage<f32>,
    pub gt: MultibandImage<f32>,
}

/// Generates sample `index` of the dataset seeded by `cfg.seed`. Each index
/// has its own random stream, so samples can be produced in any order.
pub fn synth_sample(model: &GeneratorModel, cfg: &SynthConfig, index: usize) -> Result<SynthSample> {
    cfg.validate()?;
    model.validate()?;
    if model.analysis.features() != cfg.features || model.analysis.bands() != cfg.bands {
        return Err(Error::shape(format!(
            "generator has K={} B={}, config asks for K={} B={}",
            model.analysis.features(),
            model.analysis.bands(),
            cfg.features,
            cfg.bands
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let features = sample_features(cfg.height, cfg.width, cfg.features, cfg.sparsity, cfg.unique_sparsity, &mut rng);
    let pan = synthesize_pan(&features.c, &features.u, &model.analysis)?;
    let ms_model = synthesize_ms(&features.c, &features.v, &model.analysis)?;
    let gt = reconstruct_hrms(&features, &model.synthesis)?;
    let ms = blur_decimate(&gt, cfg.ratio)?;
    let ms_up = match cfg.ms_source {
        MsSource::Wald => exp_upsample(&ms, cfg.ratio)?,
        MsSource::Model => ms_model.clone(),
    };
    Ok(SynthSample {
        features,
        pan,
        ms_model,
        ms,
        ms_up,
        gt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unsplit,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub pan: String,
    pub ms: String,
    pub ms_up: String,
    pub gt: String,
    pub split: Split,
    pub ratio: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_json_lines()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_lines(&text)
    }
}

/// Rasters of one manifest entry, checked for consistent dims.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedEntry {
    pub pan: MultibandImage<f32>,
    pub ms: MultibandImage<f32>,
    pub ms_up: MultibandImage<f32>,
    pub gt: MultibandImage<f32>,
}

impl LoadedEntry {
    pub fn pair(&self) -> Result<FusionPair<f32>> {
        FusionPair::new(self.pan.clone(), self.ms_up.clone())
    }

    pub fn sample(&self) -> Result<TrainingSample<f32>> {
        Ok(TrainingSample {
            pair: self.pair()?,
            truth: self.gt.clone(),
        })
    }
}

pub fn load_entry(root: impl AsRef<Path>, entry: &ManifestEntry) -> Result<LoadedEntry> {
    let root = root.as_ref();
    let loaded = LoadedEntry {
        pan: read_raster(root.join(&entry.pan))?,
        ms: read_raster(root.join(&entry.ms))?,
        ms_up: read_raster(root.join(&entry.ms_up))?,
        gt: read_raster(root.join(&entry.gt))?,
    };
    let (h, w) = (loaded.pan.height(), loaded.pan.width());
    let r = entry.ratio;
    let consistent = loaded.pan.bands() == 1
        && loaded.ms_up.dims() == (h, w, loaded.ms.bands())
        && loaded.gt.dims() == loaded.ms_up.dims()
        && loaded.ms.height() * r == h
        && loaded.ms.width() * r == w;
    if !consistent {
        return Err(Error::shape(format!(
            "entry {}: pan {:?}, ms {:?}, ms_up {:?}, gt {:?} at ratio {r}",
            entry.id,
            loaded.pan.dims(),
            loaded.ms.dims(),
            loaded.ms_up.dims(),
            loaded.gt.dims()
        )));
    }
    Ok(loaded)
}

pub fn load_samples(root: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<Vec<TrainingSample<f32>>> {
    manifest
        .entries
        .iter()
        .map(|e| load_entry(root.as_ref(), e)?.sample())
        .collect()
}

/// Generates `cfg.count` samples, writing four rasters each under
/// `out_dir/rasters/` plus `out_dir/generator.json`. Returns the manifest
/// (not yet saved) with every entry tagged [`Split::Unsplit`].
///
/// Samples are rendered on up to `threads` worker threads; every sample has
/// its own random stream, so the output does not depend on the thread count.
pub fn synth_dataset(
    cfg: &SynthConfig,
    model: &GeneratorModel,
    out_dir: impl AsRef<Path>,
    threads: usize,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    model.validate()?;
    let out_dir = out_dir.as_ref();
    let raster_dir: PathBuf = out_dir.join("rasters");
    fs::create_dir_all(&raster_dir).map_err(|e| Error::io(&raster_dir, e))?;
    save_generator(model, out_dir.join("generator.json"))?;

    let write_one = |i: usize| -> Result<ManifestEntry> {
        let s = synth_sample(model, cfg, i)?;
        let id = format!("s{i:05}");
        let rel = |kind: &str| format!("rasters/{id}_{kind}.mbt");
        let entry = ManifestEntry {
            pan: rel("pan"),
            ms: rel("ms"),
            ms_up: rel("ms_up"),
            gt: rel("gt"),
            id,
            split: Split::Unsplit,
            ratio: cfg.ratio,
            seed: cfg.seed,
        };
        write_raster(&s.pan, out_dir.join(&entry.pan))?;
        write_raster(&s.ms, out_dir.join(&entry.ms))?;
        write_raster(&s.ms_up, out_dir.join(&entry.ms_up))?;
        write_raster(&s.gt, out_dir.join(&entry.gt))?;
        Ok(entry)
    };

    let threads = threads.clamp(1, cfg.count.max(1));
    let entries = if threads == 1 {
        (0..cfg.count).map(write_one).collect::<Result<Vec<_>>>()?
    } else {
        let write_one = &write_one;
        let chunks: Vec<Result<Vec<ManifestEntry>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| scope.spawn(move || (t..cfg.count).step_by(threads).map(write_one).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("synth worker panicked")).collect()
        });
        let mut slots: Vec<Option<ManifestEntry>> = vec![None; cfg.count];
        for (t, chunk) in chunks.into_iter().enumerate() {
            for (j, e) in chunk?.into_iter().enumerate() {
                slots[t + j * threads] = Some(e);
            }
        }
        slots.into_iter().map(|e| e.expect("every index generated")).collect()
    };
    Ok(DatasetManifest { entries })
}

/// Seeded shuffle, then the first `round(fraction · n)` entries become the
/// training split and the rest the test split.
pub fn split_dataset(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if manifest.is_empty() {
        return Err(Error::invalid("cannot split an empty manifest"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fraction * manifest.len() as f64).round() as usize;
    let tagged = |idx: &[usize], split: Split| DatasetManifest {
        entries: idx
            .iter()
            .map(|&i| ManifestEntry {
                split,
                ..manifest.entries[i].clone()
            })
            .collect(),
    };
    Ok((tagged(&order[..n_train], Split::Train), tagged(&order[n_train..], Split::Test)))
}
