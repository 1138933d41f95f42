//! Seeded generator of paired two-modality identity datasets.
//!
//! Each identity is a unit vector in a 16-dimensional latent space. A sample
//! perturbs that latent, adds a few nuisance factors and decodes the result
//! through a fixed, seeded bank of smooth basis images followed by `tanh`.
//! The target modality renders the *same* sample and then degrades it:
//! luminance collapse, gamma, contrast, Gaussian blur and additive noise,
//! each scaled by `gap_strength`. At strength 0 the target transform is the
//! identity.
//!
//! All randomness is derived from `(seed, purpose, identity, sample)` with
//! independent generators, so any sample can be rendered on its own and the
//! output never depends on generation order.
//!
//! On disk a dataset is a directory holding `manifest.json` and one raw
//! little-endian `f32` file per image under `source/` and `target/`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Modality;
use crate::tensor::Tensor;

pub const LATENT_DIM: usize = 16;
const NUISANCE_DIM: usize = 4;
const MAX_IDENTITY_COSINE: f64 = 0.95;
pub const FORMAT_VERSION: u32 = 1;

/// Parameters of [`generate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_identities: usize,
    pub samples_per_identity: usize,
    pub gap_strength: f64,
    pub resolution: usize,
    /// Std of the per-sample latent perturbation before renormalisation.
    pub intra_class_std: f64,
    /// Std of the nuisance factors.
    pub nuisance_std: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_identities: 60,
            samples_per_identity: 4,
            gap_strength: 0.8,
            resolution: 32,
            intra_class_std: 0.07,
            nuisance_std: 0.15,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(Error::invalid("a dataset needs at least two identities"));
        }
        if self.samples_per_identity == 0 {
            return Err(Error::invalid("samples_per_identity must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gap_strength) {
            return Err(Error::invalid(format!("gap_strength {} outside [0, 1]", self.gap_strength)));
        }
        if self.resolution < 4 {
            return Err(Error::invalid("resolution must be at least 4"));
        }
        if !(self.intra_class_std >= 0.0 && self.nuisance_std >= 0.0) {
            return Err(Error::invalid("noise levels must be non-negative"));
        }
        Ok(())
    }
}

/// Target-modality degradation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityTransform {
    pub kind: Modality,
    pub contrast_gain: f64,
    pub gamma: f64,
    pub blur_sigma: f64,
    pub noise_amplitude: f64,
    pub channel_collapse: bool,
}

impl ModalityTransform {
    pub fn identity(kind: Modality) -> Self {
        ModalityTransform {
            kind,
            contrast_gain: 1.0,
            gamma: 1.0,
            blur_sigma: 0.0,
            noise_amplitude: 0.0,
            channel_collapse: false,
        }
    }

    /// Interpolates from the identity (0) to the strongest degradation (1).
    pub fn target(gap_strength: f64) -> Self {
        let s = gap_strength;
        ModalityTransform {
            kind: Modality::Target,
            contrast_gain: 1.0 + 0.625 * s,
            gamma: 1.0 - 0.5 * s,
            blur_sigma: 1.25 * s,
            noise_amplitude: 0.05 * s,
            channel_collapse: s > 0.0,
        }
    }

    pub fn output_channels(&self, in_channels: usize) -> usize {
        if self.channel_collapse {
            1
        } else {
            in_channels
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityLatent {
    pub id: usize,
    pub z: Vec<f64>,
}

/// Everything needed to re-render the dataset, plus its file layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub image_channels: usize,
    pub source_transform: ModalityTransform,
    pub target_transform: ModalityTransform,
    pub identities: Vec<IdentityLatent>,
}

impl Manifest {
    pub fn shape(&self, modality: Modality) -> [usize; 3] {
        let r = self.config.resolution;
        let c = self.transform(modality).output_channels(self.image_channels);
        [c, r, r]
    }

    pub fn transform(&self, modality: Modality) -> &ModalityTransform {
        match modality {
            Modality::Source => &self.source_transform,
            Modality::Target => &self.target_transform,
        }
    }

    pub fn sample_path(&self, identity: usize, index: usize, modality: Modality) -> PathBuf {
        let dir = match modality {
            Modality::Source => "source",
            Modality::Target => "target",
        };
        PathBuf::from(dir).join(format!("id{identity:04}_s{index:03}.f32"))
    }
}

/// Reference to one stored image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleRef {
    pub identity: usize,
    pub index: usize,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub reference: SampleRef,
    /// C×H×W, values already quantised to `f32`.
    pub image: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn get(&self, r: &SampleRef) -> Option<&Sample> {
        self.samples.iter().find(|s| &s.reference == r)
    }

    /// Stacks the referenced images (each replicated to 3 channels when
    /// needed by the caller) into an N×C×H×W tensor.
    pub fn images(&self, refs: &[SampleRef]) -> Result<Tensor> {
        let imgs = refs
            .iter()
            .map(|r| {
                self.index_of(r)
                    .map(|i| &self.samples[i].image)
                    .ok_or_else(|| Error::invalid(format!("sample {r:?} not in dataset")))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&imgs)
    }

    fn index_of(&self, r: &SampleRef) -> Option<usize> {
        let m = &self.manifest;
        let spi = m.config.samples_per_identity;
        if r.identity >= m.identities.len() || r.index >= spi {
            return None;
        }
        let block = match r.modality {
            Modality::Source => 0,
            Modality::Target => 1,
        };
        let i = (r.identity * 2 + block) * spi + r.index;
        (self.samples.get(i)?.reference == *r).then_some(i)
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one `(purpose, a, b)` coordinate.
fn counter_rng(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed ^ splitmix(purpose)) ^ a) ^ b.wrapping_mul(0x2545_F491_4F6C_DD1D));
    ChaCha8Rng::seed_from_u64(key)
}

const PURPOSE_DECODER: u64 = 1;
const PURPOSE_IDENTITY: u64 = 2;
const PURPOSE_SAMPLE: u64 = 3;
const PURPOSE_MODALITY_NOISE: u64 = 4;
const PURPOSE_PROTOCOL: u64 = 5;

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Seeded smooth basis images used to decode latents.
#[derive(Debug, Clone)]
pub struct Decoder {
    resolution: usize,
    channels: usize,
    mean: Vec<f64>,
    identity_basis: Vec<Vec<f64>>,
    nuisance_basis: Vec<Vec<f64>>,
}

impl Decoder {
    pub fn new(seed: u64, resolution: usize, channels: usize) -> Self {
        let mut rng = counter_rng(seed, PURPOSE_DECODER, 0, 0);
        let basis = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n).map(|_| smooth_field(rng, resolution, channels)).collect()
        };
        let mean = smooth_field(&mut rng, resolution, channels)
            .into_iter()
            .map(|v| 0.3 * v)
            .collect();
        let identity_basis = basis(LATENT_DIM, &mut rng);
        let nuisance_basis = basis(NUISANCE_DIM, &mut rng);
        Decoder {
            resolution,
            channels,
            mean,
            identity_basis,
            nuisance_basis,
        }
    }

    /// `tanh(mean + Σ z_k B_k + Σ n_j N_j)` as a C×H×W buffer.
    pub fn decode(&self, z: &[f64], nuisance: &[f64]) -> Vec<f64> {
        // Unit-norm latents over 16 roughly orthogonal unit-RMS bases give
        // pre-activation RMS near 1; the factor spreads them across tanh.
        let gain = 1.5;
        let mut out = self.mean.clone();
        for (w, b) in z.iter().zip(&self.identity_basis) {
            out.iter_mut().zip(b).for_each(|(o, v)| *o += gain * w * v);
        }
        for (w, b) in nuisance.iter().zip(&self.nuisance_basis) {
            out.iter_mut().zip(b).for_each(|(o, v)| *o += w * v);
        }
        out.iter_mut().for_each(|v| *v = v.tanh());
        out
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.resolution, self.resolution]
    }
}

/// Sum of random low-frequency plane waves with per-channel amplitudes,
/// scaled to unit RMS.
fn smooth_field(rng: &mut impl Rng, r: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels * r * r];
    for _ in 0..6 {
        let fx = rng.random_range(-3i32..=3) as f64;
        let fy = rng.random_range(-3i32..=3) as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amps: Vec<f64> = (0..channels).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for (c, amp) in amps.iter().enumerate() {
            for y in 0..r {
                for x in 0..r {
                    let t = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / r as f64 + phase;
                    out[(c * r + y) * r + x] += amp * t.cos();
                }
            }
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

/// Draws unit-norm identity latents with pairwise cosine below 0.95.
pub fn identity_latents(seed: u64, n: usize) -> Vec<IdentityLatent> {
    let mut out: Vec<IdentityLatent> = Vec::with_capacity(n);
    for id in 0..n {
        let mut attempt = 0u64;
        loop {
            let mut rng = counter_rng(seed, PURPOSE_IDENTITY, id as u64, attempt);
            let mut z = gaussian_vec(&mut rng, LATENT_DIM);
            normalize(&mut z);
            let ok = out.iter().all(|o| {
                let cos: f64 = o.z.iter().zip(&z).map(|(a, b)| a * b).sum();
                cos < MAX_IDENTITY_COSINE
            });
            if ok {
                out.push(IdentityLatent { id, z });
                break;
            }
            attempt += 1;
        }
    }
    out
}

/// Applies a modality transform to a C×H×W image in [−1, 1].
pub fn apply_transform(
t: &ModalityTransform, image: &[f64], channels: usize, r: usize, rng: &mut impl Rng) -> Vec<f64> {
    let plane = r * r;
    let mut img: Vec<f64> = if t.channel_collapse && channels == 3 {
        (0..plane)
            .map(|i| 0.299 * image[i] + 0.587 * image[plane + i] + 0.114 * image[2 * plane + i])
            .collect()
    } else {
        image.to_vec()
    };
    if t.gamma != 1.0 || t.contrast_gain != 1.0 {
        for v in img.iter_mut() {
            let u = ((*v + 1.0) / 2.0).clamp(0.0, 1.0).powf(t.gamma);
            let u = ((u - 0.5) * t.contrast_gain + 0.5).clamp(0.0, 1.0);
            *v = 2.0 * u - 1.0;
        }
    }
    if t.blur_sigma > 0.0 {
        for p in img.chunks_mut(plane) {
            gaussian_blur(p, r, t.blur_sigma);
        }
    }
    if t.noise_amplitude > 0.0 {
        for v in img.iter_mut() {
            *v += t.noise_amplitude * rng.sample::<f64, _>(StandardNormal);
        }
    }
    img
}

/// Separable Gaussian blur with clamped borders.
fn gaussian_blur(plane: &mut [f64], r: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |i: isize| i.clamp(0, r as isize - 1) as usize;
    let mut tmp = vec![0.0; r * r];
    for y in 0..r {
        for x in 0..r {
            tmp[y * r + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * plane[y * r + clamp(x as isize + k as isize - radius)])
                .sum();
        }
    }
    for y in 0..r {
        for x in 0..r {
            plane[y * r + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(y as isize + k as isize - radius) * r + x])
                .sum();
        }
    }
}

/// Renders any sample of the manifest's population; `index` may exceed the
/// stored sample count (used for extra pretraining views).
pub struct Renderer<'a> {
    manifest: &'a Manifest,
    decoder: Decoder,
}

impl<'a> Renderer<'a> {
    pub fn new(manifest: &'a Manifest) -> Self {
        Renderer {
            decoder: Decoder::new(manifest.config.seed, manifest.config.resolution, manifest.image_channels),
            manifest,
        }
    }

    pub fn render(&self, identity: usize, index: usize, modality: Modality) -> Result<Tensor> {
        let m = self.manifest;
        let latent = m
            .identities
            .get(identity)
            .ok_or_else(|| Error::invalid(format!("identity {identity} out of range")))?;
        let seed = m.config.seed;
        let mut rng = counter_rng(seed, PURPOSE_SAMPLE, identity as u64, index as u64);
        let mut z: Vec<f64> = latent
            .z
            .iter()
            .map(|v| v + m.config.intra_class_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        normalize(&mut z);
        let nuisance: Vec<f64> = (0..NUISANCE_DIM)
            .map(|_| m.config.nuisance_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let clean = self.decoder.decode(&z, &nuisance);
        let r = m.config.resolution;
        let tag = match modality {
            Modality::Source => 0,
            Modality::Target => 1,
        };
        let mut noise_rng = counter_rng(seed, PURPOSE_MODALITY_NOISE, identity as u64, ((index as u64) << 1) | tag);
        let img = apply_transform(m.transform(modality), &clean, m.image_channels, r, &mut noise_rng);
        // Quantise exactly as the on-disk format does.
        let img = img.into_iter().map(|v| v as f32 as f64).collect();
        Tensor::new(m.shape(modality), img)
    }
}

pub fn build_manifest(config: &DatasetConfig) -> Result<Manifest> {
    config.validate()?;
    Ok(Manifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        image_channels: 3,
        source_transform: ModalityTransform::identity(Modality::Source),
        target_transform: ModalityTransform::target(config.gap_strength),
        identities: identity_latents(config.seed, config.n_identities),
    })
}

/// Renders every stored sample. Samples are ordered by identity, then
/// modality (source first), then index.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    let manifest = build_manifest(config)?;
    let renderer = Renderer::new(&manifest);
    let mut samples = Vec::new();
    for id in 0..config.n_identities {
        for modality in [Modality::Source, Modality::Target] {
            for index in 0..config.samples_per_identity {
                samples.push(Sample {
                    reference: SampleRef {
                        identity: id,
                        index,
                        modality,
                    },
                    image: renderer.render(id, index, modality)?,
                });
            }
        }
    }
    Ok(Dataset { manifest, samples })
}

fn write_f32(path: &Path, data: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::invalid(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["source", "target"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        write_json(&dir.join("manifest.json"), &self.manifest)?;
        for s in &self.samples {
            let r = s.reference;
            write_f32(&dir.join(self.manifest.sample_path(r.identity, r.index, r.modality)), s.image.data())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let mpath = dir.join("manifest.json");
        if !mpath.exists() {
            return Err(Error::MissingInput {
                path: mpath,
                what: "dataset manifest".into(),
            });
        }
        let manifest: Manifest = read_json(&mpath)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::invalid(format!("unsupported dataset format {}", manifest.format_version)));
        }
        let mut samples = Vec::new();
        for id in 0..manifest.config.n_identities {
            for modality in [Modality::Source, Modality::Target] {
                let shape = manifest.shape(modality);
                for index in 0..manifest.config.samples_per_identity {
                    let path = dir.join(manifest.sample_path(id, index, modality));
                    let data = read_f32(&path, shape.iter().product())?;
                    samples.push(Sample {
                        reference: SampleRef {
                            identity: id,
                            index,
                            modality,
                        },
                        image: Tensor::new(shape, data)?,
                    });
                }
            }
        }
        Ok(Dataset { manifest, samples })
    }
}

/// One cross-validation fold with disjoint train and evaluation identities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub fold: usize,
    pub train_ids: Vec<usize>,
    pub eval_ids: Vec<usize>,
    /// Source-modality templates of the evaluation identities.
    pub gallery: Vec<SampleRef>,
    /// Target-modality queries of the evaluation identities.
    pub probes: Vec<SampleRef>,
    /// How multiple gallery templates of an identity are used.
    pub gallery_mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub n_folds: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub folds: Vec<ProtocolSplit>,
}

/// Random identity-disjoint folds; each fold draws its own partition.
pub fn make_protocol(manifest: &Manifest, n_folds: usize, train_fraction: f64, seed: u64) -> Result<Protocol> {
    let n = manifest.config.n_identities;
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_folds == 0 {
        return Err(Error::invalid("need at least one fold"));
    }
    if n_train < 2 || n.saturating_sub(n_train) < 2 {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} of {n} identities leaves {n_train} train / {} eval; both need at least 2",
            n.saturating_sub(n_train)
        )));
    }
    let spi = manifest.config.samples_per_identity;
    let folds = (0..n_folds)
        .map(|fold| {
            let mut ids: Vec<usize> = (0..n).collect();
            ids.shuffle(&mut counter_rng(seed, PURPOSE_PROTOCOL, fold as u64, 0));
            let mut train_ids = ids[..n_train].to_vec();
            let mut eval_ids = ids[n_train..].to_vec();
            train_ids.sort_unstable();
            eval_ids.sort_unstable();
            let refs = |m: Modality| -> Vec<SampleRef> {
                eval_ids
                    .iter()
                    .flat_map(|&identity| (0..spi).map(move |index| SampleRef { identity, index, modality: m }))
                    .collect()
            };
            ProtocolSplit {
                fold,
                gallery: refs(Modality::Source),
                probes: refs(Modality::Target),
                train_ids,
                eval_ids,
                gallery_mode: "multi_template_max".into(),
            }
        })
        .collect();
    Ok(Protocol {
        n_folds,
        train_fraction,
        seed,
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            n_identities: 6,
            samples_per_identity: 2,
            resolution: 8,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn latents_are_unit_and_distinct() {
        let ids = identity_latents(3, 40);
        for (i, a) in ids.iter().enumerate() {
            let n: f64 = a.z.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
            for b in &ids[i + 1..] {
                let c: f64 = a.z.iter().zip(&b.z).map(|(x, y)| x * y).sum();
                assert!(c < 0.95);
            }
        }
    }

    #[test]
    fn zero_gap_renders_identical_modalities() {
        let cfg = DatasetConfig {
            gap_strength: 0.0,
            ..small()
        };
        let d = generate_dataset(&cfg).unwrap();
        for id in 0..cfg.n_identities {
            for index in 0..cfg.samples_per_identity {
                let s = d.get(&SampleRef { identity: id, index, modality: Modality::Source }).unwrap();
                let t = d.get(&SampleRef { identity: id, index, modality: Modality::Target }).unwrap();
                assert!(s.image.bit_eq(&t.image));
            }
        }
    }

    #[test]
    fn target_is_single_channel_when_collapsed() {
        let d = generate_dataset(&small()).unwrap();
        let t = d.get(&SampleRef { identity: 0, index: 0, modality: Modality::Target }).unwrap();
        assert_eq!(t.image.shape(), &[1, 8, 8]);
        assert!(d.images(&[t.reference]).is_ok());
    }

    #[test]
    fn generation_is_deterministic_and_seeded() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&DatasetConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.samples[0].image, c.samples[0].image);
        assert_eq!(a.samples[0].image.shape(), c.samples[0].image.shape());
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(generate_dataset(&DatasetConfig { n_identities: 1, ..small() }).is_err());
        assert!(generate_dataset(&DatasetConfig { samples_per_identity: 0, ..small() }).is_err());
        assert!(generate_dataset(&DatasetConfig { gap_strength: 1.5, ..small() }).is_err());
    }

    #[test]
    fn protocol_sizes_and_disjointness() {
        let m = build_manifest(&DatasetConfig::default()).unwrap();
        let p = make_protocol(&m, 5, 25.0 / 60.0, 0).unwrap();
        assert_eq!(p.folds.len(), 5);
        for f in &p.folds {
            assert_eq!(f.train_ids.len(), 25);
            assert_eq!(f.eval_ids.len(), 35);
            assert!(f.train_ids.iter().all(|id| !f.eval_ids.contains(id)));
            assert!(f.gallery.iter().all(|r| r.modality == Modality::Source));
            assert!(f.probes.iter().all(|r| r.modality == Modality::Target));
        }
        let q = make_protocol(&m, 5, 25.0 / 60.0, 1).unwrap();
        assert_ne!(p.folds[0].train_ids, q.folds[0].train_ids);
        assert!(make_protocol(&m, 5, 1.0 / 60.0, 0).is_err());
        assert!(make_protocol(&m, 5, 59.0 / 60.0, 0).is_err());
    }
}
