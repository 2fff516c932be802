//! Synthetic cohorts with a known structure→connectivity map, the on-disk
//! dataset format and stratified fold splitting.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Error, Result};
use crate::seeds;
use crate::types::{ClassLabel, DiffMatrix, FncMatrix, StructuralVolume};

pub const FORMAT_VERSION: u32 = 1;
const VOL_MAGIC: &[u8; 4] = b"FNCV";
const FNC_MAGIC: &[u8; 4] = b"FNCM";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    pub n_subjects: usize,
    /// Fraction of HC subjects.
    pub class_balance: f64,
    pub volume_dims: [usize; 3],
    pub fnc_order: usize,
    pub latent_dim: usize,
    pub sigma_vol: f64,
    pub sigma_fnc: f64,
    /// Class effect strength.
    pub beta: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_subjects: 400,
            class_balance: 0.5,
            volume_dims: [32, 32, 32],
            fnc_order: 16,
            latent_dim: 8,
            sigma_vol: 0.02,
            sigma_fnc: 0.05,
            beta: 0.6,
            seed: 7,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return config_err(format!("n_subjects must be ≥ 2, got {}", self.n_subjects));
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return config_err(format!("class_balance must lie in (0, 1), got {}", self.class_balance));
        }
        let n_hc = self.n_hc();
        if n_hc == 0 || n_hc == self.n_subjects {
            return config_err("class_balance leaves one class empty");
        }
        if self.volume_dims.contains(&0) {
            return config_err(format!("volume dims {:?} must be positive", self.volume_dims));
        }
        if self.fnc_order < 2 || self.latent_dim == 0 {
            return config_err("fnc_order must be ≥ 2 and latent_dim ≥ 1");
        }
        for (name, v) in [("sigma_vol", self.sigma_vol), ("sigma_fnc", self.sigma_fnc), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return config_err(format!("{name} must be finite and ≥ 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn n_hc(&self) -> usize {
        (self.n_subjects as f64 * self.class_balance).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub class: ClassLabel,
    pub volume: StructuralVolume,
    pub fnc: FncMatrix,
}

/// Generative parameters sufficient to recompute every oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: CohortConfig,
    pub rank: usize,
    /// Orthonormal columns, `n × rank` row-major.
    pub basis: Vec<f64>,
    pub a0: Vec<f64>,
    /// `rank × latent_dim` row-major.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub blob_centers: Vec<[f64; 3]>,
    pub blob_dirs: Vec<[f64; 3]>,
    pub blob_width: f64,
    /// Voxels of center shift per unit of β·c.
    pub shift_scale: f64,
    pub volume_norm: f64,
}

/// Class indicator entering the generative formulas.
pub fn class_indicator(class: ClassLabel) -> f64 {
    match class {
        ClassLabel::Hc => 0.0,
        ClassLabel::Sz => 1.0,
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn gram_schmidt(n: usize, r: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(r);
    while cols.len() < r {
        let mut v: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
    }
    (0..n * r).map(|k| cols[k % r][k / r]).collect()
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [normal(rng), normal(rng), normal(rng)];
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.map(|a| a / norm);
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl GroundTruth {
    pub fn new(cfg: &CohortConfig) -> Result<Self> {
        cfg.validate()?;
        let (n, dz) = (cfg.fnc_order, cfg.latent_dim);
        let r = dz.min(n);
        let mut rng = seeds::rng(cfg.seed, u64::MAX);
        let basis = gram_schmidt(n, r, &mut rng);
        let a0 = (0..r).map(|_| 1.5 * normal(&mut rng)).collect();
        let a = (0..r * dz).map(|_| 1.5 * normal(&mut rng) / (dz as f64).sqrt()).collect();
        let b = (0..r).map(|_| 2.0 * normal(&mut rng)).collect();
        let dims = cfg.volume_dims.map(|d| d as f64);
        let blob_centers = (0..dz)
            .map(|_| dims.map(|d| d * rng.random_range(0.25..0.75)))
            .collect();
        let blob_dirs = (0..dz).map(|_| unit_vector(&mut rng)).collect();
        let mean_dim = dims.iter().sum::<f64>() / 3.0;
        Ok(Self {
            config: cfg.clone(),
            rank: r,
            basis,
            a0,
            a,
            b,
            blob_centers,
            blob_dirs,
            blob_width: mean_dim / 10.0,
            shift_scale: mean_dim / 16.0,
            volume_norm: 3.0,
        })
    }

    /// Spectrum a₀ + A·z + β·b·c.
    pub fn spectrum(&self, z: &[f64], class: ClassLabel) -> Vec<f64> {
        let (dz, c, beta) = (self.config.latent_dim, class_indicator(class), self.config.beta);
        (0..self.rank)
            .map(|k| {
                let az: f64 = (0..dz).map(|j| self.a[k * dz + j] * z[j]).sum();
                self.a0[k] + az + beta * self.b[k] * c
            })
            .collect()
    }

    /// U·diag(spectrum)·Uᵀ + noise, passed through tanh, unit diagonal.
    /// `noise` holds the strict upper triangle row-major.
    pub fn fnc_values(&self, z: &[f64], class: ClassLabel, noise: &[f64]) -> Vec<f64> {
        let n = self.config.fnc_order;
        let s = self.spectrum(z, class);
        let mut out = vec![0.0; n * n];
        let mut k = 0;
        for i in 0..n {
            out[i * n + i] = 1.0;
            for j in i + 1..n {
                let arg: f64 = (0..self.rank)
                    .map(|q| self.basis[i * self.rank + q] * s[q] * self.basis[j * self.rank + q])
                    .sum();
                let v = (arg + noise[k]).tanh();
                out[i * n + j] = v;
                out[j * n + i] = v;
                k += 1;
            }
        }
        out
    }

    /// Noiseless voxel intensities before noise and clipping.
    pub fn volume_signal(&self, z: &[f64], class: ClassLabel) -> Vec<f64> {
        let [d, h, w] = self.config.volume_dims;
        let shift = self.config.beta * class_indicator(class) * self.shift_scale;
        let inv = 1.0 / (2.0 * self.blob_width * self.blob_width);
        let mut out = vec![0.0; d * h * w];
        let profile = |len: usize, center: f64| -> Vec<f64> {
            (0..len).map(|t| (-(t as f64 - center).powi(2) * inv).exp()).collect()
        };
        for (i, (center, dir)) in self.blob_centers.iter().zip(&self.blob_dirs).enumerate() {
            let amp = softplus(z[i]) / self.volume_norm;
            let gz = profile(d, center[0] + shift * dir[0]);
            let gy = profile(h, center[1] + shift * dir[1]);
            let gx = profile(w, center[2] + shift * dir[2]);
            for (zi, &vz) in gz.iter().enumerate() {
                for (yi, &vy) in gy.iter().enumerate() {
                    let base = (zi * h + yi) * w;
                    let a = amp * vz * vy;
                    out[base..base + w].iter_mut().zip(&gx).for_each(|(o, &vx)| *o += a * vx);
                }
            }
        }
        out
    }

    fn draw_latent(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.config.latent_dim).map(|_| normal(rng)).collect()
    }

    fn draw_fnc_noise(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = self.config.fnc_order;
        (0..n * (n - 1) / 2).map(|_| self.config.sigma_fnc * normal(rng)).collect()
    }

    /// Draws one subject from its own child stream.
    pub fn sample_subject(&self, index: usize, class: ClassLabel) -> Result<SubjectRecord> {
        let mut rng = seeds::rng(self.config.seed, index as u64);
        let z = self.draw_latent(&mut rng);
        let noise = self.draw_fnc_noise(&mut rng);
        let n = self.config.fnc_order;
        let fnc: Vec<f64> = self.fnc_values(&z, class, &noise).into_iter().map(round_f32).collect();
        let sigma = self.config.sigma_vol;
        let voxels = self
            .volume_signal(&z, class)
            .into_iter()
            .map(|v| round_f32((v + sigma * normal(&mut rng)).clamp(0.0, 1.0)))
            .collect();
        Ok(SubjectRecord {
            id: format!("sub-{index:04}"),
            class,
            volume: StructuralVolume::new(self.config.volume_dims, voxels)?,
            fnc: FncMatrix::new(n, fnc)?,
        })
    }

    /// Class of every subject: exactly `n_hc` HC placed by a seeded shuffle.
    pub fn class_assignment(&self) -> Vec<ClassLabel> {
        let cfg = &self.config;
        let mut labels: Vec<ClassLabel> = (0..cfg.n_subjects)
            .map(|i| if i < cfg.n_hc() { ClassLabel::Hc } else { ClassLabel::Sz })
            .collect();
        labels.shuffle(&mut seeds::rng(cfg.seed, u64::MAX - 1));
        labels
    }
}

/// Generates a cohort; a pure function of the config.
pub fn make_cohort(cfg: &CohortConfig) -> Result<(Vec<SubjectRecord>, GroundTruth)> {
    let gt = GroundTruth::new(cfg)?;
    let records = gt
        .class_assignment()
        .into_iter()
        .enumerate()
        .map(|(i, c)| gt.sample_subject(i, c))
        .collect::<Result<_>>()?;
    Ok((records, gt))
}

/// Monte-Carlo estimate of E[fnc | HC] − E[fnc | SZ] with independent draws
/// per class.
pub fn ground_truth_group_diff(gt: &GroundTruth, n_mc: usize, seed: u64) -> Result<DiffMatrix> {
    if n_mc < 1000 {
        return contract_err(format!("n_mc must be ≥ 1000, got {n_mc}"));
    }
    let n = gt.config.fnc_order;
    let mut means = [vec![0.0; n * n], vec![0.0; n * n]];
    for class in ClassLabel::ALL {
        let mut rng = seeds::rng(seed, class.index() as u64);
        let acc = &mut means[class.index()];
        for _ in 0..n_mc {
            let z = gt.draw_latent(&mut rng);
            let noise = gt.draw_fnc_noise(&mut rng);
            acc.iter_mut()
                .zip(gt.fnc_values(&z, class, &noise))
                .for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= n_mc as f64);
    }
    DiffMatrix::between(&means[0], &means[1], n)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainBlock {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Contiguous named blocks covering every connectivity component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainPartition {
    pub blocks: Vec<DomainBlock>,
}

const DOMAIN_NAMES: [&str; 7] = ["SC", "AUD", "SM", "VS", "CC", "DM", "CB"];

impl DomainPartition {
    /// Seven named blocks; sizes (2,2,2,2,3,3,2) for order 16, otherwise
    /// near-equal sizes.
    pub fn default_for(n: usize) -> Self {
        let sizes: Vec<usize> = if n == 16 {
            vec![2, 2, 2, 2, 3, 3, 2]
        } else {
            let k = DOMAIN_NAMES.len().min(n);
            (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
        };
        let mut start = 0;
        let blocks = sizes
            .iter()
            .enumerate()
            .map(|(i, &len)| {
                let b = DomainBlock {
                    name: DOMAIN_NAMES[i].to_string(),
                    start,
                    len,
                };
                start += len;
                b
            })
            .collect();
        Self { blocks }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut next = 0;
        for b in &self.blocks {
            if b.start != next || b.len == 0 {
                return contract_err(format!("domain block {} does not continue at component {next}", b.name));
            }
            next += b.len;
        }
        if next != n {
            return contract_err(format!("domain partition covers {next} of {n} components"));
        }
        let mut names: Vec<&str> = self.blocks.iter().map(|b| b.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return contract_err("duplicate domain block names");
        }
        Ok(())
    }

    pub fn find(&self, name: &str) -> Result<&DomainBlock> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Lookup(format!("unknown domain block {name:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectEntry {
    id: String,
    class: ClassLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    n_subjects: usize,
    volume_dims: [usize; 3],
    fnc_order: usize,
    class_names: Vec<String>,
    domain_partition: DomainPartition,
    subjects: Vec<SubjectEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub volume_dims: [usize; 3],
    pub fnc_order: usize,
    pub partition: DomainPartition,
    pub subjects: Vec<SubjectRecord>,
    pub ground_truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn synthetic(cfg: &CohortConfig) -> Result<Self> {
        let (subjects, gt) = make_cohort(cfg)?;
        Ok(Self {
            volume_dims: cfg.volume_dims,
            fnc_order: cfg.fnc_order,
            partition: DomainPartition::default_for(cfg.fnc_order),
            subjects,
            ground_truth: Some(gt),
        })
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        self.subjects.iter().map(|s| s.class).collect()
    }

    pub fn find(&self, id: &str) -> Result<&SubjectRecord> {
        self.subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Lookup(format!("unknown subject {id:?}")))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.partition.validate(self.fnc_order)?;
        let sub = dir.join("subjects");
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for s in &self.subjects {
            write_volume(&sub.join(format!("{}.vol", s.id)), &s.volume)?;
            write_fnc(&sub.join(format!("{}.fnc", s.id)), &s.fnc)?;
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            n_subjects: self.subjects.len(),
            volume_dims: self.volume_dims,
            fnc_order: self.fnc_order,
            class_names: ClassLabel::ALL.iter().map(|c| c.name().to_string()).collect(),
            domain_partition: self.partition.clone(),
            subjects: self
                .subjects
                .iter()
                .map(|s| SubjectEntry {
                    id: s.id.clone(),
                    class: s.class,
                })
                .collect(),
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        if let Some(gt) = &self.ground_truth {
            write_json(&dir.join("ground_truth.json"), gt)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let manifest: Manifest = read_json(&mpath)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(&mpath, format!("unsupported format version {}", manifest.format_version)));
        }
        if manifest.n_subjects != manifest.subjects.len() {
            return Err(Error::format(
                &mpath,
                format!("n_subjects {} but {} subject entries", manifest.n_subjects, manifest.subjects.len()),
            ));
        }
        manifest
            .domain_partition
            .validate(manifest.fnc_order)
            .map_err(|e| Error::format(&mpath, e.to_string()))?;
        let sub = dir.join("subjects");
        let on_disk: std::collections::BTreeSet<String> = fs::read_dir(&sub)
            .map_err(|e| Error::io(&sub, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "vol"))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        if on_disk.len() != manifest.n_subjects {
            return Err(Error::format(
                &mpath,
                format!("manifest lists {} subjects but {} volumes are on disk", manifest.n_subjects, on_disk.len()),
            ));
        }
        let mut ids = std::collections::BTreeSet::new();
        for e in &manifest.subjects {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::format(&mpath, format!("duplicate subject id {:?}", e.id)));
            }
            if !on_disk.contains(&e.id) {
                return Err(Error::format(&mpath, format!("subject {:?} has no volume in {}", e.id, sub.display())));
            }
        }
        let subjects = manifest
            .subjects
            .iter()
            .map(|e| {
                let vpath = sub.join(format!("{}.vol", e.id));
                let fpath = sub.join(format!("{}.fnc", e.id));
                let volume = read_volume(&vpath)?;
                if volume.dims() != manifest.volume_dims {
                    return Err(Error::format(&vpath, format!("dims {:?} differ from manifest", volume.dims())));
                }
                let fnc = read_fnc(&fpath)?;
                if fnc.order() != manifest.fnc_order {
                    return Err(Error::format(&fpath, format!("order {} differs from manifest", fnc.order())));
                }
                Ok(SubjectRecord {
                    id: e.id.clone(),
                    class: e.class,
                    volume,
                    fnc,
                })
            })
            .collect::<Result<_>>()?;
        let gpath = dir.join("ground_truth.json");
        let ground_truth = if gpath.exists() { Some(read_json(&gpath)?) } else { None };
        Ok(Self {
            volume_dims: manifest.volume_dims,
            fnc_order: manifest.fnc_order,
            partition: manifest.domain_partition,
            subjects,
            ground_truth,
        })
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

fn write_f32_file(path: &Path, magic: &[u8; 4], header: &[u32], values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * header.len() + 4 * values.len());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    header.iter().for_each(|h| buf.extend_from_slice(&h.to_le_bytes()));
    values.iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes()));
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Returns the header words and the payload as f64.
fn read_f32_file(path: &Path, magic: &[u8; 4], n_header: usize, payload: impl Fn(&[u32]) -> Option<usize>) -> Result<(Vec<u32>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let head_len = 8 + 4 * n_header;
    if bytes.len() < head_len {
        return Err(Error::format(path, format!("file of {} bytes is shorter than its header", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(Error::format(path, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let header: Vec<u32> = (0..n_header).map(|k| word(8 + 4 * k)).collect();
    let Some(expected) = payload(&header).and_then(|c| c.checked_mul(4)).and_then(|c| c.checked_add(head_len)) else {
        return Err(Error::format(path, format!("header {header:?} declares an impossible size")));
    };
    if bytes.len() != expected {
        return Err(Error::format(path, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let values = bytes[head_len..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((header, values))
}

pub fn write_volume(path: &Path, vol: &StructuralVolume) -> Result<()> {
    let dims = vol.dims().map(|d| d as u32);
    write_f32_file(path, VOL_MAGIC, &dims, vol.voxels())
}

pub fn read_volume(path: &Path) -> Result<StructuralVolume> {
    let (h, v) = read_f32_file(path, VOL_MAGIC, 3, |h| h.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize)))?;
    StructuralVolume::new([h[0] as usize, h[1] as usize, h[2] as usize], v).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_fnc(path: &Path, fnc: &FncMatrix) -> Result<()> {
    write_f32_file(path, FNC_MAGIC, &[fnc.order() as u32], fnc.values())
}

pub fn read_fnc(path: &Path) -> Result<FncMatrix> {
    let (h, v) = read_f32_file(path, FNC_MAGIC, 1, |h| (h[0] as usize).checked_pow(2))?;
    FncMatrix::new(h[0] as usize, v).map_err(|e| Error::format(path, e.to_string()))
}

/// Subject indices per fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn test(&self, fold: usize) -> Result<&[usize]> {
        self.folds
            .get(fold)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("fold {fold} outside 0..{}", self.folds.len())))
    }

    pub fn train(&self, fold: usize) -> Result<Vec<usize>> {
        self.test(fold)?;
        let mut idx: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        idx.sort_unstable();
        Ok(idx)
    }

    pub fn ids(&self, fold: usize, subjects: &[SubjectRecord]) -> Result<Vec<String>> {
        Ok(self.test(fold)?.iter().map(|&i| subjects[i].id.clone()).collect())
    }
}

/// Shuffles each class with `seed`, lays HC then SZ end to end and deals
/// them round-robin into `k` folds.
pub fn stratified_kfold(labels: &[ClassLabel], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 || k > labels.len() {
        return config_err(format!("k must lie in 2..={}, got {k}", labels.len()));
    }
    let mut rng = seeds::rng(seed, 0x6b66);
    let mut order = Vec::with_capacity(labels.len());
    for class in ClassLabel::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        order.extend(idx);
    }
    let mut folds = vec![Vec::new(); k];
    for (p, i) in order.into_iter().enumerate() {
        folds[p % k].push(i);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(FoldSplit { folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_cfg() -> CohortConfig {
        CohortConfig {
            n_subjects: 12,
            volume_dims: [8, 8, 8],
            ..CohortConfig::default()
        }
    }

    #[test]
    fn cohort_is_valid_and_pure() {
        let (a, gt) = make_cohort(&small_cfg()).unwrap();
        let (b, gt2) = make_cohort(&small_cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(gt, gt2);
        assert_eq!(a.len(), 12);
        assert_eq!(a.iter().filter(|s| s.class == ClassLabel::Hc).count(), 6);
        let mut ids: Vec<_> = a.iter().map(|s| s.id.clone()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 12);
    }

    #[test]
    fn basis_is_orthonormal() {
        let gt = GroundTruth::new(&CohortConfig::default()).unwrap();
        let (n, r) = (16, gt.rank);
        for p in 0..r {
            for q in 0..r {
                let d: f64 = (0..n).map(|i| gt.basis[i * r + p] * gt.basis[i * r + q]).sum();
                assert!((d - if p == q { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn null_effect_gives_identical_class_distributions() {
        let cfg = CohortConfig {
            sigma_vol: 0.0,
            sigma_fnc: 0.0,
            beta: 0.0,
            ..small_cfg()
        };
        let gt = GroundTruth::new(&cfg).unwrap();
        let z = vec![0.3; 8];
        assert_eq!(gt.fnc_values(&z, ClassLabel::Hc, &[0.0; 120]), gt.fnc_values(&z, ClassLabel::Sz, &[0.0; 120]));
        assert_eq!(gt.volume_signal(&z, ClassLabel::Hc), gt.volume_signal(&z, ClassLabel::Sz));
        let diff = ground_truth_group_diff(&gt, 4000, 1).unwrap();
        assert!(diff.max_abs() < 3.0 / (4000f64).sqrt());
    }

    #[test]
    fn group_diff_is_deterministic_and_symmetric() {
        let gt = GroundTruth::new(&small_cfg()).unwrap();
        let a = ground_truth_group_diff(&gt, 1000, 3).unwrap();
        assert_eq!(a, ground_truth_group_diff(&gt, 1000, 3).unwrap());
        for i in 0..16 {
            assert_eq!(a.get(i, i), 0.0);
            for j in 0..16 {
                assert_eq!(a.get(i, j), a.get(j, i));
            }
        }
        assert!(ground_truth_group_diff(&gt, 999, 3).is_err());
    }

    #[test]
    fn small_beta_is_locally_linear() {
        let at = |beta: f64| {
            let gt = GroundTruth::new(&CohortConfig { beta, ..small_cfg() }).unwrap();
            ground_truth_group_diff(&gt, 20_000, 5).unwrap()
        };
        let (d1, d2) = (at(0.05), at(0.1));
        // Common seeds cancel sampling noise in the ratio.
        let ratio = d2.max_abs() / d1.max_abs();
        assert!((ratio - 2.0).abs() < 0.15, "ratio {ratio}");
    }

    #[test]
    fn effect_is_detectable_at_defaults() {
        let gt = GroundTruth::new(&CohortConfig::default()).unwrap();
        let null = GroundTruth::new(&CohortConfig {
            beta: 0.0,
            ..CohortConfig::default()
        })
        .unwrap();
        let effect = ground_truth_group_diff(&gt, 2000, 9).unwrap().max_abs();
        let noise = ground_truth_group_diff(&null, 2000, 9).unwrap().max_abs();
        assert!(effect > 5.0 * noise, "effect {effect}, null {noise}");
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = Dataset::synthetic(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        assert_eq!(Dataset::read(dir.path()).unwrap(), ds);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let ds = Dataset::synthetic(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let f = dir.path().join("subjects/sub-0003.fnc");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 3]).unwrap();
        let err = Dataset::read(dir.path()).unwrap_err();
        assert!(matches!(&err, Error::Format { path, .. } if path == &f), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&f, &bad).unwrap();
        assert!(matches!(Dataset::read(dir.path()), Err(Error::Format { .. })));
        let mut bad = bytes;
        bad[4] = 9;
        fs::write(&f, &bad).unwrap();
        assert!(matches!(Dataset::read(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error_naming_path() {
        let ds = Dataset::synthetic(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let f = dir.path().join("subjects/sub-0002.fnc");
        fs::remove_file(&f).unwrap();
        let err = Dataset::read(dir.path()).unwrap_err();
        assert!(matches!(&err, Error::Io { path, .. } if path == &f));
        assert!(err.to_string().contains("sub-0002.fnc"));
    }

    #[test]
    fn manifest_count_mismatch_is_format_error() {
        let ds = Dataset::synthetic(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        fs::copy(
            dir.path().join("subjects/sub-0000.vol"),
            dir.path().join("subjects/extra.vol"),
        )
        .unwrap();
        assert!(matches!(Dataset::read(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn default_partition_sizes() {
        let p = DomainPartition::default_for(16);
        let sizes: Vec<usize> = p.blocks.iter().map(|b| b.len).collect();
        assert_eq!(sizes, [2, 2, 2, 2, 3, 3, 2]);
        p.validate(16).unwrap();
        DomainPartition::default_for(53).validate(53).unwrap();
        DomainPartition::default_for(5).validate(5).unwrap();
        assert!(p.validate(17).is_err());
        assert_eq!(p.find("DM").unwrap().start, 11);
        assert!(p.find("XX").is_err());
    }

    #[test]
    fn kfold_exact_case() {
        let labels: Vec<_> = (0..10).map(|i| if i % 2 == 0 { ClassLabel::Hc } else { ClassLabel::Sz }).collect();
        let split = stratified_kfold(&labels, 5, 1).unwrap();
        for f in &split.folds {
            assert_eq!(f.len(), 2);
            assert_eq!(f.iter().filter(|&&i| labels[i] == ClassLabel::Hc).count(), 1);
        }
        assert_eq!(split, stratified_kfold(&labels, 5, 1).unwrap());
        assert!(stratified_kfold(&labels, 11, 1).is_err());
    }

    proptest! {
        #[test]
        fn kfold_partitions_and_stratifies(
            labels in proptest::collection::vec(any::<bool>(), 2..80),
            k in 2usize..12,
            seed in any::<u64>(),
        ) {
            let labels: Vec<_> = labels.into_iter().map(|b| if b { ClassLabel::Hc } else { ClassLabel::Sz }).collect();
            prop_assume!(k <= labels.len());
            let split = stratified_kfold(&labels, k, seed).unwrap();
            let mut all: Vec<usize> = split.folds.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            let n_hc = labels.iter().filter(|&&c| c == ClassLabel::Hc).count();
            let p = n_hc as f64 / labels.len() as f64;
            for f in &split.folds {
                let hc = f.iter().filter(|&&i| labels[i] == ClassLabel::Hc).count() as f64;
                prop_assert!((hc - p * f.len() as f64).abs() <= 1.0 + 1e-9);
            }
        }
    }
}
