//! Binary checkpoint: parameters of every network, optimizer moments, the
//! training RNG position and a hash of the run configuration.
//!
//! Layout (little-endian): magic "FNCK", u32 version, 32-byte config hash,
//! u32 completed epochs, u32 tensor count + tensor blocks, u32 optimizer
//! count + optimizer blocks, RNG block (32-byte seed, u64 stream, u128 word
//! position), then a SHA-256 digest of everything before it. A tensor block
//! is u32 name length, name bytes, u32 rank, u32 dims, f64 data.

use std::fs;
use std::path::Path;

use fncgen_autodiff::Tensor;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, OptimState};
use crate::params::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimEntry {
    pub name: String,
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimBlock {
    pub name: String,
    pub lr: f64,
    pub hyper: AdamWConfig,
    pub entries: Vec<OptimEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub epoch: u32,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizers: Vec<OptimBlock>,
    pub rng: RngState,
}

impl OptimBlock {
    pub fn capture(name: &str, params: &ParamSet, state: &OptimState) -> Result<Self> {
        let entries = params
            .names()
            .iter()
            .zip(params.tensors())
            .enumerate()
            .map(|(k, (n, t))| {
                Ok(OptimEntry {
                    name: n.clone(),
                    step: state.steps[k],
                    m: Tensor::new(t.shape().to_vec(), state.m[k].clone())?,
                    v: Tensor::new(t.shape().to_vec(), state.v[k].clone())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            name: name.to_string(),
            lr: state.lr,
            hyper: state.hyper,
            entries,
        })
    }

    /// Rebuilds optimizer state aligned with `params`.
    pub fn restore(&self, params: &ParamSet) -> Result<OptimState> {
        let mut state = OptimState::new(params, self.hyper);
        state.lr = self.lr;
        for (k, (name, t)) in params.names().iter().zip(params.tensors()).enumerate() {
            let e = self
                .entries
                .iter()
                .find(|e| &e.name == name)
                .ok_or_else(|| Error::Contract(format!("optimizer {} has no entry for {name}", self.name)))?;
            if e.m.shape() != t.shape() || e.v.shape() != t.shape() {
                return Err(Error::Contract(format!("optimizer moments for {name} have the wrong shape")));
            }
            state.steps[k] = e.step;
            state.m[k] = e.m.data().to_vec();
            state.v[k] = e.v.data().to_vec();
        }
        Ok(state)
    }
}

/// Named tensors of a parameter set with a prefix.
pub fn named_tensors(prefix: &str, params: &ParamSet) -> Vec<(String, Tensor)> {
    params
        .names()
        .iter()
        .zip(params.tensors())
        .map(|(n, t)| {
            let name = if n.starts_with(prefix) { n.clone() } else { format!("{prefix}.{n}") };
            (name, Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid shape"))
        })
        .collect()
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn name(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.name(name);
        self.u32(t.rank() as u32);
        t.shape().iter().for_each(|&d| self.u32(d as u32));
        t.data().iter().for_each(|&v| self.f64(v));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn count(&mut self, what: &str) -> Result<usize> {
        let n = self.u32()? as usize;
        // Every element needs at least four bytes, which bounds corrupt counts.
        if n > (self.bytes.len() - self.pos) / 4 {
            return Err(Error::format(self.path, format!("implausible {what} count {n}")));
        }
        Ok(n)
    }
    fn name(&mut self) -> Result<String> {
        let n = self.count("name length")?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "name is not UTF-8"))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.name()?;
        let rank = self.count("rank")?;
        let dims = (0..rank).map(|_| Ok(self.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = match numel {
            Some(n) if n <= (self.bytes.len() - self.pos) / 8 => n,
            _ => return Err(Error::format(self.path, format!("tensor {name} with dims {dims:?} exceeds the file"))),
        };
        let data = (0..numel).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(dims, data).map_err(|e| Error::format(self.path, format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.0.extend_from_slice(&self.config_hash);
        w.u32(self.epoch);
        w.u32(self.tensors.len() as u32);
        for (n, t) in &self.tensors {
            w.tensor(n, t);
        }
        w.u32(self.optimizers.len() as u32);
        for o in &self.optimizers {
            w.name(&o.name);
            for v in [o.lr, o.hyper.beta1, o.hyper.beta2, o.hyper.eps, o.hyper.weight_decay] {
                w.f64(v);
            }
            w.u32(o.entries.len() as u32);
            for e in &o.entries {
                w.u64(e.step);
                w.tensor(&format!("{}.m", e.name), &e.m);
                w.tensor(&format!("{}.v", e.name), &e.v);
            }
        }
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad magic, expected \"FNCK\""));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let Some(body_len) = bytes.len().checked_sub(32).filter(|&l| l >= r.pos) else {
            return Err(Error::format(path, format!("truncated at byte {}", bytes.len())));
        };
        let (body, digest) = bytes.split_at(body_len);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::format(path, "checksum mismatch: file is truncated or corrupted"));
        }
        let bytes = body;
        r.bytes = body;
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let epoch = r.u32()?;
        let n = r.count("tensor")?;
        let tensors = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let n = r.count("optimizer")?;
        let mut optimizers = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.name()?;
            let lr = r.f64()?;
            let hyper = AdamWConfig {
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
                weight_decay: r.f64()?,
            };
            let count = r.count("optimizer entry")?;
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                let step = r.u64()?;
                let (mn, m) = r.tensor()?;
                let (vn, v) = r.tensor()?;
                let Some(pname) = mn.strip_suffix(".m") else {
                    return Err(Error::format(path, format!("moment block {mn} lacks the .m suffix")));
                };
                if vn != format!("{pname}.v") || m.shape() != v.shape() {
                    return Err(Error::format(path, format!("moment blocks {mn} and {vn} do not pair")));
                }
                entries.push(OptimEntry {
                    name: pname.to_string(),
                    step,
                    m,
                    v,
                });
            }
            optimizers.push(OptimBlock {
                name,
                lr,
                hyper,
                entries,
            });
        }
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config_hash,
            epoch,
            tensors,
            optimizers,
            rng: RngState { seed, stream, word_pos },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Tensors whose name starts with `prefix.`.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let p = format!("{prefix}.");
        self.tensors.iter().filter(|(n, _)| n.starts_with(&p)).cloned().collect()
    }

    pub fn optimizer(&self, name: &str) -> Result<&OptimBlock> {
        self.optimizers
            .iter()
            .find(|o| o.name == name)
            .ok_or_else(|| Error::Lookup(format!("checkpoint has no optimizer {name:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::Rng;

    fn sample() -> Checkpoint {
        let mut ps = ParamSet::new();
        let mut init = Init::new(1);
        ps.add("gen.a", init.trunc_normal(&[2, 3], 1.0));
        ps.add("gen.b", init.trunc_normal(&[4], 1.0));
        let mut st = OptimState::new(&ps, AdamWConfig::default());
        st.steps = vec![3, 4];
        st.m[0][1] = 0.25;
        st.v[1][2] = 1e-9;
        st.lr = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rng.random();
        Checkpoint {
            config_hash: [7; 32],
            epoch: 3,
            tensors: named_tensors("gen", &ps),
            optimizers: vec![OptimBlock::capture("gen", &ps, &st).unwrap()],
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn encode_decode_encode_is_identical() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let _: [u64; 5] = rng.random();
        let saved = RngState::capture(&rng);
        let next: u64 = rng.random();
        assert_eq!(saved.restore().random::<u64>(), next);
    }

    #[test]
    fn optimizer_restore_round_trip() {
        let c = sample();
        let mut ps = ParamSet::new();
        for (n, t) in &c.tensors {
            ps.add(n.clone(), t.clone());
        }
        let st = c.optimizer("gen").unwrap().restore(&ps).unwrap();
        assert_eq!(st.steps, [3, 4]);
        assert_eq!(st.m[0][1], 0.25);
        assert_eq!(st.lr, 1e-5);
        assert!(c.optimizer("disc").is_err());
    }

    #[test]
    fn corruption_is_format_error() {
        let bytes = sample().encode();
        let p = Path::new("ck");
        for cut in [0, 3, 10, 50, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut], p), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(Checkpoint::decode(&bad, p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::decode(&bad, p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(Checkpoint::decode(&bad, p), Err(Error::Format { .. })));
        // Huge tensor count.
        let mut bad = bytes;
        bad[44..48].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(Checkpoint::decode(&bad, p), Err(Error::Format { .. })));
    }

    #[test]
    fn prefix_filter() {
        let c = sample();
        assert_eq!(c.tensors_with_prefix("gen").len(), 2);
        assert!(c.tensors_with_prefix("disc").is_empty());
    }
}
