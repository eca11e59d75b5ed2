//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "ACC3DLAB" | u32 version
//! schedule: 4 × f64 | u64 iteration | u32 dim | u32 embed_dim
//! u8 has_rng [ seed 32 bytes | u64 stream | u128 word_pos ]
//! string config text
//! u32 n_params   { string name | layout | u64 len | len × f64 }
//! u32 n_optim    { string name | 4 × f64 hyper | u64 step | u64 len | m | v }
//! u32 n_accum    { string name | u64 count | u8 has_buffer [ param block ] }
//! ```
//!
//! Strings are a u64 byte length followed by UTF-8. A layout is a u32 layer
//! count followed by `(u32 fan_in, u32 fan_out, u8 activation)` per layer.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use edgedistill::nn::{Activation, AdamW, LayerSpec, Layout, ParamVector};
use edgedistill::schedule::NoiseSchedule;
use rand_chacha::ChaCha8Rng;

pub const MAGIC: &[u8; 8] = b"ACC3DLAB";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint lacks section `{0}`")]
    Missing(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Saved gradient-accumulation window.
#[derive(Clone, Debug, PartialEq)]
pub struct AccumState {
    pub count: usize,
    pub buffer: Option<ParamVector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub schedule: NoiseSchedule,
    pub iteration: u64,
    pub dim: usize,
    pub embed_dim: usize,
    pub rng: Option<RngState>,
    pub config: String,
    pub params: BTreeMap<String, ParamVector>,
    pub optimizers: BTreeMap<String, AdamW>,
    pub accumulators: BTreeMap<String, AccumState>,
}

impl Checkpoint {
    pub fn new(schedule: NoiseSchedule, dim: usize, embed_dim: usize, config: String) -> Self {
        Self {
            schedule,
            iteration: 0,
            dim,
            embed_dim,
            rng: None,
            config,
            params: BTreeMap::new(),
            optimizers: BTreeMap::new(),
            accumulators: BTreeMap::new(),
        }
    }

    pub fn param(&self, name: &str) -> Result<&ParamVector> {
        self.params.get(name).ok_or_else(|| CheckpointError::Missing(name.into()))
    }

    pub fn optimizer(&self, name: &str) -> Result<&AdamW> {
        self.optimizers.get(name).ok_or_else(|| CheckpointError::Missing(name.into()))
    }

    pub fn accumulator(&self, name: &str) -> Result<&AccumState> {
        self.accumulators.get(name).ok_or_else(|| CheckpointError::Missing(name.into()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        let s = &self.schedule;
        for v in [s.beta_min, s.beta_max, s.t_min, s.t_max] {
            put_f64(&mut w, v);
        }
        put_u64(&mut w, self.iteration);
        put_u32(&mut w, self.dim as u32);
        put_u32(&mut w, self.embed_dim as u32);
        match &self.rng {
            None => w.push(0),
            Some(r) => {
                w.push(1);
                w.extend_from_slice(&r.seed);
                put_u64(&mut w, r.stream);
                w.extend_from_slice(&r.word_pos.to_le_bytes());
            }
        }
        put_str(&mut w, &self.config);
        put_u32(&mut w, self.params.len() as u32);
        for (name, p) in &self.params {
            put_str(&mut w, name);
            put_params(&mut w, p);
        }
        put_u32(&mut w, self.optimizers.len() as u32);
        for (name, o) in &self.optimizers {
            put_str(&mut w, name);
            for v in [o.lr, o.weight_decay, o.beta1, o.beta2, o.eps] {
                put_f64(&mut w, v);
            }
            put_u64(&mut w, o.step_count());
            put_u64(&mut w, o.first_moment().len() as u64);
            for v in o.first_moment().iter().chain(o.second_moment()) {
                put_f64(&mut w, *v);
            }
        }
        put_u32(&mut w, self.accumulators.len() as u32);
        for (name, a) in &self.accumulators {
            put_str(&mut w, name);
            put_u64(&mut w, a.count as u64);
            match &a.buffer {
                None => w.push(0),
                Some(p) => {
                    w.push(1);
                    put_params(&mut w, p);
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let (b0, b1, t0, t1) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let schedule = NoiseSchedule::new(b0, b1, t0, t1).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let iteration = r.u64()?;
        let dim = r.u32()? as usize;
        let embed_dim = r.u32()? as usize;
        let rng = match r.u8()? {
            0 => None,
            1 => {
                let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                Some(RngState { seed, stream, word_pos })
            }
            x => return Err(CheckpointError::Malformed(format!("rng flag {x}"))),
        };
        let config = r.string()?;
        let mut ck = Checkpoint::new(schedule, dim, embed_dim, config);
        ck.iteration = iteration;
        ck.rng = rng;
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let p = r.params()?;
            ck.params.insert(name, p);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let (lr, wd, b1, b2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let step = r.u64()?;
            let len = r.len(16)?;
            let m = r.f64s(len)?;
            let v = r.f64s(len)?;
            let o = AdamW::from_parts(lr, wd, (b1, b2), eps, step, m, v).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            ck.optimizers.insert(name, o);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let count = r.u64()? as usize;
            let buffer = match r.u8()? {
                0 => None,
                1 => Some(r.params()?),
                x => return Err(CheckpointError::Malformed(format!("buffer flag {x}"))),
            };
            ck.accumulators.insert(name, AccumState { count, buffer });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u64(w, s.len() as u64);
    w.extend_from_slice(s.as_bytes());
}

fn put_params(w: &mut Vec<u8>, p: &ParamVector) {
    let layers = p.layout().layers();
    put_u32(w, layers.len() as u32);
    for l in layers {
        put_u32(w, l.fan_in as u32);
        put_u32(w, l.fan_out as u32);
        w.push(l.activation.tag());
    }
    put_u64(w, p.len() as u64);
    for v in p.values() {
        put_f64(w, *v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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

    /// A length prefix, rejected early if the remaining bytes cannot hold
    /// `len` items of `item_bytes`.
    fn len(&mut self, item_bytes: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.checked_mul(item_bytes as u64).is_none_or(|b| b > remaining) {
            return Err(CheckpointError::Truncated);
        }
        Ok(n as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("string is not UTF-8".into()))
    }

    fn params(&mut self) -> Result<ParamVector> {
        let n_layers = self.u32()?;
        let mut layers = Vec::new();
        for _ in 0..n_layers {
            let fan_in = self.u32()? as usize;
            let fan_out = self.u32()? as usize;
            let tag = self.u8()?;
            let activation = Activation::from_tag(tag).ok_or_else(|| CheckpointError::Malformed(format!("activation tag {tag}")))?;
            layers.push(LayerSpec { fan_in, fan_out, activation });
        }
        let layout = Layout::new(layers).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let len = self.len(8)?;
        let values = self.f64s(len)?;
        ParamVector::from_values(Arc::new(layout), values).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = Arc::new(Layout::mlp(4, 8, 2, 1));
        let p = ParamVector::init(layout.clone(), &mut rng, 1.0);
        let mut ck = Checkpoint::new(NoiseSchedule::default(), 2, 16, "[run]\nseed = 1\n".into());
        ck.iteration = 42;
        rng.next_u64();
        ck.rng = Some(RngState::capture(&rng));
        ck.params.insert("student".into(), p.clone());
        let m: Vec<f64> = p.values().iter().map(|v| v * 0.5).collect();
        let v: Vec<f64> = p.values().iter().map(|v| v * v).collect();
        ck.optimizers.insert("opt_g".into(), AdamW::from_parts(1e-4, 0.01, (0.9, 0.999), 1e-8, 17, m, v).unwrap());
        ck.accumulators.insert("acc_g".into(), AccumState { count: 1, buffer: Some(p) });
        ck.accumulators.insert("acc_tex".into(), AccumState { count: 0, buffer: None });
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(2);
        for _ in 0..13 {
            rng.next_u32();
        }
        let mut resumed = RngState::capture(&rng).restore();
        for _ in 0..100 {
            assert_eq!(rng.next_u64(), resumed.next_u64());
        }
    }

    #[test]
    fn corrupt_input_fails_closed() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Version(99))));
        for cut in [3, 12, 60, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(CheckpointError::Malformed(_))));
        assert!(matches!(Checkpoint::from_bytes(b""), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn missing_sections_are_reported() {
        let ck = sample();
        assert!(matches!(ck.param("critic_geo"), Err(CheckpointError::Missing(_))));
        assert!(ck.param("student").is_ok());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
