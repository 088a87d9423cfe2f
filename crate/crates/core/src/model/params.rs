//! Parameter schema, initialization, and the on-disk container.
//!
//! The schema is a single name -> shape map derived from [`Hyper`]; the
//! initializer, the network builder, and the loader all consume it, so a
//! parameter file either matches the architecture exactly or is rejected.

use super::{Ablation, Hyper};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use rand::{Rng, SeedableRng};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LABNETPM";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub hyper: Hyper,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

/// Name -> shape for every tensor the variant owns.
pub fn shapes(h: &Hyper) -> BTreeMap<String, Vec<usize>> {
    let d = h.d;
    let mut m = BTreeMap::new();
    let mut gru = |m: &mut BTreeMap<String, Vec<usize>>, prefix: &str| {
        m.insert(format!("{prefix}.wih"), vec![d, 3 * d]);
        m.insert(format!("{prefix}.whh"), vec![d, 3 * d]);
        m.insert(format!("{prefix}.bih"), vec![3 * d]);
        m.insert(format!("{prefix}.bhh"), vec![3 * d]);
    };
    let dpr = |m: &mut BTreeMap<String, Vec<usize>>,
               gru: &mut dyn FnMut(&mut BTreeMap<String, Vec<usize>>, &str),
               prefix: &str| {
        m.insert(format!("{prefix}.freq.ln.g"), vec![d]);
        m.insert(format!("{prefix}.freq.ln.b"), vec![d]);
        gru(m, &format!("{prefix}.freq.fwd"));
        gru(m, &format!("{prefix}.freq.bwd"));
        m.insert(format!("{prefix}.freq.proj.w"), vec![2 * d, d]);
        m.insert(format!("{prefix}.freq.proj.b"), vec![d]);
        m.insert(format!("{prefix}.time.ln.g"), vec![d]);
        m.insert(format!("{prefix}.time.ln.b"), vec![d]);
        gru(m, &format!("{prefix}.time.gru"));
        m.insert(format!("{prefix}.glu.ln.g"), vec![d]);
        m.insert(format!("{prefix}.glu.ln.b"), vec![d]);
        m.insert(format!("{prefix}.glu.a.w"), vec![d, d]);
        m.insert(format!("{prefix}.glu.a.b"), vec![d]);
        m.insert(format!("{prefix}.glu.b.w"), vec![d, d]);
        m.insert(format!("{prefix}.glu.b.b"), vec![d]);
    };
    let cca = |m: &mut BTreeMap<String, Vec<usize>>, prefix: &str| {
        m.insert(format!("{prefix}.ln_q.g"), vec![d]);
        m.insert(format!("{prefix}.ln_q.b"), vec![d]);
        m.insert(format!("{prefix}.ln_kv.g"), vec![d]);
        m.insert(format!("{prefix}.ln_kv.b"), vec![d]);
        for p in ["q", "k", "v", "o"] {
            m.insert(format!("{prefix}.w{p}"), vec![d, d]);
            m.insert(format!("{prefix}.b{p}"), vec![d]);
        }
    };
    let tac = |m: &mut BTreeMap<String, Vec<usize>>, prefix: &str| {
        m.insert(format!("{prefix}.z.w"), vec![d, d]);
        m.insert(format!("{prefix}.z.b"), vec![d]);
        m.insert(format!("{prefix}.a.w"), vec![d, d]);
        m.insert(format!("{prefix}.a.b"), vec![d]);
        m.insert(format!("{prefix}.o.w"), vec![2 * d, d]);
        m.insert(format!("{prefix}.o.b"), vec![d]);
    };
    let fuse = |m: &mut BTreeMap<String, Vec<usize>>, prefix: &str| match h.ablation {
        Ablation::Tac => tac(m, prefix),
        _ => cca(m, prefix),
    };

    // encoder: features (3 planes) in, d maps out, halving frequency per block
    for i in 0..h.n_enc {
        let cin = if i == 0 { 3 } else { d };
        m.insert(format!("enc.{i}.w"), vec![d, cin, h.kt, h.kf]);
        m.insert(format!("enc.{i}.b"), vec![d]);
    }
    if h.ablation != Ablation::NoStage1 {
        dpr(&mut m, &mut gru, "dpr1");
        fuse(&mut m, "mix1");
    }
    if h.ablation != Ablation::NoStage2 {
        m.insert("s2.fuse.w".into(), vec![2 * d, d]);
        m.insert("s2.fuse.b".into(), vec![d]);
        dpr(&mut m, &mut gru, "dpr2");
        fuse(&mut m, "mix2");
    }
    if h.ablation != Ablation::NoStage3 {
        dpr(&mut m, &mut gru, "dpr3");
    }
    // decoder mirrors the encoder, then a pointwise mask head
    for i in 0..h.n_enc {
        m.insert(format!("dec.{i}.w"), vec![d, d, h.kt, h.kf]);
        m.insert(format!("dec.{i}.b"), vec![d]);
    }
    m.insert("mask.w".into(), vec![1, d, 1, 1]);
    m.insert("mask.b".into(), vec![1]);
    m
}

impl ModelParams {
    /// Deterministic initialization: uniform Xavier bounds for dense and conv
    /// maps, uniform 1/sqrt(d) for recurrences, identity-like norms, zero
    /// biases.
    pub fn init(hyper: Hyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed ^ 0x6c61_626e_6574_u64);
        let mut tensors = BTreeMap::new();
        for (name, shape) in shapes(&hyper) {
            let t = init_tensor(&name, &shape, hyper.d, &mut rng);
            tensors.insert(name, t);
        }
        Ok(ModelParams { hyper, tensors })
    }

    pub fn n_params(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> &Tensor<f32> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{}' missing from store", name))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let hyper_json = serde_json::to_vec(&self.hyper).map_err(|e| Error::Io(e.into()))?;
        buf.extend_from_slice(&(hyper_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&hyper_json);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.shape().len() as u8);
            for &dim in t.shape() {
                buf.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, at: 0 };
        if c.take(8)? != MAGIC {
            return Err(Error::CorruptModel("bad magic".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::CorruptModel(format!("unsupported version {}", version)));
        }
        let hlen = c.u32()? as usize;
        let hyper: Hyper = serde_json::from_slice(c.take(hlen)?)
            .map_err(|e| Error::CorruptModel(format!("hyper block: {}", e)))?;
        hyper.validate().map_err(|e| Error::CorruptModel(format!("hyper block: {}", e)))?;
        let expect = shapes(&hyper);
        let count = c.u32()? as usize;
        if count != expect.len() {
            return Err(Error::CorruptModel(format!(
                "file holds {} tensors, architecture wants {}",
                count,
                expect.len()
            )));
        }
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = c.u16()? as usize;
            let name = String::from_utf8(c.take(nlen)?.to_vec())
                .map_err(|_| Error::CorruptModel("non-utf8 tensor name".into()))?;
            let ndim = c.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(c.u32()? as usize);
            }
            let want = expect
                .get(&name)
                .ok_or_else(|| Error::CorruptModel(format!("unexpected tensor '{}'", name)))?;
            if want != &shape {
                return Err(Error::CorruptModel(format!(
                    "tensor '{}' has shape {:?}, architecture wants {:?}",
                    name, shape, want
                )));
            }
            let numel: usize = shape.iter().product();
            let raw = c.take(4 * numel)?;
            let mut data = Vec::with_capacity(numel);
            for chunk in raw.chunks_exact(4) {
                let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                if !v.is_finite() {
                    return Err(Error::CorruptModel(format!("non-finite value in '{}'", name)));
                }
                data.push(v);
            }
            tensors.insert(name, Tensor::from_vec(&shape, data)?);
        }
        if c.at != bytes.len() {
            return Err(Error::CorruptModel("trailing bytes after last tensor".into()));
        }
        Ok(ModelParams { hyper, tensors })
    }
}

fn init_tensor(name: &str, shape: &[usize], d: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let uniform = |rng: &mut dyn rand::RngCore, n: usize, bound: f64| -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect()
    };
    let n: usize = shape.iter().product();
    if name.ends_with(".g") {
        return Tensor::from_vec(shape, vec![1.0; n]).unwrap();
    }
    if name.ends_with(".b") || name.ends_with("ln.b") || name.contains(".bih")
        || name.contains(".bhh") || name.ends_with(".bq") || name.ends_with(".bk")
        || name.ends_with(".bv") || name.ends_with(".bo")
    {
        return Tensor::zeros(shape);
    }
    let bound = if name.contains(".wih") || name.contains(".whh") {
        (1.0 / d as f64).sqrt()
    } else if shape.len() == 4 {
        let fan_in = shape[1] * shape[2] * shape[3];
        let fan_out = shape[0] * shape[2] * shape[3];
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    } else {
        (6.0 / (shape[0] + shape[1]) as f64).sqrt()
    };
    Tensor::from_vec(shape, uniform(rng, n, bound)).unwrap()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::CorruptModel("file truncated".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}
