//! Checkpoint files: a small self-describing binary format with a
//! content digest. Layout (all little-endian):
//! magic "MATK", format version u32, kind u8 (0 segmenter / 1 classifier),
//! hyperparameters, then per-layer shapes and raw f64 weights.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::classifier::ClassifierNet;
use crate::model::nn::{Conv2d, Linear};
use crate::model::toy::{ToyModelSpec, ToyNet};

const MAGIC: &[u8; 4] = b"MATK";
const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn conv(&mut self, c: &Conv2d) {
        self.u32(c.in_channels as u32);
        self.u32(c.out_channels as u32);
        self.u32(c.stride as u32);
        for &v in c.weight.iter() {
            self.f64(v);
        }
        for &v in c.bias.iter() {
            self.f64(v);
        }
    }
    fn linear(&mut self, l: &Linear) {
        let (o, i) = l.weight.dim();
        self.u32(i as u32);
        self.u32(o as u32);
        for &v in l.weight.iter() {
            self.f64(v);
        }
        for &v in l.bias.iter() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Schema("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn conv(&mut self) -> Result<Conv2d> {
        let in_c = self.u32()? as usize;
        let out_c = self.u32()? as usize;
        let stride = self.u32()? as usize;
        if stride != 1 && stride != 2 {
            return Err(Error::Schema(format!("bad conv stride {stride}")));
        }
        let mut weight = Array2::zeros((out_c, in_c * 9));
        for v in weight.iter_mut() {
            *v = self.f64()?;
        }
        let mut bias = Array1::zeros(out_c);
        for v in bias.iter_mut() {
            *v = self.f64()?;
        }
        Ok(Conv2d {
            weight,
            bias,
            in_channels: in_c,
            out_channels: out_c,
            stride,
        })
    }
    fn linear(&mut self) -> Result<Linear> {
        let i = self.u32()? as usize;
        let o = self.u32()? as usize;
        let mut weight = Array2::zeros((o, i));
        for v in weight.iter_mut() {
            *v = self.f64()?;
        }
        let mut bias = Array1::zeros(o);
        for v in bias.iter_mut() {
            *v = self.f64()?;
        }
        Ok(Linear { weight, bias })
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Schema("trailing bytes in checkpoint".into()));
        }
        Ok(())
    }
}

fn serialize_toy(spec: &ToyModelSpec, net: &ToyNet) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(0);
    w.f64(spec.prompt_sigma);
    w.u32(spec.image_channels as u32);
    w.u64(spec.train_seed);
    for &width in &spec.widths {
        w.u32(width as u32);
    }
    for conv in net.layers() {
        w.conv(conv);
    }
    w.buf
}

pub(crate) fn toy_digest(spec: &ToyModelSpec, net: &ToyNet) -> String {
    hex_digest(&serialize_toy(spec, net))
}

pub(crate) fn save_toy(path: impl AsRef<Path>, spec: &ToyModelSpec, net: &ToyNet) -> Result<()> {
    let bytes = serialize_toy(spec, net);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub(crate) fn load_toy(path: impl AsRef<Path>) -> Result<(ToyModelSpec, ToyNet)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader::new(&bytes);
    check_header(&mut r, 0)?;
    let prompt_sigma = r.f64()?;
    let image_channels = r.u32()? as usize;
    let train_seed = r.u64()?;
    let widths = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let spec = ToyModelSpec {
        prompt_sigma,
        widths,
        image_channels,
        train_seed,
        checkpoint_digest: None,
    };
    spec.validate()?;
    let net = ToyNet {
        c1: r.conv()?,
        d1: r.conv()?,
        d2: r.conv()?,
        mid: r.conv()?,
        u1: r.conv()?,
        u2: r.conv()?,
        head: r.conv()?,
    };
    r.done()?;
    Ok((spec, net))
}

fn serialize_classifier(net: &ClassifierNet) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(1);
    w.u32(net.image_channels as u32);
    w.u32(net.num_classes as u32);
    w.u64(net.train_seed);
    for conv in [&net.v1, &net.v2, &net.v3] {
        w.conv(conv);
    }
    w.linear(&net.head);
    w.buf
}

pub(crate) fn classifier_digest(net: &ClassifierNet) -> String {
    hex_digest(&serialize_classifier(net))
}

pub(crate) fn save_classifier(path: impl AsRef<Path>, net: &ClassifierNet) -> Result<()> {
    let bytes = serialize_classifier(net);
    std::fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn load_classifier(path: impl AsRef<Path>) -> Result<ClassifierNet> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    check_header(&mut r, 1)?;
    let image_channels = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let train_seed = r.u64()?;
    let net = ClassifierNet {
        image_channels,
        num_classes,
        train_seed,
        v1: r.conv()?,
        v2: r.conv()?,
        v3: r.conv()?,
        head: r.linear()?,
    };
    r.done()?;
    Ok(net)
}

fn check_header(r: &mut Reader<'_>, expected_kind: u8) -> Result<()> {
    if r.take(4)? != MAGIC {
        return Err(Error::Schema("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Schema(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let kind = r.u8()?;
    if kind != expected_kind {
        return Err(Error::Schema(format!(
            "checkpoint kind {kind} does not match expected {expected_kind}"
        )));
    }
    Ok(())
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn toy_checkpoint_round_trip_preserves_digest() {
        let spec = ToyModelSpec {
            widths: [4, 6, 8],
            ..Default::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let net = ToyNet::init(&spec, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ckpt");
        save_toy(&path, &spec, &net).unwrap();
        let (spec2, net2) = load_toy(&path).unwrap();
        assert_eq!(toy_digest(&spec, &net), toy_digest(&spec2, &net2));
    }

    #[test]
    fn corrupted_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"MATKxxxx").unwrap();
        assert!(load_toy(&path).is_err());
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_toy(&path).is_err());
    }
}
