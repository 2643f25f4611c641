//! Multi-scale micro segmentation network.
//!
//! Three 3×3 conv + ReLU blocks with strides 1, 2, 2, and two 1×1
//! prediction heads: the low-level head reads block 2 (stride 2) and the
//! high-level head reads block 3 (stride 4). Each head's logits are
//! bilinearly upsampled back to the input resolution.

use std::fs;
use std::path::Path;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::data::Rng;
use crate::error::{Error, Result};

pub const NUM_LEVELS: usize = 2;
pub const LOW_LEVEL: usize = 0;
pub const HIGH_LEVEL: usize = 1;
/// Input sides must be a multiple of this so both heads align exactly.
pub const TOTAL_STRIDE: usize = 4;

const KERNEL: usize = 3;
const STRIDES: [usize; 3] = [1, 2, 2];
/// Block whose output feeds each head, and that head's upsampling factor.
const HEADS: [(usize, usize); NUM_LEVELS] = [(1, 2), (2, 4)];
const MAGIC: &[u8; 6] = b"OTSEG1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub widths: [usize; 3],
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 4,
            widths: [16, 32, 32],
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 || self.widths.contains(&0) {
            return Err(Error::invalid(format!("invalid network configuration {self:?}")));
        }
        Ok(())
    }

    /// Parameter shapes in declaration order: three conv blocks, then the
    /// low and high heads, each as (weight, bias).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut cin = self.in_channels;
        for &w in &self.widths {
            shapes.push(vec![KERNEL, KERNEL, cin, w]);
            shapes.push(vec![w]);
            cin = w;
        }
        for (block, _) in HEADS {
            shapes.push(vec![1, 1, self.widths[block], self.num_classes]);
            shapes.push(vec![self.num_classes]);
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    config: SegNetConfig,
    params: Vec<Tensor>,
}

/// Tape handles produced by [`SegNet::forward_traced`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub params: Vec<Var>,
    /// Upsampled logits per level, `[LOW_LEVEL, HIGH_LEVEL]`.
    pub logits: Vec<Var>,
    /// Softmax of `logits` per level.
    pub probs: Vec<Var>,
}

impl SegNet {
    /// Kaiming fan-in initialisation: weights `N(0, 2 / fan_in)`, biases zero.
    pub fn new(config: SegNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let data = if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    let fan_in = (shape[0] * shape[1] * shape[2]) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    (0..n).map(|_| std * rng.normal()).collect()
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, params })
    }

    pub fn zeros(config: SegNetConfig) -> Result<Self> {
        config.validate()?;
        let params = config.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self { config, params })
    }

    pub fn from_params(config: SegNetConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, s)| p.shape() != &s[..]) {
            return Err(Error::shape("parameter tensors do not match the network configuration"));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let (_, h, w, c) = images.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "input has {c} channels, network expects {}",
                self.config.in_channels
            )));
        }
        if h % TOTAL_STRIDE != 0 || w % TOTAL_STRIDE != 0 {
            return Err(Error::shape(format!(
                "input sides {h}x{w} must be multiples of {TOTAL_STRIDE}"
            )));
        }
        if !images.is_finite() {
            return Err(Error::invalid("input contains non-finite values"));
        }
        Ok(())
    }

    /// Records the forward pass of `images` (`B × H × W × C`) on `tape`.
    pub fn forward_traced(&self, tape: &mut Tape, images: &Tensor) -> Result<ForwardTrace> {
        self.check_input(images)?;
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let mut x = tape.leaf(images.clone());
        let mut features = Vec::with_capacity(3);
        for (block, &stride) in STRIDES.iter().enumerate() {
            let z = tape.conv2d(x, params[2 * block], params[2 * block + 1], stride)?;
            x = tape.relu(z)?;
            features.push(x);
        }
        let mut logits = Vec::with_capacity(NUM_LEVELS);
        let mut probs = Vec::with_capacity(NUM_LEVELS);
        for (level, &(block, factor)) in HEADS.iter().enumerate() {
            let w = params[6 + 2 * level];
            let b = params[7 + 2 * level];
            let head = tape.conv2d(features[block], w, b, 1)?;
            let up = tape.upsample(head, factor)?;
            logits.push(up);
            probs.push(tape.softmax(up)?);
        }
        Ok(ForwardTrace { params, logits, probs })
    }

    /// Upsampled logits per level.
    pub fn forward(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let trace = self.forward_traced(&mut tape, images)?;
        Ok(trace.logits.iter().map(|&v| tape.value(v).clone()).collect())
    }

    pub fn to_bytes(&self, iteration: u32) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let mut put = |v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        put(NUM_LEVELS);
        put(self.config.in_channels);
        put(self.config.num_classes);
        put(KERNEL);
        for (w, s) in self.config.widths.iter().zip(STRIDES) {
            put(*w);
            put(s);
        }
        for (block, factor) in HEADS {
            put(block);
            put(factor);
        }
        put(iteration as usize);
        put(self.params.len());
        for p in &self.params {
            put(p.shape().len());
            for &d in p.shape() {
                put(d);
            }
        }
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; returns the network and its training iteration.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<(Self, u32), String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let levels = r.u32()?;
        if levels as usize != NUM_LEVELS {
            return Err(format!("unsupported level count {levels}"));
        }
        let in_channels = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        if r.u32()? as usize != KERNEL {
            return Err("unsupported kernel size".into());
        }
        let mut widths = [0; 3];
        for (w, s) in widths.iter_mut().zip(STRIDES) {
            *w = r.u32()? as usize;
            if r.u32()? as usize != s {
                return Err("unsupported block stride".into());
            }
        }
        for (block, factor) in HEADS {
            if (r.u32()? as usize, r.u32()? as usize) != (block, factor) {
                return Err("unsupported head layout".into());
            }
        }
        let iteration = r.u32()?;
        let config = SegNetConfig {
            in_channels,
            num_classes,
            widths,
        };
        config.validate().map_err(|e| e.to_string())?;
        let count = r.u32()? as usize;
        let expected = config.param_shapes();
        if count != expected.len() {
            return Err(format!("checkpoint holds {count} tensors, expected {}", expected.len()));
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            shapes.push(shape);
        }
        if shapes != expected {
            return Err("tensor shapes do not match the recorded configuration".into());
        }
        let mut params = Vec::with_capacity(count);
        for shape in shapes {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
            params.push(Tensor::new(shape, data).map_err(|e| e.to_string())?);
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        let net = Self::from_params(config, params).map_err(|e| e.to_string())?;
        Ok((net, iteration))
    }

    pub fn save(&self, path: &Path, iteration: u32) -> Result<()> {
        fs::write(path, self.to_bytes(iteration)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, u32)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::data(path, msg))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err("checkpoint is truncated".into());
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(b: usize, side: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let data = (0..b * side * side * 3).map(|_| rng.uniform()).collect();
        Tensor::new(vec![b, side, side, 3], data).unwrap()
    }

    #[test]
    fn default_size_is_desk_scale() {
        assert!(SegNetConfig::default().param_count() <= 50_000);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let net = SegNet::zeros(SegNetConfig::default()).unwrap();
        for level in net.forward(&input(2, 8, 1)).unwrap() {
            assert!(level.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn heads_match_input_size() {
        let net = SegNet::new(SegNetConfig::default(), 3).unwrap();
        let out = net.forward(&input(1, 8, 2)).unwrap();
        assert_eq!(out.len(), NUM_LEVELS);
        for level in &out {
            assert_eq!(level.shape(), &[1, 8, 8, 4]);
        }
        let out = net.forward(&input(2, 16, 2)).unwrap();
        assert_eq!(out[HIGH_LEVEL].shape(), &[2, 16, 16, 4]);
    }

    #[test]
    fn forward_is_deterministic() {
        let a = SegNet::new(SegNetConfig::default(), 9).unwrap();
        let b = SegNet::new(SegNetConfig::default(), 9).unwrap();
        let x = input(3, 8, 4);
        let (la, lb) = (a.forward(&x).unwrap(), b.forward(&x).unwrap());
        for (p, q) in la.iter().zip(&lb) {
            let pb: Vec<u64> = p.data().iter().map(|v| v.to_bits()).collect();
            let qb: Vec<u64> = q.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(pb, qb);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = SegNet::new(SegNetConfig::default(), 1).unwrap();
        assert!(net.forward(&Tensor::zeros(&[1, 8, 8, 4])).is_err());
        assert!(net.forward(&Tensor::zeros(&[1, 10, 8, 3])).is_err());
        let mut x = Tensor::zeros(&[1, 8, 8, 3]);
        x.data_mut()[0] = f64::NAN;
        assert!(net.forward(&x).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = SegNet::new(SegNetConfig { widths: [4, 6, 8], ..Default::default() }, 5).unwrap();
        let bytes = net.to_bytes(17);
        assert_eq!(&bytes[..6], b"OTSEG1");
        let (back, it) = SegNet::from_bytes(&bytes).unwrap();
        assert_eq!(it, 17);
        assert_eq!(back, net);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let net = SegNet::new(SegNetConfig::default(), 5).unwrap();
        let mut bytes = net.to_bytes(0);
        assert!(SegNet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(SegNet::from_bytes(&bytes).unwrap_err().contains("magic"));
    }
}
