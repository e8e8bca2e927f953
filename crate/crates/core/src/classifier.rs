//! Small 1-D convolutional classifier with an exposed penultimate
//! feature layer.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fourier::BandFilter;
use crate::signal_io::SignalBatch;
use crate::tensor::Tensor;

const PARAM_MAGIC: &[u8; 8] = b"DNAPARAM";
const PARAM_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub conv_blocks: Vec<ConvBlock>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub input_length: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let block = |out_channels, kernel| ConvBlock {
            out_channels,
            kernel,
            stride: 2,
        };
        Self {
            conv_blocks: vec![block(8, 7), block(16, 7), block(32, 5)],
            feature_dim: 64,
            num_classes: 3,
            input_length: 512,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_blocks.is_empty() {
            return Err(Error::Config(
                "architecture needs at least one conv block".into(),
            ));
        }
        if self.feature_dim == 0 || self.num_classes < 2 || self.input_length == 0 {
            return Err(Error::Config(
                "feature_dim, input_length must be positive and num_classes ≥ 2".into(),
            ));
        }
        let mut len = self.input_length;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.stride == 0 || b.kernel == 0 || b.out_channels == 0 {
                return Err(Error::Config(format!(
                    "conv block {i}: kernel, stride and channels must be ≥ 1"
                )));
            }
            let pad = b.kernel / 2;
            if b.kernel > len + 2 * pad {
                return Err(Error::Config(format!(
                    "conv block {i}: kernel exceeds input"
                )));
            }
            len = (len + 2 * pad - b.kernel) / b.stride + 1;
        }
        Ok(())
    }

    /// Shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut c_in = 1;
        for b in &self.conv_blocks {
            shapes.push(vec![b.out_channels, c_in, b.kernel]);
            shapes.push(vec![b.out_channels]);
            c_in = b.out_channels;
        }
        shapes.push(vec![c_in, self.feature_dim]);
        shapes.push(vec![self.feature_dim]);
        shapes.push(vec![self.feature_dim, self.num_classes]);
        shapes.push(vec![self.num_classes]);
        shapes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub arch: ArchConfig,
    /// Conv weight/bias pairs, then feature dense, then output dense.
    pub tensors: Vec<Tensor>,
}

fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        3 => shape[1] * shape[2],
        2 => shape[0],
        _ => 1,
    }
}

impl ClassifierParams {
    /// He-normal weights (`std = sqrt(2/fan_in)`), zero biases.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = arch
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                let std = (2.0 / fan_in(&shape) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite init std");
                let n = shape.iter().product();
                let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
                Tensor::new(shape, data).expect("shape matches data")
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn check(&self) -> Result<()> {
        let shapes = self.arch.param_shapes();
        if shapes.len() != self.tensors.len()
            || shapes
                .iter()
                .zip(&self.tensors)
                .any(|(s, t)| s != t.shape())
        {
            return Err(Error::Format(
                "parameter shapes do not match architecture".into(),
            ));
        }
        if self.tensors.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("classifier parameters"));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arch = serde_json::to_vec(&self.arch)?;
        let mut out = Vec::with_capacity(16 + arch.len() + self.num_values() * 8);
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
        out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        out.extend_from_slice(&arch);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != PARAM_MAGIC {
            return Err(Error::Format("not a parameter file".into()));
        }
        let version = r.u32()?;
        if version != PARAM_VERSION {
            return Err(Error::Format(format!(
                "parameter format version {version}, expected {PARAM_VERSION}"
            )));
        }
        let arch_len = r.u32()? as usize;
        let arch: ArchConfig = serde_json::from_slice(r.take(arch_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        let params = Self { arch, tensors };
        params.check()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Parameters placed on a graph.
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    pub fn bind(g: &mut Graph, params: &ClassifierParams, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Self { vars }
    }
}

/// Records the network on `g`: `x[N×1×L] → (logits[N×C], features[N×D])`.
///
/// `filter`, when set, band-filters the input before the first layer.
pub fn forward_graph(
    g: &mut Graph,
    arch: &ArchConfig,
    bound: &BoundParams,
    x: Var,
    filter: Option<&BandFilter>,
) -> Result<(Var, Var)> {
    let xs = g.value(x).shape().to_vec();
    if xs.len() != 3 || xs[1] != 1 || xs[2] != arch.input_length {
        return Err(Error::shape(
            "classifier",
            format!("input {xs:?}, expected [N, 1, {}]", arch.input_length),
        ));
    }
    let mut h = match filter {
        Some(f) => g.row_map(x, std::sync::Arc::new(f.clone()))?,
        None => x,
    };
    let v = &bound.vars;
    for (i, b) in arch.conv_blocks.iter().enumerate() {
        h = g.conv1d(h, v[2 * i], Some(v[2 * i + 1]), b.stride, b.kernel / 2)?;
        h = g.relu(h)?;
    }
    let k = 2 * arch.conv_blocks.len();
    let pooled = g.global_avg_pool(h)?;
    let z = g.matmul(pooled, v[k])?;
    let z = g.add_row_bias(z, v[k + 1])?;
    let features = g.relu(z)?;
    let logits = g.matmul(features, v[k + 2])?;
    let logits = g.add_row_bias(logits, v[k + 3])?;
    Ok((logits, features))
}

/// Inference-only forward pass returning `(logits, features)`.
pub fn forward(
    params: &ClassifierParams,
    batch: &SignalBatch,
    filter: Option<&BandFilter>,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, false);
    let x = g.constant(batch.x.clone());
    let (logits, features) = forward_graph(&mut g, &params.arch, &bound, x, filter)?;
    Ok((g.value(logits).clone(), g.value(features).clone()))
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn predict(
    params: &ClassifierParams,
    batch: &SignalBatch,
    filter: Option<&BandFilter>,
) -> Result<Vec<usize>> {
    let (logits, _) = forward(params, batch, filter)?;
    Ok(argmax_rows(&logits))
}
