//! Named tensor store for every learned weight in the model, with seeded
//! generation and the `SEMP` binary format.
//!
//! Layout (little-endian): magic `SEMP`, `u32` tensor count, then per tensor
//! `u32` name length, UTF-8 name, `u32` rank, `u32` dims, and row-major `f32`
//! values. Tensors are written in name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SemError};

pub const PARAM_MAGIC: &[u8; 4] = b"SEMP";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    /// Row-major 2-D tensor as a matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dims[0], self.dims[1], &self.data)
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.data)
    }
}

/// Sizes of every layer in the toy model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    /// Channels of the 1/8 and 1/32 maps.
    pub channels: usize,
    /// Channels of the 1/2 refinement map.
    pub fine_channels: usize,
    /// Channels of the first two backbone stages.
    pub stem_channels: [usize; 2],
    /// Largest anchor count the structured-fusion MLP accepts.
    pub max_anchors: usize,
    /// Hidden width of every per-pixel MLP.
    pub hidden: usize,
    pub heads: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            channels: 32,
            fine_channels: 16,
            stem_channels: [8, 16],
            max_anchors: 32,
            hidden: 64,
            heads: 1,
        }
    }
}

/// Prefixes of the attention layers used by the pipeline.
pub const ATTENTION_LAYERS: [&str; 7] = [
    "coarse32.init.self",
    "coarse32.init.cross",
    "coarse8.init.self",
    "coarse8.init.cross",
    "coarse32.iter.self",
    "coarse32.iter.cross",
    "coarse8.epipolar",
];

impl ModelSpec {
    /// Every tensor name with its shape.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        let h = self.hidden;
        let [s1, s2] = self.stem_channels;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        fn conv(out: &mut Vec<(String, Vec<usize>)>, name: &str, o: usize, i: usize) {
            out.push((format!("{name}.weight"), vec![o, i, 3, 3]));
            out.push((format!("{name}.bias"), vec![o]));
        }
        fn dense(out: &mut Vec<(String, Vec<usize>)>, name: &str, o: usize, i: usize) {
            out.push((format!("{name}.weight"), vec![o, i]));
            out.push((format!("{name}.bias"), vec![o]));
        }
        conv(&mut out, "backbone.stage1", s1, 1);
        conv(&mut out, "backbone.stage2", s2, s1);
        conv(&mut out, "backbone.stage3", c, s2);
        conv(&mut out, "backbone.stage4", c, c);
        conv(&mut out, "backbone.stage5", c, c);
        conv(&mut out, "backbone.fine", self.fine_channels, s1);
        dense(&mut out, "fuse.down", c, c);
        dense(&mut out, "fuse.up", c, c);
        dense(&mut out, "structured.mlp1", h, c + 3 * self.max_anchors);
        dense(&mut out, "structured.mlp2", c, h);
        for layer in ATTENTION_LAYERS {
            for proj in ["wq", "wk", "wv", "wo"] {
                out.push((format!("{layer}.{proj}"), vec![c, c]));
            }
            dense(&mut out, &format!("{layer}.mlp1"), h, c);
            dense(&mut out, &format!("{layer}.mlp2"), c, h);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub spec: Option<ModelSpec>,
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// All-zero weights: every residual block reduces to the identity.
    pub fn zeros(spec: &ModelSpec) -> Self {
        let tensors = spec
            .layout()
            .into_iter()
            .map(|(name, dims)| (name, Tensor::zeros(&dims)))
            .collect();
        Self {
            spec: Some(*spec),
            tensors,
        }
    }

    /// Gaussian weights with standard deviation `gain / sqrt(fan_in)` and zero
    /// biases. Values are rounded through `f32` so the store survives a
    /// round trip through the `SEMP` format unchanged.
    pub fn seeded(spec: &ModelSpec, seed: u64, gain: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, dims) in spec.layout() {
            let mut t = Tensor::zeros(&dims);
            if !name.ends_with(".bias") {
                let fan_in: usize = dims[1..].iter().product();
                let std = gain / (fan_in as f64).sqrt();
                for v in t.data.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = (z * std) as f32 as f64;
                }
            }
            tensors.insert(name, t);
        }
        Self {
            spec: Some(*spec),
            tensors,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| SemError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| SemError::MissingParam(name.to_string()))
    }

    /// Fetches a tensor and checks its shape.
    pub fn expect(&self, name: &str, dims: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        if t.dims != dims {
            return Err(SemError::ParamShapeMismatch {
                name: name.to_string(),
                expected: dims.to_vec(),
                found: t.dims.clone(),
            });
        }
        Ok(t)
    }

    pub fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        Ok(self.expect(name, &[rows, cols])?.to_matrix())
    }

    pub fn vector(&self, name: &str, len: usize) -> Result<DVector<f64>> {
        Ok(self.expect(name, &[len])?.to_vector())
    }

    /// Infers the model sizes from tensor shapes (used after loading a file).
    pub fn infer_spec(&self) -> Result<ModelSpec> {
        let dim = |name: &str, axis: usize| -> Result<usize> {
            self.get(name)?
                .dims
                .get(axis)
                .copied()
                .ok_or_else(|| SemError::Format(format!("tensor `{name}` has too few dimensions")))
        };
        let channels = dim("fuse.down.weight", 0)?;
        let hidden = dim("structured.mlp1.weight", 0)?;
        let sf_in = dim("structured.mlp1.weight", 1)?;
        if sf_in < channels || (sf_in - channels) % 3 != 0 {
            return Err(SemError::Format(format!(
                "structured MLP input width {sf_in} is not channels + 3 * anchors"
            )));
        }
        Ok(ModelSpec {
            channels,
            fine_channels: dim("backbone.fine.weight", 0)?,
            stem_channels: [dim("backbone.stage1.weight", 0)?, dim("backbone.stage2.weight", 0)?],
            max_anchors: (sf_in - channels) / 3,
            hidden,
            heads: self.spec.map_or(1, |s| s.heads),
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PARAM_MAGIC)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for d in &t.dims {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in &t.data {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| SemError::Format("truncated parameter file (missing SEMP magic)".into()))?;
        if &magic != PARAM_MAGIC {
            return Err(SemError::Format("bad parameter file: expected SEMP magic".into()));
        }
        let count = read_u32(&mut r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| SemError::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let dims = (0..rank)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            tensors.insert(name, Tensor { dims, data });
        }
        let mut store = Self { spec: None, tensors };
        store.spec = store.infer_spec().ok();
        Ok(store)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Per-pixel two-layer perceptron: `W2 relu(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl Mlp {
    pub fn load(store: &ParamStore, prefix: &str, input: usize, hidden: usize, output: usize) -> Result<Self> {
        Ok(Self {
            w1: store.matrix(&format!("{prefix}.mlp1.weight"), hidden, input)?,
            b1: store.vector(&format!("{prefix}.mlp1.bias"), hidden)?,
            w2: store.matrix(&format!("{prefix}.mlp2.weight"), output, hidden)?,
            b2: store.vector(&format!("{prefix}.mlp2.bias"), output)?,
        })
    }

    pub fn input_width(&self) -> usize {
        self.w1.ncols()
    }

    /// Applies the MLP to every row of `x` (one pixel per row).
    pub fn forward_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut hidden = x * self.w1.transpose();
        for mut row in hidden.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(self.b1.iter()) {
                *v = (*v + b).max(0.0);
            }
        }
        let mut out = hidden * self.w2.transpose();
        for mut row in out.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(self.b2.iter()) {
                *v += b;
            }
        }
        out
    }
}
