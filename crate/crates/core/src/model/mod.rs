//! The forecasting network: stacked depthwise conv blocks over the Data
//! Frame slots, a dense ReLU layer with dropout on its input, and a linear
//! regression head.

mod gradcheck;
mod io;
mod network;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numops::{pooled_len, wide_len, NumError};

pub use gradcheck::{
    gradcheck, random_tiny_architecture, tiny_architecture, GradcheckOptions, GradcheckReport,
    TensorCheck,
};
pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, ModelFile, MAGIC, VERSION};
pub(crate) use network::backward_accumulate;
pub use network::{backward, backward_with_input, conv_block_forward, forward, ForwardTrace, Mode};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("trace does not belong to these parameters: {0}")]
    TraceMismatch(String),
    #[error("bad magic bytes {0:?}, not a model file")]
    BadMagic([u8; 4]),
    #[error("unsupported model file version {0}, expected {VERSION}")]
    UnsupportedVersion(u32),
    #[error("payload length mismatch: manifest needs {expected} bytes, file holds {actual}")]
    PayloadLengthMismatch { expected: u64, actual: u64 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("manifest does not match the architecture: {0}")]
    Manifest(String),
    #[error("non-finite value in tensor `{0}`")]
    NonFinite(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Network hyperparameters. `filter_sizes`, `pool_sizes` and `maps` hold one
/// entry per conv order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub num_slots: usize,
    pub rows: usize,
    pub window: usize,
    pub filter_sizes: Vec<usize>,
    pub pool_sizes: Vec<usize>,
    pub maps: Vec<usize>,
    pub dense_dim: usize,
    pub dropout: f64,
    #[serde(default)]
    pub activation: Activation,
}

// Guards allocation sizes when architectures come from untrusted files.
const MAX_PARAMS: usize = 1 << 31;

impl Architecture {
    /// Three orders with the week/month/season filter and pool lengths.
    pub fn standard(
        num_slots: usize,
        rows: usize,
        window: usize,
        maps: usize,
        dense_dim: usize,
    ) -> Self {
        Self {
            num_slots,
            rows,
            window,
            filter_sizes: vec![7, 4, 3],
            pool_sizes: vec![7, 4, 3],
            maps: vec![maps; 3],
            dense_dim,
            dropout: 0.2,
            activation: Activation::Relu,
        }
    }

    pub fn num_orders(&self) -> usize {
        self.maps.len()
    }

    /// Input maps of order `i` (0-based): the slots for the first order.
    pub fn input_maps(&self, order: usize) -> usize {
        if order == 0 {
            self.num_slots
        } else {
            self.maps[order - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::InvalidArchitecture(msg));
        let h = self.maps.len();
        if h == 0 {
            return bad("at least one conv order is required".into());
        }
        if self.filter_sizes.len() != h || self.pool_sizes.len() != h {
            return bad(format!(
                "filter_sizes ({}), pool_sizes ({}) and maps ({h}) must have equal length",
                self.filter_sizes.len(),
                self.pool_sizes.len()
            ));
        }
        for (name, v) in [
            ("num_slots", self.num_slots),
            ("rows", self.rows),
            ("window", self.window),
            ("dense_dim", self.dense_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        for (name, list) in [
            ("filter_sizes", &self.filter_sizes),
            ("pool_sizes", &self.pool_sizes),
            ("maps", &self.maps),
        ] {
            if list.contains(&0) {
                return bad(format!("{name} entries must be >= 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout));
        }
        let chain = self
            .checked_chain()
            .ok_or_else(|| ModelError::InvalidArchitecture("shape chain overflows".into()))?;
        if chain.contains(&0) {
            return bad(format!("shape chain {chain:?} degenerates"));
        }
        match Layout::try_new(self) {
            Some(l) if l.total <= MAX_PARAMS => Ok(()),
            _ => bad("parameter count too large".into()),
        }
    }

    fn checked_chain(&self) -> Option<Vec<usize>> {
        let mut chain = vec![self.window];
        let mut len = self.window;
        for (&m, &k) in self.filter_sizes.iter().zip(&self.pool_sizes) {
            let conv = len.checked_add(m)?.checked_sub(1)?;
            len = pooled_len(conv, k);
            chain.push(conv);
            chain.push(len);
        }
        Some(chain)
    }

    /// Every stage length: `T, conv_1, pool_1, conv_2, pool_2, ...`.
    pub fn shape_chain(&self) -> Vec<usize> {
        self.checked_chain().expect("validated architecture")
    }

    /// Representation length `L_i` entering order `i` (0-based), and after the
    /// last order at index `h`.
    pub fn order_len(&self, order: usize) -> usize {
        let mut len = self.window;
        for i in 0..order {
            len = pooled_len(wide_len(len, self.filter_sizes[i]), self.pool_sizes[i]);
        }
        len
    }

    /// Length of the flattened top-order representation, `K_h · d · L_h`.
    pub fn flatten_len(&self) -> usize {
        self.maps[self.num_orders() - 1] * self.rows * self.order_len(self.num_orders())
    }
}

/// Name, shape and position of one tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Tensor order: `F1, B1, F2, B2, ..., H, w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
}

impl Layout {
    fn try_new(arch: &Architecture) -> Option<Self> {
        let mut tensors = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, shape: Vec<usize>| -> Option<()> {
            let len = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b))?;
            tensors.push(TensorSpec {
                name,
                shape,
                offset,
                len,
            });
            offset = offset.checked_add(len)?;
            Some(())
        };
        let d = arch.rows;
        for i in 0..arch.num_orders() {
            let (out, inp) = (arch.maps[i], arch.input_maps(i));
            push(
                format!("F{}", i + 1),
                vec![out, inp, d, arch.filter_sizes[i]],
            )?;
            push(format!("B{}", i + 1), vec![out, inp, d])?;
        }
        let flat = arch
            .maps
            .last()?
            .checked_mul(d)?
            .checked_mul(arch.checked_chain()?.last().copied()?)?;
        push("H".into(), vec![flat, arch.dense_dim])?;
        push("w".into(), vec![arch.dense_dim.checked_add(1)?])?;
        Some(Self {
            tensors,
            total: offset,
        })
    }

    pub fn new(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self::try_new(arch).expect("validated architecture"))
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Tensor covering flat index `i`.
    pub fn tensor_at(&self, i: usize) -> Option<&TensorSpec> {
        self.tensors
            .iter()
            .find(|t| (t.offset..t.offset + t.len).contains(&i))
    }
}

/// All learnable tensors in one flat vector, addressed through [`Layout`].
/// Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    layout: Layout,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        let layout = Layout::new(arch)?;
        Ok(Self {
            arch: arch.clone(),
            values: vec![0.0; layout.total],
            layout,
        })
    }

    pub fn from_values(arch: &Architecture, values: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(arch)?;
        if values.len() != layout.total {
            return Err(ModelError::Shape(format!(
                "architecture needs {} parameters, got {}",
                layout.total,
                values.len()
            )));
        }
        Ok(Self {
            arch: arch.clone(),
            layout,
            values,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .find(name)
            .map(|t| &self.values[t.offset..t.offset + t.len])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let t = self.layout.find(name)?.clone();
        Some(&mut self.values[t.offset..t.offset + t.len])
    }

    /// Offset of the `d×m` bank `F^{order+1}_{j,k}`.
    pub(crate) fn filter_offset(&self, order: usize, j: usize, k: usize) -> usize {
        let t = &self.layout.tensors[2 * order];
        let (inp, d, m) = (t.shape[1], t.shape[2], t.shape[3]);
        t.offset + (j * inp + k) * d * m
    }

    pub(crate) fn bias_offset(&self, order: usize, j: usize, k: usize) -> usize {
        let t = &self.layout.tensors[2 * order + 1];
        let (inp, d) = (t.shape[1], t.shape[2]);
        t.offset + (j * inp + k) * d
    }

    pub fn filter(&self, order: usize, j: usize, k: usize) -> &[f64] {
        let off = self.filter_offset(order, j, k);
        &self.values[off..off + self.arch.rows * self.arch.filter_sizes[order]]
    }

    pub fn bias(&self, order: usize, j: usize, k: usize) -> &[f64] {
        let off = self.bias_offset(order, j, k);
        &self.values[off..off + self.arch.rows]
    }

    /// Dense matrix `H`, row-major `(flatten_len) × n`.
    pub fn dense(&self) -> &[f64] {
        let t = &self.layout.tensors[2 * self.arch.num_orders()];
        &self.values[t.offset..t.offset + t.len]
    }

    /// Regression weights, bias first.
    pub fn head(&self) -> &[f64] {
        let t = &self.layout.tensors[2 * self.arch.num_orders() + 1];
        &self.values[t.offset..t.offset + t.len]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Filters and `H` uniform in `±sqrt(6 / (fan_in + fan_out))`; biases and
/// head weights zero.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = params.layout.tensors.clone();
    for (i, spec) in specs.iter().enumerate() {
        let (fan_in, fan_out) = if spec.name == "H" {
            (spec.shape[0], spec.shape[1])
        } else if spec.name.starts_with('F') {
            let order = i / 2;
            let m = arch.filter_sizes[order];
            (arch.input_maps(order) * m, arch.maps[order] * m)
        } else {
            continue;
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in &mut params.values[spec.offset..spec.offset + spec.len] {
            *v = rng.random_range(-limit..=limit);
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_arch() -> Architecture {
        Architecture {
            num_slots: 2,
            rows: 2,
            window: 10,
            filter_sizes: vec![3],
            pool_sizes: vec![2],
            maps: vec![2],
            dense_dim: 3,
            dropout: 0.2,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn standard_shape_chain() {
        let arch = Architecture::standard(4, 25, 84, 128, 1024);
        arch.validate().unwrap();
        assert_eq!(arch.shape_chain(), vec![84, 90, 13, 16, 4, 6, 2]);
        assert_eq!(arch.flatten_len(), 128 * 25 * 2);
        let one = Architecture {
            rows: 1,
            filter_sizes: vec![7],
            pool_sizes: vec![7],
            maps: vec![1],
            ..Architecture::standard(1, 1, 84, 1, 4)
        };
        assert_eq!(one.order_len(1), 13);
    }

    #[test]
    fn layout_names_and_sizes() {
        let arch = Architecture::standard(4, 3, 28, 2, 5);
        let layout = Layout::new(&arch).unwrap();
        let names: Vec<&str> = layout.tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["F1", "B1", "F2", "B2", "F3", "B3", "H", "w"]);
        assert_eq!(layout.find("F1").unwrap().shape, vec![2, 4, 3, 7]);
        assert_eq!(layout.find("H").unwrap().shape, vec![arch.flatten_len(), 5]);
        assert_eq!(
            layout.total,
            layout.tensors.iter().map(|t| t.len).sum::<usize>()
        );
        assert_eq!(layout.tensor_at(layout.total - 1).unwrap().name, "w");
    }

    #[test]
    fn validation_rejects_bad_architectures() {
        let base = tiny_arch();
        let cases = [
            Architecture {
                maps: vec![],
                filter_sizes: vec![],
                pool_sizes: vec![],
                ..base.clone()
            },
            Architecture {
                maps: vec![2, 2],
                ..base.clone()
            },
            Architecture {
                pool_sizes: vec![0],
                ..base.clone()
            },
            Architecture {
                window: 0,
                ..base.clone()
            },
            Architecture {
                dropout: 1.0,
                ..base.clone()
            },
            Architecture {
                maps: vec![usize::MAX],
                ..base.clone()
            },
        ];
        for arch in cases {
            assert!(arch.validate().is_err(), "{arch:?}");
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_head() {
        let arch = Architecture::standard(4, 3, 28, 3, 8);
        let a = init_params(&arch, 42).unwrap();
        let b = init_params(&arch, 42).unwrap();
        assert_eq!(
            a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a, init_params(&arch, 43).unwrap());
        for name in ["B1", "B2", "B3", "w"] {
            assert!(a.tensor(name).unwrap().iter().all(|&v| v == 0.0), "{name}");
        }
        let f1 = a.tensor("F1").unwrap();
        let limit = (6.0f64 / (4 * 7 + 3 * 7) as f64).sqrt();
        assert!(f1.iter().all(|v| v.abs() <= limit));
        assert!(f1.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn dense_init_mean_is_statistically_zero() {
        let arch = Architecture {
            maps: vec![16],
            dense_dim: 256,
            ..tiny_arch()
        };
        let p = init_params(&arch, 5).unwrap();
        let h = p.dense();
        let n = h.len() as f64;
        let limit = (6.0 / (arch.flatten_len() + 256) as f64).sqrt();
        // Uniform(-a, a) has standard deviation a / sqrt(3).
        let se = limit / 3f64.sqrt() / n.sqrt();
        let mean = h.iter().sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * se, "mean {mean}, se {se}");
        assert!(h.iter().all(|v| v.abs() <= limit));
    }
}
