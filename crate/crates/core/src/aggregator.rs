//! Transformer set encoder that turns a variable number of exemplar
//! embeddings into one vision-based classifier.
//!
//! The input sequence is `[cls, e_1, …, e_k]` with no positional encoding, so
//! the output does not depend on exemplar order. Blocks are pre-norm:
//!
//! ```text
//! x = x + Attention(LN1(x))
//! x = x + W2 · GELU(W1 · LN2(x) + b1) + b2
//! ```
//!
//! The classifier is the final CLS row, L2-normalized.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_header, write_atomic, Reader, Writer};
use crate::numerics::{ParamSet, Scalar, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OVAG";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const CLS_INIT_STD: f64 = 0.02;

const PER_BLOCK: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregatorConfig {
    pub blocks: usize,
    pub dim: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            dim: 512,
            mlp_dim: 2048,
            heads: 8,
            seed: 0,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("aggregator needs at least one block".into()));
        }
        if self.dim == 0 || self.mlp_dim == 0 || self.heads == 0 {
            return Err(Error::Config(format!("zero-sized aggregator dimension in {self:?}")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dimension {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// `N·(4d² + 2·2d + d·mlp + mlp + mlp·d + d) + d`
    pub fn param_count(&self) -> usize {
        let (d, m) = (self.dim, self.mlp_dim);
        self.blocks * (4 * d * d + 2 * 2 * d + d * m + m + m * d + d) + d
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Parameter handles of one block, as recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_scale: Var,
    pub ln1_shift: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_scale: Var,
    pub ln2_shift: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// All aggregator parameters bound to tape variables.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub blocks: Vec<BlockVars>,
    pub cls: Var,
}

impl ModelVars {
    /// `vars` must follow the declaration order of [`init_model`].
    pub fn bind(config: &AggregatorConfig, vars: &[Var]) -> Result<Self> {
        let expected = config.blocks * PER_BLOCK + 1;
        if vars.len() != expected {
            return Err(Error::Shape {
                op: "bind",
                detail: format!("{} parameter handles, expected {expected}", vars.len()),
            });
        }
        let blocks = vars[..config.blocks * PER_BLOCK]
            .chunks(PER_BLOCK)
            .map(|c| BlockVars {
                ln1_scale: c[0],
                ln1_shift: c[1],
                wq: c[2],
                wk: c[3],
                wv: c[4],
                wo: c[5],
                ln2_scale: c[6],
                ln2_shift: c[7],
                w1: c[8],
                b1: c[9],
                w2: c[10],
                b2: c[11],
            })
            .collect();
        Ok(Self {
            blocks,
            cls: vars[vars.len() - 1],
        })
    }
}

fn attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    config: &AggregatorConfig,
    b: &BlockVars,
    queries_in: Var,
    context: Var,
) -> Result<Var> {
    let q = tape.matmul(queries_in, b.wq)?;
    let k = tape.matmul(context, b.wk)?;
    let v = tape.matmul(context, b.wv)?;
    let hd = config.head_dim();
    let inv_sqrt = T::cast_from(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, inv_sqrt)?;
        let weights = tape.softmax(scores)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    tape.matmul(joined, b.wo)
}

fn mlp<T: Scalar>(tape: &mut Tape<'_, T>, b: &BlockVars, x: Var) -> Result<Var> {
    let h = tape.layer_norm(x, b.ln2_scale, b.ln2_shift)?;
    let h = tape.matmul(h, b.w1)?;
    let h = tape.add_row(h, b.b1)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, b.w2)?;
    let h = tape.add_row(h, b.b2)?;
    tape.add(x, h)
}

/// Records the aggregator on `tape` for a `k x d` exemplar matrix and returns
/// the normalized `1 x d` classifier.
pub fn forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    config: &AggregatorConfig,
    vars: &ModelVars,
    exemplars: Var,
) -> Result<Var> {
    let d = tape.value(exemplars).cols();
    if d != config.dim {
        return Err(Error::Validation(format!(
            "exemplar dimension {d} != model dimension {}",
            config.dim
        )));
    }
    let mut x = tape.concat_rows(&[vars.cls, exemplars])?;
    let last = vars.blocks.len() - 1;
    for (i, b) in vars.blocks.iter().enumerate() {
        let h = tape.layer_norm(x, b.ln1_scale, b.ln1_shift)?;
        if i < last {
            let a = attention(tape, config, b, h, h)?;
            x = tape.add(x, a)?;
            x = mlp(tape, b, x)?;
        } else {
            // only the CLS row is read after the final block
            let h_cls = tape.slice_rows(h, 0, 1)?;
            let a = attention(tape, config, b, h_cls, h)?;
            let x_cls = tape.slice_rows(x, 0, 1)?;
            x = tape.add(x_cls, a)?;
            x = mlp(tape, b, x)?;
        }
    }
    tape.l2_normalize_rows(x)
}

/// Aggregator parameters plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorModel {
    config: AggregatorConfig,
    params: ParamSet<f32>,
}

/// Builds a model with seeded random weights.
///
/// Projections are drawn from `N(0, 1/fan_in)`, layer-norm scales start at 1
/// and shifts and biases at 0, and the CLS token from `N(0, 0.02²)`.
pub fn init_model(config: AggregatorConfig) -> Result<AggregatorModel> {
    config.validate()?;
    let (d, m) = (config.dim, config.mlp_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut normal = |rows: usize, cols: usize, std: f64| -> Tensor<f32> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut rng) as f32).collect();
        Tensor::matrix(rows, cols, data).expect("consistent shape")
    };
    let proj_std = 1.0 / (d as f64).sqrt();
    let mlp_out_std = 1.0 / (m as f64).sqrt();

    let mut params = ParamSet::new();
    for b in 0..config.blocks {
        let p = |s: &str| format!("block{b}.{s}");
        params.insert(p("ln1.scale"), Tensor::filled(&[d], 1.0))?;
        params.insert(p("ln1.shift"), Tensor::zeros(&[d]))?;
        params.insert(p("attn.wq"), normal(d, d, proj_std))?;
        params.insert(p("attn.wk"), normal(d, d, proj_std))?;
        params.insert(p("attn.wv"), normal(d, d, proj_std))?;
        params.insert(p("attn.wo"), normal(d, d, proj_std))?;
        params.insert(p("ln2.scale"), Tensor::filled(&[d], 1.0))?;
        params.insert(p("ln2.shift"), Tensor::zeros(&[d]))?;
        params.insert(p("mlp.w1"), normal(d, m, proj_std))?;
        params.insert(p("mlp.b1"), Tensor::zeros(&[m]))?;
        params.insert(p("mlp.w2"), normal(m, d, mlp_out_std))?;
        params.insert(p("mlp.b2"), Tensor::zeros(&[d]))?;
    }
    let cls = normal(1, d, CLS_INIT_STD).into_data();
    params.insert("cls", Tensor::vector(cls))?;
    debug_assert_eq!(params.numel(), config.param_count());
    Ok(AggregatorModel { config, params })
}

impl AggregatorModel {
    pub fn from_params(config: AggregatorConfig, params: ParamSet<f32>) -> Result<Self> {
        config.validate()?;
        let template = init_model(AggregatorConfig { seed: 0, ..config })?;
        if params.names() != template.params.names() {
            return Err(Error::Validation(
                "parameter names do not match the aggregator layout".into(),
            ));
        }
        for (a, b) in params.values().iter().zip(template.params.values()) {
            if a.shape() != b.shape() {
                return Err(Error::Validation(
                    "parameter shapes do not match the aggregator layout".into(),
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<f32> {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Classifier for one exemplar set (any `k ≥ 1`).
    pub fn aggregate<E: AsRef<[f32]>>(&self, exemplars: &[E]) -> Result<Vec<f32>> {
        aggregate_with(&self.config, &self.params, exemplars)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        for v in [c.blocks, c.dim, c.mlp_dim, c.heads] {
            w.u32(u32::try_from(v).map_err(|_| Error::Validation(format!("config value {v} exceeds u32")))?);
        }
        w.u64(c.seed);
        w.u64(self.params.numel() as u64);
        for v in self.params.values() {
            w.f32s(v.data());
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        read_header(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let config = AggregatorConfig {
            blocks: r.u32()? as usize,
            dim: r.u32()? as usize,
            mlp_dim: r.u32()? as usize,
            heads: r.u32()? as usize,
            seed: r.u64()?,
        };
        config
            .validate()
            .map_err(|e| Error::Corruption(format!("checkpoint config: {e}")))?;
        let count = r.u64()? as usize;
        if count != config.param_count() {
            return Err(Error::Corruption(format!(
                "checkpoint holds {count} parameters, config implies {}",
                config.param_count()
            )));
        }
        let mut model = init_model(AggregatorConfig { seed: 0, ..config })?;
        model.config = config;
        for id in 0..model.params.len() {
            let n = model.params.value(id).len();
            let data = r.f32s(n)?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "non-finite value in parameter `{}`",
                    model.params.names()[id]
                )));
            }
            model.params.value_mut(id).data_mut().copy_from_slice(&data);
        }
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Forward pass with explicit parameters, in either precision.
pub fn aggregate_with<T: Scalar, E: AsRef<[f32]>>(
    config: &AggregatorConfig,
    params: &ParamSet<T>,
    exemplars: &[E],
) -> Result<Vec<T>> {
    if exemplars.is_empty() {
        return Err(Error::Parameter("empty exemplar set".into()));
    }
    let mut data = Vec::with_capacity(exemplars.len() * config.dim);
    for (i, e) in exemplars.iter().enumerate() {
        let e = e.as_ref();
        if e.len() != config.dim {
            return Err(Error::Validation(format!(
                "exemplar {i} has dimension {}, model expects {}",
                e.len(),
                config.dim
            )));
        }
        data.extend(e.iter().map(|&v| T::cast_from(v as f64)));
    }
    let mut tape = Tape::new();
    let vars = tape.params(params)?;
    let vars = ModelVars::bind(config, &vars)?;
    let input = tape.constant(Tensor::matrix(exemplars.len(), config.dim, data)?)?;
    let out = forward(&mut tape, config, &vars, input)?;
    Ok(tape.value(out).data().to_vec())
}
