//! Trainable embedder: a small multilayer perceptron mapping raw feature
//! vectors to (optionally L2-normalized) descriptors, with exact analytic
//! gradients and a flat parameter vector that is the unit exchanged between
//! clients and servers.
//!
//! Layer `l` stores its weight as an `[out, in]` row-major block followed by
//! its `[out]` bias, so `y = W x + b`. Hidden layers apply the configured
//! nonlinearity; the output layer is linear.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GeoSample, SampleId};
use crate::seed::{self, Stream};

/// Norms below this get this value added before dividing.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub l2_normalize: bool,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec {
            input_dim: 32,
            hidden_dims: vec![64],
            output_dim: 16,
            activation: Activation::Relu,
            l2_normalize: true,
        }
    }
}

impl EmbedderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config("embedder dimensions must all be >= 1"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }

    pub fn layout(&self) -> Vec<LayerSlot> {
        let mut slots = Vec::new();
        let mut offset = 0;
        for (l, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            slots.push(LayerSlot {
                name: format!("layer{l}.weight"),
                offset,
                shape: vec![fan_out, fan_in],
            });
            offset += fan_in * fan_out;
            slots.push(LayerSlot {
                name: format!("layer{l}.bias"),
                offset,
                shape: vec![fan_out],
            });
            offset += fan_out;
        }
        slots
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayerSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat model parameters with their layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<LayerSlot>,
}

impl ParamVector {
    pub fn from_parts(values: Vec<f64>, layout: Vec<LayerSlot>) -> Result<Self> {
        let mut expected = 0;
        for slot in &layout {
            if slot.offset != expected {
                return Err(Error::invalid(format!(
                    "layout slot {} starts at {} but previous slot ends at {expected}",
                    slot.name, slot.offset
                )));
            }
            expected += slot.len();
        }
        if expected != values.len() {
            return Err(Error::shape(
                format!("{expected} parameters"),
                format!("{}", values.len()),
            ));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(spec: &EmbedderSpec) -> Self {
        ParamVector {
            values: vec![0.0; spec.param_count()],
            layout: spec.layout(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &[LayerSlot] {
        &self.layout
    }

    pub fn slot(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len()])
    }

    pub fn same_shape(&self, other: &ParamVector) -> bool {
        self.values.len() == other.values.len() && self.layout == other.layout
    }

    pub fn check_spec(&self, spec: &EmbedderSpec) -> Result<()> {
        if self.values.len() != spec.param_count() || self.layout != spec.layout() {
            return Err(Error::shape(
                format!("{} parameters for spec", spec.param_count()),
                format!("{}", self.values.len()),
            ));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Short hex digest of the little-endian value bytes.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    const MAGIC: &'static [u8; 8] = b"PLFLPV01";

    /// Binary checkpoint: magic, slot count, per-slot `(name, offset, shape)`,
    /// value count, then the values as little-endian f64.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&(self.layout.len() as u32).to_le_bytes())?;
        for slot in &self.layout {
            let name = slot.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(slot.offset as u64).to_le_bytes())?;
            w.write_all(&(slot.shape.len() as u32).to_le_bytes())?;
            for &d in &slot.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let n_slots = read_u32(&mut r)? as usize;
        if n_slots > 1 << 16 {
            return Err(Error::Checkpoint(format!("implausible slot count {n_slots}")));
        }
        let mut layout = Vec::with_capacity(n_slots);
        for _ in 0..n_slots {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 1 << 12 {
                return Err(Error::Checkpoint("slot name too long".into()));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name =
                String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let offset = read_u64(&mut r)? as usize;
            let ndim = read_u32(&mut r)? as usize;
            if ndim > 8 {
                return Err(Error::Checkpoint(format!("slot {name} has {ndim} dims")));
            }
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            layout.push(LayerSlot {
                name,
                offset,
                shape,
            });
        }
        let count = read_u64(&mut r)? as usize;
        let declared: usize = layout.iter().map(LayerSlot::len).sum();
        if count != declared {
            return Err(Error::Checkpoint(format!(
                "value count {count} does not match layout total {declared}"
            )));
        }
        let mut values = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        ParamVector::from_parts(values, layout).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
pub fn init_params(spec: &EmbedderSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = seed::rng(seed, Stream::Init, &[]);
    let mut params = ParamVector::zeros(spec);
    for slot in spec.layout() {
        if slot.shape.len() != 2 {
            continue;
        }
        let bound = 1.0 / (slot.shape[1] as f64).sqrt();
        for v in &mut params.values[slot.offset..slot.offset + slot.len()] {
            *v = rng.random_range(-bound..bound);
        }
    }
    Ok(params)
}

/// Row-major `n x dim` matrix of descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptors {
    data: Vec<f64>,
    dim: usize,
}

impl Descriptors {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::shape(dim, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Descriptors { data, dim })
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Descriptors tagged with the sample ids they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorBatch {
    pub ids: Vec<SampleId>,
    pub descriptors: Descriptors,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    n: usize,
    input: Vec<f64>,
    /// Per layer: pre-activation and post-activation (`n x fan_out`).
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    /// Output-layer values before normalization.
    raw: Vec<f64>,
    output: Descriptors,
}

impl Trace {
    pub fn output(&self) -> &Descriptors {
        &self.output
    }

    pub fn into_output(self) -> Descriptors {
        self.output
    }
}

fn gather_input<R: AsRef<[f64]>>(spec: &EmbedderSpec, x: &[R]) -> Result<Vec<f64>> {
    let mut input = Vec::with_capacity(x.len() * spec.input_dim);
    for row in x {
        let row = row.as_ref();
        if row.len() != spec.input_dim {
            return Err(Error::shape(
                format!("feature width {}", spec.input_dim),
                row.len(),
            ));
        }
        input.extend_from_slice(row);
    }
    Ok(input)
}

/// `out[r][o] = b[o] + sum_i w[o][i] * inp[r][i]`, summed left to right.
fn affine(inp: &[f64], n: usize, fan_in: usize, w: &[f64], b: &[f64], out: &mut Vec<f64>) {
    let fan_out = b.len();
    out.clear();
    out.reserve(n * fan_out);
    for r in 0..n {
        let x = &inp[r * fan_in..(r + 1) * fan_in];
        for o in 0..fan_out {
            let wr = &w[o * fan_in..(o + 1) * fan_in];
            let mut acc = b[o];
            for i in 0..fan_in {
                acc += wr[i] * x[i];
            }
            out.push(acc);
        }
    }
}

fn normalize_rows(raw: &[f64], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    for row in raw.chunks_exact(dim) {
        let s = guarded_norm(row);
        out.extend(row.iter().map(|v| v / s));
    }
    out
}

fn l2_norm(v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for x in v {
        acc += x * x;
    }
    acc.sqrt()
}

fn guarded_norm(v: &[f64]) -> f64 {
    let n = l2_norm(v);
    if n < NORM_GUARD {
        n + NORM_GUARD
    } else {
        n
    }
}

pub fn forward_trace<R: AsRef<[f64]>>(
    params: &ParamVector,
    spec: &EmbedderSpec,
    x: &[R],
) -> Result<Trace> {
    params.check_spec(spec)?;
    let input = gather_input(spec, x)?;
    let n = x.len();
    let dims = spec.layer_dims();
    let last = dims.len() - 1;
    let mut layers: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = &params.values[offset..offset + fan_in * fan_out];
        offset += fan_in * fan_out;
        let b = &params.values[offset..offset + fan_out];
        offset += fan_out;
        let inp: &[f64] = if l == 0 { &input } else { &layers[l - 1].1 };
        let mut pre = Vec::new();
        affine(inp, n, fan_in, w, b, &mut pre);
        let post = if l == last {
            pre.clone()
        } else {
            pre.iter().map(|&z| spec.activation.apply(z)).collect()
        };
        layers.push((pre, post));
    }
    let raw = layers[last].1.clone();
    let data = if spec.l2_normalize {
        normalize_rows(&raw, spec.output_dim)
    } else {
        raw.clone()
    };
    Ok(Trace {
        n,
        input,
        layers,
        raw,
        output: Descriptors {
            data,
            dim: spec.output_dim,
        },
    })
}

pub fn forward<R: AsRef<[f64]>>(
    params: &ParamVector,
    spec: &EmbedderSpec,
    x: &[R],
) -> Result<Descriptors> {
    forward_trace(params, spec, x).map(Trace::into_output)
}

pub fn embed_samples(
    params: &ParamVector,
    spec: &EmbedderSpec,
    samples: &[GeoSample],
) -> Result<DescriptorBatch> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.feat.as_slice()).collect();
    Ok(DescriptorBatch {
        ids: samples.iter().map(|s| s.id).collect(),
        descriptors: forward(params, spec, &rows)?,
    })
}

/// Gradient of `sum_r <upstream[r], F(x[r])>` with respect to the parameters.
pub fn backward_from_trace(
    params: &ParamVector,
    spec: &EmbedderSpec,
    trace: &Trace,
    upstream: &Descriptors,
) -> Result<ParamVector> {
    params.check_spec(spec)?;
    if upstream.dim != spec.output_dim || upstream.len() != trace.n {
        return Err(Error::shape(
            format!("{} x {}", trace.n, spec.output_dim),
            format!("{} x {}", upstream.len(), upstream.dim),
        ));
    }
    let n = trace.n;
    let d = spec.output_dim;

    // Through the normalization: y = z / s with s = |z| (+ guard).
    let mut delta: Vec<f64> = if spec.l2_normalize {
        let mut g = Vec::with_capacity(n * d);
        for r in 0..n {
            let z = &trace.raw[r * d..(r + 1) * d];
            let up = upstream.row(r);
            let norm = l2_norm(z);
            let s = if norm < NORM_GUARD {
                norm + NORM_GUARD
            } else {
                norm
            };
            let mut zg = 0.0;
            for k in 0..d {
                zg += z[k] * up[k];
            }
            let coef = if norm > 0.0 { zg / (s * s * norm) } else { 0.0 };
            for k in 0..d {
                g.push(up[k] / s - z[k] * coef);
            }
        }
        g
    } else {
        upstream.data.clone()
    };

    let dims = spec.layer_dims();
    let layout = spec.layout();
    let mut grad = params.zeros_like();
    for l in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[l];
        let w_slot = &layout[2 * l];
        let b_slot = &layout[2 * l + 1];
        let inp: &[f64] = if l == 0 {
            &trace.input
        } else {
            &trace.layers[l - 1].1
        };
        {
            let gw = &mut grad.values[w_slot.offset..w_slot.offset + fan_in * fan_out];
            for r in 0..n {
                let x = &inp[r * fan_in..(r + 1) * fan_in];
                let dr = &delta[r * fan_out..(r + 1) * fan_out];
                for o in 0..fan_out {
                    let g = dr[o];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                    for i in 0..fan_in {
                        row[i] += g * x[i];
                    }
                }
            }
        }
        {
            let gb = &mut grad.values[b_slot.offset..b_slot.offset + fan_out];
            for r in 0..n {
                for o in 0..fan_out {
                    gb[o] += delta[r * fan_out + o];
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = &params.values[w_slot.offset..w_slot.offset + fan_in * fan_out];
        let (pre, post) = &trace.layers[l - 1];
        let mut next = vec![0.0; n * fan_in];
        for r in 0..n {
            let dr = &delta[r * fan_out..(r + 1) * fan_out];
            let nr = &mut next[r * fan_in..(r + 1) * fan_in];
            for o in 0..fan_out {
                let g = dr[o];
                if g == 0.0 {
                    continue;
                }
                let wr = &w[o * fan_in..(o + 1) * fan_in];
                for i in 0..fan_in {
                    nr[i] += g * wr[i];
                }
            }
            for i in 0..fan_in {
                let idx = r * fan_in + i;
                nr[i] *= spec.activation.derivative(pre[idx], post[idx]);
            }
        }
        delta = next;
    }
    Ok(grad)
}

pub fn backward<R: AsRef<[f64]>>(
    params: &ParamVector,
    spec: &EmbedderSpec,
    x: &[R],
    upstream: &Descriptors,
) -> Result<ParamVector> {
    let trace = forward_trace(params, spec, x)?;
    backward_from_trace(params, spec, &trace, upstream)
}

/// Euclidean distance, summed left to right.
pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    squared_distance(a, b).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}
