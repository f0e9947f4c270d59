//! A small dense network with explicit-tape reverse mode, AdamW and a
//! finite-difference gradient checker.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn id(self) -> u8 {
        match self {
            Activation::LeakyRelu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Activation::LeakyRelu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Multi-layer perceptron with a scalar output.
///
/// All weights and biases live in one flat vector; layer `l` stores its
/// `out x in` weight matrix row-major followed by its bias.
#[derive(Debug, Clone)]
pub struct Mlp {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
    seed: u64,
    /// Changes whenever parameters change; tapes remember it.
    version: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.activations == other.activations && self.params == other.params
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    /// Layers with the given widths (`dims[0]` is the input width). Weights are
    /// drawn from `U(-sqrt(1/fan_in), sqrt(1/fan_in))`, biases start at zero.
    pub fn new(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        Self::check_shape(dims, activations)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(dims));
        for w in dims.windows(2) {
            let bound = (1.0 / w[0].max(1) as f64).sqrt();
            for _ in 0..w[0] * w[1] {
                params.push(rng.gen_range(-bound..=bound));
            }
            params.extend(std::iter::repeat(0.0).take(w[1]));
        }
        Ok(Self {
            dims: dims.to_vec(),
            activations: activations.to_vec(),
            params,
            seed,
            version: fresh_version(),
        })
    }

    /// Leaky-ReLU hidden layers and an identity output of width 1.
    pub fn with_hidden(input: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mut acts = vec![Activation::LeakyRelu; hidden.len()];
        acts.push(Activation::Identity);
        Self::new(&dims, &acts, seed)
    }

    pub fn from_params(dims: &[usize], activations: &[Activation], params: Vec<f64>) -> Result<Self> {
        Self::check_shape(dims, activations)?;
        if params.len() != param_count(dims) {
            return Err(Error::contract(format!(
                "{} parameters given, layer dims need {}",
                params.len(),
                param_count(dims)
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            activations: activations.to_vec(),
            params,
            seed: 0,
            version: fresh_version(),
        })
    }

    fn check_shape(dims: &[usize], activations: &[Activation]) -> Result<()> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::contract("an MLP needs one activation per layer and at least one layer"));
        }
        if *dims.last().unwrap() != 1 {
            return Err(Error::contract("the final layer must produce a single score"));
        }
        if *activations.last().unwrap() != Activation::Identity {
            return Err(Error::contract("the final activation must be the identity"));
        }
        if dims.iter().skip(1).any(|&d| d == 0) {
            return Err(Error::contract("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.dims[0]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::contract("parameter vector length mismatch"));
        }
        self.params.copy_from_slice(params);
        self.version = fresh_version();
        Ok(())
    }

    /// Mutable access to the parameters; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version = fresh_version();
        &mut self.params
    }

    pub fn scratch(&self) -> Scratch {
        let widest = *self.dims.iter().max().unwrap();
        Scratch {
            a: vec![0.0; widest],
            b: vec![0.0; widest],
        }
    }

    /// Forward pass without recording a tape. `x` must have the input width.
    #[inline]
    pub fn eval(&self, x: &[f64], scratch: &mut Scratch) -> f64 {
        debug_assert_eq!(x.len(), self.dims[0]);
        let Scratch { a, b } = scratch;
        a[..x.len()].copy_from_slice(x);
        let mut off = 0;
        for (l, w) in self.dims.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let act = self.activations[l];
            for o in 0..n_out {
                let row = &weights[o * n_in..(o + 1) * n_in];
                let s: f64 = row.iter().zip(&a[..n_in]).map(|(w, x)| w * x).sum();
                b[o] = act.apply(s + bias[o]);
            }
            off += n_in * n_out + n_out;
            std::mem::swap(a, b);
        }
        a[0]
    }

    pub fn forward(&self, x: &[f64]) -> Result<(f64, Tape)> {
        if x.len() != self.dims[0] {
            return Err(Error::contract(format!(
                "input has {} values, network expects {}",
                x.len(),
                self.dims[0]
            )));
        }
        let mut inputs = Vec::with_capacity(self.dims.len() - 1);
        let mut preacts = Vec::with_capacity(self.dims.len() - 1);
        let mut cur = x.to_vec();
        let mut off = 0;
        for (l, w) in self.dims.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    weights[o * n_in..(o + 1) * n_in]
                        .iter()
                        .zip(&cur)
                        .map(|(w, x)| w * x)
                        .sum::<f64>()
                        + bias[o]
                })
                .collect();
            let next = z.iter().map(|&v| self.activations[l].apply(v)).collect();
            inputs.push(std::mem::replace(&mut cur, next));
            preacts.push(z);
            off += n_in * n_out + n_out;
        }
        Ok((
            cur[0],
            Tape {
                version: self.version,
                inputs,
                preacts,
            },
        ))
    }

    /// Reverse pass for one recorded forward pass.
    pub fn backward(&self, tape: &Tape, upstream: f64) -> Result<Gradients> {
        let mut params = vec![0.0; self.params.len()];
        let input = self.backward_accumulate(tape, upstream, &mut params)?;
        Ok(Gradients { params, input })
    }

    /// Like [`Mlp::backward`] but adds the parameter gradient into `grad`;
    /// returns the input gradient.
    pub fn backward_accumulate(&self, tape: &Tape, upstream: f64, grad: &mut [f64]) -> Result<Vec<f64>> {
        if tape.version != self.version {
            return Err(Error::contract("tape was recorded with different parameters"));
        }
        if grad.len() != self.params.len() {
            return Err(Error::contract("gradient buffer length mismatch"));
        }
        let n_layers = self.dims.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.dims.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = vec![upstream];
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let off = offsets[l];
            for (d, z) in delta.iter_mut().zip(&tape.preacts[l]) {
                *d *= self.activations[l].derivative(*z);
            }
            let x = &tape.inputs[l];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
                grad[off + n_in * n_out + o] += d;
            }
            let weights = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    for (p, w) in prev.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                        *p += d * w;
                    }
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Checkpoint: magic, layer count, dims, activation ids, seed, then the
    /// parameters as little-endian f32.
    pub fn save(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&((self.dims.len() - 1) as u32).to_le_bytes())?;
        for d in &self.dims {
            out.write_all(&(*d as u32).to_le_bytes())?;
        }
        for a in &self.activations {
            out.write_all(&[a.id()])?;
        }
        out.write_all(&self.seed.to_le_bytes())?;
        for p in &self.params {
            out.write_all(&(*p as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(input: &mut impl Read, path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let mut at = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if at + n > bytes.len() {
                return Err(Error::format(path, Some(at), format!("truncated checkpoint while reading {what}")));
            }
            at += n;
            Ok(&bytes[at - n..at])
        };
        if take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, Some(0), "not a network checkpoint"));
        }
        let n_layers = u32::from_le_bytes(take(4, "layer count")?.try_into().unwrap()) as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(Error::format(path, Some(8), format!("implausible layer count {n_layers}")));
        }
        let mut dims = Vec::with_capacity(n_layers + 1);
        for _ in 0..=n_layers {
            dims.push(u32::from_le_bytes(take(4, "layer dims")?.try_into().unwrap()) as usize);
        }
        let mut activations = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let id = take(1, "activation id")?[0];
            activations.push(
                Activation::from_id(id).ok_or_else(|| Error::format(path, None, format!("unknown activation id {id}")))?,
            );
        }
        let seed = u64::from_le_bytes(take(8, "seed")?.try_into().unwrap());
        let count = param_count(&dims);
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            params.push(f32::from_le_bytes(take(4, "parameters")?.try_into().unwrap()) as f64);
        }
        if at != bytes.len() {
            return Err(Error::format(path, Some(at), "trailing bytes after parameters"));
        }
        let mut net = Self::from_params(&dims, &activations, params).map_err(|e| Error::format(path, None, e.to_string()))?;
        net.seed = seed;
        Ok(net)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TNETCKP1";

/// Reusable buffers for [`Mlp::eval`].
#[derive(Debug, Clone)]
pub struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    inputs: Vec<Vec<f64>>,
    preacts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

/// Worst relative error between `analytic` and central differences of `f`
/// around `params`, with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], analytic: &[f64], h: f64) -> f64 {
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(params.len(), analytic.len());
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let plus = f(&p);
        p[i] = orig - h;
        let minus = f(&p);
        p[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(param_count: usize, config: AdamWConfig) -> Self {
        Self {
            config,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract("AdamW: parameter, gradient and state shapes differ"));
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * params[i]);
        }
        Ok(())
    }
}
