use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ModelError;
use crate::numerics::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub(super) const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

/// Normal draws rejected outside two standard deviations.
pub(super) fn trunc_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break (z * std) as f32;
        }
    })
}

pub(super) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal(&mut self, name: String, shape: &[usize]) -> ParamId {
        let t = trunc_normal(&mut self.rng, shape, INIT_STD);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::full(shape, 1.0))
    }
}

#[derive(Clone, Debug)]
pub(super) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = init.normal(format!("{name}.w"), &[d_in, d_out]);
        let b = bias.then(|| init.zeros(format!("{name}.b"), &[1, d_out]));
        Linear { w, b }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        Ok(match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)?
            }
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub(super) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Self {
        Norm {
            gain: init.ones(format!("{name}.g"), &[1, d]),
            bias: init.zeros(format!("{name}.b"), &[1, d]),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let n = tape.layer_norm(x, LN_EPS)?;
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul_row(n, g)?;
        Ok(tape.add_row(y, b)?)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub(super) struct Block {
    pub ln1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl Block {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize, mlp_ratio: usize) -> Self {
        Block {
            ln1: Norm::new(init, &format!("{name}.ln1"), d),
            qkv: Linear::new(init, &format!("{name}.attn.qkv"), d, 3 * d, true),
            proj: Linear::new(init, &format!("{name}.attn.proj"), d, d, true),
            ln2: Norm::new(init, &format!("{name}.ln2"), d),
            fc1: Linear::new(init, &format!("{name}.mlp.fc1"), d, mlp_ratio * d, true),
            fc2: Linear::new(init, &format!("{name}.mlp.fc2"), mlp_ratio * d, d, true),
            heads,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let d = tape.shape(x)[1];
        let dh = d / self.heads;
        let h = self.ln1.forward(tape, store, x)?;
        let qkv = self.qkv.forward(tape, store, h)?;
        let mut outs = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let q = tape.slice_cols(qkv, i * dh, (i + 1) * dh)?;
            let k = tape.slice_cols(qkv, d + i * dh, d + (i + 1) * dh)?;
            let v = tape.slice_cols(qkv, 2 * d + i * dh, 2 * d + (i + 1) * dh)?;
            let kt = tape.transpose(k)?;
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
            let a = tape.softmax(s)?;
            outs.push(tape.matmul(a, v)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        let att = self.proj.forward(tape, store, cat)?;
        let x = tape.add(x, att)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, store, h)?;
        Ok(tape.add(x, h)?)
    }
}
