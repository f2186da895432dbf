//! Parameter containers shared by the decoder models and the recalibrator,
//! and the pre-norm causal decoder block they both use.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use std::collections::HashMap;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Uniform access to the named tensors of a parameter tree.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, t| out.push((n, t.clone())));
        out
    }
}

/// Binds every tensor of a tree onto a tape. Leaves named by `trainable`
/// receive gradients; the rest are constants.
pub struct Binder<'a> {
    pub tape: &'a mut Tape,
    pub trainable: &'a dyn Fn(&str) -> bool,
    /// Bound trainable leaves, in binding order.
    pub bound: Vec<(String, Var)>,
    /// Names that resolve to an existing tape variable instead of a new leaf.
    pub overrides: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a mut Tape, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self {
            tape,
            trainable,
            bound: Vec::new(),
            overrides: HashMap::new(),
        }
    }

    pub fn bind(&mut self, name: String, t: &Tensor) -> Result<Var> {
        let train = (self.trainable)(&name);
        if let Some(&v) = self.overrides.get(&name) {
            if train {
                self.bound.push((name, v));
            }
            return Ok(v);
        }
        let v = self.tape.leaf_named(&name, t.clone(), train)?;
        if train {
            self.bound.push((name, v));
        }
        Ok(v)
    }
}

macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<P = Tensor> {
            $(pub $field: P,)*
        }

        impl Params for $name<Tensor> {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
                $(f(format!("{prefix}{}", stringify!($field)), &mut self.$field);)*
            }
        }

        impl $name<Tensor> {
            pub fn bind(&self, binder: &mut Binder<'_>, prefix: &str) -> Result<$name<Var>> {
                Ok($name {
                    $($field: binder.bind(format!("{prefix}{}", stringify!($field)), &self.$field)?,)*
                })
            }
        }
    };
}

param_struct!(
    /// Layer-norm gain and bias.
    NormParams { g, b }
);

param_struct!(
    /// Pre-norm decoder block: attention without biases, GELU FFN with biases.
    BlockParams { ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2 }
);

pub(crate) fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

impl NormParams<Tensor> {
    pub fn new(d: usize) -> Self {
        Self {
            g: Tensor::full(&[d], 1.0),
            b: Tensor::zeros(&[d]),
        }
    }
}

impl BlockParams<Tensor> {
    pub fn init(rng: &mut impl Rng, d: usize, d_ffn: usize) -> Self {
        Self {
            ln1_g: Tensor::full(&[d], 1.0),
            ln1_b: Tensor::zeros(&[d]),
            wq: normal_matrix(rng, d, d, INIT_STD),
            wk: normal_matrix(rng, d, d, INIT_STD),
            wv: normal_matrix(rng, d, d, INIT_STD),
            wo: normal_matrix(rng, d, d, INIT_STD),
            ln2_g: Tensor::full(&[d], 1.0),
            ln2_b: Tensor::zeros(&[d]),
            w1: normal_matrix(rng, d, d_ffn, INIT_STD),
            b1: Tensor::zeros(&[d_ffn]),
            w2: normal_matrix(rng, d_ffn, d, INIT_STD),
            b2: Tensor::zeros(&[d]),
        }
    }

    /// Zeroes both residual branches so the block is the identity map.
    pub fn zero_residual(&mut self) {
        for t in [&mut self.wo, &mut self.w2, &mut self.b2] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Rotary settings for a block stack: base and the position id of each row.
#[derive(Clone, Copy, Debug)]
pub struct Rotary<'a> {
    pub base: f64,
    pub positions: &'a [usize],
}

pub fn layer_norm(tape: &mut Tape, x: Var, p: &NormParams<Var>) -> Result<Var> {
    tape.layer_norm(x, p.g, p.b, LN_EPS)
}

/// `x + attn(ln1(x))`, then `+ ffn(ln2(·))`, causal over rows.
pub fn block_forward(
    tape: &mut Tape,
    p: &BlockParams<Var>,
    x: Var,
    n_heads: usize,
    rotary: Option<Rotary<'_>>,
) -> Result<Var> {
    let d = tape.value(x).cols();
    let head_dim = d / n_heads;

    let h = tape.layer_norm(x, p.ln1_g, p.ln1_b, LN_EPS)?;
    let mut q = tape.matmul(h, p.wq)?;
    let mut k = tape.matmul(h, p.wk)?;
    let v = tape.matmul(h, p.wv)?;
    if let Some(r) = rotary {
        q = tape.rope(q, r.positions, head_dim, r.base)?;
        k = tape.rope(k, r.positions, head_dim, r.base)?;
    }
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for hi in 0..n_heads {
        let (lo, hi_end) = (hi * head_dim, (hi + 1) * head_dim);
        let qh = tape.slice_cols(q, lo, hi_end)?;
        let kh = tape.slice_cols(k, lo, hi_end)?;
        let vh = tape.slice_cols(v, lo, hi_end)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax(scores, true)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let attn_out = tape.matmul(merged, p.wo)?;
    let x = tape.add(x, attn_out)?;

    let h = tape.layer_norm(x, p.ln2_g, p.ln2_b, LN_EPS)?;
    let f = tape.matmul(h, p.w1)?;
    let f = tape.add_row(f, p.b1)?;
    let f = tape.gelu(f)?;
    let f = tape.matmul(f, p.w2)?;
    let f = tape.add_row(f, p.b2)?;
    tape.add(x, f)
}
