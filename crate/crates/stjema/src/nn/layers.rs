//! Neural building blocks expressed as tape programs.
//!
//! Conventions: data matrices are `N×d` (one row per node), row vectors
//! are `1×d`, and weight matrices are stored `out×in` and applied as
//! `x · Wᵀ`. Binding a [`ParamStore`] onto a tape yields [`Bound`],
//! which remembers which tape node holds which named parameter so
//! gradients can be collected by name after the backward pass.

use std::collections::BTreeMap;

use ndarray::{Array2};

use super::params::{ParamStore, Role};
use super::tape::{Tape, Var};

/// Map from parameter name to the tape node holding its value.
#[derive(Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Place every parameter of `store` on the tape. `trainable` decides
    /// per entry whether the node participates in gradients; frozen
    /// entries become constants.
    pub fn bind_all(
        tape: &mut Tape,
        store: &ParamStore,
        trainable: impl Fn(&str, Role) -> bool,
    ) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, role, value) in store.iter_full() {
            let var = if trainable(name, role) {
                tape.leaf(value.clone())
            } else {
                tape.constant(value.clone())
            };
            vars.insert(name.to_string(), var);
        }
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Collect named gradients from a completed backward pass. Entries
    /// bound as constants (or unreached by the loss) are omitted.
    pub fn gradients(
        &self,
        grads: &[Option<Array2<f64>>],
    ) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            if let Some(g) = &grads[var.index()] {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// Affine map `x · Wᵀ (+ b)`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Var {
    let wt = tape.transpose(w);
    let y = tape.matmul(x, wt);
    match b {
        Some(b) => tape.add_row(y, b),
        None => y,
    }
}

/// Gated recurrent unit parameters, bound on a tape. Weights are `d×n`
/// (input) and `d×d` (hidden); biases are `1×d` rows.
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

impl GruVars {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Self {
        let v = |suffix: &str| bound.var(&format!("{prefix}.{suffix}"));
        GruVars {
            w_z: v("w_z"),
            u_z: v("u_z"),
            b_z: v("b_z"),
            w_r: v("w_r"),
            u_r: v("u_r"),
            b_r: v("b_r"),
            w_h: v("w_h"),
            u_h: v("u_h"),
            b_h: v("b_h"),
        }
    }
}

/// One GRU step: update gate `z`, reset gate `r`, candidate `h̃`, then
/// `h′ = (1−z)⊙h + z⊙h̃`. `h` and `u` are row vectors.
pub fn gru_step(tape: &mut Tape, h: Var, u: Var, p: &GruVars) -> Var {
    let gate = |tape: &mut Tape, w: Var, uu: Var, b: Var, hh: Var| {
        let a = linear(tape, u, w, None);
        let c = linear(tape, hh, uu, None);
        let s = tape.add(a, c);
        tape.add_row(s, b)
    };
    let z_pre = gate(tape, p.w_z, p.u_z, p.b_z, h);
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, p.w_r, p.u_r, p.b_r, h);
    let r = tape.sigmoid(r_pre);

    let rh = tape.mul(r, h);
    let a = linear(tape, u, p.w_h, None);
    let c = linear(tape, rh, p.u_h, None);
    let s = tape.add(a, c);
    let cand_pre = tape.add_row(s, p.b_h);
    let cand = tape.tanh(cand_pre);

    let d = tape.value(h).ncols();
    let ones = tape.constant(Array2::from_elem((1, d), 1.0));
    let one_minus_z = tape.sub(ones, z);
    let keep = tape.mul(one_minus_z, h);
    let take = tape.mul(z, cand);
    tape.add(keep, take)
}

/// Run a GRU over a sequence of row-vector inputs starting from zero
/// state; returns the hidden state after each step.
pub fn gru_sequence(tape: &mut Tape, inputs: &[Var], d_hidden: usize, p: &GruVars) -> Vec<Var> {
    let mut h = tape.constant(Array2::zeros((1, d_hidden)));
    let mut out = Vec::with_capacity(inputs.len());
    for &u in inputs {
        h = gru_step(tape, h, u, p);
        out.push(h);
    }
    out
}

/// Graph isomorphism layer parameters: learnable `ε` (1×1) and a
/// two-layer MLP.
pub struct GinVars {
    pub eps: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl GinVars {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Self {
        GinVars {
            eps: bound.var(&format!("{prefix}.eps")),
            w1: bound.var(&format!("{prefix}.mlp.w1")),
            b1: bound.var(&format!("{prefix}.mlp.b1")),
            w2: bound.var(&format!("{prefix}.mlp.w2")),
            b2: bound.var(&format!("{prefix}.mlp.b2")),
        }
    }
}

/// GIN convolution: `MLP((1+ε)·z_i + Σ_{j∈N(i)} z_j)`. `agg` must be the
/// adjacency with the diagonal zeroed (self-contribution enters only
/// through the `(1+ε)` term), inserted on the tape as a constant.
pub fn gin_layer(tape: &mut Tape, z: Var, agg: Var, p: &GinVars) -> Var {
    let one = tape.scalar(1.0);
    let one_plus_eps = tape.add(one, p.eps);
    let self_term = tape.scalar_mul(one_plus_eps, z);
    let neigh = tape.matmul(agg, z);
    let mixed = tape.add(self_term, neigh);
    let h_pre = linear(tape, mixed, p.w1, Some(p.b1));
    let h = tape.relu(h_pre);
    linear(tape, h, p.w2, Some(p.b2))
}

/// Adjacency with its diagonal removed, for use as the GIN neighbor
/// aggregation operator.
pub fn zero_diagonal(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for i in 0..out.nrows().min(out.ncols()) {
        out[(i, i)] = 0.0;
    }
    out
}

/// Token/channel mixing block parameters. `w1` is `hidden_tokens×N`,
/// `w2` is `N×hidden_tokens`, `w3` is `hidden_channels×d`, `w4` is
/// `d×hidden_channels`; layer norms carry `1×d` gain and bias.
pub struct MixerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub w1: Var,
    pub w2: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w3: Var,
    pub w4: Var,
}

impl MixerVars {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Self {
        let v = |suffix: &str| bound.var(&format!("{prefix}.{suffix}"));
        MixerVars {
            ln1_g: v("ln1.g"),
            ln1_b: v("ln1.b"),
            w1: v("w1"),
            w2: v("w2"),
            ln2_g: v("ln2.g"),
            ln2_b: v("ln2.b"),
            w3: v("w3"),
            w4: v("w4"),
        }
    }
}

/// One mixer block on an `N×d` matrix: a token-mixing branch
/// `Y = Z + W₂·GELU(W₁·LN(Z))` followed by a channel-mixing branch
/// `Ẑ = Y + GELU(LN(Y)·W₃ᵀ)·W₄ᵀ`. With all four weight matrices zero
/// the block is the identity.
pub fn mixer_block(tape: &mut Tape, z: Var, p: &MixerVars) -> Var {
    let ln_z = tape.layer_norm(z, p.ln1_g, p.ln1_b);
    let t1 = tape.matmul(p.w1, ln_z);
    let t2 = tape.gelu(t1);
    let t3 = tape.matmul(p.w2, t2);
    let y = tape.add(z, t3);

    let ln_y = tape.layer_norm(y, p.ln2_g, p.ln2_b);
    let w3t = tape.transpose(p.w3);
    let c1 = tape.matmul(ln_y, w3t);
    let c2 = tape.gelu(c1);
    let w4t = tape.transpose(p.w4);
    let c3 = tape.matmul(c2, w4t);
    tape.add(y, c3)
}

/// Squeeze-excitation style readout: mean-pool node embeddings, pass
/// through a bottleneck (`w1`, `d×d`) with ReLU, map to per-node logits
/// (`w2`, `N×d`), squash to attention weights, and return the
/// attention-weighted graph embedding (`d×1`) together with the
/// attention column (`N×1`).
pub fn sero_readout(tape: &mut Tape, z: Var, w1: Var, w2: Var) -> (Var, Var) {
    let n = tape.value(z).nrows();
    let zt = tape.transpose(z);
    let phi = tape.constant(Array2::from_elem((n, 1), 1.0 / n as f64));
    let pooled = tape.matmul(zt, phi);
    let s_pre = tape.matmul(w1, pooled);
    let s = tape.relu(s_pre);
    let a_pre = tape.matmul(w2, s);
    let attn = tape.sigmoid(a_pre);
    let zg = tape.matmul(zt, attn);
    (zg, attn)
}

/// Node feature matrix `X = [I_N ‖ 1·η] · Wᵀ`: each node's one-hot
/// identity concatenated with the shared temporal summary `η` (a
/// `1×d_η` row), projected by `w` (`d_v×(N+d_η)`).
pub fn node_feature_matrix(tape: &mut Tape, eta: Var, w: Var, n: usize) -> Var {
    let eye = tape.constant(Array2::eye(n));
    let ones = tape.constant(Array2::from_elem((n, 1), 1.0));
    let eta_rows = tape.matmul(ones, eta);
    let cols = tape.concat_cols(eye, eta_rows);
    linear(tape, cols, w, None)
}

/// `‖GᵀG − I‖²_F` with the Gram matrix taken on the smaller side of `w`,
/// as a scalar tape node.
pub fn orthogonality_penalty(tape: &mut Tape, w: Var) -> Var {
    let (r, c) = {
        let v = tape.value(w);
        (v.nrows(), v.ncols())
    };
    let gram = if r <= c {
        let wt = tape.transpose(w);
        tape.matmul(w, wt)
    } else {
        let wt = tape.transpose(w);
        tape.matmul(wt, w)
    };
    let k = r.min(c);
    let eye = tape.constant(Array2::eye(k));
    let diff = tape.sub(gram, eye);
    let sq = tape.mul(diff, diff);
    tape.sum(sq)
}
