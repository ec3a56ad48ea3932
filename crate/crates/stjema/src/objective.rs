//! The pretraining objective: latent reconstruction within a timestep
//! (spatial) and across non-overlapping window pairs (temporal), each
//! split into a node term and an adjacency term, plus the momentum
//! update that maintains the target encoder.
//!
//! All four terms compare *online* predictions against *target-encoder*
//! embeddings or the true adjacency. Target embeddings enter the tape as
//! constants, so gradients reach the online encoder, the projections,
//! the mask token, and the decoders — never θ̄.
//!
//! Per-element means are used throughout: MSE normalizes by
//! (block rows × width), BCE by the rectangle's entry count; both
//! average over the K masks and then over the timesteps actually
//! evaluated (the temporal terms average over feasible timesteps only).

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

use crate::graphbuild::DynamicGraph;
use crate::masking::{sample_mask_set, BlockMaskSet};
use crate::model::{encode_sequence, encode_target, EncoderInputs, ModelDims, ModelError};
use crate::nn::layers::{linear, mixer_block, Bound, MixerVars};
use crate::nn::params::ParamStore;
use crate::nn::tape::{Tape, Var};

/// Probability clip for every binary cross-entropy evaluation.
pub const BCE_CLIP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("masking error: {0}")]
    Mask(#[from] crate::masking::MaskError),
    #[error("loss weights invalid: {0}")]
    BadWeights(String),
    #[error("no loss terms enabled: toggles leave the objective empty")]
    EmptyObjective,
    #[error("loss component is not finite: {0}")]
    NonFinite(&'static str),
    #[error("target store does not mirror the encoder subset of the online store")]
    TargetLayoutMismatch,
}

/// Mixing weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Spatial/temporal mix: `L = γ·L_spat + (1−γ)·L_temp`.
    pub gamma: f64,
    pub lambda_node: f64,
    pub lambda_adj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { gamma: 0.5, lambda_node: 1.0, lambda_adj: 1e-4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(ObjectiveError::BadWeights(format!("gamma = {} outside [0,1]", self.gamma)));
        }
        for (name, v) in [("lambda_node", self.lambda_node), ("lambda_adj", self.lambda_adj)] {
            if !v.is_finite() || v < 0.0 {
                return Err(ObjectiveError::BadWeights(format!("{name} = {v} invalid")));
            }
        }
        Ok(())
    }
}

/// Which loss terms participate (for ablations). All four default on.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub node: bool,
    pub edge: bool,
    pub spatial: bool,
    pub temporal: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles { node: true, edge: true, spatial: true, temporal: true }
    }
}

impl LossToggles {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if (!self.node && !self.edge) || (!self.spatial && !self.temporal) {
            return Err(ObjectiveError::EmptyObjective);
        }
        Ok(())
    }
}

/// Per-component loss values of one evaluation (means over masks and
/// timesteps; disabled components report 0).
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub node_spat: f64,
    pub adj_spat: f64,
    pub node_temp: f64,
    pub adj_temp: f64,
    pub total: f64,
}

/// `L = γ·(λ_node·node_spat + λ_adj·adj_spat)
///    + (1−γ)·(λ_node·node_temp + λ_adj·adj_temp)`.
pub fn combined_loss(
    node_spat: f64,
    adj_spat: f64,
    node_temp: f64,
    adj_temp: f64,
    w: &LossWeights,
) -> Result<f64, ObjectiveError> {
    w.validate()?;
    for (name, v) in [
        ("node_spat", node_spat),
        ("adj_spat", adj_spat),
        ("node_temp", node_temp),
        ("adj_temp", adj_temp),
    ] {
        if !v.is_finite() {
            return Err(ObjectiveError::NonFinite(match name {
                "node_spat" => "node_spat",
                "adj_spat" => "adj_spat",
                "node_temp" => "node_temp",
                _ => "adj_temp",
            }));
        }
    }
    let spat = w.lambda_node * node_spat + w.lambda_adj * adj_spat;
    let temp = w.lambda_node * node_temp + w.lambda_adj * adj_temp;
    Ok(w.gamma * spat + (1.0 - w.gamma) * temp)
}

// ---------------------------------------------------------------------------
// Momentum target
// ---------------------------------------------------------------------------

/// The momentum-averaged target encoder and its decay factor.
#[derive(Clone, Debug)]
pub struct EmaState {
    /// Decay β ∈ [0, 1]: fraction of the old target kept each update.
    pub beta: f64,
    pub target: ParamStore,
}

impl EmaState {
    pub fn new(beta: f64, target: ParamStore) -> Result<Self, ObjectiveError> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(ObjectiveError::BadWeights(format!("beta = {beta} outside [0,1]")));
        }
        Ok(EmaState { beta, target })
    }
}

/// `θ̄ ← β·θ̄ + (1−β)·θ`, applied tensor by tensor over the encoder
/// subset of `params`. The stores must have identical name/shape sets.
pub fn ema_update(ema: &mut EmaState, params: &ParamStore) -> Result<(), ObjectiveError> {
    let online = params.subset(crate::nn::params::Role::Encoder);
    if !ema.target.same_layout(&online) {
        return Err(ObjectiveError::TargetLayoutMismatch);
    }
    let beta = ema.beta;
    let names: Vec<String> = ema.target.names().map(str::to_string).collect();
    for name in names {
        let theta = online.get(&name).expect("layout checked").clone();
        let bar = ema.target.get_mut(&name).expect("layout checked");
        bar.zip_mut_with(&theta, |b, t| *b = beta * *b + (1.0 - beta) * t);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Temporal pair sampling
// ---------------------------------------------------------------------------

/// A target timestep with its two reference timesteps, all 1-based.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalPair {
    pub t: usize,
    pub t_a: usize,
    pub t_b: usize,
}

/// Minimum index distance that keeps the sampled windows from
/// overlapping each other: `d_min = ½(Γ/S + 1)`.
pub fn temporal_min_distance(gamma: usize, stride: usize) -> f64 {
    (gamma as f64 / stride as f64 + 1.0) / 2.0
}

/// Sample `t_a ~ U[1, ⌊t−d_min⌋]`, `t_b ~ U[⌈t+d_min⌉, T_G]` for target
/// timestep `t` (1-based). Returns `None` when either range is empty
/// (timesteps too close to the sequence ends are skipped).
pub fn sample_temporal_pair(
    t: usize,
    t_g: usize,
    gamma: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> Option<TemporalPair> {
    let d_min = temporal_min_distance(gamma, stride);
    let hi_a = (t as f64 - d_min).floor();
    let lo_b = (t as f64 + d_min).ceil();
    if hi_a < 1.0 || lo_b > t_g as f64 {
        return None;
    }
    let hi_a = hi_a as usize;
    let lo_b = lo_b as usize;
    let t_a = rng.random_range(1..=hi_a);
    let t_b = rng.random_range(lo_b..=t_g);
    Some(TemporalPair { t, t_a, t_b })
}

// ---------------------------------------------------------------------------
// Loss terms (per timestep, on the tape)
// ---------------------------------------------------------------------------

/// Tape handles for everything the objective owns beyond the encoder.
pub struct ObjectiveVars {
    /// Node projection before decoding.
    pub w_node: Var,
    /// Edge projection before decoding.
    pub w_edge: Var,
    /// Projection of the concatenated pair embeddings.
    pub w_temp: Var,
    /// Learnable fill token for masked blocks.
    pub mask_token: Var,
    pub dec_node: MixerVars,
    pub dec_edge: MixerVars,
}

impl ObjectiveVars {
    pub fn from_bound(bound: &Bound) -> Self {
        ObjectiveVars {
            w_node: bound.var("proj.node.w"),
            w_edge: bound.var("proj.edge.w"),
            w_temp: bound.var("proj.temp.w"),
            mask_token: bound.var("mask.token"),
            dec_node: MixerVars::from_bound(bound, "dec.node"),
            dec_edge: MixerVars::from_bound(bound, "dec.edge"),
        }
    }
}

/// `Z̃ = Z·(W_S^V)ᵀ`: project encoder output into decoder space.
pub fn project_node(tape: &mut Tape, vars: &ObjectiveVars, z: Var) -> Var {
    linear(tape, z, vars.w_node, None)
}

/// `H = g_edge(Z·(W_S^E)ᵀ)`: shared edge embedding of one timestep.
pub fn edge_embedding(tape: &mut Tape, vars: &ObjectiveVars, z: Var) -> Var {
    let projected = linear(tape, z, vars.w_edge, None);
    mixer_block(tape, projected, &vars.dec_edge)
}

/// Zero the rows hidden by any node mask (the re-masking of the
/// projected context before block filling).
fn remask_rows(tape: &mut Tape, z_proj: Var, masks: &BlockMaskSet) -> Var {
    let (n, d) = {
        let v = tape.value(z_proj);
        (v.nrows(), v.ncols())
    };
    let mut keep = Array2::from_elem((n, d), 1.0);
    for m in &masks.node_masks {
        for i in m.lo..m.hi {
            keep.row_mut(i).fill(0.0);
        }
    }
    let keep = tape.constant(keep);
    tape.mul(z_proj, keep)
}

/// Spatial node reconstruction at one timestep: for each mask k, fill
/// block k of the re-masked projection with the learnable token, decode
/// with the node mixer, and take the per-element MSE against the target
/// embedding restricted to that block. Mean over the K masks.
pub fn spatial_node_loss(
    tape: &mut Tape,
    vars: &ObjectiveVars,
    z_proj: Var,
    z_tar: &Array2<f64>,
    masks: &BlockMaskSet,
) -> Var {
    let n = masks.n;
    let d = tape.value(z_proj).ncols();
    let z_cxt = remask_rows(tape, z_proj, masks);
    let mut acc: Option<Var> = None;
    for mask in &masks.node_masks {
        let ind = tape.constant(mask.indicator_column(n));
        let fill = tape.matmul(ind, vars.mask_token);
        let input = tape.add(z_cxt, fill);
        let pred = mixer_block(tape, input, &vars.dec_node);
        let block_mask = row_block_matrix(mask.lo, mask.hi, n, d);
        let denom = (mask.len() * d) as f64;
        let term = tape.masked_mse(pred, z_tar, &block_mask, denom);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    let sum = acc.expect("at least one mask");
    tape.scale(sum, 1.0 / masks.node_masks.len() as f64)
}

/// Spatial adjacency reconstruction at one timestep: predicted edge
/// probabilities `sig(H·Hᵀ)` scored by BCE against the true adjacency on
/// each masked rectangle, mean over the K masks.
pub fn spatial_adj_loss(
    tape: &mut Tape,
    h: Var,
    a: &Array2<f64>,
    masks: &BlockMaskSet,
) -> Var {
    let ht = tape.transpose(h);
    let logits = tape.matmul(h, ht);
    let probs = tape.sigmoid(logits);
    rect_bce_mean(tape, probs, a, masks)
}

/// `Z̃_{a,b} = [Z̃(t_a) ‖ Z̃(t_b)]·(W_T)ᵀ`: the temporal fill matrix.
pub fn temporal_fill(tape: &mut Tape, vars: &ObjectiveVars, z_proj_a: Var, z_proj_b: Var) -> Var {
    let cat = tape.concat_cols(z_proj_a, z_proj_b);
    linear(tape, cat, vars.w_temp, None)
}

/// Temporal node reconstruction at one timestep: identical to the
/// spatial term except each block is filled from the projected pair
/// embedding instead of the mask token.
pub fn temporal_node_loss(
    tape: &mut Tape,
    vars: &ObjectiveVars,
    z_proj_t: Var,
    fill_ab: Var,
    z_tar: &Array2<f64>,
    masks: &BlockMaskSet,
) -> Var {
    let n = masks.n;
    let d = tape.value(z_proj_t).ncols();
    let z_cxt = remask_rows(tape, z_proj_t, masks);
    let mut acc: Option<Var> = None;
    for mask in &masks.node_masks {
        let block_mask = row_block_matrix(mask.lo, mask.hi, n, d);
        let block_const = tape.constant(block_mask.clone());
        let fill = tape.mul(fill_ab, block_const);
        let input = tape.add(z_cxt, fill);
        let pred = mixer_block(tape, input, &vars.dec_node);
        let denom = (mask.len() * d) as f64;
        let term = tape.masked_mse(pred, z_tar, &block_mask, denom);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    let sum = acc.expect("at least one mask");
    tape.scale(sum, 1.0 / masks.node_masks.len() as f64)
}

/// Temporal adjacency reconstruction: the symmetrized cross-pair
/// prediction `Ā = ½(sig(H_a·H_bᵀ) + sig(H_b·H_aᵀ))` scored like the
/// spatial adjacency term.
pub fn temporal_adj_loss(
    tape: &mut Tape,
    h_a: Var,
    h_b: Var,
    a_t: &Array2<f64>,
    masks: &BlockMaskSet,
) -> Var {
    let probs = symmetrized_pair_probs(tape, h_a, h_b);
    rect_bce_mean(tape, probs, a_t, masks)
}

/// `½(sig(H_a·H_bᵀ) + sig(H_b·H_aᵀ))` — exactly symmetric by
/// construction.
pub fn symmetrized_pair_probs(tape: &mut Tape, h_a: Var, h_b: Var) -> Var {
    let hbt = tape.transpose(h_b);
    let ab = tape.matmul(h_a, hbt);
    let p_ab = tape.sigmoid(ab);
    let hat = tape.transpose(h_a);
    let ba = tape.matmul(h_b, hat);
    let p_ba = tape.sigmoid(ba);
    let sum = tape.add(p_ab, p_ba);
    tape.scale(sum, 0.5)
}

fn rect_bce_mean(tape: &mut Tape, probs: Var, a: &Array2<f64>, masks: &BlockMaskSet) -> Var {
    let n = masks.n;
    let mut acc: Option<Var> = None;
    for mask in &masks.adj_masks {
        let rect = mask.indicator(n);
        let denom = (mask.side() * mask.side()) as f64;
        let term = tape.masked_bce(probs, a, &rect, denom, BCE_CLIP);
        acc = Some(match acc {
            Some(x) => tape.add(x, term),
            None => term,
        });
    }
    let sum = acc.expect("at least one mask");
    tape.scale(sum, 1.0 / masks.adj_masks.len() as f64)
}

fn row_block_matrix(lo: usize, hi: usize, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n, d));
    for i in lo..hi {
        m.row_mut(i).fill(1.0);
    }
    m
}

// ---------------------------------------------------------------------------
// Whole-subject assembly
// ---------------------------------------------------------------------------

/// Sampled randomness for one subject in one training step: one mask set
/// per timestep, one optional temporal pair per timestep, and the subset
/// of timesteps whose losses are evaluated.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub mask_sets: Vec<BlockMaskSet>,
    /// `pairs[t]` is `None` when timestep `t+1` is infeasible.
    pub pairs: Vec<Option<TemporalPair>>,
    /// 0-based timesteps contributing loss terms (default: all).
    pub loss_timesteps: Vec<usize>,
}

/// Objective hyperparameters needed to draw a [`StepPlan`].
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct MaskingConfig {
    pub k_masks: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Evaluate the loss on at most this many timesteps per step
    /// (`None` = all).
    pub timestep_subset: Option<usize>,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { k_masks: 4, alpha_min: 0.10, alpha_max: 0.30, timestep_subset: None }
    }
}

/// Draw all randomness for one subject-step. Masks come from
/// `mask_rng`; temporal pairs and the optional timestep subset from
/// `pair_rng`, so the two concerns advance independent streams.
pub fn plan_step(
    graph: &DynamicGraph,
    cfg: &MaskingConfig,
    mask_rng: &mut impl Rng,
    pair_rng: &mut impl Rng,
) -> Result<StepPlan, ObjectiveError> {
    let t_g = graph.meta.t_g;
    let n = graph.meta.n_rois;
    let mut mask_sets = Vec::with_capacity(t_g);
    let mut pairs = Vec::with_capacity(t_g);
    for t in 0..t_g {
        mask_sets.push(sample_mask_set(n, cfg.k_masks, cfg.alpha_min, cfg.alpha_max, t, mask_rng)?);
        pairs.push(sample_temporal_pair(
            t + 1,
            t_g,
            graph.meta.gamma,
            graph.meta.stride,
            pair_rng,
        ));
    }
    let loss_timesteps = match cfg.timestep_subset {
        Some(k) if k < t_g => {
            let idx = rand::seq::index::sample(pair_rng, t_g, k);
            let mut v: Vec<usize> = idx.iter().collect();
            v.sort_unstable();
            v
        }
        _ => (0..t_g).collect(),
    };
    Ok(StepPlan { mask_sets, pairs, loss_timesteps })
}

/// A fully-built loss tape for one subject, ready for backprop.
pub struct SubjectLoss {
    pub tape: Tape,
    pub bound: Bound,
    /// Scalar node holding the combined loss.
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Standard deviation of all target-embedding entries (collapse
    /// monitor).
    pub target_std: f64,
}

/// Build the complete objective for one subject on a fresh tape:
/// context-encode every timestep with its masks, target-encode the
/// unmasked graph with θ̄, then accumulate the four loss terms over the
/// planned timesteps.
pub fn subject_loss(
    params: &ParamStore,
    target: &ParamStore,
    dims: &ModelDims,
    graph: &DynamicGraph,
    plan: &StepPlan,
    weights: &LossWeights,
    toggles: &LossToggles,
) -> Result<SubjectLoss, ObjectiveError> {
    weights.validate()?;
    toggles.validate()?;
    if !target.same_layout(&params.subset(crate::nn::params::Role::Encoder)) {
        return Err(ObjectiveError::TargetLayoutMismatch);
    }

    let z_tar = encode_target(target, dims, graph)?;
    let target_std = embedding_std(&z_tar);

    let mut tape = Tape::new();
    let bound = Bound::bind_all(&mut tape, params, |_, _| true);
    let vars = ObjectiveVars::from_bound(&bound);
    let inputs = EncoderInputs::context(graph, &plan.mask_sets)?;
    let z_cxt = encode_sequence(&mut tape, &bound, dims, &inputs)?;

    // Shared per-timestep projections. Computed lazily so disabled terms
    // skip the work entirely.
    let t_g = graph.meta.t_g;
    let need_node = toggles.node;
    let need_edge = toggles.edge;
    let mut z_proj: Vec<Option<Var>> = vec![None; t_g];
    let mut h_edge: Vec<Option<Var>> = vec![None; t_g];
    {
        let mut want_proj = vec![false; t_g];
        let mut want_edge = vec![false; t_g];
        for &t in &plan.loss_timesteps {
            if need_node {
                want_proj[t] = true;
            }
            if need_edge && toggles.spatial {
                want_edge[t] = true;
            }
            if toggles.temporal {
                if let Some(pair) = plan.pairs[t] {
                    if need_node {
                        want_proj[pair.t_a - 1] = true;
                        want_proj[pair.t_b - 1] = true;
                    }
                    if need_edge {
                        want_edge[pair.t_a - 1] = true;
                        want_edge[pair.t_b - 1] = true;
                    }
                }
            }
        }
        for t in 0..t_g {
            if want_proj[t] {
                z_proj[t] = Some(project_node(&mut tape, &vars, z_cxt[t]));
            }
            if want_edge[t] {
                h_edge[t] = Some(edge_embedding(&mut tape, &vars, z_cxt[t]));
            }
        }
    }

    let mut node_spat_terms = Vec::new();
    let mut adj_spat_terms = Vec::new();
    let mut node_temp_terms = Vec::new();
    let mut adj_temp_terms = Vec::new();

    for &t in &plan.loss_timesteps {
        let masks = &plan.mask_sets[t];
        if toggles.spatial {
            if need_node {
                let zp = z_proj[t].expect("planned above");
                node_spat_terms.push(spatial_node_loss(&mut tape, &vars, zp, &z_tar[t], masks));
            }
            if need_edge {
                let h = h_edge[t].expect("planned above");
                adj_spat_terms.push(spatial_adj_loss(&mut tape, h, &graph.adjacency[t], masks));
            }
        }
        if toggles.temporal {
            if let Some(pair) = plan.pairs[t] {
                let (ia, ib) = (pair.t_a - 1, pair.t_b - 1);
                if need_node {
                    let zp_t = z_proj[t].expect("planned above");
                    let zp_a = z_proj[ia].expect("planned above");
                    let zp_b = z_proj[ib].expect("planned above");
                    let fill = temporal_fill(&mut tape, &vars, zp_a, zp_b);
                    node_temp_terms.push(temporal_node_loss(
                        &mut tape, &vars, zp_t, fill, &z_tar[t], masks,
                    ));
                }
                if need_edge {
                    let ha = h_edge[ia].expect("planned above");
                    let hb = h_edge[ib].expect("planned above");
                    adj_temp_terms.push(temporal_adj_loss(
                        &mut tape, ha, hb, &graph.adjacency[t], masks,
                    ));
                }
            }
        }
    }

    let node_spat = mean_terms(&mut tape, &node_spat_terms);
    let adj_spat = mean_terms(&mut tape, &adj_spat_terms);
    let node_temp = mean_terms(&mut tape, &node_temp_terms);
    let adj_temp = mean_terms(&mut tape, &adj_temp_terms);

    // total = γ·(λ_n·ns + λ_a·as) + (1−γ)·(λ_n·nt + λ_a·at), built on
    // the tape from whichever terms exist.
    let mut total: Option<Var> = None;
    let add_scaled = |tape: &mut Tape, term: Option<Var>, coeff: f64, total: &mut Option<Var>| {
        if let Some(v) = term {
            if coeff != 0.0 {
                let scaled = tape.scale(v, coeff);
                *total = Some(match *total {
                    Some(acc) => tape.add(acc, scaled),
                    None => scaled,
                });
            }
        }
    };
    add_scaled(&mut tape, node_spat, weights.gamma * weights.lambda_node, &mut total);
    add_scaled(&mut tape, adj_spat, weights.gamma * weights.lambda_adj, &mut total);
    add_scaled(&mut tape, node_temp, (1.0 - weights.gamma) * weights.lambda_node, &mut total);
    add_scaled(&mut tape, adj_temp, (1.0 - weights.gamma) * weights.lambda_adj, &mut total);
    let total = match total {
        Some(v) => v,
        // Degenerate but legal: e.g. temporal-only objective on a graph
        // where no timestep is feasible. The loss is an exact zero.
        None => tape.scalar(0.0),
    };

    let scalar = |tape: &Tape, v: Option<Var>| v.map(|v| tape.scalar_value(v)).unwrap_or(0.0);
    let breakdown = LossBreakdown {
        node_spat: scalar(&tape, node_spat),
        adj_spat: scalar(&tape, adj_spat),
        node_temp: scalar(&tape, node_temp),
        adj_temp: scalar(&tape, adj_temp),
        total: tape.scalar_value(total),
    };
    if !breakdown.total.is_finite() {
        return Err(ObjectiveError::NonFinite("total"));
    }

    Ok(SubjectLoss { tape, bound, total, breakdown, target_std })
}

fn mean_terms(tape: &mut Tape, terms: &[Var]) -> Option<Var> {
    if terms.is_empty() {
        return None;
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    Some(tape.scale(acc, 1.0 / terms.len() as f64))
}

fn embedding_std(zs: &[Array2<f64>]) -> f64 {
    let count: usize = zs.iter().map(|z| z.len()).sum();
    if count == 0 {
        return 0.0;
    }
    let mean: f64 = zs.iter().flat_map(|z| z.iter()).sum::<f64>() / count as f64;
    let var: f64 =
        zs.iter().flat_map(|z| z.iter()).map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / count as f64;
    var.sqrt()
}
