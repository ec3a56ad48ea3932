//! Parameter layout and the two encoders.
//!
//! The *online* branch (θ) comprises the feature projection, the
//! temporal GRU, and a 4-layer GIN stack; the *target* branch (θ̄) is a
//! momentum-averaged copy of exactly that subset. Projection matrices,
//! the learnable mask token, the two decoders, and any downstream head
//! belong only to the online side.
//!
//! Every parameter has a fixed dotted name and a fixed creation order,
//! so initialization consumes the RNG identically across runs and
//! checkpoints have a canonical tensor set.

use ndarray::{Array1, Array2};
use rand::Rng;
use thiserror::Error;

use crate::graphbuild::DynamicGraph;
use crate::masking::BlockMaskSet;
use crate::nn::layers::{
    gin_layer, gru_sequence, node_feature_matrix, zero_diagonal, Bound, GinVars, GruVars,
};
use crate::nn::params::{ParamStore, Role};
use crate::nn::tape::{Tape, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model dimensions: {0}")]
    BadDims(String),
    #[error("graph has {found} nodes, model expects {expected}")]
    NodeCountMismatch { expected: usize, found: usize },
    #[error("parameter store error: {0}")]
    Param(#[from] crate::nn::params::ParamError),
}

/// Widths of every stage of the model.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    /// Number of ROIs / graph nodes (N).
    pub n_rois: usize,
    /// Node feature width after the feature projection.
    pub d_v: usize,
    /// GRU hidden width (temporal summary η).
    pub d_eta: usize,
    /// Encoder embedding width.
    pub d_enc: usize,
    /// Decoder working width. Must equal `d_enc`: the node decoder is a
    /// single residual mixer block (output width = input width) and its
    /// output is compared against target-encoder embeddings.
    pub d_dec: usize,
    /// GIN layers in the encoder stack.
    pub gin_layers: usize,
    /// Token-mixing hidden width of the decoders.
    pub mixer_token_hidden: usize,
    /// Channel-mixing hidden width of the decoders.
    pub mixer_channel_hidden: usize,
}

impl ModelDims {
    /// Desk-scale defaults for a given node count.
    pub fn for_nodes(n_rois: usize) -> Self {
        ModelDims {
            n_rois,
            d_v: 16,
            d_eta: 16,
            d_enc: 16,
            d_dec: 16,
            gin_layers: 2,
            mixer_token_hidden: n_rois,
            mixer_channel_hidden: 16,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::BadDims(msg));
        if self.n_rois < 2 {
            return fail(format!("n_rois = {} must be at least 2", self.n_rois));
        }
        for (name, v) in [
            ("d_v", self.d_v),
            ("d_eta", self.d_eta),
            ("d_enc", self.d_enc),
            ("d_dec", self.d_dec),
            ("gin_layers", self.gin_layers),
            ("mixer_token_hidden", self.mixer_token_hidden),
            ("mixer_channel_hidden", self.mixer_channel_hidden),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.d_dec != self.d_enc {
            return fail(format!(
                "d_dec = {} must equal d_enc = {}: the residual node decoder \
                 reconstructs directly in encoder space",
                self.d_dec, self.d_enc
            ));
        }
        Ok(())
    }
}

fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

fn insert_weight(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    role: Role,
    rows: usize,
    cols: usize,
) {
    let w = uniform_init(rng, rows, cols);
    store.insert(name, role, w).expect("fresh store has no duplicates");
}

fn insert_zeros(store: &mut ParamStore, name: &str, role: Role, rows: usize, cols: usize) {
    store.insert(name, role, Array2::zeros((rows, cols))).expect("fresh store");
}

fn insert_mixer(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, role: Role, dims: &ModelDims) {
    let d = dims.d_dec;
    let nh = dims.mixer_token_hidden;
    let ch = dims.mixer_channel_hidden;
    let n = dims.n_rois;
    store
        .insert(&format!("{prefix}.ln1.g"), role, Array2::from_elem((1, d), 1.0))
        .expect("fresh store");
    insert_zeros(store, &format!("{prefix}.ln1.b"), role, 1, d);
    insert_weight(store, rng, &format!("{prefix}.w1"), role, nh, n);
    insert_weight(store, rng, &format!("{prefix}.w2"), role, n, nh);
    store
        .insert(&format!("{prefix}.ln2.g"), role, Array2::from_elem((1, d), 1.0))
        .expect("fresh store");
    insert_zeros(store, &format!("{prefix}.ln2.b"), role, 1, d);
    insert_weight(store, rng, &format!("{prefix}.w3"), role, ch, d);
    insert_weight(store, rng, &format!("{prefix}.w4"), role, d, ch);
}

/// Create every pretraining parameter (encoder θ, projections, mask
/// token, both decoders) in a fixed order. Weight matrices draw from
/// `U(−1/√fan_in, +1/√fan_in)`; biases and GIN ε start at zero; layer
/// norms start at identity; the mask token draws from `N(0, 0.02²)`.
pub fn init_pretrain_params(dims: &ModelDims, rng: &mut impl Rng) -> Result<ParamStore, ModelError> {
    dims.validate()?;
    let n = dims.n_rois;
    let mut store = ParamStore::new();

    insert_weight(&mut store, rng, "enc.feat.w", Role::Encoder, dims.d_v, n + dims.d_eta);
    for gate in ["z", "r", "h"] {
        insert_weight(&mut store, rng, &format!("enc.gru.w_{gate}"), Role::Encoder, dims.d_eta, n);
        insert_weight(&mut store, rng, &format!("enc.gru.u_{gate}"), Role::Encoder, dims.d_eta, dims.d_eta);
        insert_zeros(&mut store, &format!("enc.gru.b_{gate}"), Role::Encoder, 1, dims.d_eta);
    }
    for l in 0..dims.gin_layers {
        let d_in = if l == 0 { dims.d_v } else { dims.d_enc };
        insert_zeros(&mut store, &format!("enc.gin{l}.eps"), Role::Encoder, 1, 1);
        insert_weight(&mut store, rng, &format!("enc.gin{l}.mlp.w1"), Role::Encoder, dims.d_enc, d_in);
        insert_zeros(&mut store, &format!("enc.gin{l}.mlp.b1"), Role::Encoder, 1, dims.d_enc);
        insert_weight(&mut store, rng, &format!("enc.gin{l}.mlp.w2"), Role::Encoder, dims.d_enc, dims.d_enc);
        insert_zeros(&mut store, &format!("enc.gin{l}.mlp.b2"), Role::Encoder, 1, dims.d_enc);
    }

    insert_weight(&mut store, rng, "proj.node.w", Role::Projection, dims.d_dec, dims.d_enc);
    insert_weight(&mut store, rng, "proj.edge.w", Role::Projection, dims.d_dec, dims.d_enc);
    insert_weight(&mut store, rng, "proj.temp.w", Role::Projection, dims.d_dec, 2 * dims.d_dec);

    let token = Array2::from_shape_fn((1, dims.d_dec), |_| {
        use rand_distr::Distribution;
        let normal = rand_distr::Normal::new(0.0, 0.02).expect("valid sd");
        normal.sample(rng)
    });
    store.insert("mask.token", Role::MaskToken, token).expect("fresh store");

    insert_mixer(&mut store, rng, "dec.node", Role::DecoderNode, dims);
    insert_mixer(&mut store, rng, "dec.edge", Role::DecoderEdge, dims);
    Ok(store)
}

/// Create the downstream head: attention readout plus one affine output
/// layer with `n_outputs` units.
pub fn init_head_params(
    dims: &ModelDims,
    n_outputs: usize,
    rng: &mut impl Rng,
) -> Result<ParamStore, ModelError> {
    dims.validate()?;
    if n_outputs == 0 {
        return Err(ModelError::BadDims("n_outputs must be positive".into()));
    }
    let mut store = ParamStore::new();
    insert_weight(&mut store, rng, "head.sero.w1", Role::Head, dims.d_enc, dims.d_enc);
    insert_weight(&mut store, rng, "head.sero.w2", Role::Head, dims.n_rois, dims.d_enc);
    insert_weight(&mut store, rng, "head.out.w", Role::Head, n_outputs, dims.d_enc);
    insert_zeros(&mut store, "head.out.b", Role::Head, 1, n_outputs);
    Ok(store)
}

/// Fresh target store: a copy of the encoder subset of `params`.
pub fn target_from(params: &ParamStore) -> ParamStore {
    params.subset(Role::Encoder)
}

/// Per-timestep encoder inputs, already masked where appropriate.
pub struct EncoderInputs<'a> {
    /// Window summaries `u(t)`, each length-N.
    pub summaries: &'a [Array1<f64>],
    /// Adjacency per timestep (context-masked for the online branch,
    /// raw for the target branch).
    pub adjacency: Vec<Array2<f64>>,
    /// Per-timestep `N×1` keep indicators for node features (1 = row
    /// visible); `None` means unmasked.
    pub node_keep: Option<Vec<Array2<f64>>>,
}

impl<'a> EncoderInputs<'a> {
    /// Unmasked inputs straight from a dynamic graph.
    pub fn unmasked(graph: &'a DynamicGraph) -> Self {
        EncoderInputs {
            summaries: &graph.window_summary,
            adjacency: graph.adjacency.clone(),
            node_keep: None,
        }
    }

    /// Context inputs: adjacency rectangles zeroed and node rows hidden
    /// according to each timestep's mask set.
    pub fn context(
        graph: &'a DynamicGraph,
        mask_sets: &[BlockMaskSet],
    ) -> Result<Self, crate::masking::MaskError> {
        assert_eq!(mask_sets.len(), graph.meta.t_g, "one mask set per timestep");
        let n = graph.meta.n_rois;
        let mut adjacency = Vec::with_capacity(mask_sets.len());
        let mut node_keep = Vec::with_capacity(mask_sets.len());
        for (a, set) in graph.adjacency.iter().zip(mask_sets) {
            adjacency.push(crate::masking::apply_adj_context(a, set)?);
            let mut keep = Array2::from_elem((n, 1), 1.0);
            for m in &set.node_masks {
                for i in m.lo..m.hi {
                    keep[(i, 0)] = 0.0;
                }
            }
            node_keep.push(keep);
        }
        Ok(EncoderInputs { summaries: &graph.window_summary, adjacency, node_keep: Some(node_keep) })
    }
}

/// Run the full encoder over a window sequence on the given tape:
/// GRU over `u(1..t)` produces η(t), node features are built per
/// timestep (masked rows zeroed for the context branch), then the GIN
/// stack message-passes over that timestep's adjacency. Returns one
/// `N×d_enc` embedding node per timestep.
pub fn encode_sequence(
    tape: &mut Tape,
    bound: &Bound,
    dims: &ModelDims,
    inputs: &EncoderInputs<'_>,
) -> Result<Vec<Var>, ModelError> {
    let n = dims.n_rois;
    if let Some(u) = inputs.summaries.first() {
        if u.len() != n {
            return Err(ModelError::NodeCountMismatch { expected: n, found: u.len() });
        }
    }
    for a in &inputs.adjacency {
        if a.nrows() != n || a.ncols() != n {
            return Err(ModelError::NodeCountMismatch { expected: n, found: a.nrows() });
        }
    }

    let u_vars: Vec<Var> = inputs
        .summaries
        .iter()
        .map(|u| {
            let row = Array2::from_shape_fn((1, n), |(_, j)| u[j]);
            tape.constant(row)
        })
        .collect();
    let gru = GruVars::from_bound(bound, "enc.gru");
    let etas = gru_sequence(tape, &u_vars, dims.d_eta, &gru);

    let feat_w = bound.var("enc.feat.w");
    let gin_vars: Vec<GinVars> = (0..dims.gin_layers)
        .map(|l| GinVars::from_bound(bound, &format!("enc.gin{l}")))
        .collect();

    let ones_row = tape.constant(Array2::from_elem((1, dims.d_v), 1.0));
    let mut out = Vec::with_capacity(etas.len());
    for (t, &eta) in etas.iter().enumerate() {
        let mut x = node_feature_matrix(tape, eta, feat_w, n);
        if let Some(keeps) = &inputs.node_keep {
            // Expand the N×1 keep column to N×d_v and zero hidden rows.
            let keep_col = tape.constant(keeps[t].clone());
            let keep = tape.matmul(keep_col, ones_row);
            x = tape.mul(x, keep);
        }
        let agg = tape.constant(zero_diagonal(&inputs.adjacency[t]));
        let mut z = x;
        for gin in &gin_vars {
            z = gin_layer(tape, z, agg, gin);
        }
        out.push(z);
    }
    Ok(out)
}

/// Evaluate the target branch: θ̄ runs on a throwaway tape with every
/// parameter bound as a constant, over *unmasked* inputs. Only the
/// embedding values escape, so no gradient can ever reach θ̄.
pub fn encode_target(
    target: &ParamStore,
    dims: &ModelDims,
    graph: &DynamicGraph,
) -> Result<Vec<Array2<f64>>, ModelError> {
    let mut tape = Tape::new();
    let bound = Bound::bind_all(&mut tape, target, |_, _| false);
    let inputs = EncoderInputs::unmasked(graph);
    let zs = encode_sequence(&mut tape, &bound, dims, &inputs)?;
    Ok(zs.into_iter().map(|z| tape.value(z).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SynthConfig;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dims() -> ModelDims {
        ModelDims {
            n_rois: 6,
            d_v: 5,
            d_eta: 4,
            d_enc: 4,
            d_dec: 4,
            gin_layers: 4,
            mixer_token_hidden: 6,
            mixer_channel_hidden: 4,
        }
    }

    fn small_graph() -> DynamicGraph {
        let cfg = SynthConfig {
            n_subjects: 1,
            n_rois: 6,
            t_max: 60,
            n_states: 2,
            switch_rates: vec![0.2],
            ar_coeff: 0.3,
            noise_sd: 0.1,
            seed: 12,
            ..SynthConfig::default()
        };
        let subject = &crate::signal::synth_dataset(&cfg).unwrap()[0];
        crate::graphbuild::build_dynamic_graph(subject, 12, 8, 0.3).unwrap()
    }

    #[test]
    fn dims_validation_rejects_mismatched_decoder_width() {
        let mut dims = small_dims();
        dims.d_dec = 8;
        assert!(matches!(dims.validate(), Err(ModelError::BadDims(_))));
        assert!(small_dims().validate().is_ok());
    }

    #[test]
    fn init_is_deterministic_and_ordered() {
        let dims = small_dims();
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = init_pretrain_params(&dims, &mut r1).unwrap();
        let b = init_pretrain_params(&dims, &mut r2).unwrap();
        assert!(a.same_layout(&b));
        for (name, va) in a.iter() {
            assert_eq!(va, b.get(name).unwrap(), "{name} must be reproducible");
        }
        // ε starts at zero, layer norm at identity.
        assert_eq!(a.get("enc.gin0.eps").unwrap()[(0, 0)], 0.0);
        assert_eq!(a.get("dec.node.ln1.g").unwrap()[(0, 1)], 1.0);
        // Init bound respected.
        let w = a.get("enc.feat.w").unwrap();
        let bound = 1.0 / ((dims.n_rois + dims.d_eta) as f64).sqrt();
        assert!(w.iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn target_subset_mirrors_encoder_names() {
        let dims = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = init_pretrain_params(&dims, &mut rng).unwrap();
        let target = target_from(&params);
        assert!(target.names().all(|n| n.starts_with("enc.")));
        assert!(target.same_layout(&params.subset(Role::Encoder)));
        assert!(target.len() > 0);
    }

    #[test]
    fn node_feature_hand_example() {
        // W = [[1,0,2],[0,1,3]], η = 0.5 → x₁ = [2.0, 1.5], x₂ = [1.0, 2.5].
        let mut tape = Tape::new();
        let eta = tape.constant(array![[0.5]]);
        let w = tape.constant(array![[1.0, 0.0, 2.0], [0.0, 1.0, 3.0]]);
        let x = node_feature_matrix(&mut tape, eta, w, 2);
        let v = tape.value(x);
        assert_abs_diff_eq!(v[(0, 0)], 2.0);
        assert_abs_diff_eq!(v[(0, 1)], 1.5);
        assert_abs_diff_eq!(v[(1, 0)], 1.0);
        assert_abs_diff_eq!(v[(1, 1)], 2.5);
    }

    #[test]
    fn context_equals_target_when_unmasked_and_synced() {
        let dims = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = init_pretrain_params(&dims, &mut rng).unwrap();
        let target = target_from(&params);
        let graph = small_graph();

        let mut tape = Tape::new();
        let bound = Bound::bind_all(&mut tape, &params, |_, _| true);
        let inputs = EncoderInputs::unmasked(&graph);
        let zs = encode_sequence(&mut tape, &bound, &dims, &inputs).unwrap();
        let z_tar = encode_target(&target, &dims, &graph).unwrap();
        assert_eq!(zs.len(), graph.meta.t_g);
        for (z, zt) in zs.iter().zip(z_tar.iter()) {
            assert_eq!(tape.value(*z), zt);
        }
    }

    #[test]
    fn masked_rows_do_not_leak_their_features() {
        // Changing the GRU/feature path can alter every row, but a hidden
        // row's own feature content must not affect the encoding: we
        // verify by zeroing the keep indicator for row 2 and checking the
        // encoding is identical for two inputs differing only in that
        // row's adjacency-free feature contribution. Message passing is
        // the only remaining channel, and it sees the zeroed row.
        let dims = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = init_pretrain_params(&dims, &mut rng).unwrap();
        let graph = small_graph();

        let set = crate::masking::BlockMaskSet {
            timestep: 0,
            n: 6,
            node_masks: vec![crate::masking::NodeBlockMask { lo: 2, hi: 3, ratio: 0.2 }],
            adj_masks: vec![],
        };
        let sets: Vec<_> = (0..graph.meta.t_g)
            .map(|t| {
                let mut s = set.clone();
                s.timestep = t;
                s
            })
            .collect();

        let encode = |params: &ParamStore| -> Vec<Array2<f64>> {
            let mut tape = Tape::new();
            let bound = Bound::bind_all(&mut tape, params, |_, _| false);
            let inputs = EncoderInputs::context(&graph, &sets).unwrap();
            let zs = encode_sequence(&mut tape, &bound, &dims, &inputs).unwrap();
            zs.into_iter().map(|z| tape.value(z).clone()).collect()
        };

        let base = encode(&params);
        // Perturb the feature projection column that only affects node 2's
        // one-hot contribution; the masked row never exposes it.
        let mut perturbed = params.clone();
        {
            let w = perturbed.get_mut("enc.feat.w").unwrap();
            for r in 0..w.nrows() {
                w[(r, 2)] += 10.0;
            }
        }
        let after = encode(&perturbed);
        for (a, b) in base.iter().zip(after.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gin_stack_is_permutation_equivariant() {
        let dims = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = init_pretrain_params(&dims, &mut rng).unwrap();
        let n = 6;

        // Random embedding and symmetric adjacency.
        let z0 = Array2::from_shape_fn((n, dims.d_v), |_| rng.random_range(-1.0..1.0));
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            a[(i, i)] = 1.0;
            for j in (i + 1)..n {
                let v = f64::from(rng.random_range(0..2) as u8);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        // Permutation: rotate indices.
        let perm: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
        let pz = Array2::from_shape_fn((n, dims.d_v), |(i, j)| z0[(perm[i], j)]);
        let pa = Array2::from_shape_fn((n, n), |(i, j)| a[(perm[i], perm[j])]);

        let run_stack = |z_in: &Array2<f64>, adj: &Array2<f64>| -> Array2<f64> {
            let mut tape = Tape::new();
            let bound = Bound::bind_all(&mut tape, &params, |_, _| false);
            let agg = tape.constant(zero_diagonal(adj));
            let mut z = tape.constant(z_in.clone());
            for l in 0..dims.gin_layers {
                let gin = GinVars::from_bound(&bound, &format!("enc.gin{l}"));
                z = gin_layer(&mut tape, z, agg, &gin);
            }
            tape.value(z).clone()
        };

        let out = run_stack(&z0, &a);
        let out_p = run_stack(&pz, &pa);
        for i in 0..n {
            for j in 0..dims.d_enc {
                assert_abs_diff_eq!(out_p[(i, j)], out[(perm[i], j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mixer_token_mixing_propagates_across_rows() {
        // A single-entry perturbation must reach every row through the
        // token-mixing branch for generic weights.
        let dims = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = init_pretrain_params(&dims, &mut rng).unwrap();
        let run = |z_in: &Array2<f64>| -> Array2<f64> {
            let mut tape = Tape::new();
            let bound = Bound::bind_all(&mut tape, &params, |_, _| false);
            let mv = crate::nn::layers::MixerVars::from_bound(&bound, "dec.node");
            let z = tape.constant(z_in.clone());
            let out = crate::nn::layers::mixer_block(&mut tape, z, &mv);
            tape.value(out).clone()
        };
        let z0 = Array2::from_shape_fn((dims.n_rois, dims.d_dec), |_| rng.random_range(-1.0..1.0));
        let mut z1 = z0.clone();
        z1[(2, 1)] += 0.5;
        let (a, b) = (run(&z0), run(&z1));
        for i in 0..dims.n_rois {
            let row_changed = (0..dims.d_dec).any(|j| (a[(i, j)] - b[(i, j)]).abs() > 1e-9);
            assert!(row_changed, "row {i} unaffected by the perturbation");
        }
    }
}
