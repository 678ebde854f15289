//! Attention message passing, the residual block stack and the Deep Set head.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::EdgeIndex;
use crate::tensor::{Activation, Dense, ParamId, ParamStore, Tape, Tensor, Var};

pub const NEGATIVE_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatLayerConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub heads: usize,
    /// Width of each head; the concatenation is `heads * head_dim` wide.
    pub head_dim: usize,
}

impl GatLayerConfig {
    /// Heads share `out_dim` evenly, rounding the head width up when it does
    /// not divide.
    pub fn new(in_dim: usize, out_dim: usize, heads: usize) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 || heads == 0 {
            return Err(Error::Config("attention layer dimensions must be positive".into()));
        }
        Ok(Self { in_dim, out_dim, heads, head_dim: out_dim.div_ceil(heads) })
    }

    pub fn concat_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Multi-head GATv2 layer with a scalar edge attribute.
///
/// Per head the score of edge `j -> i` is
/// `a_h . leaky_relu(W_src x_j + W_dst x_i + b + w_e * edge_ij)`; attention is
/// the softmax of the scores over the incoming edges of `i`. Messages are
/// `alpha_ij * U x_j`. Head outputs are concatenated, mixed back to
/// `out_dim` and added to a learned transform of `x_i` itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatLayer {
    pub cfg: GatLayerConfig,
    pub w_src: ParamId,
    pub w_dst: ParamId,
    pub att_bias: ParamId,
    pub value: ParamId,
    pub edge_weight: ParamId,
    pub attention: ParamId,
    pub mix: Dense,
    pub update: ParamId,
}

impl GatLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: GatLayerConfig, rng: &mut R) -> Self {
        let c = cfg.concat_dim();
        let w_src = store.add_weight(format!("{name}.w_src"), cfg.in_dim, c, rng);
        let w_dst = store.add_weight(format!("{name}.w_dst"), cfg.in_dim, c, rng);
        let att_bias = store.add(format!("{name}.att_bias"), Tensor::zeros(1, c));
        let value = store.add_weight(format!("{name}.value"), cfg.in_dim, c, rng);
        let edge_weight = store.add_weight(format!("{name}.edge_weight"), 1, c, rng);
        let attention = store.add_weight(format!("{name}.attention"), cfg.head_dim, cfg.heads, rng);
        // stored as 1 x C, head-major
        let att = store.get(attention).value.clone();
        let mut flat = Vec::with_capacity(c);
        for h in 0..cfg.heads {
            for k in 0..cfg.head_dim {
                flat.push(att.get(k, h));
            }
        }
        store.get_mut(attention).value = Tensor::row_vector(flat);
        store.get_mut(attention).grad = Tensor::zeros(1, c);
        let mix = Dense::new(store, &format!("{name}.mix"), c, cfg.out_dim, rng);
        let update = store.add_weight(format!("{name}.update"), cfg.in_dim, cfg.out_dim, rng);
        Self { cfg, w_src, w_dst, att_bias, value, edge_weight, attention, mix, update }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, edges: &Arc<EdgeIndex>, x: Var) -> Result<Var> {
        Ok(self.forward_with_attention(tape, store, edges, x)?.0)
    }

    /// Also returns the tape entry holding the attention weights.
    pub fn forward_with_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        edges: &Arc<EdgeIndex>,
        x: Var,
    ) -> Result<(Var, Var)> {
        if tape.value(x).cols() != self.cfg.in_dim {
            return Err(Error::Shape(format!(
                "attention layer expects {} input columns, got {}",
                self.cfg.in_dim,
                tape.value(x).cols()
            )));
        }
        let p = |tape: &mut Tape, id| tape.param(store, id);
        let w_src = p(tape, self.w_src);
        let w_dst = p(tape, self.w_dst);
        let att_bias = p(tape, self.att_bias);
        let value = p(tape, self.value);
        let edge_weight = p(tape, self.edge_weight);
        let attention = p(tape, self.attention);
        let update = p(tape, self.update);

        let left = tape.matmul(x, w_src)?;
        let right = tape.matmul(x, w_dst)?;
        let right = tape.add_bias(right, att_bias)?;
        let vals = tape.matmul(x, value)?;
        let agg = tape.gat_attention(
            left,
            right,
            vals,
            edge_weight,
            attention,
            Arc::clone(edges),
            self.cfg.heads,
            NEGATIVE_SLOPE,
        )?;
        let mixed = self.mix.forward(tape, store, agg)?;
        let own = tape.matmul(x, update)?;
        Ok((tape.add(mixed, own)?, agg))
    }
}

/// Input projection followed by `K` residual attention blocks,
/// `H_{k+1} = H_k + elu(gat_k(H_k))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GnnStack {
    pub input: Dense,
    pub blocks: Vec<GatLayer>,
}

impl GnnStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        in_dim: usize,
        hidden: usize,
        heads: usize,
        n_blocks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::Config("at least one attention block is required".into()));
        }
        let input = Dense::new(store, "gnn.input", in_dim, hidden, rng);
        let cfg = GatLayerConfig::new(hidden, hidden, heads)?;
        let blocks = (0..n_blocks).map(|k| GatLayer::new(store, &format!("gnn.block{k}"), cfg, rng)).collect();
        Ok(Self { input, blocks })
    }

    pub fn hidden(&self) -> usize {
        self.input.fan_out
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, edges: &Arc<EdgeIndex>, x: Var) -> Result<Var> {
        let mut h = self.input.forward(tape, store, x)?;
        for block in &self.blocks {
            let g = block.forward(tape, store, edges, h)?;
            let g = tape.activation(g, Activation::Elu);
            h = tape.add(h, g)?;
        }
        Ok(h)
    }
}

/// `rho(mean_n phi(h_{s,n}))` with a three-layer `phi` and a two-layer `rho`.
/// Returns one row of two raw outputs per station; the caller maps them to
/// `(mu, sigma)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeepSetHead {
    pub ds_phi: [Dense; 3],
    pub ds_rho: [Dense; 2],
}

impl DeepSetHead {
    pub fn new<R: Rng>(store: &mut ParamStore, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let ds_phi = [
            Dense::new(store, "ds.phi0", in_dim, hidden, rng),
            Dense::new(store, "ds.phi1", hidden, hidden, rng),
            Dense::new(store, "ds.phi2", hidden, hidden, rng),
        ];
        let ds_rho = [Dense::new(store, "ds.rho0", hidden, hidden, rng), Dense::new(store, "ds.rho1", hidden, 2, rng)];
        Self { ds_phi, ds_rho }
    }

    /// `h` holds `n_members` consecutive rows per station.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, n_members: usize) -> Result<Var> {
        let mut z = h;
        for (i, layer) in self.ds_phi.iter().enumerate() {
            z = layer.forward(tape, store, z)?;
            if i + 1 < self.ds_phi.len() {
                z = tape.activation(z, Activation::Elu);
            }
        }
        let pooled = tape.mean_pool(z, n_members)?;
        let r = self.ds_rho[0].forward(tape, store, pooled)?;
        let r = tape.activation(r, Activation::Elu);
        self.ds_rho[1].forward(tape, store, r)
    }
}
