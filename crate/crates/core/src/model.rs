//! Encode-process-decode interaction networks over the limited-area graphs,
//! boundary forcing and autoregressive rollout.
//!
//! Every graph step follows the same residual interaction-network update on
//! an edge set E with sender latents h_s and receiver latents h_r:
//!
//! ```text
//! e' <- MLP_E([e, h_s, h_r])
//! e  <- e + e'
//! h_r <- h_r + MLP_V([h_r, sum over incoming e'])
//! ```
//!
//! Decode steps apply the same pattern but skip the edge write-back; the
//! grid-to-mesh encode step additionally applies a residual self-update to
//! the grid latents so they stay useful for the decoder. The multi-scale and
//! single-level variants process on one mesh node set; the hierarchical
//! variant runs encode-up, down/up processing sweeps, and decode-down over
//! the level stack.

use crate::data::FORCING_FEATURES;
use crate::error::{LamError, Result};
use crate::graph::{LamGraph, Variant};
use crate::nn::{mlp_apply, MlpBind, MlpParams};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use std::sync::Arc;

/// Number of static features per grid node and per mesh node.
pub const GRID_STATIC_FEATURES: usize = 4;
pub const MESH_STATIC_FEATURES: usize = 2;
/// Edge static features (normalized length and vector difference).
pub const EDGE_FEATURES: usize = 3;

const PRED_HEAD_SCALE: f64 = 0.01;

/// Architecture hyperparameters. `k_layers` counts processor layers (each
/// hierarchical layer is one full down+up sweep).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub latent_width: usize,
    pub k_layers: usize,
    pub n_levels: usize,
    pub n_vars: usize,
    pub n_forcing: usize,
}

impl ModelConfig {
    /// Reference configuration: latent width 64, 4 processor layers for the
    /// flat variants and 2 for the hierarchical one.
    pub fn standard(variant: Variant, n_levels: usize, n_vars: usize) -> Self {
        ModelConfig {
            variant,
            latent_width: 64,
            k_layers: match variant {
                Variant::Hierarchical => 2,
                _ => 4,
            },
            n_levels,
            n_vars,
            n_forcing: FORCING_FEATURES,
        }
    }

    pub fn grid_input_width(&self) -> usize {
        2 * self.n_vars + 3 * self.n_forcing + GRID_STATIC_FEATURES
    }

    pub fn matches_graph(&self, graph: &LamGraph) -> Result<()> {
        if graph.variant != self.variant {
            return Err(LamError::contract(format!(
                "model variant {} vs graph variant {}",
                self.variant, graph.variant
            )));
        }
        if graph.n_levels() != self.n_levels {
            return Err(LamError::contract(format!(
                "model has {} mesh levels, graph has {}",
                self.n_levels,
                graph.n_levels()
            )));
        }
        Ok(())
    }
}

/// Edge and node MLP pair of one interaction-network step.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMlps<S: Scalar = f64> {
    pub edge: MlpParams<S>,
    pub node: MlpParams<S>,
}

impl<S: Scalar> InteractionMlps<S> {
    fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        InteractionMlps {
            edge: MlpParams::init(3 * d, d, d, true, 1.0, rng),
            node: MlpParams::init(2 * d, d, d, true, 1.0, rng),
        }
    }

    fn for_each(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<S>)) {
        self.edge.for_each(&format!("{prefix}/edge"), f);
        self.node.for_each(&format!("{prefix}/node"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        self.edge.for_each_mut(&format!("{prefix}/edge"), f);
        self.node.for_each_mut(&format!("{prefix}/node"), f);
    }

    fn bind(&self, tape: &mut Tape<S>, needs_grad: bool) -> BoundInteraction {
        BoundInteraction {
            edge: self.edge.bind(tape, needs_grad),
            node: self.node.bind(tape, needs_grad),
        }
    }

    fn convert<T: Scalar>(&self) -> InteractionMlps<T> {
        InteractionMlps {
            edge: MlpParams::from_f64(&self.edge.to_f64()),
            node: MlpParams::from_f64(&self.node.to_f64()),
        }
    }
}

fn convert_mlp<S: Scalar, T: Scalar>(p: &MlpParams<S>) -> MlpParams<T> {
    MlpParams::from_f64(&p.to_f64())
}

/// Parameters of the flat (multi-scale / single-level) model.
#[derive(Debug, Clone, PartialEq)]
pub struct GcParams<S: Scalar = f64> {
    pub grid_embed: MlpParams<S>,
    pub mesh_embed: MlpParams<S>,
    pub g2m_edge_embed: MlpParams<S>,
    pub mesh_edge_embed: MlpParams<S>,
    pub m2g_edge_embed: MlpParams<S>,
    pub g2m: InteractionMlps<S>,
    pub grid_self: MlpParams<S>,
    pub layers: Vec<InteractionMlps<S>>,
    pub m2g: InteractionMlps<S>,
    pub pred: MlpParams<S>,
}

/// One hierarchical processor layer: intra-level and inter-level MLP sets for
/// the downward and upward halves of the sweep. Inter-level entry `j` handles
/// the level pair (j+1 -> j) going down and (j -> j+1) going up.
#[derive(Debug, Clone, PartialEq)]
pub struct HiLayerParams<S: Scalar = f64> {
    pub down_same: Vec<InteractionMlps<S>>,
    pub down_inter: Vec<InteractionMlps<S>>,
    pub up_same: Vec<InteractionMlps<S>>,
    pub up_inter: Vec<InteractionMlps<S>>,
}

/// Parameters of the hierarchical model. Every edge set and mesh level has
/// its own MLPs; nothing is shared across levels or sweep directions.
#[derive(Debug, Clone, PartialEq)]
pub struct HiParams<S: Scalar = f64> {
    pub grid_embed: MlpParams<S>,
    pub level_embed: Vec<MlpParams<S>>,
    pub g2m_edge_embed: MlpParams<S>,
    pub same_edge_embed: Vec<MlpParams<S>>,
    pub up_edge_embed: Vec<MlpParams<S>>,
    pub down_edge_embed: Vec<MlpParams<S>>,
    pub m2g_edge_embed: MlpParams<S>,
    pub g2m: InteractionMlps<S>,
    pub grid_self: MlpParams<S>,
    /// Encoding steps up the hierarchy; entry `j` handles levels j -> j+1.
    pub up_encode: Vec<InteractionMlps<S>>,
    pub layers: Vec<HiLayerParams<S>>,
    /// Decoding steps down the hierarchy; entry `j` receives at level j.
    pub readout: Vec<InteractionMlps<S>>,
    pub m2g: InteractionMlps<S>,
    pub pred: MlpParams<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VariantParams<S: Scalar = f64> {
    Flat(GcParams<S>),
    Hier(HiParams<S>),
}

/// All model parameters plus the architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S: Scalar = f64> {
    pub config: ModelConfig,
    pub kind: VariantParams<S>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.n_levels == 0 || config.latent_width == 0 || config.n_vars == 0 {
            return Err(LamError::config("model dimensions must be positive"));
        }
        if config.variant == Variant::Hierarchical && config.n_levels == 0 {
            return Err(LamError::config("hierarchical model needs >= 1 level"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.latent_width;
        let s = config.n_vars;
        let in_grid = config.grid_input_width();
        let kind = match config.variant {
            Variant::MultiScale | Variant::SingleLevel => VariantParams::Flat(GcParams {
                grid_embed: MlpParams::init(in_grid, d, d, true, 1.0, &mut rng),
                mesh_embed: MlpParams::init(MESH_STATIC_FEATURES, d, d, true, 1.0, &mut rng),
                g2m_edge_embed: MlpParams::init(EDGE_FEATURES, d, d, true, 1.0, &mut rng),
                mesh_edge_embed: MlpParams::init(EDGE_FEATURES, d, d, true, 1.0, &mut rng),
                m2g_edge_embed: MlpParams::init(EDGE_FEATURES, d, d, true, 1.0, &mut rng),
                g2m: InteractionMlps::init(d, &mut rng),
                grid_self: MlpParams::init(d, d, d, true, 1.0, &mut rng),
                layers: (0..config.k_layers)
                    .map(|_| InteractionMlps::init(d, &mut rng))
                    .collect(),
                m2g: InteractionMlps::init(d, &mut rng),
                pred: MlpParams::init(d, d, s, false, PRED_HEAD_SCALE, &mut rng),
            }),
            Variant::Hierarchical => {
                let levels = config.n_levels;
                VariantParams::Hier(HiParams {
                    grid_embed: MlpParams::init(in_grid, d, d, true, 1.0, &mut rng),
                    level_embed: (0..levels)
                        .map(|_| MlpParams::init(MESH_STATIC_FEATURES, d, d, true, 1.0, &mut rng))
                        .collect(),
                    g2m_edge_embed: MlpParams::init(EDGE_FEATURES, d, d, true, 1.0, &mut rng),
                    same_edge_embed: (0..levels)
                        .map(|_| MlpParams::init(EDGE_FEATURES, d, d, true, 1.0, &mut rng))
                        .collect(),
                    up_edge_embed: (0..levels.saturating_sub(1))
                        .map(|_| MlpParams::init(EDGE_FEATURES, d, d, true, 1.0, &mut rng))
                        .collect(),
                    down_edge_embed: (0..levels.saturating_sub(1))
                        .map(|_| MlpParams::init(EDGE_FEATURES, d, d, true, 1.0, &mut rng))
                        .collect(),
                    m2g_edge_embed: MlpParams::init(EDGE_FEATURES, d, d, true, 1.0, &mut rng),
                    g2m: InteractionMlps::init(d, &mut rng),
                    grid_self: MlpParams::init(d, d, d, true, 1.0, &mut rng),
                    up_encode: (0..levels.saturating_sub(1))
                        .map(|_| InteractionMlps::init(d, &mut rng))
                        .collect(),
                    layers: (0..config.k_layers)
                        .map(|_| HiLayerParams {
                            down_same: (0..levels)
                                .map(|_| InteractionMlps::init(d, &mut rng))
                                .collect(),
                            down_inter: (0..levels.saturating_sub(1))
                                .map(|_| InteractionMlps::init(d, &mut rng))
                                .collect(),
                            up_same: (0..levels)
                                .map(|_| InteractionMlps::init(d, &mut rng))
                                .collect(),
                            up_inter: (0..levels.saturating_sub(1))
                                .map(|_| InteractionMlps::init(d, &mut rng))
                                .collect(),
                        })
                        .collect(),
                    readout: (0..levels.saturating_sub(1))
                        .map(|_| InteractionMlps::init(d, &mut rng))
                        .collect(),
                    m2g: InteractionMlps::init(d, &mut rng),
                    pred: MlpParams::init(d, d, s, false, PRED_HEAD_SCALE, &mut rng),
                })
            }
        };
        Ok(ModelParams {
            config: config.clone(),
            kind,
        })
    }

    /// Visit every parameter tensor in a stable path order (the same order
    /// `bind` records leaves in).
    pub fn for_each_param(&self, f: &mut impl FnMut(String, &Tensor<S>)) {
        match &self.kind {
            VariantParams::Flat(p) => {
                p.grid_embed.for_each("grid_embed", f);
                p.mesh_embed.for_each("mesh_embed", f);
                p.g2m_edge_embed.for_each("g2m_edge_embed", f);
                p.mesh_edge_embed.for_each("mesh_edge_embed", f);
                p.m2g_edge_embed.for_each("m2g_edge_embed", f);
                p.g2m.for_each("g2m", f);
                p.grid_self.for_each("grid_self", f);
                for (k, layer) in p.layers.iter().enumerate() {
                    layer.for_each(&format!("proc/{k}"), f);
                }
                p.m2g.for_each("m2g", f);
                p.pred.for_each("pred", f);
            }
            VariantParams::Hier(p) => {
                p.grid_embed.for_each("grid_embed", f);
                for (l, e) in p.level_embed.iter().enumerate() {
                    e.for_each(&format!("level_embed/{l}"), f);
                }
                p.g2m_edge_embed.for_each("g2m_edge_embed", f);
                for (l, e) in p.same_edge_embed.iter().enumerate() {
                    e.for_each(&format!("same_edge_embed/{l}"), f);
                }
                for (l, e) in p.up_edge_embed.iter().enumerate() {
                    e.for_each(&format!("up_edge_embed/{l}"), f);
                }
                for (l, e) in p.down_edge_embed.iter().enumerate() {
                    e.for_each(&format!("down_edge_embed/{l}"), f);
                }
                p.m2g_edge_embed.for_each("m2g_edge_embed", f);
                p.g2m.for_each("g2m", f);
                p.grid_self.for_each("grid_self", f);
                for (l, e) in p.up_encode.iter().enumerate() {
                    e.for_each(&format!("up_encode/{l}"), f);
                }
                for (k, layer) in p.layers.iter().enumerate() {
                    for (l, e) in layer.down_same.iter().enumerate() {
                        e.for_each(&format!("proc/{k}/down_same/{l}"), f);
                    }
                    for (l, e) in layer.down_inter.iter().enumerate() {
                        e.for_each(&format!("proc/{k}/down_inter/{l}"), f);
                    }
                    for (l, e) in layer.up_same.iter().enumerate() {
                        e.for_each(&format!("proc/{k}/up_same/{l}"), f);
                    }
                    for (l, e) in layer.up_inter.iter().enumerate() {
                        e.for_each(&format!("proc/{k}/up_inter/{l}"), f);
                    }
                }
                for (l, e) in p.readout.iter().enumerate() {
                    e.for_each(&format!("readout/{l}"), f);
                }
                p.m2g.for_each("m2g", f);
                p.pred.for_each("pred", f);
            }
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        match &mut self.kind {
            VariantParams::Flat(p) => {
                p.grid_embed.for_each_mut("grid_embed", f);
                p.mesh_embed.for_each_mut("mesh_embed", f);
                p.g2m_edge_embed.for_each_mut("g2m_edge_embed", f);
                p.mesh_edge_embed.for_each_mut("mesh_edge_embed", f);
                p.m2g_edge_embed.for_each_mut("m2g_edge_embed", f);
                p.g2m.for_each_mut("g2m", f);
                p.grid_self.for_each_mut("grid_self", f);
                for (k, layer) in p.layers.iter_mut().enumerate() {
                    layer.for_each_mut(&format!("proc/{k}"), f);
                }
                p.m2g.for_each_mut("m2g", f);
                p.pred.for_each_mut("pred", f);
            }
            VariantParams::Hier(p) => {
                p.grid_embed.for_each_mut("grid_embed", f);
                for (l, e) in p.level_embed.iter_mut().enumerate() {
                    e.for_each_mut(&format!("level_embed/{l}"), f);
                }
                p.g2m_edge_embed.for_each_mut("g2m_edge_embed", f);
                for (l, e) in p.same_edge_embed.iter_mut().enumerate() {
                    e.for_each_mut(&format!("same_edge_embed/{l}"), f);
                }
                for (l, e) in p.up_edge_embed.iter_mut().enumerate() {
                    e.for_each_mut(&format!("up_edge_embed/{l}"), f);
                }
                for (l, e) in p.down_edge_embed.iter_mut().enumerate() {
                    e.for_each_mut(&format!("down_edge_embed/{l}"), f);
                }
                p.m2g_edge_embed.for_each_mut("m2g_edge_embed", f);
                p.g2m.for_each_mut("g2m", f);
                p.grid_self.for_each_mut("grid_self", f);
                for (l, e) in p.up_encode.iter_mut().enumerate() {
                    e.for_each_mut(&format!("up_encode/{l}"), f);
                }
                for (k, layer) in p.layers.iter_mut().enumerate() {
                    for (l, e) in layer.down_same.iter_mut().enumerate() {
                        e.for_each_mut(&format!("proc/{k}/down_same/{l}"), f);
                    }
                    for (l, e) in layer.down_inter.iter_mut().enumerate() {
                        e.for_each_mut(&format!("proc/{k}/down_inter/{l}"), f);
                    }
                    for (l, e) in layer.up_same.iter_mut().enumerate() {
                        e.for_each_mut(&format!("proc/{k}/up_same/{l}"), f);
                    }
                    for (l, e) in layer.up_inter.iter_mut().enumerate() {
                        e.for_each_mut(&format!("proc/{k}/up_inter/{l}"), f);
                    }
                }
                for (l, e) in p.readout.iter_mut().enumerate() {
                    e.for_each_mut(&format!("readout/{l}"), f);
                }
                p.m2g.for_each_mut("m2g", f);
                p.pred.for_each_mut("pred", f);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.numel());
        n
    }

    /// Zero the final linear layer of every MLP; the whole model becomes the
    /// identity on latents and the prediction head the zero map.
    pub fn zero_final_layers(&mut self) {
        self.for_each_param_mut(&mut |name, t| {
            if name.ends_with("/w2") || name.ends_with("/b2") {
                for v in t.values_mut() {
                    *v = S::zero();
                }
            }
        });
    }

    pub fn bind(&self, tape: &mut Tape<S>, needs_grad: bool) -> BoundParams {
        match &self.kind {
            VariantParams::Flat(p) => BoundParams::Flat(BoundGc {
                grid_embed: p.grid_embed.bind(tape, needs_grad),
                mesh_embed: p.mesh_embed.bind(tape, needs_grad),
                g2m_edge_embed: p.g2m_edge_embed.bind(tape, needs_grad),
                mesh_edge_embed: p.mesh_edge_embed.bind(tape, needs_grad),
                m2g_edge_embed: p.m2g_edge_embed.bind(tape, needs_grad),
                g2m: p.g2m.bind(tape, needs_grad),
                grid_self: p.grid_self.bind(tape, needs_grad),
                layers: p.layers.iter().map(|l| l.bind(tape, needs_grad)).collect(),
                m2g: p.m2g.bind(tape, needs_grad),
                pred: p.pred.bind(tape, needs_grad),
            }),
            VariantParams::Hier(p) => BoundParams::Hier(BoundHi {
                grid_embed: p.grid_embed.bind(tape, needs_grad),
                level_embed: p
                    .level_embed
                    .iter()
                    .map(|e| e.bind(tape, needs_grad))
                    .collect(),
                g2m_edge_embed: p.g2m_edge_embed.bind(tape, needs_grad),
                same_edge_embed: p
                    .same_edge_embed
                    .iter()
                    .map(|e| e.bind(tape, needs_grad))
                    .collect(),
                up_edge_embed: p
                    .up_edge_embed
                    .iter()
                    .map(|e| e.bind(tape, needs_grad))
                    .collect(),
                down_edge_embed: p
                    .down_edge_embed
                    .iter()
                    .map(|e| e.bind(tape, needs_grad))
                    .collect(),
                m2g_edge_embed: p.m2g_edge_embed.bind(tape, needs_grad),
                g2m: p.g2m.bind(tape, needs_grad),
                grid_self: p.grid_self.bind(tape, needs_grad),
                up_encode: p
                    .up_encode
                    .iter()
                    .map(|e| e.bind(tape, needs_grad))
                    .collect(),
                layers: p
                    .layers
                    .iter()
                    .map(|layer| BoundHiLayer {
                        down_same: layer
                            .down_same
                            .iter()
                            .map(|e| e.bind(tape, needs_grad))
                            .collect(),
                        down_inter: layer
                            .down_inter
                            .iter()
                            .map(|e| e.bind(tape, needs_grad))
                            .collect(),
                        up_same: layer
                            .up_same
                            .iter()
                            .map(|e| e.bind(tape, needs_grad))
                            .collect(),
                        up_inter: layer
                            .up_inter
                            .iter()
                            .map(|e| e.bind(tape, needs_grad))
                            .collect(),
                    })
                    .collect(),
                readout: p.readout.iter().map(|e| e.bind(tape, needs_grad)).collect(),
                m2g: p.m2g.bind(tape, needs_grad),
                pred: p.pred.bind(tape, needs_grad),
            }),
        }
    }

    /// Precision conversion through f64 (exact for f32 -> f64).
    pub fn convert<T: Scalar>(&self) -> ModelParams<T> {
        let kind = match &self.kind {
            VariantParams::Flat(p) => VariantParams::Flat(GcParams {
                grid_embed: convert_mlp(&p.grid_embed),
                mesh_embed: convert_mlp(&p.mesh_embed),
                g2m_edge_embed: convert_mlp(&p.g2m_edge_embed),
                mesh_edge_embed: convert_mlp(&p.mesh_edge_embed),
                m2g_edge_embed: convert_mlp(&p.m2g_edge_embed),
                g2m: p.g2m.convert(),
                grid_self: convert_mlp(&p.grid_self),
                layers: p.layers.iter().map(InteractionMlps::convert).collect(),
                m2g: p.m2g.convert(),
                pred: convert_mlp(&p.pred),
            }),
            VariantParams::Hier(p) => VariantParams::Hier(HiParams {
                grid_embed: convert_mlp(&p.grid_embed),
                level_embed: p.level_embed.iter().map(convert_mlp).collect(),
                g2m_edge_embed: convert_mlp(&p.g2m_edge_embed),
                same_edge_embed: p.same_edge_embed.iter().map(convert_mlp).collect(),
                up_edge_embed: p.up_edge_embed.iter().map(convert_mlp).collect(),
                down_edge_embed: p.down_edge_embed.iter().map(convert_mlp).collect(),
                m2g_edge_embed: convert_mlp(&p.m2g_edge_embed),
                g2m: p.g2m.convert(),
                grid_self: convert_mlp(&p.grid_self),
                up_encode: p.up_encode.iter().map(InteractionMlps::convert).collect(),
                layers: p
                    .layers
                    .iter()
                    .map(|layer| HiLayerParams {
                        down_same: layer.down_same.iter().map(InteractionMlps::convert).collect(),
                        down_inter: layer.down_inter.iter().map(InteractionMlps::convert).collect(),
                        up_same: layer.up_same.iter().map(InteractionMlps::convert).collect(),
                        up_inter: layer.up_inter.iter().map(InteractionMlps::convert).collect(),
                    })
                    .collect(),
                readout: p.readout.iter().map(InteractionMlps::convert).collect(),
                m2g: p.m2g.convert(),
                pred: convert_mlp(&p.pred),
            }),
        };
        ModelParams {
            config: self.config.clone(),
            kind,
        }
    }
}

// ── tape-bound mirrors ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct BoundInteraction {
    pub edge: MlpBind,
    pub node: MlpBind,
}

#[derive(Debug)]
pub struct BoundGc {
    grid_embed: MlpBind,
    mesh_embed: MlpBind,
    g2m_edge_embed: MlpBind,
    mesh_edge_embed: MlpBind,
    m2g_edge_embed: MlpBind,
    g2m: BoundInteraction,
    grid_self: MlpBind,
    layers: Vec<BoundInteraction>,
    m2g: BoundInteraction,
    pub pred: MlpBind,
}

#[derive(Debug)]
pub struct BoundHiLayer {
    pub down_same: Vec<BoundInteraction>,
    pub down_inter: Vec<BoundInteraction>,
    pub up_same: Vec<BoundInteraction>,
    pub up_inter: Vec<BoundInteraction>,
}

#[derive(Debug)]
pub struct BoundHi {
    grid_embed: MlpBind,
    level_embed: Vec<MlpBind>,
    g2m_edge_embed: MlpBind,
    same_edge_embed: Vec<MlpBind>,
    up_edge_embed: Vec<MlpBind>,
    down_edge_embed: Vec<MlpBind>,
    m2g_edge_embed: MlpBind,
    g2m: BoundInteraction,
    grid_self: MlpBind,
    up_encode: Vec<BoundInteraction>,
    pub layers: Vec<BoundHiLayer>,
    readout: Vec<BoundInteraction>,
    m2g: BoundInteraction,
    pub pred: MlpBind,
}

#[derive(Debug)]
pub enum BoundParams {
    Flat(BoundGc),
    Hier(BoundHi),
}

// ── graph arrays on the tape ────────────────────────────────────────────

/// One edge set converted for model use: static features plus shared index
/// arrays.
#[derive(Debug, Clone)]
pub struct EdgeArrays<S: Scalar> {
    pub feats: Tensor<S>,
    pub src: Arc<Vec<u32>>,
    pub dst: Arc<Vec<u32>>,
    pub n_dst: usize,
}

impl<S: Scalar> EdgeArrays<S> {
    fn from_set(set: &crate::graph::EdgeSet, n_dst: usize) -> Self {
        let feats = Tensor::from_f64_tensor(
            &Tensor::from_vec(
                vec![set.pairs.len(), EDGE_FEATURES],
                set.feats.iter().flatten().copied().collect(),
            )
            .expect("edge feature shape"),
        );
        EdgeArrays {
            feats,
            src: Arc::new(set.pairs.iter().map(|&(s, _)| s).collect()),
            dst: Arc::new(set.pairs.iter().map(|&(_, d)| d).collect()),
            n_dst,
        }
    }
}

/// Precision-converted static graph data shared across tapes (e.g. by all
/// batch members).
#[derive(Debug, Clone)]
pub struct GraphArrays<S: Scalar> {
    pub variant: Variant,
    pub n_grid: usize,
    pub mesh_counts: Vec<usize>,
    pub grid_static: Tensor<S>,
    pub mesh_static: Vec<Tensor<S>>,
    pub g2m: EdgeArrays<S>,
    pub m2g: EdgeArrays<S>,
    pub intra: Vec<EdgeArrays<S>>,
    pub up: Vec<EdgeArrays<S>>,
    pub down: Vec<EdgeArrays<S>>,
    pub boundary: Arc<Vec<u32>>,
    pub interior: Arc<Vec<u32>>,
}

impl<S: Scalar> GraphArrays<S> {
    pub fn new(graph: &LamGraph) -> Self {
        let n_grid = graph.n_grid_nodes();
        let mesh_counts: Vec<usize> = graph.levels.iter().map(|l| l.coords.len()).collect();
        let grid_static = Tensor::from_f64_tensor(
            &Tensor::from_vec(
                vec![n_grid, GRID_STATIC_FEATURES],
                graph.grid_static.iter().flatten().copied().collect(),
            )
            .expect("grid static shape"),
        );
        let mesh_static = graph
            .levels
            .iter()
            .map(|l| {
                Tensor::from_f64_tensor(
                    &Tensor::from_vec(
                        vec![l.coords.len(), MESH_STATIC_FEATURES],
                        l.feats.iter().flatten().copied().collect(),
                    )
                    .expect("mesh static shape"),
                )
            })
            .collect();
        GraphArrays {
            variant: graph.variant,
            n_grid,
            grid_static,
            mesh_static,
            g2m: EdgeArrays::from_set(&graph.g2m, mesh_counts[0]),
            m2g: EdgeArrays::from_set(&graph.m2g, n_grid),
            intra: graph
                .intra
                .iter()
                .enumerate()
                .map(|(l, set)| EdgeArrays::from_set(set, mesh_counts[l]))
                .collect(),
            up: graph
                .up
                .iter()
                .enumerate()
                .map(|(l, set)| EdgeArrays::from_set(set, mesh_counts[l + 1]))
                .collect(),
            down: graph
                .down
                .iter()
                .enumerate()
                .map(|(l, set)| EdgeArrays::from_set(set, mesh_counts[l]))
                .collect(),
            boundary: Arc::new(graph.boundary.clone()),
            interior: Arc::new(graph.interior.clone()),
            mesh_counts,
        }
    }
}

/// Tape leaves for one forward pass over a graph.
#[derive(Debug)]
pub struct BoundEdges {
    pub feats: TensorId,
    pub src: Arc<Vec<u32>>,
    pub dst: Arc<Vec<u32>>,
    pub n_dst: usize,
}

#[derive(Debug)]
pub struct GraphBind {
    pub variant: Variant,
    pub n_grid: usize,
    pub mesh_counts: Vec<usize>,
    pub grid_static: TensorId,
    pub mesh_static: Vec<TensorId>,
    pub g2m: BoundEdges,
    pub m2g: BoundEdges,
    pub intra: Vec<BoundEdges>,
    pub up: Vec<BoundEdges>,
    pub down: Vec<BoundEdges>,
    pub boundary: Arc<Vec<u32>>,
}

impl GraphBind {
    pub fn new<S: Scalar>(tape: &mut Tape<S>, arrays: &GraphArrays<S>) -> Self {
        let bind_edges = |tape: &mut Tape<S>, e: &EdgeArrays<S>| BoundEdges {
            feats: tape.constant(e.feats.clone()),
            src: e.src.clone(),
            dst: e.dst.clone(),
            n_dst: e.n_dst,
        };
        GraphBind {
            variant: arrays.variant,
            n_grid: arrays.n_grid,
            mesh_counts: arrays.mesh_counts.clone(),
            grid_static: tape.constant(arrays.grid_static.clone()),
            mesh_static: arrays
                .mesh_static
                .iter()
                .map(|m| tape.constant(m.clone()))
                .collect(),
            g2m: bind_edges(tape, &arrays.g2m),
            m2g: bind_edges(tape, &arrays.m2g),
            intra: arrays.intra.iter().map(|e| bind_edges(tape, e)).collect(),
            up: arrays.up.iter().map(|e| bind_edges(tape, e)).collect(),
            down: arrays.down.iter().map(|e| bind_edges(tape, e)).collect(),
            boundary: arrays.boundary.clone(),
        }
    }
}

// ── latent state ────────────────────────────────────────────────────────

/// Node and live edge latents during one prediction step.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub grid: TensorId,
    /// One entry for the flat variants, one per level for the hierarchy.
    pub mesh: Vec<TensorId>,
    pub g2m_edges: TensorId,
    pub m2g_edges: TensorId,
    pub intra_edges: Vec<TensorId>,
    pub up_edges: Vec<TensorId>,
    pub down_edges: Vec<TensorId>,
}

// ── graph network steps ─────────────────────────────────────────────────

/// Full interaction-network update: returns the updated edge latents and
/// receiver latents.
pub fn interaction_step<S: Scalar>(
    tape: &mut Tape<S>,
    mlps: &BoundInteraction,
    edges: &BoundEdges,
    edge_latents: TensorId,
    sender_latents: TensorId,
    receiver_latents: TensorId,
) -> Result<(TensorId, TensorId)> {
    let msg = edge_messages(tape, mlps, edges, edge_latents, sender_latents, receiver_latents)?;
    let new_edges = tape.add(edge_latents, msg)?;
    let new_recv = receive(tape, mlps, edges, msg, receiver_latents)?;
    Ok((new_edges, new_recv))
}

/// Interaction step without the edge write-back (decode steps).
pub fn interaction_receive_only<S: Scalar>(
    tape: &mut Tape<S>,
    mlps: &BoundInteraction,
    edges: &BoundEdges,
    edge_latents: TensorId,
    sender_latents: TensorId,
    receiver_latents: TensorId,
) -> Result<TensorId> {
    let msg = edge_messages(tape, mlps, edges, edge_latents, sender_latents, receiver_latents)?;
    receive(tape, mlps, edges, msg, receiver_latents)
}

fn edge_messages<S: Scalar>(
    tape: &mut Tape<S>,
    mlps: &BoundInteraction,
    edges: &BoundEdges,
    edge_latents: TensorId,
    sender_latents: TensorId,
    receiver_latents: TensorId,
) -> Result<TensorId> {
    let hs = tape.gather_rows(sender_latents, edges.src.clone())?;
    let hr = tape.gather_rows(receiver_latents, edges.dst.clone())?;
    let cat = tape.concat_cols(&[edge_latents, hs, hr])?;
    mlp_apply(tape, &mlps.edge, cat)
}

fn receive<S: Scalar>(
    tape: &mut Tape<S>,
    mlps: &BoundInteraction,
    edges: &BoundEdges,
    messages: TensorId,
    receiver_latents: TensorId,
) -> Result<TensorId> {
    let agg = tape.scatter_sum(messages, edges.dst.clone(), edges.n_dst)?;
    let cat = tape.concat_cols(&[receiver_latents, agg])?;
    let upd = mlp_apply(tape, &mlps.node, cat)?;
    tape.add(receiver_latents, upd)
}

fn residual_mlp<S: Scalar>(tape: &mut Tape<S>, mlp: &MlpBind, x: TensorId) -> Result<TensorId> {
    let y = mlp_apply(tape, mlp, x)?;
    tape.add(x, y)
}

// ── encode / process / decode ───────────────────────────────────────────

/// Embed the previous two states, the forcing triplet and all static
/// features into the initial latent state. `forcing` is ordered oldest to
/// newest: the times of the older input state, the newer input state, and
/// the predicted state.
pub fn encode_inputs<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundParams,
    graph: &GraphBind,
    x_prev: TensorId,
    x_prev2: TensorId,
    forcing: &[TensorId; 3],
) -> Result<LatentState> {
    let grid_in = tape.concat_cols(&[
        x_prev,
        x_prev2,
        forcing[0],
        forcing[1],
        forcing[2],
        graph.grid_static,
    ])?;
    match params {
        BoundParams::Flat(p) => {
            let grid = mlp_apply(tape, &p.grid_embed, grid_in)?;
            let mesh = mlp_apply(tape, &p.mesh_embed, graph.mesh_static[0])?;
            let g2m_edges = mlp_apply(tape, &p.g2m_edge_embed, graph.g2m.feats)?;
            let m2g_edges = mlp_apply(tape, &p.m2g_edge_embed, graph.m2g.feats)?;
            let intra = mlp_apply(tape, &p.mesh_edge_embed, graph.intra[0].feats)?;
            Ok(LatentState {
                grid,
                mesh: vec![mesh],
                g2m_edges,
                m2g_edges,
                intra_edges: vec![intra],
                up_edges: Vec::new(),
                down_edges: Vec::new(),
            })
        }
        BoundParams::Hier(p) => {
            let grid = mlp_apply(tape, &p.grid_embed, grid_in)?;
            let mut mesh = Vec::with_capacity(graph.mesh_static.len());
            for (m, e) in graph.mesh_static.iter().zip(&p.level_embed) {
                mesh.push(mlp_apply(tape, e, *m)?);
            }
            let mut intra_edges = Vec::with_capacity(graph.intra.len());
            for (set, e) in graph.intra.iter().zip(&p.same_edge_embed) {
                intra_edges.push(mlp_apply(tape, e, set.feats)?);
            }
            let mut up_edges = Vec::with_capacity(graph.up.len());
            for (set, e) in graph.up.iter().zip(&p.up_edge_embed) {
                up_edges.push(mlp_apply(tape, e, set.feats)?);
            }
            let mut down_edges = Vec::with_capacity(graph.down.len());
            for (set, e) in graph.down.iter().zip(&p.down_edge_embed) {
                down_edges.push(mlp_apply(tape, e, set.feats)?);
            }
            let g2m_edges = mlp_apply(tape, &p.g2m_edge_embed, graph.g2m.feats)?;
            let m2g_edges = mlp_apply(tape, &p.m2g_edge_embed, graph.m2g.feats)?;
            Ok(LatentState {
                grid,
                mesh,
                g2m_edges,
                m2g_edges,
                intra_edges,
                up_edges,
                down_edges,
            })
        }
    }
}

/// Grid-to-mesh encoding for the flat variants: one interaction step over
/// the grid2mesh edges plus the residual grid self-update.
pub fn gc_encode<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundGc,
    graph: &GraphBind,
    state: &LatentState,
) -> Result<LatentState> {
    let msg = edge_messages(tape, &params.g2m, &graph.g2m, state.g2m_edges, state.grid, state.mesh[0])?;
    let g2m_edges = tape.add(state.g2m_edges, msg)?;
    let grid = residual_mlp(tape, &params.grid_self, state.grid)?;
    let mesh = receive(tape, &params.g2m, &graph.g2m, msg, state.mesh[0])?;
    Ok(LatentState {
        grid,
        mesh: vec![mesh],
        g2m_edges,
        ..state.clone()
    })
}

/// K sequential interaction steps over the mesh edges with per-layer MLPs.
pub fn gc_process<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundGc,
    graph: &GraphBind,
    state: &LatentState,
) -> Result<LatentState> {
    let mut mesh = state.mesh[0];
    let mut edges = state.intra_edges[0];
    for layer in &params.layers {
        let (e, m) = interaction_step(tape, layer, &graph.intra[0], edges, mesh, mesh)?;
        edges = e;
        mesh = m;
    }
    Ok(LatentState {
        mesh: vec![mesh],
        intra_edges: vec![edges],
        ..state.clone()
    })
}

/// Mesh-to-grid decoding: updates only the grid latents.
pub fn gc_decode<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundGc,
    graph: &GraphBind,
    state: &LatentState,
) -> Result<TensorId> {
    interaction_receive_only(tape, &params.m2g, &graph.m2g, state.m2g_edges, state.mesh[0], state.grid)
}

/// Hierarchical encoding: grid to level 1 (with the grid self-update), then
/// sequentially up the level stack.
pub fn hi_encode<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundHi,
    graph: &GraphBind,
    state: &LatentState,
) -> Result<LatentState> {
    let msg = edge_messages(tape, &params.g2m, &graph.g2m, state.g2m_edges, state.grid, state.mesh[0])?;
    let g2m_edges = tape.add(state.g2m_edges, msg)?;
    let grid = residual_mlp(tape, &params.grid_self, state.grid)?;
    let mut mesh = state.mesh.clone();
    mesh[0] = receive(tape, &params.g2m, &graph.g2m, msg, state.mesh[0])?;
    let mut up_edges = state.up_edges.clone();
    for j in 0..graph.up.len() {
        let (e, m) = interaction_step(
            tape,
            &params.up_encode[j],
            &graph.up[j],
            up_edges[j],
            mesh[j],
            mesh[j + 1],
        )?;
        up_edges[j] = e;
        mesh[j + 1] = m;
    }
    Ok(LatentState {
        grid,
        mesh,
        g2m_edges,
        up_edges,
        ..state.clone()
    })
}

/// One hierarchical processor layer: a sweep from the top level down to
/// level 1 and back up, alternating intra-level processing with inter-level
/// message passing (inter-level parts are skipped at the respective ends).
pub fn hi_process_layer<S: Scalar>(
    tape: &mut Tape<S>,
    layer: &BoundHiLayer,
    graph: &GraphBind,
    state: &LatentState,
) -> Result<LatentState> {
    let levels = state.mesh.len();
    let mut mesh = state.mesh.clone();
    let mut intra = state.intra_edges.clone();
    let mut up = state.up_edges.clone();
    let mut down = state.down_edges.clone();

    // downward: top level first
    for l in (0..levels).rev() {
        let (e, m) =
            interaction_step(tape, &layer.down_same[l], &graph.intra[l], intra[l], mesh[l], mesh[l])?;
        intra[l] = e;
        mesh[l] = m;
        if l > 0 {
            let (e, m) = interaction_step(
                tape,
                &layer.down_inter[l - 1],
                &graph.down[l - 1],
                down[l - 1],
                mesh[l],
                mesh[l - 1],
            )?;
            down[l - 1] = e;
            mesh[l - 1] = m;
        }
    }
    // upward
    for l in 0..levels {
        let (e, m) =
            interaction_step(tape, &layer.up_same[l], &graph.intra[l], intra[l], mesh[l], mesh[l])?;
        intra[l] = e;
        mesh[l] = m;
        if l + 1 < levels {
            let (e, m) = interaction_step(
                tape,
                &layer.up_inter[l],
                &graph.up[l],
                up[l],
                mesh[l],
                mesh[l + 1],
            )?;
            up[l] = e;
            mesh[l + 1] = m;
        }
    }
    Ok(LatentState {
        mesh,
        intra_edges: intra,
        up_edges: up,
        down_edges: down,
        ..state.clone()
    })
}

/// Hierarchical decoding: aggregate down the level stack (updating only node
/// latents), then mesh level 1 to the grid.
pub fn hi_decode<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundHi,
    graph: &GraphBind,
    state: &LatentState,
) -> Result<TensorId> {
    let levels = state.mesh.len();
    let mut mesh = state.mesh.clone();
    for l in (0..levels.saturating_sub(1)).rev() {
        mesh[l] = interaction_receive_only(
            tape,
            &params.readout[l],
            &graph.down[l],
            state.down_edges[l],
            mesh[l + 1],
            mesh[l],
        )?;
    }
    interaction_receive_only(tape, &params.m2g, &graph.m2g, state.m2g_edges, mesh[0], state.grid)
}

/// Full one-step prediction: encode, process, decode, then the residual
/// prediction head (no LayerNorm) on top of the previous state.
pub fn predict_step<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundParams,
    graph: &GraphBind,
    x_prev: TensorId,
    x_prev2: TensorId,
    forcing: &[TensorId; 3],
) -> Result<TensorId> {
    match (params, graph.variant) {
        (BoundParams::Flat(_), Variant::MultiScale | Variant::SingleLevel) => {}
        (BoundParams::Hier(_), Variant::Hierarchical) => {}
        (_, v) => {
            return Err(LamError::contract(format!(
                "parameter kind does not match graph variant {v}"
            )))
        }
    }
    let state = encode_inputs(tape, params, graph, x_prev, x_prev2, forcing)?;
    let (grid_latents, pred_mlp) = match params {
        BoundParams::Flat(p) => {
            let state = gc_encode(tape, p, graph, &state)?;
            let state = gc_process(tape, p, graph, &state)?;
            (gc_decode(tape, p, graph, &state)?, &p.pred)
        }
        BoundParams::Hier(p) => {
            let mut state = hi_encode(tape, p, graph, &state)?;
            for layer in &p.layers {
                state = hi_process_layer(tape, layer, graph, &state)?;
            }
            (hi_decode(tape, p, graph, &state)?, &p.pred)
        }
    };
    let delta = mlp_apply(tape, pred_mlp, grid_latents)?;
    let out = tape.add(x_prev, delta)?;
    if !tape.value(out).all_finite() {
        return Err(LamError::NonFinite("prediction contains NaN/Inf".into()));
    }
    Ok(out)
}

/// Replace the boundary rows of a prediction with the supplied truth; the
/// replaced rows are constants with respect to the parameters.
pub fn apply_boundary_forcing<S: Scalar>(
    tape: &mut Tape<S>,
    prediction: TensorId,
    boundary: &Arc<Vec<u32>>,
    truth: &Tensor<S>,
) -> Result<TensorId> {
    tape.overwrite_rows(prediction, boundary.clone(), truth)
}

/// Per-step inputs to [`rollout`]: forcing triplet and boundary truth.
pub struct RolloutStep<'a, S: Scalar> {
    pub forcing: [TensorId; 3],
    pub boundary_truth: &'a Tensor<S>,
}

/// Autoregressive rollout: each step feeds on the two most recent
/// boundary-forced states; forcing is applied to every prediction before it
/// is fed back. Returns the forced predictions, one per step.
pub fn rollout<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundParams,
    graph: &GraphBind,
    init_prev2: TensorId,
    init_prev: TensorId,
    steps: &[RolloutStep<'_, S>],
) -> Result<Vec<TensorId>> {
    let mut older = init_prev2;
    let mut newer = init_prev;
    let mut out = Vec::with_capacity(steps.len());
    for (k, step) in steps.iter().enumerate() {
        let pred = predict_step(tape, params, graph, newer, older, &step.forcing).map_err(
            |e| match e {
                LamError::NonFinite(msg) => LamError::NonFinite(format!("rollout step {k}: {msg}")),
                other => other,
            },
        )?;
        let forced = apply_boundary_forcing(tape, pred, &graph.boundary, step.boundary_truth)?;
        out.push(forced);
        older = newer;
        newer = forced;
    }
    Ok(out)
}
