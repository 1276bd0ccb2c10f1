//! Encoder-decoder generator with masked skip connections: maps a fixed
//! random tensor z0 to a velocity grid inside a configured range.
//!
//! Layout per level i (resolutions relative to the padded input):
//! the down block (stride-2 conv, norm, leaky) halves the resolution;
//! the skip branch (1x1 conv, norm, leaky, Bernoulli channel mask) taps
//! the down block's input at /2^i; the up block upsamples the deeper
//! feature, concatenates the level's skip, and applies conv/norm/leaky.
//! A 1x1 head and a scaled sigmoid produce the grid, cropped back from
//! the padded size.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array4, Graph, NodeId};
use crate::error::{FwiError, Result};

/// Architecture and sampling settings of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipNetConfig {
    /// Number of down/up levels N.
    pub depth: usize,
    /// Channels of every down and up block.
    pub down_channels: usize,
    /// Channels of every skip branch.
    pub skip_channels: usize,
    /// Kernel size of down/up convolutions.
    pub kernel_size: usize,
    /// Kernel size of skip convolutions.
    pub skip_kernel_size: usize,
    pub leaky_slope: f64,
    /// Keep probabilities per block class (1.0 disables dropout there).
    pub keep_down: f64,
    pub keep_up: f64,
    pub keep_skip: f64,
    /// Output velocity range in m/s.
    pub v_min: f64,
    pub v_max: f64,
    pub z0_seed: u64,
    /// z0 entries are uniform on [0, z0_amplitude].
    pub z0_amplitude: f64,
}

impl Default for SkipNetConfig {
    /// The architecture used in the experiments: N=5, 128 down/up
    /// channels, 4 skip channels, 3x3 and 1x1 kernels, leaky slope 0.1,
    /// skip dropout 0.3 (keep 0.7).
    fn default() -> Self {
        SkipNetConfig {
            depth: 5,
            down_channels: 128,
            skip_channels: 4,
            kernel_size: 3,
            skip_kernel_size: 1,
            leaky_slope: 0.1,
            keep_down: 1.0,
            keep_up: 1.0,
            keep_skip: 0.7,
            v_min: 1500.0,
            v_max: 5500.0,
            z0_seed: 0,
            z0_amplitude: 0.1,
        }
    }
}

impl SkipNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(FwiError::invalid("net.depth", "must be at least 1"));
        }
        if self.down_channels < 1 || self.skip_channels < 1 {
            return Err(FwiError::invalid("net.channels", "must be at least 1"));
        }
        for (name, k) in [
            ("net.kernel_size", self.kernel_size),
            ("net.skip_kernel_size", self.skip_kernel_size),
        ] {
            if k % 2 == 0 || k == 0 {
                return Err(FwiError::invalid(name, format!("must be odd, got {k}")));
            }
        }
        for (name, p) in [
            ("net.keep_down", self.keep_down),
            ("net.keep_up", self.keep_up),
            ("net.keep_skip", self.keep_skip),
        ] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(FwiError::invalid(name, format!("must be in (0,1], got {p}")));
            }
        }
        if !(self.v_min < self.v_max) {
            return Err(FwiError::invalid(
                "net.v_range",
                format!("need v_min < v_max, got [{}, {}]", self.v_min, self.v_max),
            ));
        }
        if !(self.z0_amplitude > 0.0) {
            return Err(FwiError::invalid("net.z0_amplitude", "must be positive"));
        }
        Ok(())
    }
}

/// Ordered learnable arrays: per level the down block's kernel, bias,
/// norm gain, norm shift; then the skip blocks; then the up blocks; then
/// the 1x1 head kernel and bias. Order is fixed for checkpoint
/// compatibility.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub arrays: Vec<Array4>,
}

impl ParamVector {
    pub fn total_len(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }
}

/// One Bernoulli 0/1 channel mask per connection, drawn from a seed.
/// Down/up masks are all ones at keep probability 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub skip: Vec<Array4>,
    pub down: Vec<Array4>,
    pub up: Vec<Array4>,
    pub seed: u64,
}

impl MaskSet {
    /// All-ones masks: the deterministic network.
    pub fn ones(config: &SkipNetConfig) -> Self {
        let ones = |c: usize| Array4::from_elem((1, c, 1, 1), 1.0);
        MaskSet {
            skip: (0..config.depth).map(|_| ones(config.skip_channels)).collect(),
            down: (0..config.depth).map(|_| ones(config.down_channels)).collect(),
            up: (0..config.depth).map(|_| ones(config.down_channels)).collect(),
            seed: 0,
        }
    }
}

/// Channel-wise i.i.d. Bernoulli masks, deterministic in the seed. Draw
/// order: skip levels, then down levels, then up levels.
pub fn sample_masks(config: &SkipNetConfig, seed: u64) -> Result<MaskSet> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut draw = |c: usize, keep: f64| -> Array4 {
        Array4::from_shape_fn((1, c, 1, 1), |_| {
            if rng.random::<f64>() < keep {
                1.0
            } else {
                0.0
            }
        })
    };
    let skip = (0..config.depth)
        .map(|_| draw(config.skip_channels, config.keep_skip))
        .collect();
    let down = (0..config.depth)
        .map(|_| draw(config.down_channels, config.keep_down))
        .collect();
    let up = (0..config.depth)
        .map(|_| draw(config.down_channels, config.keep_up))
        .collect();
    Ok(MaskSet {
        skip,
        down,
        up,
        seed,
    })
}

/// Generator bound to a target grid size: holds the padded fixed input
/// z0 and builds forward graphs against parameter snapshots.
#[derive(Debug, Clone)]
pub struct SkipNet {
    pub config: SkipNetConfig,
    nz: usize,
    nx: usize,
    z0: Array4,
}

/// A built forward pass: the graph, the parameter nodes in ParamVector
/// order, and the output grid node of shape (1, 1, nz, nx).
pub struct NetForward {
    pub graph: Graph,
    pub param_ids: Vec<NodeId>,
    pub output: NodeId,
}

impl SkipNet {
    /// Fixes the output grid size and draws z0 from the config seed.
    /// z0 is drawn at (nz, nx) and zero-padded up to the next multiple
    /// of 2^depth.
    pub fn new(config: SkipNetConfig, nz: usize, nx: usize) -> Result<Self> {
        config.validate()?;
        let block = 1usize << config.depth;
        let padded_h = nz.div_ceil(block) * block;
        let padded_w = nx.div_ceil(block) * block;
        if padded_h / block < 2 || padded_w / block < 2 {
            return Err(FwiError::invalid(
                "net.depth",
                format!(
                    "{nz}x{nx} grid is too small for {} halvings (needs more than {block} cells per axis)",
                    config.depth
                ),
            ));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(config.z0_seed);
        let mut z0 = Array4::zeros((1, 1, padded_h, padded_w));
        for i in 0..nz {
            for j in 0..nx {
                z0[(0, 0, i, j)] = rng.random::<f64>() * config.z0_amplitude;
            }
        }
        Ok(SkipNet { config, nz, nx, z0 })
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.nz, self.nx)
    }

    pub fn z0(&self) -> &Array4 {
        &self.z0
    }

    /// Initializes parameters: Kaiming fan-in normals for conv kernels
    /// (leaky-relu gain), zero biases, unit gains, zero shifts.
    /// Deterministic in the seed.
    pub fn build_params(&self, init_seed: u64) -> ParamVector {
        let cfg = &self.config;
        let mut rng = ChaCha20Rng::seed_from_u64(init_seed);
        let slope = cfg.leaky_slope;
        let mut kernel = |co: usize, ci: usize, k: usize| -> Array4 {
            let fan_in = (ci * k * k) as f64;
            let std = (2.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
            Array4::from_shape_fn((co, ci, k, k), |_| {
                let n: f64 = StandardNormal.sample(&mut rng);
                std * n
            })
        };
        let mut arrays = Vec::new();
        let mut push_block = |kern: Array4, c_out: usize, arrays: &mut Vec<Array4>| {
            arrays.push(kern);
            arrays.push(Array4::zeros((1, c_out, 1, 1)));
            arrays.push(Array4::from_elem((1, c_out, 1, 1), 1.0));
            arrays.push(Array4::zeros((1, c_out, 1, 1)));
        };
        for i in 0..cfg.depth {
            let c_in = if i == 0 { 1 } else { cfg.down_channels };
            let kern = kernel(cfg.down_channels, c_in, cfg.kernel_size);
            push_block(kern, cfg.down_channels, &mut arrays);
        }
        for i in 0..cfg.depth {
            let c_in = if i == 0 { 1 } else { cfg.down_channels };
            let kern = kernel(cfg.skip_channels, c_in, cfg.skip_kernel_size);
            push_block(kern, cfg.skip_channels, &mut arrays);
        }
        for _ in 0..cfg.depth {
            let c_in = cfg.down_channels + cfg.skip_channels;
            let kern = kernel(cfg.down_channels, c_in, cfg.kernel_size);
            push_block(kern, cfg.down_channels, &mut arrays);
        }
        arrays.push(kernel(1, cfg.down_channels, 1));
        arrays.push(Array4::zeros((1, 1, 1, 1)));
        ParamVector { arrays }
    }

    /// Builds the forward graph for one parameter snapshot. With
    /// `masks: None` no mask nodes are inserted at all; with all-ones
    /// masks the output is identical bit for bit.
    pub fn forward(&self, params: &ParamVector, masks: Option<&MaskSet>) -> Result<NetForward> {
        let cfg = &self.config;
        let expected = 3 * 4 * cfg.depth + 2;
        if params.arrays.len() != expected {
            return Err(FwiError::shape(format!(
                "parameter vector has {} arrays, architecture wants {expected}",
                params.arrays.len()
            )));
        }
        if let Some(m) = masks {
            if m.skip.len() != cfg.depth || m.down.len() != cfg.depth || m.up.len() != cfg.depth {
                return Err(FwiError::shape(format!(
                    "mask set has {}/{}/{} levels, architecture wants {}",
                    m.skip.len(),
                    m.down.len(),
                    m.up.len(),
                    cfg.depth
                )));
            }
        }
        let mut graph = Graph::new();
        let param_ids: Vec<NodeId> = params
            .arrays
            .iter()
            .map(|a| graph.param(a.clone()))
            .collect();
        let block = |i: usize, group: usize| -> [NodeId; 4] {
            let base = (group * cfg.depth + i) * 4;
            [
                param_ids[base],
                param_ids[base + 1],
                param_ids[base + 2],
                param_ids[base + 3],
            ]
        };

        let z0 = graph.constant(self.z0.clone());
        let mut x = z0;
        let mut level_inputs = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            level_inputs.push(x);
            let [kern, bias, gain, shift] = block(i, 0);
            let conv = graph.conv2d(x, kern, bias, 2)?;
            let norm = graph.channel_norm(conv, gain, shift)?;
            x = graph.leaky_relu(norm, cfg.leaky_slope);
            if let Some(m) = masks {
                let mask = graph.constant(m.down[i].clone());
                x = graph.apply_mask(x, mask)?;
            }
        }

        let mut skips = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let [kern, bias, gain, shift] = block(i, 1);
            let conv = graph.conv2d(level_inputs[i], kern, bias, 1)?;
            let norm = graph.channel_norm(conv, gain, shift)?;
            let mut s = graph.leaky_relu(norm, cfg.leaky_slope);
            if let Some(m) = masks {
                let mask = graph.constant(m.skip[i].clone());
                s = graph.apply_mask(s, mask)?;
            }
            skips.push(s);
        }

        let mut u = x;
        for i in (0..cfg.depth).rev() {
            let upsampled = graph.upsample_bilinear_x2(u)?;
            let cat = graph.concat_channels(upsampled, skips[i])?;
            let [kern, bias, gain, shift] = block(i, 2);
            let conv = graph.conv2d(cat, kern, bias, 1)?;
            let norm = graph.channel_norm(conv, gain, shift)?;
            u = graph.leaky_relu(norm, cfg.leaky_slope);
            if let Some(m) = masks {
                let mask = graph.constant(m.up[i].clone());
                u = graph.apply_mask(u, mask)?;
            }
        }

        let head_kern = param_ids[param_ids.len() - 2];
        let head_bias = param_ids[param_ids.len() - 1];
        let head = graph.conv2d(u, head_kern, head_bias, 1)?;
        let bounded = graph.scaled_sigmoid(head, cfg.v_min, cfg.v_max)?;
        let output = graph.crop(bounded, self.nz, self.nx)?;

        Ok(NetForward {
            graph,
            param_ids,
            output,
        })
    }

    /// Runs the forward pass and extracts the (nz, nx) velocity grid.
    pub fn generate(&self, params: &ParamVector, masks: Option<&MaskSet>) -> Result<Array2<f64>> {
        let fwd = self.forward(params, masks)?;
        let out = fwd.graph.value(fwd.output);
        Ok(out
            .index_axis(ndarray::Axis(0), 0)
            .index_axis(ndarray::Axis(0), 0)
            .to_owned())
    }
}
