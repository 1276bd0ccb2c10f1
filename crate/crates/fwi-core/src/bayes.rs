//! Inversion drivers: pretraining the generator to an initial model,
//! variational inversion with mask-sampled networks, Monte-Carlo
//! conditional-mean inference, and the classical baselines.
//!
//! Every run is a pure function of its configuration and seeds: mask
//! draws are derived deterministically from (seed, phase, iteration), so
//! repeated runs produce bit-identical artifacts.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Array4};
use crate::error::{FwiError, Result};
use crate::metrics;
use crate::misfit::{tv, MisfitKind, TV_EPS_DEFAULT};
use crate::model::{AcquisitionGeometry, DataSet, VelocityModel};
use crate::propagator::{misfit_and_gradient, AbsorberConfig};
use crate::skipnet::{sample_masks, MaskSet, ParamVector, SkipNet};

/// Optimization settings for all phases and baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    /// Total-variation weight in the phase-2 objective.
    pub alpha: f64,
    pub lr_pretrain: f64,
    pub lr_invert: f64,
    /// Learning rate of the grid-space baselines, in m/s per step. The
    /// network rate is far too small for raw velocity values.
    pub lr_grid: f64,
    pub it_pretrain_max: usize,
    pub it_invert_max: usize,
    /// Pretraining stop threshold on the per-cell mean l1 distance,
    /// normalized by the output velocity range.
    pub pretrain_tol: f64,
    /// Monte-Carlo samples of the conditional-mean estimate.
    pub mc_samples: usize,
    pub misfit: MisfitKind,
    pub tv_eps: f64,
    pub init_seed: u64,
    pub mask_seed: u64,
    pub cm_seed: u64,
    /// Metric logging cadence in iterations (losses log every iteration).
    pub log_every: usize,
    /// Allows phase 2 to start from parameters that were not pretrained.
    pub allow_raw_init: bool,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            alpha: 6e-7,
            lr_pretrain: 0.01,
            lr_invert: 5e-4,
            lr_grid: 10.0,
            it_pretrain_max: 5000,
            it_invert_max: 1000,
            pretrain_tol: 1e-3,
            mc_samples: 50,
            misfit: MisfitKind::W1,
            tv_eps: TV_EPS_DEFAULT,
            init_seed: 1,
            mask_seed: 2,
            cm_seed: 3,
            log_every: 1,
            allow_raw_init: false,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(FwiError::invalid("inversion.alpha", "must be nonnegative"));
        }
        for (name, lr) in [
            ("inversion.lr_pretrain", self.lr_pretrain),
            ("inversion.lr_invert", self.lr_invert),
            ("inversion.lr_grid", self.lr_grid),
        ] {
            if !(lr > 0.0) {
                return Err(FwiError::invalid(name, "must be positive"));
            }
        }
        if self.it_pretrain_max < 1 || self.it_invert_max < 1 {
            return Err(FwiError::invalid("inversion.iterations", "must be at least 1"));
        }
        if !(self.pretrain_tol > 0.0) {
            return Err(FwiError::invalid("inversion.pretrain_tol", "must be positive"));
        }
        if self.mc_samples < 1 {
            return Err(FwiError::invalid("inversion.mc_samples", "must be at least 1"));
        }
        if self.log_every < 1 {
            return Err(FwiError::invalid("inversion.log_every", "must be at least 1"));
        }
        if !(self.tv_eps > 0.0) {
            return Err(FwiError::invalid("inversion.tv_eps", "must be positive"));
        }
        Ok(())
    }
}

/// Inversion method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Phase 1 + phase 2 + conditional-mean inference.
    Ours,
    /// The degenerate configuration: no dropout, l2 misfit, no TV.
    DnnFwi,
    GridL2,
    GridW1,
}

/// Network parameters tagged with how they were produced. Phase 2
/// requires a pretrained start unless explicitly overridden.
#[derive(Debug, Clone, PartialEq)]
pub enum NetInit {
    Pretrained(ParamVector),
    Raw(ParamVector),
}

impl NetInit {
    pub fn params(&self) -> &ParamVector {
        match self {
            NetInit::Pretrained(p) | NetInit::Raw(p) => p,
        }
    }
}

/// One row of the run log. Metric fields are present on logging
/// iterations when a ground-truth model was supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub loss_data: f64,
    /// Weighted TV contribution (alpha * TV), so the two loss columns
    /// sum to the optimized objective.
    pub loss_tv: f64,
    pub snr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub rel_l2: Option<f64>,
}

/// Everything a run leaves behind.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    /// Final network parameters (None for grid-space baselines).
    pub final_params: Option<ParamVector>,
    pub log: Vec<IterationLog>,
    /// The inferred model: the conditional mean for [`Method::Ours`],
    /// the point estimate otherwise.
    pub estimate: VelocityModel,
    pub seeds: (u64, u64, u64),
}

const PHASE_PRETRAIN: u64 = 1;
const PHASE_INVERT: u64 = 2;
const PHASE_CM: u64 = 3;

/// Deterministic per-iteration seed derivation (splitmix64 finalizer).
fn derive_seed(base: u64, phase: u64, index: u64) -> u64 {
    let mut z = base
        ^ phase.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn grid_to_array4(grid: &Array2<f64>) -> Array4 {
    let (h, w) = grid.dim();
    Array4::from_shape_vec((1, 1, h, w), grid.iter().cloned().collect()).expect("grid shape")
}

fn collect_param_grads(fwd: &crate::skipnet::NetForward) -> Vec<Array4> {
    fwd.param_ids
        .iter()
        .map(|&id| {
            fwd.graph
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Array4::zeros(fwd.graph.value(id).raw_dim()))
        })
        .collect()
}

/// Phase 1: fits the expected masked generation to the initial model in
/// mean l1 distance, one fresh mask draw per step. Stops when the
/// normalized objective drops below `pretrain_tol` (checked before the
/// step, so an infinite tolerance returns after one evaluation) or at
/// the iteration cap. Returns the pretrained parameters and the
/// objective log.
pub fn pretrain(
    net: &SkipNet,
    v_ini: &VelocityModel,
    cfg: &InversionConfig,
) -> Result<(NetInit, Vec<f64>)> {
    cfg.validate()?;
    let (nz, nx) = net.grid_dims();
    if v_ini.values().dim() != (nz, nx) {
        return Err(FwiError::shape(format!(
            "initial model {:?} vs network output {:?}",
            v_ini.values().dim(),
            (nz, nx)
        )));
    }
    let mut params = net.build_params(cfg.init_seed);
    let mut state = AdamState::new(&params.arrays);
    let target = grid_to_array4(v_ini.values());
    let norm = 1.0 / ((nz * nx) as f64 * (net.config.v_max - net.config.v_min));
    let mut log = Vec::new();
    for it in 1..=cfg.it_pretrain_max {
        let masks = sample_masks(&net.config, derive_seed(cfg.mask_seed, PHASE_PRETRAIN, it as u64))?;
        let mut fwd = net.forward(&params, Some(&masks))?;
        let target_id = fwd.graph.constant(target.clone());
        let diff = fwd.graph.sub(fwd.output, target_id)?;
        let abs = fwd.graph.abs(diff);
        let total = fwd.graph.sum(abs);
        let objective = fwd.graph.scalar(total) * norm;
        if !objective.is_finite() {
            return Err(FwiError::non_finite(format!("pretraining objective at iteration {it}")));
        }
        log.push(objective);
        if objective < cfg.pretrain_tol {
            break;
        }
        fwd.graph.backward_seeded(total, norm)?;
        let grads = collect_param_grads(&fwd);
        adam_step(&mut params.arrays, &grads, &mut state, cfg.lr_pretrain)?;
    }
    Ok((NetInit::Pretrained(params), log))
}

/// The phase-2 objective for one fixed mask draw: data misfit of the
/// masked generation plus weighted TV, with its gradient with respect to
/// every network parameter.
#[allow(clippy::too_many_arguments)]
pub fn masked_objective_grad(
    net: &SkipNet,
    params: &ParamVector,
    masks: &MaskSet,
    observed: &DataSet,
    geom: &AcquisitionGeometry,
    absorber: &AbsorberConfig,
    dx: f64,
    cfg: &InversionConfig,
) -> Result<(f64, f64, Vec<Array4>)> {
    let mut fwd = net.forward(params, Some(masks))?;
    let grid = fwd
        .graph
        .value(fwd.output)
        .index_axis(Axis(0), 0)
        .index_axis(Axis(0), 0)
        .to_owned();
    let v_model = VelocityModel::new(grid.clone(), dx)?;
    let (loss_data, grad_data) = misfit_and_gradient(&v_model, geom, absorber, observed, cfg.misfit)?;
    let (tv_value, tv_grad) = tv(&grid, cfg.tv_eps)?;
    let loss_tv = cfg.alpha * tv_value;
    let total_grad_v = &grad_data + &(cfg.alpha * &tv_grad);
    let cotangent = fwd.graph.constant(grid_to_array4(&total_grad_v));
    let pullback = fwd.graph.mul(fwd.output, cotangent)?;
    let seed_node = fwd.graph.sum(pullback);
    fwd.graph.backward(seed_node)?;
    Ok((loss_data, loss_tv, collect_param_grads(&fwd)))
}

/// Same objective without the gradient, for finite-difference oracles
/// and estimator statistics.
#[allow(clippy::too_many_arguments)]
pub fn masked_objective(
    net: &SkipNet,
    params: &ParamVector,
    masks: &MaskSet,
    observed: &DataSet,
    geom: &AcquisitionGeometry,
    absorber: &AbsorberConfig,
    dx: f64,
    cfg: &InversionConfig,
) -> Result<(f64, f64)> {
    let grid = net.generate(params, Some(masks))?;
    let v_model = VelocityModel::new(grid.clone(), dx)?;
    let observed_check = observed.validate_against(geom);
    observed_check?;
    let mut loss_data = 0.0;
    for s in 0..geom.n_sources() {
        let (sim, _) = crate::propagator::forward_shot(&v_model, geom, absorber, s, false)?;
        loss_data += cfg.misfit.evaluate(&sim, &observed.records[s])?.value;
    }
    let (tv_value, _) = tv(&grid, cfg.tv_eps)?;
    Ok((loss_data, cfg.alpha * tv_value))
}

/// Phase 2: one fresh mask draw per iteration, gradient through the
/// propagator and the generator, Adam on the parameters. Ends with the
/// Monte-Carlo conditional-mean estimate.
#[allow(clippy::too_many_arguments)]
pub fn invert(
    net: &SkipNet,
    init: NetInit,
    observed: &DataSet,
    geom: &AcquisitionGeometry,
    absorber: &AbsorberConfig,
    dx: f64,
    truth: Option<&VelocityModel>,
    cfg: &InversionConfig,
) -> Result<(ParamVector, RunArtifacts)> {
    cfg.validate()?;
    observed.validate_against(geom)?;
    let mut params = match init {
        NetInit::Pretrained(p) => p,
        NetInit::Raw(p) => {
            if !cfg.allow_raw_init {
                return Err(FwiError::invalid(
                    "init",
                    "phase 2 requires pretrained parameters (set allow_raw_init to override)",
                ));
            }
            p
        }
    };
    let mut state = AdamState::new(&params.arrays);
    let mut log = Vec::with_capacity(cfg.it_invert_max);
    for it in 1..=cfg.it_invert_max {
        let masks = sample_masks(&net.config, derive_seed(cfg.mask_seed, PHASE_INVERT, it as u64))?;
        let (loss_data, loss_tv, grads) =
            masked_objective_grad(net, &params, &masks, observed, geom, absorber, dx, cfg)?;
        if !(loss_data.is_finite() && loss_tv.is_finite()) {
            return Err(FwiError::non_finite(format!("inversion loss at iteration {it}")));
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(FwiError::non_finite(format!("inversion gradient at iteration {it}")));
        }
        let mut row = IterationLog {
            iteration: it,
            loss_data,
            loss_tv,
            snr_db: None,
            ssim: None,
            rel_l2: None,
        };
        if it % cfg.log_every == 0 {
            if let Some(vt) = truth {
                // Metrics of the grid the loss was computed on.
                let grid = net.generate(&params, Some(&masks))?;
                let report = metrics::evaluate(&grid, vt.values())?;
                row.snr_db = Some(report.snr_db);
                row.ssim = Some(report.ssim);
                row.rel_l2 = Some(report.rel_l2);
            }
        }
        log.push(row);
        adam_step(&mut params.arrays, &grads, &mut state, cfg.lr_invert)?;
    }
    let estimate = infer_cm(net, &params, cfg, dx)?;
    let artifacts = RunArtifacts {
        final_params: Some(params.clone()),
        log,
        estimate,
        seeds: (cfg.init_seed, cfg.mask_seed, cfg.cm_seed),
    };
    Ok((params, artifacts))
}

/// Conditional-mean estimate: the average of `mc_samples` mask-sampled
/// generations. With every keep probability at 1 all samples coincide,
/// so the single deterministic generation is returned as-is.
pub fn infer_cm(
    net: &SkipNet,
    params: &ParamVector,
    cfg: &InversionConfig,
    dx: f64,
) -> Result<VelocityModel> {
    cfg.validate()?;
    let deterministic =
        net.config.keep_skip == 1.0 && net.config.keep_down == 1.0 && net.config.keep_up == 1.0;
    if deterministic || cfg.mc_samples == 1 {
        let masks = sample_masks(&net.config, derive_seed(cfg.cm_seed, PHASE_CM, 0))?;
        let grid = net.generate(params, Some(&masks))?;
        return VelocityModel::new(grid, dx);
    }
    let (nz, nx) = net.grid_dims();
    let mut acc = Array2::<f64>::zeros((nz, nx));
    for k in 0..cfg.mc_samples {
        let masks = sample_masks(&net.config, derive_seed(cfg.cm_seed, PHASE_CM, k as u64))?;
        acc += &net.generate(params, Some(&masks))?;
    }
    acc.mapv_inplace(|v| v / cfg.mc_samples as f64);
    // Averaging keeps values inside the sigmoid range up to rounding.
    acc.mapv_inplace(|v| v.clamp(net.config.v_min, net.config.v_max));
    VelocityModel::new(acc, dx)
}

/// Runs one of the four methods end to end.
///
/// grid_l2 / grid_w1 optimize the velocity grid directly from the
/// initial model with Adam (no TV), clamping to the configured physical
/// bounds after each step. dnn_fwi is the degenerate network
/// configuration (all keep probabilities 1, l2 misfit, alpha 0) sharing
/// the exact code path of [`invert`].
#[allow(clippy::too_many_arguments)]
pub fn run_baseline(
    method: Method,
    net: &SkipNet,
    v_ini: &VelocityModel,
    observed: &DataSet,
    geom: &AcquisitionGeometry,
    absorber: &AbsorberConfig,
    truth: Option<&VelocityModel>,
    cfg: &InversionConfig,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    match method {
        Method::Ours => {
            let (init, _) = pretrain(net, v_ini, cfg)?;
            let (_, artifacts) = invert(net, init, observed, geom, absorber, v_ini.dx(), truth, cfg)?;
            Ok(artifacts)
        }
        Method::DnnFwi => {
            let degenerate_net = SkipNet::new(
                crate::skipnet::SkipNetConfig {
                    keep_down: 1.0,
                    keep_up: 1.0,
                    keep_skip: 1.0,
                    ..net.config.clone()
                },
                net.grid_dims().0,
                net.grid_dims().1,
            )?;
            let mut degenerate_cfg = cfg.clone();
            degenerate_cfg.alpha = 0.0;
            degenerate_cfg.misfit = MisfitKind::L2;
            let (init, _) = pretrain(&degenerate_net, v_ini, &degenerate_cfg)?;
            let (_, artifacts) = invert(
                &degenerate_net,
                init,
                observed,
                geom,
                absorber,
                v_ini.dx(),
                truth,
                &degenerate_cfg,
            )?;
            Ok(artifacts)
        }
        Method::GridL2 => grid_descent(MisfitKind::L2, net, v_ini, observed, geom, absorber, truth, cfg),
        Method::GridW1 => grid_descent(MisfitKind::W1, net, v_ini, observed, geom, absorber, truth, cfg),
    }
}

#[allow(clippy::too_many_arguments)]
fn grid_descent(
    misfit: MisfitKind,
    net: &SkipNet,
    v_ini: &VelocityModel,
    observed: &DataSet,
    geom: &AcquisitionGeometry,
    absorber: &AbsorberConfig,
    truth: Option<&VelocityModel>,
    cfg: &InversionConfig,
) -> Result<RunArtifacts> {
    observed.validate_against(geom)?;
    let (lo, hi) = (net.config.v_min, net.config.v_max);
    let mut grid = grid_to_array4(v_ini.values());
    let mut params = vec![grid.clone()];
    let mut state = AdamState::new(&params);
    let mut log = Vec::with_capacity(cfg.it_invert_max);
    let mut current = v_ini.clone();
    for it in 1..=cfg.it_invert_max {
        let (loss, grad) = misfit_and_gradient(&current, geom, absorber, observed, misfit)?;
        if !loss.is_finite() {
            return Err(FwiError::non_finite(format!("baseline loss at iteration {it}")));
        }
        let mut row = IterationLog {
            iteration: it,
            loss_data: loss,
            loss_tv: 0.0,
            snr_db: None,
            ssim: None,
            rel_l2: None,
        };
        if it % cfg.log_every == 0 {
            if let Some(vt) = truth {
                let report = metrics::evaluate(current.values(), vt.values())?;
                row.snr_db = Some(report.snr_db);
                row.ssim = Some(report.ssim);
                row.rel_l2 = Some(report.rel_l2);
            }
        }
        log.push(row);
        let grad4 = grid_to_array4(&grad);
        adam_step(&mut params, &[grad4], &mut state, cfg.lr_grid)?;
        params[0].mapv_inplace(|v| v.clamp(lo, hi));
        grid = params[0].clone();
        let grid2 = grid
            .index_axis(Axis(0), 0)
            .index_axis(Axis(0), 0)
            .to_owned();
        current = VelocityModel::new(grid2, v_ini.dx())?;
    }
    Ok(RunArtifacts {
        final_params: None,
        log,
        estimate: current,
        seeds: (cfg.init_seed, cfg.mask_seed, cfg.cm_seed),
    })
}
