//! Forward acoustic simulation and adjoint-state gradients.
//!
//! The scheme is leapfrog in time and eighth-order in space on a uniform
//! grid. The top row is a pressure-release free surface (field pinned to
//! zero, antisymmetric ghost rows for the stencil); the other three sides
//! carry a damping sponge with a polynomial ramp. When the user time step
//! exceeds the single-step stability bound the propagator subdivides it
//! internally and records every ratio-th sample.
//!
//! The gradient is the exact transpose of the discrete linearized forward
//! map: the adjoint field is driven backward in time by the residual
//! traces, and the imaging condition correlates it with the second time
//! difference of the stored forward field (2/v times the discrete
//! d2u/dt2 term), so adjoint dot-product tests hold to rounding.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FwiError, Result};
use crate::misfit::MisfitKind;
use crate::model::{
    substep_ratio, validate_cfl, AcquisitionGeometry, DataSet, ShotRecord, VelocityModel,
};

/// Depth index of sources and receivers: one cell below the free surface,
/// so the pressure-release row does not null them.
pub const SURFACE_DEPTH_INDEX: usize = 1;

/// Default cap on stored wavefield history per shot before the adjoint
/// switches to checkpoint-and-recompute.
pub const DEFAULT_HISTORY_BUDGET: usize = 512 << 20;

/// Damping sponge on the left/right/bottom boundaries. The top edge is
/// always a free surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AbsorberConfig {
    /// Layer thickness in cells.
    pub layer_cells: usize,
    /// Peak damping coefficient in 1/s at the outer edge.
    pub strength: f64,
    /// Exponent of the polynomial ramp from the interior to the edge.
    pub profile_power: f64,
}

impl Default for AbsorberConfig {
    fn default() -> Self {
        AbsorberConfig {
            layer_cells: 32,
            strength: 45.0,
            profile_power: 2.0,
        }
    }
}

impl AbsorberConfig {
    /// No damping at all; useful for stability probes and tests.
    pub fn none() -> Self {
        AbsorberConfig {
            layer_cells: 0,
            strength: 0.0,
            profile_power: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(FwiError::invalid(
                "absorber.strength",
                format!("must be nonnegative, got {}", self.strength),
            ));
        }
        if !(self.profile_power >= 1.0) {
            return Err(FwiError::invalid(
                "absorber.profile_power",
                format!("must be at least 1, got {}", self.profile_power),
            ));
        }
        Ok(())
    }
}

// Eighth-order central coefficients for the second derivative.
const C0: f64 = -205.0 / 72.0;
const C1: f64 = 8.0 / 5.0;
const C2: f64 = -1.0 / 5.0;
const C3: f64 = 8.0 / 315.0;
const C4: f64 = -1.0 / 560.0;

/// Eighth-order 2D Laplacian with the propagator's ghost conventions:
/// antisymmetric continuation above the top row, zero continuation past
/// the other edges. Exact for polynomials through degree 8 away from the
/// boundary folds.
pub fn laplacian8(field: &Array2<f64>, dx: f64) -> Array2<f64> {
    let (nz, nx) = field.dim();
    assert!(nz >= 9 && nx >= 9, "laplacian8 needs at least 9x9, got {nz}x{nx}");
    assert!(dx > 0.0, "laplacian8 needs positive dx");
    let u = field.as_slice().expect("contiguous field");
    let mut out = vec![0.0; nz * nx];
    laplacian_into(nz, nx, 1.0 / (dx * dx), u, &mut out);
    Array2::from_shape_vec((nz, nx), out).expect("shape preserved")
}

/// Value at (i, j) under the ghost conventions; i may be negative.
#[inline]
fn fold(u: &[f64], nz: usize, nx: usize, i: isize, j: isize) -> f64 {
    if j < 0 || j >= nx as isize {
        return 0.0;
    }
    if i < 0 {
        let m = (-i) as usize;
        if m >= nz {
            return 0.0;
        }
        return -u[m * nx + j as usize];
    }
    if i >= nz as isize {
        return 0.0;
    }
    u[i as usize * nx + j as usize]
}

fn laplacian_into(nz: usize, nx: usize, inv_dx2: f64, u: &[f64], out: &mut [f64]) {
    let coeff = [C1, C2, C3, C4];
    let slow_cell = |i: usize, j: usize| -> f64 {
        let ii = i as isize;
        let jj = j as isize;
        let mut acc = 2.0 * C0 * u[i * nx + j];
        for (o, c) in coeff.iter().enumerate() {
            let o = o as isize + 1;
            acc += c
                * (fold(u, nz, nx, ii - o, jj)
                    + fold(u, nz, nx, ii + o, jj)
                    + fold(u, nz, nx, ii, jj - o)
                    + fold(u, nz, nx, ii, jj + o));
        }
        acc * inv_dx2
    };
    for i in 0..nz {
        let row = i * nx;
        let z_clean = i >= 4 && i + 4 < nz;
        if !z_clean || nx < 9 {
            for j in 0..nx {
                out[row + j] = slow_cell(i, j);
            }
            continue;
        }
        for j in 0..4 {
            out[row + j] = slow_cell(i, j);
        }
        for j in 4..nx - 4 {
            let c = row + j;
            let acc = 2.0 * C0 * u[c]
                + C1 * (u[c - nx] + u[c + nx] + u[c - 1] + u[c + 1])
                + C2 * (u[c - 2 * nx] + u[c + 2 * nx] + u[c - 2] + u[c + 2])
                + C3 * (u[c - 3 * nx] + u[c + 3 * nx] + u[c - 3] + u[c + 3])
                + C4 * (u[c - 4 * nx] + u[c + 4 * nx] + u[c - 4] + u[c + 4]);
            out[c] = acc * inv_dx2;
        }
        for j in nx - 4..nx {
            out[row + j] = slow_cell(i, j);
        }
    }
}

/// Precomputed per-cell update factors for one (model, absorber, fine dt).
///
/// The sponge is the damped-wave form (d/dt + sigma)^2 u = v^2 lap u;
/// keeping the sigma^2 u term cancels the layer's first-order impedance
/// mismatch, which a velocity-only damping term does not.
struct Stepper {
    nz: usize,
    nx: usize,
    inv_dx2: f64,
    /// v^2 * dt_fine^2 per cell.
    v2dt2: Vec<f64>,
    /// 1 / (1 + sigma dt_fine) per cell.
    damp_a: Vec<f64>,
    /// 1 - sigma dt_fine per cell.
    damp_b: Vec<f64>,
    /// 2 - sigma^2 dt_fine^2 per cell.
    damp_c: Vec<f64>,
}

impl Stepper {
    fn new(v: &VelocityModel, absorber: &AbsorberConfig, dt_fine: f64) -> Result<Self> {
        absorber.validate()?;
        let (nz, nx) = (v.nz(), v.nx());
        let layer = absorber.layer_cells;
        if layer > 0 && (2 * layer >= nx || layer + 2 >= nz) {
            return Err(FwiError::invalid(
                "absorber.layer_cells",
                format!("layers of {layer} cells do not fit a {nz}x{nx} grid"),
            ));
        }
        let ramp = |d: f64| absorber.strength * d.powf(absorber.profile_power);
        let n = nz * nx;
        let mut v2dt2 = vec![0.0; n];
        let mut damp_a = vec![0.0; n];
        let mut damp_b = vec![0.0; n];
        let mut damp_c = vec![0.0; n];
        let vals = v.values();
        for i in 0..nz {
            for j in 0..nx {
                let mut sigma = 0.0;
                if layer > 0 {
                    if j < layer {
                        sigma += ramp((layer - j) as f64 / layer as f64);
                    }
                    if j >= nx - layer {
                        sigma += ramp((j + 1 + layer - nx) as f64 / layer as f64);
                    }
                    if i >= nz - layer {
                        sigma += ramp((i + 1 + layer - nz) as f64 / layer as f64);
                    }
                }
                let c = i * nx + j;
                let vel = vals[(i, j)];
                v2dt2[c] = vel * vel * dt_fine * dt_fine;
                damp_a[c] = 1.0 / (1.0 + sigma * dt_fine);
                damp_b[c] = 1.0 - sigma * dt_fine;
                damp_c[c] = 2.0 - sigma * sigma * dt_fine * dt_fine;
            }
        }
        Ok(Stepper {
            nz,
            nx,
            inv_dx2: 1.0 / (v.dx() * v.dx()),
            v2dt2,
            damp_a,
            damp_b,
            damp_c,
        })
    }

    /// u_next = a (c u - b u_prev + v^2 dt^2 lap(u)), free surface row
    /// pinned to zero, then the optional source added at one cell.
    fn forward_step(
        &self,
        u_prev: &[f64],
        u_cur: &[f64],
        u_next: &mut [f64],
        lap: &mut [f64],
        source: Option<(usize, f64)>,
    ) {
        laplacian_into(self.nz, self.nx, self.inv_dx2, u_cur, lap);
        for c in 0..self.nz * self.nx {
            u_next[c] = self.damp_a[c]
                * (self.damp_c[c] * u_cur[c] - self.damp_b[c] * u_prev[c]
                    + self.v2dt2[c] * lap[c]);
        }
        for c in 0..self.nx {
            u_next[c] = 0.0;
        }
        if let Some((cell, amp)) = source {
            u_next[cell] += self.damp_a[cell] * self.v2dt2[cell] * amp;
        }
    }

    /// Transpose step: w_next = a (c w - b w_prev + lap(v^2 dt^2 w)),
    /// with residual samples injected as a-scaled point terms.
    fn adjoint_step(
        &self,
        w_prev: &[f64],
        w_cur: &[f64],
        w_next: &mut [f64],
        scratch: &mut [f64],
        lap: &mut [f64],
        injections: &[(usize, f64)],
    ) {
        for c in 0..self.nz * self.nx {
            scratch[c] = self.v2dt2[c] * w_cur[c];
        }
        laplacian_into(self.nz, self.nx, self.inv_dx2, scratch, lap);
        for c in 0..self.nz * self.nx {
            w_next[c] = self.damp_a[c]
                * (self.damp_c[c] * w_cur[c] - self.damp_b[c] * w_prev[c] + lap[c]);
        }
        for c in 0..self.nx {
            w_next[c] = 0.0;
        }
        for &(cell, value) in injections {
            w_next[cell] += self.damp_a[cell] * value;
        }
    }
}

/// Time-grid bookkeeping shared by the forward and adjoint passes.
#[derive(Debug, Clone, Copy, PartialEq)]
struct FinePlan {
    ratio: usize,
    dt_fine: f64,
    /// Highest fine level; coarse sample n sits at fine level n*ratio.
    k_max: usize,
}

fn fine_plan(v: &VelocityModel, geom: &AcquisitionGeometry) -> Result<FinePlan> {
    let verdict = validate_cfl(v.max_velocity(), v.dx(), geom.dt)?;
    if !verdict.pass {
        return Err(FwiError::Cfl {
            courant: verdict.courant,
            limit: verdict.limit,
        });
    }
    let ratio = substep_ratio(verdict.courant);
    Ok(FinePlan {
        ratio,
        dt_fine: geom.dt / ratio as f64,
        k_max: (geom.nt - 1) * ratio,
    })
}

enum HistoryStore {
    Full(Vec<Vec<f64>>),
    Checkpointed {
        segment: usize,
        /// Per segment j >= 1: fields at fine levels (jC-2, jC-1).
        /// Segment 0 restarts from zeros.
        states: Vec<[Vec<f64>; 2]>,
    },
}

/// Stored (or reconstructible) forward wavefield of one shot, at every
/// fine time level the imaging condition needs.
pub struct WavefieldHistory {
    nz: usize,
    nx: usize,
    source_ordinal: usize,
    ratio: usize,
    dt_fine: f64,
    k_max: usize,
    store: HistoryStore,
}

impl WavefieldHistory {
    pub fn step_ratio(&self) -> usize {
        self.ratio
    }

    pub fn is_checkpointed(&self) -> bool {
        matches!(self.store, HistoryStore::Checkpointed { .. })
    }
}

fn choose_segment(levels: usize, budget_fields: usize) -> Option<usize> {
    if levels <= budget_fields {
        return None;
    }
    let c = (2.0 * levels as f64).sqrt().ceil() as usize;
    Some(c.max(4))
}

/// Walks the forward history backward, reconstructing checkpointed
/// segments on demand.
struct LevelCursor<'a> {
    history: &'a WavefieldHistory,
    stepper: &'a Stepper,
    geom: &'a AcquisitionGeometry,
    inv_dx2: f64,
    source_cell: usize,
    /// Levels seg_base..=seg_top currently materialized (checkpoint mode).
    buffer: Vec<Vec<f64>>,
    seg_base: isize,
    seg_top: isize,
    zeros: Vec<f64>,
}

impl<'a> LevelCursor<'a> {
    fn new(
        history: &'a WavefieldHistory,
        stepper: &'a Stepper,
        geom: &'a AcquisitionGeometry,
        source_cell: usize,
    ) -> Self {
        let n = history.nz * history.nx;
        LevelCursor {
            history,
            stepper,
            geom,
            inv_dx2: stepper.inv_dx2,
            source_cell,
            buffer: Vec::new(),
            seg_base: 0,
            seg_top: -1,
            zeros: vec![0.0; n],
        }
    }

    /// Forward fields at fine levels (k, k-1, k-2).
    fn triple(&mut self, k: usize) -> (&[f64], &[f64], &[f64]) {
        match &self.history.store {
            HistoryStore::Full(fields) => {
                let get = |idx: isize| -> &[f64] {
                    if idx < 0 {
                        &self.zeros
                    } else {
                        &fields[idx as usize]
                    }
                };
                (get(k as isize), get(k as isize - 1), get(k as isize - 2))
            }
            HistoryStore::Checkpointed { segment, .. } => {
                let seg = *segment;
                let j = k / seg;
                let base = j as isize * seg as isize - 2;
                if base != self.seg_base || self.seg_top < k as isize {
                    self.materialize(j, seg);
                }
                let at = |idx: isize| -> &[f64] {
                    if idx < 0 {
                        &self.zeros
                    } else {
                        &self.buffer[(idx - self.seg_base) as usize]
                    }
                };
                (at(k as isize), at(k as isize - 1), at(k as isize - 2))
            }
        }
    }

    /// Recomputes fine levels jC-2 ..= min((j+1)C - 1, k_max) by stepping
    /// forward from the stored segment state. The recomputation replays
    /// the identical arithmetic, so fields match the original pass bit
    /// for bit.
    fn materialize(&mut self, j: usize, seg: usize) {
        let states = match &self.history.store {
            HistoryStore::Checkpointed { states, .. } => states,
            HistoryStore::Full(_) => unreachable!(),
        };
        let n = self.history.nz * self.history.nx;
        let base = j as isize * seg as isize - 2;
        let top = (((j + 1) * seg - 1) as isize).min(self.history.k_max as isize);
        let len = (top - base + 1) as usize;
        self.buffer.clear();
        self.buffer.resize(len, Vec::new());
        let mut lap = vec![0.0; n];
        if j == 0 {
            // Levels -2, -1, 0 are all zero fields.
            self.buffer[0] = vec![0.0; n];
            self.buffer[1] = vec![0.0; n];
            self.buffer[2] = vec![0.0; n];
            for level in 1..=top {
                let (lo, hi) = self.buffer.split_at_mut((level - base) as usize);
                let u_prev = &lo[(level - base) as usize - 2];
                let u_cur = &lo[(level - base) as usize - 1];
                let mut u_next = vec![0.0; n];
                let t = (level - 1) as f64 * self.history.dt_fine;
                let amp = self.geom.wavelet(t) * self.inv_dx2;
                self.stepper.forward_step(
                    u_prev,
                    u_cur,
                    &mut u_next,
                    &mut lap,
                    Some((self.source_cell, amp)),
                );
                hi[0] = u_next;
            }
        } else {
            self.buffer[0] = states[j][0].clone();
            self.buffer[1] = states[j][1].clone();
            for level in (base + 2)..=top {
                let (lo, hi) = self.buffer.split_at_mut((level - base) as usize);
                let u_prev = &lo[(level - base) as usize - 2];
                let u_cur = &lo[(level - base) as usize - 1];
                let mut u_next = vec![0.0; n];
                let t = (level - 1) as f64 * self.history.dt_fine;
                let amp = self.geom.wavelet(t) * self.inv_dx2;
                self.stepper.forward_step(
                    u_prev,
                    u_cur,
                    &mut u_next,
                    &mut lap,
                    Some((self.source_cell, amp)),
                );
                hi[0] = u_next;
            }
        }
        self.seg_base = base;
        self.seg_top = top;
    }
}

fn check_shot_inputs(
    v: &VelocityModel,
    geom: &AcquisitionGeometry,
    source_ordinal: usize,
) -> Result<()> {
    geom.validate_for_width(v.nx())?;
    if source_ordinal >= geom.n_sources() {
        return Err(FwiError::invalid(
            "source_ordinal",
            format!("{source_ordinal} out of range for {} sources", geom.n_sources()),
        ));
    }
    if v.nz() < 9 || v.nx() < 9 {
        return Err(FwiError::invalid(
            "model",
            format!("propagation needs at least 9x9 cells, got {}x{}", v.nz(), v.nx()),
        ));
    }
    Ok(())
}

/// Simulates one shot. With `record_history` the returned history carries
/// (or can reconstruct) the forward field at every fine level for
/// [`adjoint_gradient`].
pub fn forward_shot(
    v: &VelocityModel,
    geom: &AcquisitionGeometry,
    absorber: &AbsorberConfig,
    source_ordinal: usize,
    record_history: bool,
) -> Result<(ShotRecord, Option<WavefieldHistory>)> {
    forward_shot_with_budget(
        v,
        geom,
        absorber,
        source_ordinal,
        record_history,
        DEFAULT_HISTORY_BUDGET,
    )
}

/// [`forward_shot`] with an explicit history memory budget in bytes.
pub fn forward_shot_with_budget(
    v: &VelocityModel,
    geom: &AcquisitionGeometry,
    absorber: &AbsorberConfig,
    source_ordinal: usize,
    record_history: bool,
    history_budget: usize,
) -> Result<(ShotRecord, Option<WavefieldHistory>)> {
    check_shot_inputs(v, geom, source_ordinal)?;
    let plan = fine_plan(v, geom)?;
    let stepper = Stepper::new(v, absorber, plan.dt_fine)?;
    run_forward(v, geom, absorber, source_ordinal, record_history, history_budget, plan, &stepper)
}

#[allow(clippy::too_many_arguments)]
fn run_forward(
    v: &VelocityModel,
    geom: &AcquisitionGeometry,
    _absorber: &AbsorberConfig,
    source_ordinal: usize,
    record_history: bool,
    history_budget: usize,
    plan: FinePlan,
    stepper: &Stepper,
) -> Result<(ShotRecord, Option<WavefieldHistory>)> {
    let (nz, nx) = (v.nz(), v.nx());
    let n = nz * nx;
    let source_cell = SURFACE_DEPTH_INDEX * nx + geom.source_x_indices[source_ordinal];
    let receiver_cells: Vec<usize> = geom
        .receiver_x_indices
        .iter()
        .map(|&rx| SURFACE_DEPTH_INDEX * nx + rx)
        .collect();
    let inv_dx2 = 1.0 / (v.dx() * v.dx());

    let levels = plan.k_max + 1;
    let segment = if record_history {
        choose_segment(levels, (history_budget / (8 * n)).max(8))
    } else {
        None
    };
    let mut full: Vec<Vec<f64>> = Vec::new();
    let mut states: Vec<[Vec<f64>; 2]> = Vec::new();
    if record_history {
        match segment {
            None => full.reserve(levels),
            Some(seg) => {
                let n_seg = levels.div_ceil(seg);
                states = (0..n_seg).map(|_| [Vec::new(), Vec::new()]).collect();
            }
        }
    }

    let mut traces = Array2::zeros((receiver_cells.len(), geom.nt));
    let mut u_prev = vec![0.0; n];
    let mut u_cur = vec![0.0; n];
    let mut u_next = vec![0.0; n];
    let mut lap = vec![0.0; n];

    let mut store_level = |level: usize, field: &[f64]| {
        if !record_history {
            return;
        }
        match segment {
            None => full.push(field.to_vec()),
            Some(seg) => {
                let j = (level + 2) / seg;
                if j >= 1 && j < states.len() {
                    if level == j * seg - 2 {
                        states[j][0] = field.to_vec();
                    } else if level == j * seg - 1 {
                        states[j][1] = field.to_vec();
                    }
                }
            }
        }
    };

    store_level(0, &u_cur);
    // Sample 0 is the zero initial field.
    for k in 0..plan.k_max {
        let t = k as f64 * plan.dt_fine;
        let amp = geom.wavelet(t) * inv_dx2;
        stepper.forward_step(&u_prev, &u_cur, &mut u_next, &mut lap, Some((source_cell, amp)));
        let level = k + 1;
        if level % plan.ratio == 0 {
            let sample = level / plan.ratio;
            for (r, &rc) in receiver_cells.iter().enumerate() {
                traces[(r, sample)] = u_next[rc];
            }
        }
        store_level(level, &u_next);
        std::mem::swap(&mut u_prev, &mut u_cur);
        std::mem::swap(&mut u_cur, &mut u_next);
        if level % 64 == 0 || level == plan.k_max {
            if let Some(bad) = u_cur.iter().find(|x| !x.is_finite()) {
                let _ = bad;
                return Err(FwiError::non_finite(format!(
                    "wavefield at internal step {level} of shot {source_ordinal}"
                )));
            }
        }
    }

    let record = ShotRecord {
        source_index: source_ordinal,
        traces,
        dt: geom.dt,
    };
    let history = if record_history {
        let store = match segment {
            None => HistoryStore::Full(full),
            Some(seg) => HistoryStore::Checkpointed {
                segment: seg,
                states,
            },
        };
        Some(WavefieldHistory {
            nz,
            nx,
            source_ordinal,
            ratio: plan.ratio,
            dt_fine: plan.dt_fine,
            k_max: plan.k_max,
            store,
        })
    } else {
        None
    };
    Ok((record, history))
}

/// Gradient of `sum(adjoint_source . d record)` with respect to the
/// velocity grid: the exact transpose of the linearized forward map,
/// evaluated by one time-reversed sweep against the stored history.
pub fn adjoint_gradient(
    v: &VelocityModel,
    geom: &AcquisitionGeometry,
    absorber: &AbsorberConfig,
    source_ordinal: usize,
    adjoint_source: &Array2<f64>,
    history: &WavefieldHistory,
) -> Result<Array2<f64>> {
    check_shot_inputs(v, geom, source_ordinal)?;
    let plan = fine_plan(v, geom)?;
    if history.nz != v.nz()
        || history.nx != v.nx()
        || history.source_ordinal != source_ordinal
        || history.ratio != plan.ratio
        || history.k_max != plan.k_max
    {
        return Err(FwiError::shape(
            "wavefield history does not match this model/geometry/shot".to_string(),
        ));
    }
    if adjoint_source.dim() != (geom.n_receivers(), geom.nt) {
        return Err(FwiError::shape(format!(
            "adjoint source {:?}, geometry wants {:?}",
            adjoint_source.dim(),
            (geom.n_receivers(), geom.nt)
        )));
    }
    let stepper = Stepper::new(v, absorber, plan.dt_fine)?;
    let (nz, nx) = (v.nz(), v.nx());
    let n = nz * nx;
    let source_cell = SURFACE_DEPTH_INDEX * nx + geom.source_x_indices[source_ordinal];
    let receiver_cells: Vec<usize> = geom
        .receiver_x_indices
        .iter()
        .map(|&rx| SURFACE_DEPTH_INDEX * nx + rx)
        .collect();

    let mut cursor = LevelCursor::new(history, &stepper, geom, source_cell);
    let vals = v.values();
    let mut grad = vec![0.0; n];
    let mut w_prev = vec![0.0; n];
    let mut w_cur = vec![0.0; n];
    let mut w_next = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut lap = vec![0.0; n];
    let mut injections: Vec<(usize, f64)> = Vec::with_capacity(receiver_cells.len());

    for k in (0..=plan.k_max).rev() {
        injections.clear();
        if k % plan.ratio == 0 {
            let sample = k / plan.ratio;
            for (r, &rc) in receiver_cells.iter().enumerate() {
                injections.push((rc, adjoint_source[(r, sample)]));
            }
        }
        stepper.adjoint_step(&w_prev, &w_cur, &mut w_next, &mut scratch, &mut lap, &injections);
        if k >= 1 {
            let (u_k, u_km1, u_km2) = cursor.triple(k);
            for i in 0..nz {
                for j in 0..nx {
                    let c = i * nx + j;
                    let second_diff = u_k[c] / stepper.damp_a[c]
                        - stepper.damp_c[c] * u_km1[c]
                        + stepper.damp_b[c] * u_km2[c];
                    grad[c] += 2.0 / vals[(i, j)] * second_diff * w_next[c];
                }
            }
        }
        std::mem::swap(&mut w_prev, &mut w_cur);
        std::mem::swap(&mut w_cur, &mut w_next);
    }

    Ok(Array2::from_shape_vec((nz, nx), grad).expect("grid shape"))
}

/// Sums the configured misfit and its velocity gradient over all shots.
/// Shots run in parallel; the reduction order is fixed by shot index, so
/// results are identical at any thread count.
pub fn misfit_and_gradient(
    v: &VelocityModel,
    geom: &AcquisitionGeometry,
    absorber: &AbsorberConfig,
    observed: &DataSet,
    misfit: MisfitKind,
) -> Result<(f64, Array2<f64>)> {
    observed.validate_against(geom)?;
    let per_shot: Vec<Result<(f64, Array2<f64>)>> = (0..geom.n_sources())
        .into_par_iter()
        .map(|s| {
            let (sim, history) = forward_shot(v, geom, absorber, s, true)?;
            let history = history.expect("history requested");
            let out = misfit.evaluate(&sim, &observed.records[s])?;
            let grad = adjoint_gradient(v, geom, absorber, s, &out.adjoint_source, &history)?;
            Ok((out.value, grad))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = Array2::zeros((v.nz(), v.nx()));
    for item in per_shot {
        let (value, g) = item?;
        total += value;
        grad += &g;
    }
    Ok((total, grad))
}

/// Forward-models every shot of the geometry into a clean dataset.
pub fn simulate_dataset(
    v: &VelocityModel,
    geom: &AcquisitionGeometry,
    absorber: &AbsorberConfig,
) -> Result<DataSet> {
    let records: Vec<Result<ShotRecord>> = (0..geom.n_sources())
        .into_par_iter()
        .map(|s| forward_shot(v, geom, absorber, s, false).map(|(rec, _)| rec))
        .collect();
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        out.push(rec?);
    }
    Ok(DataSet::clean(out))
}
