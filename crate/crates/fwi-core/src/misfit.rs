//! Data misfits between simulated and observed records, and model-space
//! total variation, each paired with its exact derivative.
//!
//! The Wasserstein-1 misfit maps each trace pair to probability
//! distributions through a positive affine shift, then uses the 1D closed
//! form: W1 is the integral of |difference of cumulative distributions|.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{FwiError, Result};
use crate::model::ShotRecord;

/// Joint-range margin of the positive shift.
pub const W1_SHIFT_MARGIN: f64 = 0.1;

/// Absolute floor of the positive shift.
pub const W1_SHIFT_FLOOR: f64 = 1e-12;

/// Default smoothing of the total-variation functional, in m/s.
pub const TV_EPS_DEFAULT: f64 = 1e-3;

/// Nonnegative masses on a uniform time grid, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDistribution {
    pub masses: Vec<f64>,
    pub dt: f64,
}

/// Normalization bookkeeping needed to pull a W1 derivative back to raw
/// samples. The shift is treated as a constant in that chain rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormContext {
    /// Additive shift applied to both traces.
    pub shift: f64,
    /// Mass normalizer of the simulated trace.
    pub z_sim: f64,
    /// Mass normalizer of the observed trace.
    pub z_obs: f64,
    /// True when the pair had zero joint range and fell back to uniforms.
    pub degenerate: bool,
}

/// Misfit value and its derivative with respect to the simulated traces.
#[derive(Debug, Clone)]
pub struct MisfitResult {
    pub value: f64,
    pub adjoint_source: Array2<f64>,
}

/// Trace-misfit selector used by the inversion drivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisfitKind {
    L2,
    W1,
}

impl MisfitKind {
    pub fn evaluate(self, sim: &ShotRecord, obs: &ShotRecord) -> Result<MisfitResult> {
        match self {
            MisfitKind::L2 => l2_misfit(sim, obs),
            MisfitKind::W1 => w1_misfit(sim, obs),
        }
    }
}

fn check_shapes(sim: &ShotRecord, obs: &ShotRecord) -> Result<()> {
    if sim.traces.dim() != obs.traces.dim() {
        return Err(FwiError::shape(format!(
            "sim record {:?} vs obs record {:?}",
            sim.traces.dim(),
            obs.traces.dim()
        )));
    }
    Ok(())
}

/// Sum of squared sample differences scaled by dt, with its derivative.
pub fn l2_misfit(sim: &ShotRecord, obs: &ShotRecord) -> Result<MisfitResult> {
    check_shapes(sim, obs)?;
    let dt = sim.dt;
    let mut value = 0.0;
    let mut adjoint = Array2::zeros(sim.traces.raw_dim());
    for ((idx, &s), &o) in sim.traces.indexed_iter().zip(obs.traces.iter()) {
        let d = s - o;
        value += d * d * dt;
        adjoint[idx] = 2.0 * d * dt;
    }
    Ok(MisfitResult {
        value,
        adjoint_source: adjoint,
    })
}

/// Maps a trace pair to probability distributions via the affine shift
/// p_i = (a_i + c)/Z with c = -joint_min + margin*(joint_max - joint_min)
/// + floor and per-trace Z. A zero-range pair falls back to uniforms.
pub fn normalize_positive(
    sim_trace: &[f64],
    obs_trace: &[f64],
    dt: f64,
) -> Result<(TraceDistribution, TraceDistribution, NormContext)> {
    let n = sim_trace.len();
    if n < 2 || obs_trace.len() != n {
        return Err(FwiError::shape(format!(
            "trace lengths {} and {}, need equal and >= 2",
            n,
            obs_trace.len()
        )));
    }
    if !sim_trace.iter().chain(obs_trace).all(|v| v.is_finite()) {
        return Err(FwiError::non_finite("trace normalization input"));
    }
    let joint_min = sim_trace
        .iter()
        .chain(obs_trace)
        .cloned()
        .fold(f64::MAX, f64::min);
    let joint_max = sim_trace
        .iter()
        .chain(obs_trace)
        .cloned()
        .fold(f64::MIN, f64::max);
    let range = joint_max - joint_min;
    if range == 0.0 {
        let uniform = TraceDistribution {
            masses: vec![1.0 / n as f64; n],
            dt,
        };
        return Ok((
            uniform.clone(),
            uniform,
            NormContext {
                shift: 0.0,
                z_sim: 1.0,
                z_obs: 1.0,
                degenerate: true,
            },
        ));
    }
    let shift = -joint_min + W1_SHIFT_MARGIN * range + W1_SHIFT_FLOOR;
    let z_sim: f64 = sim_trace.iter().map(|a| a + shift).sum();
    let z_obs: f64 = obs_trace.iter().map(|a| a + shift).sum();
    let p = TraceDistribution {
        masses: sim_trace.iter().map(|a| (a + shift) / z_sim).collect(),
        dt,
    };
    let q = TraceDistribution {
        masses: obs_trace.iter().map(|a| (a + shift) / z_obs).collect(),
        dt,
    };
    Ok((
        p,
        q,
        NormContext {
            shift,
            z_sim,
            z_obs,
            degenerate: false,
        },
    ))
}

/// 1D Wasserstein-1 distance via cumulative distributions:
/// sum_t |P_t - Q_t| * dt.
pub fn w1_trace(p: &TraceDistribution, q: &TraceDistribution) -> Result<f64> {
    if p.masses.len() != q.masses.len() || p.dt != q.dt {
        return Err(FwiError::shape("distributions on different grids"));
    }
    let mut cp = 0.0;
    let mut cq = 0.0;
    let mut acc = 0.0;
    for (&a, &b) in p.masses.iter().zip(&q.masses) {
        cp += a;
        cq += b;
        acc += (cp - cq).abs() * p.dt;
    }
    Ok(acc)
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum over receivers of the W1 distance between normalized trace pairs,
/// with the exact derivative of that value with respect to raw simulated
/// samples (shift treated as constant).
pub fn w1_misfit(sim: &ShotRecord, obs: &ShotRecord) -> Result<MisfitResult> {
    check_shapes(sim, obs)?;
    let (n_r, n_t) = sim.traces.dim();
    let dt = sim.dt;
    let mut value = 0.0;
    let mut adjoint = Array2::zeros((n_r, n_t));
    for r in 0..n_r {
        let sim_row = sim.traces.row(r);
        let obs_row = obs.traces.row(r);
        let (p, q, ctx) = normalize_positive(
            sim_row.as_slice().expect("contiguous row"),
            obs_row.as_slice().expect("contiguous row"),
            dt,
        )?;
        if ctx.degenerate {
            continue;
        }
        // Cumulative difference and its contribution per time index.
        let mut cdf_sign = vec![0.0; n_t];
        let mut cp = 0.0;
        let mut cq = 0.0;
        for t in 0..n_t {
            cp += p.masses[t];
            cq += q.masses[t];
            let d = cp - cq;
            value += d.abs() * dt;
            cdf_sign[t] = sgn(d);
        }
        // dW1/dp_i is the tail sum of the CDF-difference signum.
        let mut tail = 0.0;
        let mut g = vec![0.0; n_t];
        for t in (0..n_t).rev() {
            tail += cdf_sign[t] * dt;
            g[t] = tail;
        }
        let dot: f64 = g.iter().zip(&p.masses).map(|(gi, pi)| gi * pi).sum();
        for t in 0..n_t {
            adjoint[(r, t)] = (g[t] - dot) / ctx.z_sim;
        }
    }
    Ok(MisfitResult {
        value,
        adjoint_source: adjoint,
    })
}

/// Smoothed isotropic total variation of a grid:
/// sum over cells of sqrt(dx^2 + dz^2 + eps^2) with forward differences
/// and replicate boundary, plus the exact gradient of that functional.
pub fn tv(grid: &Array2<f64>, eps: f64) -> Result<(f64, Array2<f64>)> {
    if !(eps > 0.0) {
        return Err(FwiError::invalid("eps", format!("must be positive, got {eps}")));
    }
    let (nz, nx) = grid.dim();
    let mut value = 0.0;
    let mut gradient = Array2::zeros((nz, nx));
    for i in 0..nz {
        for j in 0..nx {
            let d_lat = if j + 1 < nx { grid[(i, j + 1)] - grid[(i, j)] } else { 0.0 };
            let d_dep = if i + 1 < nz { grid[(i + 1, j)] - grid[(i, j)] } else { 0.0 };
            let t = (d_lat * d_lat + d_dep * d_dep + eps * eps).sqrt();
            value += t;
            gradient[(i, j)] += -(d_lat + d_dep) / t;
            if j + 1 < nx {
                gradient[(i, j + 1)] += d_lat / t;
            }
            if i + 1 < nz {
                gradient[(i + 1, j)] += d_dep / t;
            }
        }
    }
    Ok((value, gradient))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn record(traces: Array2<f64>, dt: f64) -> ShotRecord {
        ShotRecord::new(0, traces, dt).unwrap()
    }

    #[test]
    fn l2_identical_records_zero() {
        let a = record(arr2(&[[0.5, -0.25, 1.0]]), 0.002);
        let out = l2_misfit(&a, &a).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.adjoint_source.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn l2_single_sample_difference() {
        let dt = 0.004;
        let obs = record(Array2::zeros((2, 5)), dt);
        let mut traces = Array2::zeros((2, 5));
        traces[(1, 3)] = 0.7;
        let sim = record(traces, dt);
        let out = l2_misfit(&sim, &obs).unwrap();
        assert!((out.value - 0.7 * 0.7 * dt).abs() < 1e-15);
        assert!((out.adjoint_source[(1, 3)] - 2.0 * 0.7 * dt).abs() < 1e-15);
        assert_eq!(out.adjoint_source[(0, 0)], 0.0);
    }

    #[test]
    fn l2_rejects_shape_mismatch() {
        let a = record(Array2::zeros((2, 5)), 0.001);
        let b = record(Array2::zeros((2, 6)), 0.001);
        assert!(l2_misfit(&a, &b).is_err());
    }

    #[test]
    fn l2_adjoint_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let dt = 0.003;
        let sim0 = Array2::from_shape_fn((3, 16), |_| rng.random::<f64>() - 0.5);
        let obs = record(Array2::from_shape_fn((3, 16), |_| rng.random::<f64>() - 0.5), dt);
        let out = l2_misfit(&record(sim0.clone(), dt), &obs).unwrap();
        let h = 1e-6;
        for _ in 0..20 {
            let r = rng.random_range(0..3);
            let t = rng.random_range(0..16);
            let mut plus = sim0.clone();
            plus[(r, t)] += h;
            let mut minus = sim0.clone();
            minus[(r, t)] -= h;
            let fp = l2_misfit(&record(plus, dt), &obs).unwrap().value;
            let fm = l2_misfit(&record(minus, dt), &obs).unwrap().value;
            let fd = (fp - fm) / (2.0 * h);
            let an = out.adjoint_source[(r, t)];
            assert!(
                (fd - an).abs() <= 1e-8 * an.abs().max(1.0),
                "fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn normalize_identical_traces_identical_distributions() {
        let a = [0.3, -0.1, 0.8, 0.0];
        let (p, q, ctx) = normalize_positive(&a, &a, 0.001).unwrap();
        assert_eq!(p, q);
        assert!(!ctx.degenerate);
    }

    #[test]
    fn normalize_outputs_unit_mass() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a: Vec<f64> = (0..17).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let b: Vec<f64> = (0..17).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let (p, q, _) = normalize_positive(&a, &b, 0.01).unwrap();
            for dist in [&p, &q] {
                assert!(dist.masses.iter().all(|&m| m >= 0.0));
                let total: f64 = dist.masses.iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_hand_example() {
        // Traces [0,1] and [1,0]: joint range 1, shift 0.1 (plus the tiny
        // floor), Z = 1.2 for both, sim distribution [1/12, 11/12].
        let (p, q, ctx) = normalize_positive(&[0.0, 1.0], &[1.0, 0.0], 1.0).unwrap();
        assert!((ctx.shift - 0.1).abs() < 1e-9);
        assert!((ctx.z_sim - 1.2).abs() < 1e-9);
        assert!((ctx.z_obs - 1.2).abs() < 1e-9);
        assert!((p.masses[0] - 1.0 / 12.0).abs() < 1e-9);
        assert!((p.masses[1] - 11.0 / 12.0).abs() < 1e-9);
        assert!((q.masses[0] - 11.0 / 12.0).abs() < 1e-9);
    }

    #[test]
    fn normalize_degenerate_pair_falls_back_to_uniform() {
        let (p, q, ctx) = normalize_positive(&[2.0, 2.0, 2.0], &[2.0, 2.0, 2.0], 1.0).unwrap();
        assert!(ctx.degenerate);
        assert_eq!(p.masses, vec![1.0 / 3.0; 3]);
        assert_eq!(w1_trace(&p, &q).unwrap(), 0.0);
    }

    #[test]
    fn w1_trace_identical_is_zero() {
        let p = TraceDistribution {
            masses: vec![0.25; 4],
            dt: 0.5,
        };
        assert_eq!(w1_trace(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn w1_trace_point_masses_transport_distance() {
        let n = 10;
        let dt = 0.25;
        for (a, b) in [(1usize, 7usize), (0, 9), (4, 5)] {
            let mut pm = vec![0.0; n];
            pm[a] = 1.0;
            let mut qm = vec![0.0; n];
            qm[b] = 1.0;
            let p = TraceDistribution { masses: pm, dt };
            let q = TraceDistribution { masses: qm, dt };
            let expect = (a as f64 - b as f64).abs() * dt;
            assert!((w1_trace(&p, &q).unwrap() - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn w1_trace_hand_example() {
        let p = TraceDistribution {
            masses: vec![0.5, 0.5, 0.0],
            dt: 1.0,
        };
        let q = TraceDistribution {
            masses: vec![0.0, 0.5, 0.5],
            dt: 1.0,
        };
        assert!((w1_trace(&p, &q).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn w1_metric_properties_on_random_triples() {
        // Symmetry exact, triangle inequality within 1e-12 slack.
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let n = 12;
        let mut random_dist = || {
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
            let z: f64 = raw.iter().sum();
            TraceDistribution {
                masses: raw.into_iter().map(|v| v / z).collect(),
                dt: 0.1,
            }
        };
        for _ in 0..1000 {
            let a = random_dist();
            let b = random_dist();
            let c = random_dist();
            let ab = w1_trace(&a, &b).unwrap();
            let ba = w1_trace(&b, &a).unwrap();
            assert_eq!(ab, ba);
            let ac = w1_trace(&a, &c).unwrap();
            let cb = w1_trace(&c, &b).unwrap();
            assert!(ab <= ac + cb + 1e-12);
        }
    }

    #[test]
    fn w1_misfit_identical_records_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let traces = Array2::from_shape_fn((3, 20), |_| rng.random::<f64>() - 0.5);
        let a = record(traces, 0.002);
        let out = w1_misfit(&a, &a).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.adjoint_source.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn w1_adjoint_matches_finite_differences_away_from_extremes() {
        // The shift is frozen in the chain rule, so the comparison only
        // holds where a perturbation cannot move the joint extremes:
        // sample indices that are not the argmin/argmax of the sim trace.
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let dt = 1.0;
        let n_t = 32;
        let sim0 = Array2::from_shape_fn((2, n_t), |_| rng.random::<f64>() * 2.0 - 1.0);
        let obs = record(
            Array2::from_shape_fn((2, n_t), |_| rng.random::<f64>() * 2.0 - 1.0),
            dt,
        );
        let out = w1_misfit(&record(sim0.clone(), dt), &obs).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        while checked < 20 {
            let r = rng.random_range(0..2);
            let t = rng.random_range(0..n_t);
            let row = sim0.row(r);
            let lo = row.iter().cloned().fold(f64::MAX, f64::min);
            let hi = row.iter().cloned().fold(f64::MIN, f64::max);
            if sim0[(r, t)] == lo || sim0[(r, t)] == hi {
                continue;
            }
            let mut plus = sim0.clone();
            plus[(r, t)] += h;
            let mut minus = sim0.clone();
            minus[(r, t)] -= h;
            let fp = w1_misfit(&record(plus, dt), &obs).unwrap().value;
            let fm = w1_misfit(&record(minus, dt), &obs).unwrap().value;
            let fd = (fp - fm) / (2.0 * h);
            let an = out.adjoint_source[(r, t)];
            assert!(
                (fd - an).abs() <= 1e-6 * an.abs().max(1e-3),
                "fd {fd} vs analytic {an} at ({r},{t})"
            );
            checked += 1;
        }
    }

    #[test]
    fn w1_misfit_monotone_in_time_shift() {
        // A Ricker pulse against its shifted copy: the misfit grows with
        // the shift up to half the record.
        let dt = 0.004;
        let n_t = 256;
        let f = 5.0;
        let base: Vec<f64> = (0..n_t)
            .map(|n| crate::model::ricker(n as f64 * dt - 0.25, f))
            .collect();
        let obs = record(Array2::from_shape_vec((1, n_t), base.clone()).unwrap(), dt);
        let mut last = -1.0;
        for shift_samples in (0..=n_t / 2).step_by(8) {
            let mut shifted = vec![0.0; n_t];
            for i in 0..n_t {
                if i >= shift_samples {
                    shifted[i] = base[i - shift_samples];
                }
            }
            let sim = record(Array2::from_shape_vec((1, n_t), shifted).unwrap(), dt);
            let value = w1_misfit(&sim, &obs).unwrap().value;
            assert!(
                value > last,
                "shift {shift_samples}: value {value} did not increase past {last}"
            );
            last = value;
        }
    }

    #[test]
    fn w1_misfit_joint_rescaling_bounded_and_argmin_stable() {
        let dt = 0.004;
        let n_t = 128;
        let base: Vec<f64> = (0..n_t)
            .map(|n| crate::model::ricker(n as f64 * dt - 0.2, 5.0))
            .collect();
        let obs1 = record(Array2::from_shape_vec((1, n_t), base.clone()).unwrap(), dt);
        let obs2 = record(
            Array2::from_shape_vec((1, n_t), base.iter().map(|v| 2.0 * v).collect()).unwrap(),
            dt,
        );
        let sweep = |obs: &ShotRecord, scale: f64| -> (usize, Vec<f64>) {
            let mut values = Vec::new();
            for shift in 0..24 {
                let mut shifted = vec![0.0; n_t];
                for i in shift..n_t {
                    shifted[i] = scale * base[i - shift];
                }
                let sim = record(Array2::from_shape_vec((1, n_t), shifted).unwrap(), dt);
                values.push(w1_misfit(&sim, obs).unwrap().value);
            }
            let argmin = values
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            (argmin, values)
        };
        let (arg1, v1) = sweep(&obs1, 1.0);
        let (arg2, v2) = sweep(&obs2, 2.0);
        assert_eq!(arg1, 0);
        assert_eq!(arg2, arg1);
        for (a, b) in v1.iter().zip(&v2).skip(1) {
            let ratio = b / a;
            assert!((0.5..=2.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn tv_constant_grid() {
        let grid = Array2::from_elem((6, 9), 2500.0);
        let eps = 1e-3;
        let (value, gradient) = tv(&grid, eps).unwrap();
        assert!((value - 54.0 * eps).abs() < 1e-12);
        assert!(gradient.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn tv_vertical_step_approaches_step_mass() {
        // A lateral jump of height h crossed by nz rows contributes nz*h
        // as eps -> 0.
        let nz = 7;
        let nx = 10;
        let h = 350.0;
        let grid = Array2::from_shape_fn((nz, nx), |(_, j)| if j < 5 { 1000.0 } else { 1000.0 + h });
        let eps = 1e-7;
        let (value, _) = tv(&grid, eps).unwrap();
        let floor = (nz * nx) as f64 * eps;
        assert!(
            (value - floor - nz as f64 * h).abs() < 1e-3,
            "value {value} vs {}",
            nz as f64 * h
        );
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let grid = Array2::from_shape_fn((8, 8), |_| 2000.0 + 500.0 * rng.random::<f64>());
        let eps = 1e-3;
        let (_, gradient) = tv(&grid, eps).unwrap();
        let h = 1e-3;
        for _ in 0..25 {
            let i = rng.random_range(0..8);
            let j = rng.random_range(0..8);
            let mut plus = grid.clone();
            plus[(i, j)] += h;
            let mut minus = grid.clone();
            minus[(i, j)] -= h;
            let fd = (tv(&plus, eps).unwrap().0 - tv(&minus, eps).unwrap().0) / (2.0 * h);
            let an = gradient[(i, j)];
            assert!(
                (fd - an).abs() <= 1e-7 * an.abs().max(1.0),
                "fd {fd} vs analytic {an} at ({i},{j})"
            );
        }
    }
}
