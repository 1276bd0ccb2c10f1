//! Velocity models, acquisition geometry, source wavelet, synthetic-data
//! noise, and grid/record file formats.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{FwiError, Result};

/// Largest magnitude of the 1D eighth-order second-derivative symbol,
/// attained at the Nyquist wavenumber:
/// 205/72 + 2*(8/5 + 1/5 + 8/315 + 1/560).
pub const STENCIL_SYMBOL_MAX_1D: f64 = 6.501_587_301_587_302;

/// Fraction of the single-step bound the internal time step is held below.
pub const CFL_SAFETY: f64 = 0.9;

/// Largest internal subdivision of the user time step the propagator will
/// perform. Beyond this the recording rate is considered mis-configured.
pub const MAX_SUBSTEP_RATIO: usize = 4;

/// Von Neumann stability bound on v*dt/dx for one leapfrog step of the
/// 2D eighth-order-space scheme (both axes at Nyquist): 2/sqrt(2*S_1d).
pub fn courant_limit_single_step() -> f64 {
    2.0 / (2.0 * STENCIL_SYMBOL_MAX_1D).sqrt()
}

/// Largest user-level Courant number `validate_cfl` accepts. The simulator
/// subdivides the user step by up to [`MAX_SUBSTEP_RATIO`], each internal
/// step held below [`CFL_SAFETY`] times the single-step bound.
pub fn courant_limit() -> f64 {
    MAX_SUBSTEP_RATIO as f64 * CFL_SAFETY * courant_limit_single_step()
}

/// Internal subdivision of the user time step needed for a stable run.
pub fn substep_ratio(courant: f64) -> usize {
    let target = CFL_SAFETY * courant_limit_single_step();
    ((courant / target).ceil() as usize).max(1)
}

/// Stability verdict for an explicit run at the given settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CflVerdict {
    pub courant: f64,
    pub limit: f64,
    pub pass: bool,
}

/// Checks v_max*dt/dx against the scheme's stability bound.
///
/// All inputs must be positive. Callers must refuse to simulate on a
/// failing verdict.
pub fn validate_cfl(v_max: f64, dx: f64, dt: f64) -> Result<CflVerdict> {
    if !(v_max > 0.0 && dx > 0.0 && dt > 0.0) {
        return Err(FwiError::invalid(
            "validate_cfl",
            format!("v_max, dx, dt must be positive (got {v_max}, {dx}, {dt})"),
        ));
    }
    let courant = v_max * dt / dx;
    let limit = courant_limit();
    Ok(CflVerdict {
        courant,
        limit,
        pass: courant <= limit,
    })
}

/// Ricker wavelet amplitude: (1 - 2 pi^2 f^2 t^2) exp(-pi^2 f^2 t^2).
pub fn ricker(t: f64, f: f64) -> f64 {
    let a = std::f64::consts::PI.powi(2) * f * f * t * t;
    (1.0 - 2.0 * a) * (-a).exp()
}

/// 2D grid of wave speeds in m/s with uniform spacing, depth-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    nz: usize,
    nx: usize,
    dx: f64,
    values: Array2<f64>,
}

impl VelocityModel {
    /// Validates positivity, finiteness, minimum stencil extent, and
    /// spacing. `values` is (nz, nx), depth-major.
    pub fn new(values: Array2<f64>, dx: f64) -> Result<Self> {
        let (nz, nx) = values.dim();
        if nz < 8 || nx < 8 {
            return Err(FwiError::invalid(
                "values",
                format!("grid must be at least 8x8, got {nz}x{nx}"),
            ));
        }
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(FwiError::invalid("dx", format!("must be positive, got {dx}")));
        }
        if !values.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(FwiError::invalid(
                "values",
                "all wave speeds must be strictly positive and finite",
            ));
        }
        Ok(VelocityModel { nz, nx, dx, values })
    }

    /// Homogeneous model, mostly for tests and stability probes.
    pub fn constant(nz: usize, nx: usize, dx: f64, v: f64) -> Result<Self> {
        Self::new(Array2::from_elem((nz, nx), v), dx)
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn max_velocity(&self) -> f64 {
        self.values.iter().cloned().fold(f64::MIN, f64::max)
    }

    pub fn min_velocity(&self) -> f64 {
        self.values.iter().cloned().fold(f64::MAX, f64::min)
    }
}

/// Source/receiver surface positions, wavelet settings, and time axis.
///
/// Sources and receivers sit on the surface; the propagator injects and
/// samples one cell below the free-surface row.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionGeometry {
    pub source_x_indices: Vec<usize>,
    pub receiver_x_indices: Vec<usize>,
    /// Recording time step in seconds.
    pub dt: f64,
    /// Number of recorded time samples.
    pub nt: usize,
    /// Ricker peak frequency in Hz.
    pub peak_freq: f64,
    /// Wavelet onset shift in seconds.
    pub delay: f64,
    /// Source amplitude scale.
    pub amplitude: f64,
}

impl AcquisitionGeometry {
    pub fn new(
        source_x_indices: Vec<usize>,
        receiver_x_indices: Vec<usize>,
        dt: f64,
        nt: usize,
        peak_freq: f64,
        delay: f64,
    ) -> Result<Self> {
        let geom = AcquisitionGeometry {
            source_x_indices,
            receiver_x_indices,
            dt,
            nt,
            peak_freq,
            delay,
            amplitude: 1.0,
        };
        geom.check()?;
        Ok(geom)
    }

    fn check(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(FwiError::invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        if self.nt < 2 {
            return Err(FwiError::invalid("nt", format!("must be at least 2, got {}", self.nt)));
        }
        if !(self.peak_freq > 0.0) {
            return Err(FwiError::invalid(
                "peak_freq",
                format!("must be positive, got {}", self.peak_freq),
            ));
        }
        if self.source_x_indices.is_empty() {
            return Err(FwiError::invalid("source_x_indices", "at least one source required"));
        }
        if self.receiver_x_indices.is_empty() {
            return Err(FwiError::invalid(
                "receiver_x_indices",
                "at least one receiver required",
            ));
        }
        if !distinct(&self.source_x_indices) {
            return Err(FwiError::invalid("source_x_indices", "indices must be distinct"));
        }
        if !distinct(&self.receiver_x_indices) {
            return Err(FwiError::invalid("receiver_x_indices", "indices must be distinct"));
        }
        Ok(())
    }

    /// Bounds-checks all lateral indices against a model width.
    pub fn validate_for_width(&self, nx: usize) -> Result<()> {
        for (name, list) in [
            ("source_x_indices", &self.source_x_indices),
            ("receiver_x_indices", &self.receiver_x_indices),
        ] {
            if let Some(&bad) = list.iter().find(|&&i| i >= nx) {
                return Err(FwiError::invalid(
                    name,
                    format!("index {bad} out of range for model width {nx}"),
                ));
            }
        }
        Ok(())
    }

    pub fn n_sources(&self) -> usize {
        self.source_x_indices.len()
    }

    pub fn n_receivers(&self) -> usize {
        self.receiver_x_indices.len()
    }

    /// Delayed source amplitude at time `t`.
    pub fn wavelet(&self, t: f64) -> f64 {
        self.amplitude * ricker(t - self.delay, self.peak_freq)
    }
}

fn distinct(indices: &[usize]) -> bool {
    let mut seen = indices.to_vec();
    seen.sort_unstable();
    seen.windows(2).all(|w| w[0] != w[1])
}

/// Receiver traces for one source firing: (n_r, n_T), trace-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotRecord {
    pub source_index: usize,
    pub traces: Array2<f64>,
    pub dt: f64,
}

impl ShotRecord {
    pub fn new(source_index: usize, traces: Array2<f64>, dt: f64) -> Result<Self> {
        if !traces.iter().all(|v| v.is_finite()) {
            return Err(FwiError::non_finite(format!("shot {source_index} traces")));
        }
        Ok(ShotRecord {
            source_index,
            traces,
            dt,
        })
    }

    pub fn n_receivers(&self) -> usize {
        self.traces.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.traces.ncols()
    }
}

/// One record per source, plus the noise level actually applied.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub records: Vec<ShotRecord>,
    /// Standard deviation of the added noise; 0 for clean data.
    pub noise_sigma: f64,
}

impl DataSet {
    pub fn clean(records: Vec<ShotRecord>) -> Self {
        DataSet {
            records,
            noise_sigma: 0.0,
        }
    }

    /// Checks one record per geometry source with consistent shapes.
    pub fn validate_against(&self, geom: &AcquisitionGeometry) -> Result<()> {
        if self.records.len() != geom.n_sources() {
            return Err(FwiError::shape(format!(
                "dataset has {} records for {} sources",
                self.records.len(),
                geom.n_sources()
            )));
        }
        for rec in &self.records {
            if rec.n_receivers() != geom.n_receivers() || rec.n_samples() != geom.nt {
                return Err(FwiError::shape(format!(
                    "record {} is {}x{}, geometry wants {}x{}",
                    rec.source_index,
                    rec.n_receivers(),
                    rec.n_samples(),
                    geom.n_receivers(),
                    geom.nt
                )));
            }
        }
        Ok(())
    }

    /// Root-mean-square amplitude over every sample of every record.
    pub fn rms(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for rec in &self.records {
            for &v in rec.traces.iter() {
                sum += v * v;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            (sum / count as f64).sqrt()
        }
    }
}

/// Adds i.i.d. Gaussian noise with sigma = rel_level * RMS of the clean
/// samples. Deterministic per (seed, shot index): shot k draws from the
/// ChaCha stream k, so shots may be generated in parallel.
pub fn add_noise(data: &DataSet, rel_level: f64, seed: u64) -> Result<DataSet> {
    if !(rel_level >= 0.0) {
        return Err(FwiError::invalid(
            "rel_level",
            format!("must be nonnegative, got {rel_level}"),
        ));
    }
    if rel_level == 0.0 {
        return Ok(DataSet {
            records: data.records.clone(),
            noise_sigma: 0.0,
        });
    }
    let sigma = rel_level * data.rms();
    let records = data
        .records
        .iter()
        .enumerate()
        .map(|(k, rec)| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut traces = rec.traces.clone();
            for v in traces.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * n;
            }
            ShotRecord {
                source_index: rec.source_index,
                traces,
                dt: rec.dt,
            }
        })
        .collect();
    Ok(DataSet {
        records,
        noise_sigma: sigma,
    })
}

const GRID_MAGIC: &[u8; 4] = b"FWIG";
const SHOT_MAGIC: &[u8; 4] = b"FWIS";

/// Writes a velocity grid: magic "FWIG", u32 nz, u32 nx, u32 reserved=0,
/// f64 dx, then nz*nx f32 values depth-major, all little-endian.
pub fn save_grid(path: impl AsRef<Path>, grid: &VelocityModel) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + 4 * grid.nz * grid.nx);
    buf.extend_from_slice(GRID_MAGIC);
    buf.extend_from_slice(&(grid.nz as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.nx as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    buf.extend_from_slice(&grid.dx.to_le_bytes());
    for &v in grid.values.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a grid written by [`save_grid`].
pub fn load_grid(path: impl AsRef<Path>) -> Result<VelocityModel> {
    let bytes = std::fs::read(path)?;
    let mut cursor = Cursor::new(&bytes);
    let magic = cursor.take_array::<4>("magic")?;
    if &magic != GRID_MAGIC {
        return Err(FwiError::format("magic", "expected FWIG"));
    }
    let nz = cursor.take_u32("nz")? as usize;
    let nx = cursor.take_u32("nx")? as usize;
    let reserved = cursor.take_u32("reserved")?;
    if reserved != 0 {
        return Err(FwiError::format("reserved", format!("expected 0, got {reserved}")));
    }
    let dx = cursor.take_f64("dx")?;
    let n = nz
        .checked_mul(nx)
        .ok_or_else(|| FwiError::format("nz*nx", "dimension overflow"))?;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(cursor.take_f32("payload")? as f64);
    }
    cursor.expect_end("payload")?;
    let arr = Array2::from_shape_vec((nz, nx), values)
        .map_err(|e| FwiError::format("payload", e.to_string()))?;
    VelocityModel::new(arr, dx)
}

/// Writes a shot record: magic "FWIS", u32 n_r, u32 n_T, f64 dt, then
/// n_r*n_T f32 samples trace-major, all little-endian.
pub fn save_shot(path: impl AsRef<Path>, record: &ShotRecord) -> Result<()> {
    let (n_r, n_t) = record.traces.dim();
    let mut buf = Vec::with_capacity(20 + 4 * n_r * n_t);
    buf.extend_from_slice(SHOT_MAGIC);
    buf.extend_from_slice(&(n_r as u32).to_le_bytes());
    buf.extend_from_slice(&(n_t as u32).to_le_bytes());
    buf.extend_from_slice(&record.dt.to_le_bytes());
    for &v in record.traces.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a record written by [`save_shot`]. The format does not carry the
/// source index; the caller supplies it (usually from a manifest).
pub fn load_shot(path: impl AsRef<Path>, source_index: usize) -> Result<ShotRecord> {
    let bytes = std::fs::read(path)?;
    let mut cursor = Cursor::new(&bytes);
    let magic = cursor.take_array::<4>("magic")?;
    if &magic != SHOT_MAGIC {
        return Err(FwiError::format("magic", "expected FWIS"));
    }
    let n_r = cursor.take_u32("n_r")? as usize;
    let n_t = cursor.take_u32("n_T")? as usize;
    let dt = cursor.take_f64("dt")?;
    let n = n_r
        .checked_mul(n_t)
        .ok_or_else(|| FwiError::format("n_r*n_T", "dimension overflow"))?;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(cursor.take_f32("payload")? as f64);
    }
    cursor.expect_end("payload")?;
    let traces = Array2::from_shape_vec((n_r, n_t), values)
        .map_err(|e| FwiError::format("payload", e.to_string()))?;
    ShotRecord::new(source_index, traces, dt)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take_array<const N: usize>(&mut self, field: &str) -> Result<[u8; N]> {
        if self.pos + N > self.bytes.len() {
            return Err(FwiError::format(field, "truncated payload"));
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        Ok(out)
    }

    fn take_u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take_array::<4>(field)?))
    }

    fn take_f32(&mut self, field: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take_array::<4>(field)?))
    }

    fn take_f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take_array::<8>(field)?))
    }

    fn expect_end(&self, field: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(FwiError::format(
                field,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}
