//! Synthetic ground-truth trajectories, forcing features, normalization
//! statistics and training-sample windowing.
//!
//! The generator integrates a 2-D advection-diffusion equation on the grid
//! with an explicit upwind/FTCS scheme. The velocity field is divergence-free
//! by construction (derived from a random smooth stream function plus a
//! slowly rotating mean drift) and is itself stored as the last two state
//! variables, so all variables carry genuine cross-step dynamics. A diurnal
//! source term tied to the time of day and an analytic ambient field imposed
//! on the outermost ring provide inflow through the boundary region.
//!
//! Time scales: model step = 3 h, data step = 1 h (so three phase-shifted
//! model-step series fit in each trajectory), integrator substeps finer
//! still, as the CFL condition requires.

use crate::container::Container;
use crate::error::{LamError, Result};
use crate::graph::GridSpec;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::path::Path;

/// Data steps per model step (the paper's 1 h data / 3 h model pairing).
pub const MODEL_STEP_STRIDE: usize = 3;
/// Number of forcing features per grid node.
pub const FORCING_FEATURES: usize = 6;
/// Hours per day and days per year for the time features.
pub const DAY_HOURS: f64 = 24.0;
pub const YEAR_DAYS: f64 = 365.25;

const STATS_EPS: f64 = 1e-6;

/// How the integrator treats the domain edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryMode {
    /// Outermost ring follows the analytic ambient field (inflow).
    Inflow,
    /// Wrap-around domain; used by conservation tests.
    Periodic,
}

#[derive(Debug, Clone)]
pub struct PhysicsConfig {
    /// Total state variables; when >= 3 the last two are the wind components.
    pub n_vars: usize,
    pub diffusivity: f64,
    /// Peak velocity of the random stream-function modes (cells / hour).
    pub flow_amplitude: f64,
    /// Magnitude of the slowly rotating mean drift (cells / hour).
    pub mean_flow: f64,
    /// Rotation period of the mean drift direction (hours).
    pub mean_flow_period: f64,
    pub n_modes: usize,
    /// Diurnal source strength per scalar variable.
    pub source_amplitude: f64,
    /// Integrator substeps per 1 h data step.
    pub substeps: usize,
    pub boundary: BoundaryMode,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig {
            n_vars: 3,
            diffusivity: 0.05,
            flow_amplitude: 0.8,
            mean_flow: 1.2,
            mean_flow_period: 480.0,
            n_modes: 4,
            source_amplitude: 0.4,
            substeps: 4,
            boundary: BoundaryMode::Inflow,
        }
    }
}

/// One ground-truth series: states and forcing at 1 h data steps plus the
/// static surface fields and start-time metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub width: usize,
    pub height: usize,
    pub n_vars: usize,
    /// `[N x S]` raw-unit states, one per data step.
    pub states: Vec<Tensor>,
    /// `[N x FORCING_FEATURES]` forcing, one per data step.
    pub forcing: Vec<Tensor>,
    pub topography: Vec<f64>,
    pub water_fraction: Vec<f64>,
    /// Hour of day at the first data step.
    pub start_hour: f64,
    /// Day of year at the first data step.
    pub start_day: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
    pub fn n_nodes(&self) -> usize {
        self.width * self.height
    }
}

pub fn variable_names(n_vars: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..n_vars.saturating_sub(2))
        .map(|i| format!("c{i}"))
        .collect();
    if n_vars >= 3 {
        names.push("u".into());
        names.push("v".into());
    } else {
        while names.len() < n_vars {
            names.push(format!("c{}", names.len()));
        }
    }
    names
}

// ── analytic fields ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct FlowField {
    /// (ax, ay, stream amplitude, temporal frequency, phase) per mode, with
    /// (ax, ay) the spatial angular frequencies.
    modes: Vec<(f64, f64, f64, f64, f64)>,
    mean_flow: f64,
    mean_omega: f64,
    mean_phase: f64,
}

impl FlowField {
    fn sample<R: Rng>(cfg: &PhysicsConfig, w: f64, h: f64, rng: &mut R) -> Self {
        let mut modes = Vec::with_capacity(cfg.n_modes);
        for m in 0..cfg.n_modes {
            // low integer wave numbers: large-scale structure dominates
            let kx = rng.gen_range(1..=2 + m.min(2)) as f64;
            let ky = rng.gen_range(1..=2 + m.min(2)) as f64;
            let ax = 2.0 * PI * kx / w;
            let ay = 2.0 * PI * ky / h;
            // scale the stream amplitude so the peak velocity of mode m is
            // flow_amplitude / (1+m) regardless of the domain size
            let amp = cfg.flow_amplitude / ((1.0 + m as f64) * ax.max(ay));
            let omega = rng.gen_range(0.3..1.0) * 2.0 * PI / 72.0; // ~3 day scale
            let phase = rng.gen_range(0.0..2.0 * PI);
            modes.push((ax, ay, amp, omega, phase));
        }
        FlowField {
            modes,
            mean_flow: cfg.mean_flow,
            mean_omega: 2.0 * PI / cfg.mean_flow_period,
            mean_phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    /// Velocity (u, v) at position (x, y) and time t (hours). Divergence-free:
    /// u = dpsi/dy, v = -dpsi/dx plus a spatially uniform drift.
    fn velocity(&self, x: f64, y: f64, t: f64) -> (f64, f64) {
        let mut u = self.mean_flow * (self.mean_omega * t + self.mean_phase).cos();
        let mut v = self.mean_flow * (self.mean_omega * t + self.mean_phase).sin();
        for &(ax, ay, amp, omega, phase) in &self.modes {
            let arg = ax * x + ay * y + omega * t + phase;
            // psi = amp * sin(arg)
            u += amp * ay * arg.cos();
            v -= amp * ax * arg.cos();
        }
        (u, v)
    }

    /// Upper bound on |u|, |v| for the CFL check.
    fn speed_bound(&self) -> f64 {
        let mut b = self.mean_flow;
        for &(ax, ay, amp, ..) in &self.modes {
            b += amp * ax.max(ay);
        }
        b
    }
}

/// Smooth pseudo-random field from a handful of Fourier modes, values O(1).
fn smooth_field<R: Rng>(w: usize, h: usize, n_modes: usize, rng: &mut R) -> Vec<f64> {
    let mut modes = Vec::with_capacity(n_modes);
    for _ in 0..n_modes {
        modes.push((
            rng.gen_range(1..=3) as f64,
            rng.gen_range(1..=3) as f64,
            rng.gen_range(0.4..1.0),
            rng.gen_range(0.0..2.0 * PI),
        ));
    }
    let norm = 1.0 / (n_modes as f64).sqrt();
    let mut out = Vec::with_capacity(w * h);
    for j in 0..h {
        for i in 0..w {
            let mut v = 0.0;
            for &(kx, ky, amp, phase) in &modes {
                v += amp
                    * (2.0 * PI * (kx * i as f64 / w as f64 + ky * j as f64 / h as f64) + phase)
                        .sin();
            }
            out.push(v * norm);
        }
    }
    out
}

/// Ambient scalar field: a large-scale pattern drifting with a constant
/// velocity, used for initial conditions and as the inflow boundary value.
#[derive(Debug, Clone)]
struct AmbientField {
    base: f64,
    amp: f64,
    modes: Vec<(f64, f64, f64, f64)>,
    drift: (f64, f64),
    width: f64,
    height: f64,
}

impl AmbientField {
    fn sample<R: Rng>(base: f64, amp: f64, drift: (f64, f64), w: f64, h: f64, rng: &mut R) -> Self {
        let mut modes = Vec::new();
        for _ in 0..3 {
            modes.push((
                rng.gen_range(1..=2) as f64,
                rng.gen_range(1..=2) as f64,
                rng.gen_range(0.5..1.0),
                rng.gen_range(0.0..2.0 * PI),
            ));
        }
        AmbientField {
            base,
            amp,
            modes,
            drift,
            width: w,
            height: h,
        }
    }

    fn value(&self, x: f64, y: f64, t: f64) -> f64 {
        let (xs, ys) = (x - self.drift.0 * t, y - self.drift.1 * t);
        let mut v = 0.0;
        for &(kx, ky, amp, phase) in &self.modes {
            v += amp * (2.0 * PI * (kx * xs / self.width + ky * ys / self.height) + phase).sin();
        }
        self.base + self.amp * v
    }
}

// ── forcing features ────────────────────────────────────────────────────

/// Per-node forcing vector at one time: TOA-radiation proxy, sin/cos of the
/// day mapped to [0,1], sin/cos of the year mapped to [0,1], and the frozen
/// open-water fraction. `hour` is the time of day in hours, `day` the day of
/// the year.
pub fn forcing_features(
    hour: f64,
    day: f64,
    grid_height: usize,
    grid_width: usize,
    water: &[f64],
) -> Result<Tensor> {
    let n = grid_width * grid_height;
    if water.len() != n {
        return Err(LamError::dim(format!(
            "water mask has {} values for {} nodes",
            water.len(),
            n
        )));
    }
    let sin_d = ((2.0 * PI * hour / DAY_HOURS).sin() + 1.0) / 2.0;
    let cos_d = ((2.0 * PI * hour / DAY_HOURS).cos() + 1.0) / 2.0;
    let sin_y = ((2.0 * PI * day / YEAR_DAYS).sin() + 1.0) / 2.0;
    let cos_y = ((2.0 * PI * day / YEAR_DAYS).cos() + 1.0) / 2.0;
    // cosine-of-zenith proxy: latitude varies with y over a Nordic-like band,
    // solar declination with the day of year, hour angle with the time of day
    let decl = (23.44f64).to_radians() * (2.0 * PI * (day - 81.0) / YEAR_DAYS).sin();
    let hour_angle = 2.0 * PI * hour / DAY_HOURS - PI;
    let mut vals = Vec::with_capacity(n * FORCING_FEATURES);
    for j in 0..grid_height {
        for i in 0..grid_width {
            let lat = (55.0 + 15.0 * j as f64 / (grid_height.max(2) - 1) as f64).to_radians();
            let cos_zenith = lat.sin() * decl.sin() + lat.cos() * decl.cos() * hour_angle.cos();
            let toa = cos_zenith.max(0.0);
            let id = j * grid_width + i;
            vals.extend_from_slice(&[toa, sin_d, cos_d, sin_y, cos_y, water[id]]);
        }
    }
    Tensor::from_vec(vec![n, FORCING_FEATURES], vals)
}

// ── trajectory generation ───────────────────────────────────────────────

struct Integrator<'a> {
    grid: &'a GridSpec,
    cfg: &'a PhysicsConfig,
    flow: FlowField,
    ambients: Vec<AmbientField>,
    source_pattern: Vec<f64>,
}

impl Integrator<'_> {
    /// One explicit substep of dt hours on all scalar fields.
    fn substep(&self, scalars: &mut [Vec<f64>], t: f64, dt: f64, day: f64, hour: f64) {
        let (w, h) = (self.grid.width, self.grid.height);
        let kappa = self.cfg.diffusivity;
        let periodic = self.cfg.boundary == BoundaryMode::Periodic;
        let idx = |i: i64, j: i64| -> usize {
            if periodic {
                let ii = i.rem_euclid(w as i64) as usize;
                let jj = j.rem_euclid(h as i64) as usize;
                jj * w + ii
            } else {
                let ii = i.clamp(0, w as i64 - 1) as usize;
                let jj = j.clamp(0, h as i64 - 1) as usize;
                jj * w + ii
            }
        };
        // diurnal source follows the TOA proxy shape
        let decl = (23.44f64).to_radians() * (2.0 * PI * (day - 81.0) / YEAR_DAYS).sin();
        let hour_angle = 2.0 * PI * hour / DAY_HOURS - PI;

        for (s, field) in scalars.iter_mut().enumerate() {
            let mut next = field.clone();
            for j in 0..h {
                let lat = (55.0 + 15.0 * j as f64 / (h.max(2) - 1) as f64).to_radians();
                let toa =
                    (lat.sin() * decl.sin() + lat.cos() * decl.cos() * hour_angle.cos()).max(0.0);
                for i in 0..w {
                    let id = j * w + i;
                    let (u, v) = self.flow.velocity(i as f64, j as f64, t);
                    let c = field[id];
                    let (il, ir) = (idx(i as i64 - 1, j as i64), idx(i as i64 + 1, j as i64));
                    let (jd, ju) = (idx(i as i64, j as i64 - 1), idx(i as i64, j as i64 + 1));
                    // first-order upwind advection
                    let dcdx = if u >= 0.0 { c - field[il] } else { field[ir] - c };
                    let dcdy = if v >= 0.0 { c - field[jd] } else { field[ju] - c };
                    let lap = field[il] + field[ir] + field[jd] + field[ju] - 4.0 * c;
                    let src = self.cfg.source_amplitude * toa * self.source_pattern[id];
                    next[id] = c + dt * (-u * dcdx - v * dcdy + kappa * lap + src);
                }
            }
            if !periodic {
                // Dirichlet ring from the ambient field: inflow information
                let amb = &self.ambients[s];
                let tn = t + dt;
                for i in 0..w {
                    next[i] = amb.value(i as f64, 0.0, tn);
                    next[(h - 1) * w + i] = amb.value(i as f64, (h - 1) as f64, tn);
                }
                for j in 0..h {
                    next[j * w] = amb.value(0.0, j as f64, tn);
                    next[j * w + w - 1] = amb.value((w - 1) as f64, j as f64, tn);
                }
            }
            *field = next;
        }
    }
}

/// Generate one trajectory of `t_steps` data steps (1 h apart).
/// Deterministic per seed.
pub fn generate_trajectory(
    grid: &GridSpec,
    seed: u64,
    t_steps: usize,
    cfg: &PhysicsConfig,
) -> Result<Trajectory> {
    if t_steps < 8 {
        return Err(LamError::config(format!(
            "trajectory length {t_steps} < 8 data steps"
        )));
    }
    if cfg.n_vars == 0 {
        return Err(LamError::config("n_vars must be >= 1"));
    }
    if cfg.substeps == 0 {
        return Err(LamError::config("substeps must be >= 1"));
    }
    let (w, h) = (grid.width, grid.height);
    let n = grid.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let flow = FlowField::sample(cfg, w as f64, h as f64, &mut rng);

    // CFL for the explicit scheme: |u| dt <= 0.8 dx and kappa dt <= 0.2 dx^2
    let dt = 1.0 / cfg.substeps as f64;
    let speed = flow.speed_bound();
    let needed = (speed / 0.8).max(cfg.diffusivity / 0.2).ceil().max(1.0) as usize;
    if dt * speed > 0.8 || dt * cfg.diffusivity > 0.2 {
        return Err(LamError::config(format!(
            "CFL violation: substeps = {} too coarse for peak speed {:.2} cells/h \
             and diffusivity {}; use substeps >= {}",
            cfg.substeps, speed, cfg.diffusivity, needed
        )));
    }

    let n_scalars = if cfg.n_vars >= 3 { cfg.n_vars - 2 } else { cfg.n_vars };
    let carry_wind = cfg.n_vars >= 3;

    // distinct raw scales per variable so normalization is exercised
    let mut ambients = Vec::with_capacity(n_scalars);
    let drift = flow.velocity(w as f64 / 2.0, h as f64 / 2.0, 0.0);
    for s in 0..n_scalars {
        let base = 280.0 + 10.0 * s as f64;
        let amp = 8.0 + 2.0 * s as f64;
        ambients.push(AmbientField::sample(
            base,
            amp,
            drift,
            w as f64,
            h as f64,
            &mut rng,
        ));
    }
    let source_pattern = smooth_field(w, h, 3, &mut rng);
    let topography: Vec<f64> = smooth_field(w, h, 4, &mut rng)
        .into_iter()
        .map(|v| (0.5 + 0.5 * v).clamp(0.0, 1.0))
        .collect();
    let water_fraction: Vec<f64> = smooth_field(w, h, 3, &mut rng)
        .into_iter()
        .map(|v| (0.5 + 0.9 * v).clamp(0.0, 1.0))
        .collect();
    let start_hour = rng.gen_range(0..24) as f64;
    let start_day = rng.gen_range(0.0..YEAR_DAYS);

    let integ = Integrator {
        grid,
        cfg,
        flow,
        ambients,
        source_pattern,
    };

    let mut scalars: Vec<Vec<f64>> = (0..n_scalars)
        .map(|s| {
            (0..n)
                .map(|id| integ.ambients[s].value((id % w) as f64, (id / w) as f64, 0.0))
                .collect()
        })
        .collect();

    let mut states = Vec::with_capacity(t_steps);
    let mut forcing = Vec::with_capacity(t_steps);
    for step in 0..t_steps {
        let t = step as f64;
        let hour = (start_hour + t) % DAY_HOURS;
        let day = (start_day + (start_hour + t) / DAY_HOURS) % YEAR_DAYS;

        // snapshot state [N x S]
        let mut vals = Vec::with_capacity(n * cfg.n_vars);
        for id in 0..n {
            for field in &scalars {
                vals.push(field[id]);
            }
            if carry_wind {
                let (u, v) = integ.flow.velocity((id % w) as f64, (id / w) as f64, t);
                vals.push(u);
                vals.push(v);
            }
        }
        states.push(Tensor::from_vec(vec![n, cfg.n_vars], vals)?);
        forcing.push(forcing_features(hour, day, h, w, &water_fraction)?);

        if step + 1 < t_steps {
            for sub in 0..cfg.substeps {
                let ts = t + sub as f64 * dt;
                let hour_s = (start_hour + ts) % DAY_HOURS;
                let day_s = (start_day + (start_hour + ts) / DAY_HOURS) % YEAR_DAYS;
                integ.substep(&mut scalars, ts, dt, day_s, hour_s);
            }
        }
    }

    for (i, st) in states.iter().enumerate() {
        if !st.all_finite() {
            return Err(LamError::NonFinite(format!(
                "trajectory state at step {i} is not finite"
            )));
        }
    }

    Ok(Trajectory {
        width: w,
        height: h,
        n_vars: cfg.n_vars,
        states,
        forcing,
        topography,
        water_fraction,
        start_hour,
        start_day,
    })
}

// ── normalization statistics ────────────────────────────────────────────

/// Per-variable normalization and loss weights: mean/std of values, variance
/// of normalized one-model-step differences, lambda = 1 / max(var, eps), and
/// the per-variable weights omega (all 1 by default).
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub diff_var: Vec<f64>,
    pub lambda: Vec<f64>,
    pub omega: Vec<f64>,
}

impl NormStats {
    pub fn n_vars(&self) -> usize {
        self.mean.len()
    }

    /// Identity stats (mean 0, std 1, lambda 1) for tests and hand-built data.
    pub fn identity(n_vars: usize) -> Self {
        NormStats {
            mean: vec![0.0; n_vars],
            std: vec![1.0; n_vars],
            diff_var: vec![1.0; n_vars],
            lambda: vec![1.0; n_vars],
            omega: vec![1.0; n_vars],
        }
    }

    /// Per-variable loss weights lambda_i * omega_i.
    pub fn loss_weights(&self) -> Vec<f64> {
        self.lambda.iter().zip(&self.omega).map(|(l, o)| l * o).collect()
    }

    pub fn normalize(&self, state: &Tensor) -> Result<Tensor> {
        self.affine(state, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, state: &Tensor) -> Result<Tensor> {
        self.affine(state, |v, m, s| v * s + m)
    }

    fn affine(&self, state: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let s = self.n_vars();
        if state.last_dim() != s {
            return Err(LamError::dim(format!(
                "state has {} variables, stats have {}",
                state.last_dim(),
                s
            )));
        }
        let mut vals = state.values().to_vec();
        for (i, v) in vals.iter_mut().enumerate() {
            let c = i % s;
            *v = f(*v, self.mean[c], self.std[c]);
        }
        Tensor::from_vec(state.shape().to_vec(), vals)
    }
}

/// Statistics over the training trajectories. Differences are taken at the
/// model-step stride (3 data steps) on normalized values.
pub fn compute_norm_stats(trajectories: &[Trajectory]) -> Result<NormStats> {
    let first = trajectories
        .first()
        .ok_or_else(|| LamError::contract("compute_norm_stats needs >= 1 trajectory"))?;
    let s = first.n_vars;
    let mut count = 0u64;
    let mut sum = vec![0.0; s];
    let mut sum_sq = vec![0.0; s];
    for tr in trajectories {
        if tr.n_vars != s {
            return Err(LamError::contract("trajectories disagree on variable count"));
        }
        for st in &tr.states {
            count += st.rows() as u64;
            for r in 0..st.rows() {
                let row = st.row(r);
                for c in 0..s {
                    sum[c] += row[c];
                    sum_sq[c] += row[c] * row[c];
                }
            }
        }
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|v| v / n).collect();
    let std: Vec<f64> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| ((sq / n - m * m).max(0.0)).sqrt().max(STATS_EPS))
        .collect();

    // variance of one-model-step differences of normalized values
    let mut dcount = 0u64;
    let mut dsum = vec![0.0; s];
    let mut dsum_sq = vec![0.0; s];
    for tr in trajectories {
        for t in 0..tr.len().saturating_sub(MODEL_STEP_STRIDE) {
            let a = &tr.states[t];
            let b = &tr.states[t + MODEL_STEP_STRIDE];
            dcount += a.rows() as u64;
            for r in 0..a.rows() {
                let (ra, rb) = (a.row(r), b.row(r));
                for c in 0..s {
                    let d = (rb[c] - ra[c]) / std[c];
                    dsum[c] += d;
                    dsum_sq[c] += d * d;
                }
            }
        }
    }
    let dn = (dcount as f64).max(1.0);
    let diff_var: Vec<f64> = dsum_sq
        .iter()
        .zip(&dsum)
        .map(|(sq, m)| (sq / dn - (m / dn) * (m / dn)).max(0.0))
        .collect();
    let lambda: Vec<f64> = diff_var.iter().map(|v| 1.0 / v.max(STATS_EPS)).collect();

    Ok(NormStats {
        mean,
        std,
        diff_var,
        lambda,
        omega: vec![1.0; s],
    })
}

// ── sample windowing ────────────────────────────────────────────────────

/// Index of one training sample inside a trajectory: the data-step index of
/// the first initial state. The sample spans data steps
/// `start, start+3, ..., start + 3*(1 + t_roll)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleSpec {
    pub trajectory: usize,
    pub start: usize,
}

/// One materialized training/evaluation sample, all states in normalized
/// units. `boundary_truth` duplicates the targets: boundary forcing draws
/// from the same trajectory the targets come from.
#[derive(Debug, Clone)]
pub struct ForecastSample {
    pub init: [Tensor; 2],
    pub targets: Vec<Tensor>,
    /// Per rollout step: forcing at the two input-state times and the
    /// predicted-state time.
    pub forcing: Vec<[Tensor; 3]>,
    pub boundary_truth: Vec<Tensor>,
}

/// All valid phase-offset samples of one trajectory for rollouts of
/// `t_roll` steps. Three phase offsets per trajectory (the model-step
/// stride); too-short trajectories produce an empty list with a warning.
pub fn window_samples(trajectory_len: usize, trajectory: usize, t_roll: usize) -> Vec<SampleSpec> {
    let stride = MODEL_STEP_STRIDE;
    let span = stride * (1 + t_roll); // from first init to last target
    let mut out = Vec::new();
    if trajectory_len == 0 || trajectory_len - 1 < span {
        log::warn!(
            "trajectory {trajectory} with {trajectory_len} steps too short for {t_roll}-step rollouts; skipped"
        );
        return out;
    }
    for phase in 0..stride {
        let mut start = phase;
        while start + span <= trajectory_len - 1 {
            out.push(SampleSpec { trajectory, start });
            start += stride;
        }
    }
    out
}

/// Materialize a sample: normalize states, gather forcing triplets.
pub fn materialize_sample(
    tr: &Trajectory,
    stats: &NormStats,
    spec: SampleSpec,
    t_roll: usize,
) -> Result<ForecastSample> {
    let stride = MODEL_STEP_STRIDE;
    let last = spec.start + stride * (1 + t_roll);
    if last >= tr.len() {
        return Err(LamError::contract(format!(
            "sample at {} with {} rollout steps exceeds trajectory length {}",
            spec.start,
            t_roll,
            tr.len()
        )));
    }
    let init = [
        stats.normalize(&tr.states[spec.start])?,
        stats.normalize(&tr.states[spec.start + stride])?,
    ];
    let mut targets = Vec::with_capacity(t_roll);
    let mut forcing = Vec::with_capacity(t_roll);
    for k in 0..t_roll {
        let t_target = spec.start + stride * (2 + k);
        targets.push(stats.normalize(&tr.states[t_target])?);
        forcing.push([
            tr.forcing[t_target - 2 * stride].clone(),
            tr.forcing[t_target - stride].clone(),
            tr.forcing[t_target].clone(),
        ]);
    }
    Ok(ForecastSample {
        init,
        boundary_truth: targets.clone(),
        targets,
        forcing,
    })
}

// ── dataset I/O ─────────────────────────────────────────────────────────

fn trajectory_to_container(tr: &Trajectory) -> Result<Container> {
    let mut c = Container::new("trajectory");
    c.set_meta("width", tr.width);
    c.set_meta("height", tr.height);
    c.set_meta("n_vars", tr.n_vars);
    c.set_meta("t_steps", tr.len());
    c.set_meta("start_hour", format!("{:e}", tr.start_hour));
    c.set_meta("start_day", format!("{:e}", tr.start_day));
    let n = tr.n_nodes();
    let mut states = Vec::with_capacity(tr.len() * n * tr.n_vars);
    for st in &tr.states {
        states.extend_from_slice(st.values());
    }
    c.add_f64("states", vec![tr.len(), n, tr.n_vars], states)?;
    let mut forc = Vec::with_capacity(tr.len() * n * FORCING_FEATURES);
    for f in &tr.forcing {
        forc.extend_from_slice(f.values());
    }
    c.add_f64("forcing", vec![tr.len(), n, FORCING_FEATURES], forc)?;
    c.add_f64("topography", vec![n], tr.topography.clone())?;
    c.add_f64("water", vec![n], tr.water_fraction.clone())?;
    Ok(c)
}

fn trajectory_from_container(c: &Container) -> Result<Trajectory> {
    if c.kind != "trajectory" {
        return Err(LamError::Corrupt(format!(
            "expected a trajectory file, found kind '{}'",
            c.kind
        )));
    }
    let width: usize = c.meta_parse("width")?;
    let height: usize = c.meta_parse("height")?;
    let n_vars: usize = c.meta_parse("n_vars")?;
    let t_steps: usize = c.meta_parse("t_steps")?;
    let n = width * height;
    let (_, states_raw) = c.get_f64("states")?;
    let (_, forcing_raw) = c.get_f64("forcing")?;
    if states_raw.len() != t_steps * n * n_vars
        || forcing_raw.len() != t_steps * n * FORCING_FEATURES
    {
        return Err(LamError::Corrupt("trajectory array sizes inconsistent".into()));
    }
    let states = states_raw
        .chunks_exact(n * n_vars)
        .map(|ch| Tensor::from_vec(vec![n, n_vars], ch.to_vec()))
        .collect::<Result<_>>()?;
    let forcing = forcing_raw
        .chunks_exact(n * FORCING_FEATURES)
        .map(|ch| Tensor::from_vec(vec![n, FORCING_FEATURES], ch.to_vec()))
        .collect::<Result<_>>()?;
    Ok(Trajectory {
        width,
        height,
        n_vars,
        states,
        forcing,
        topography: c.get_f64("topography")?.1.to_vec(),
        water_fraction: c.get_f64("water")?.1.to_vec(),
        start_hour: c.meta_parse("start_hour")?,
        start_day: c.meta_parse("start_day")?,
    })
}

pub fn stats_to_container(stats: &NormStats) -> Result<Container> {
    let mut c = Container::new("normstats");
    let s = stats.n_vars();
    c.set_meta("n_vars", s);
    c.add_f64("mean", vec![s], stats.mean.clone())?;
    c.add_f64("std", vec![s], stats.std.clone())?;
    c.add_f64("diff_var", vec![s], stats.diff_var.clone())?;
    c.add_f64("lambda", vec![s], stats.lambda.clone())?;
    c.add_f64("omega", vec![s], stats.omega.clone())?;
    Ok(c)
}

pub fn stats_from_container(c: &Container) -> Result<NormStats> {
    let stats = NormStats {
        mean: c.get_f64("mean")?.1.to_vec(),
        std: c.get_f64("std")?.1.to_vec(),
        diff_var: c.get_f64("diff_var")?.1.to_vec(),
        lambda: c.get_f64("lambda")?.1.to_vec(),
        omega: c.get_f64("omega")?.1.to_vec(),
    };
    let s: usize = c.meta_parse("n_vars")?;
    if [&stats.std, &stats.diff_var, &stats.lambda, &stats.omega]
        .iter()
        .any(|v| v.len() != s)
        || stats.mean.len() != s
    {
        return Err(LamError::Corrupt("stats arrays disagree on variable count".into()));
    }
    Ok(stats)
}

/// A dataset directory: `traj_<k>.bin` files plus `stats.bin`.
#[derive(Debug)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub stats: NormStats,
}

pub fn save_dataset(dir: &Path, trajectories: &[Trajectory], stats: &NormStats) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (k, tr) in trajectories.iter().enumerate() {
        if tr.n_vars != stats.n_vars() {
            return Err(LamError::contract(format!(
                "trajectory {k} has {} variables, stats have {}",
                tr.n_vars,
                stats.n_vars()
            )));
        }
        trajectory_to_container(tr)?.write_to(&dir.join(format!("traj_{k:04}.bin")))?;
    }
    stats_to_container(stats)?.write_to(&dir.join("stats.bin"))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let stats = stats_from_container(&Container::read_from(&dir.join("stats.bin"))?)?;
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("traj_") && n.ends_with(".bin"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(LamError::contract(format!(
            "no trajectory files in {}",
            dir.display()
        )));
    }
    let mut trajectories = Vec::with_capacity(names.len());
    for name in names {
        let tr = trajectory_from_container(&Container::read_from(&dir.join(&name))?)?;
        if tr.n_vars != stats.n_vars() {
            return Err(LamError::contract(format!(
                "{name} has {} variables, stats have {}",
                tr.n_vars,
                stats.n_vars()
            )));
        }
        trajectories.push(tr);
    }
    Ok(Dataset {
        trajectories,
        stats,
    })
}
