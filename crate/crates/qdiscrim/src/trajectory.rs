//! Euler-Maruyama integration of the normalized and unnormalized stochastic
//! master equations, measurement-record generation, and the dual-mode
//! log-likelihood filter.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::qmath::{DensityState, DissipatorOrdering, Operator, QmathError};

/// Minimum eigenvalue below which a normalized step is considered diverged.
/// Single-step Euler-Maruyama excursions from near-pure states scale as
/// eta*kappa*(1 - z^2)*dW^2, which routinely exceeds 1e-3 at dt = 1e-3, so
/// the guard sits well above that noise floor; genuine blow-ups shoot past
/// it immediately.
pub const DIVERGENCE_EIG: f64 = -5e-2;
/// Negative eigenvalues below this trigger a PSD-cone projection (repair);
/// shallower excursions are within the state positivity tolerance.
pub const REPAIR_EIG: f64 = -1e-9;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error(transparent)]
    Qmath(#[from] QmathError),
    #[error("non-finite noise increment")]
    NonFiniteNoise,
    #[error("integration diverged: min eigenvalue {0:.3e} at step {1} (try a smaller dt)")]
    IntegrationDiverged(f64, usize),
    #[error("unnormalized trace {0:.3e} <= 0 at step {1} (dt too large)")]
    NonPositiveTrace(f64, usize),
    #[error("record has {record} increments but grid has {grid} steps")]
    GridMismatch { record: usize, grid: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("model spec invalid: {0}")]
    InvalidModel(String),
}

/// Whether the dissipator in the SME is scaled by the detection efficiency
/// (the default convention here) or kept at full strength.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DissipatorScaling {
    #[default]
    EtaScaled,
    Unit,
}

/// Log-likelihood accumulation mode.
///
/// `ItoCorrected` subtracts the 1/2 eta m^2 dt Ito term so that exp(l)
/// tracks the trace of the unnormalized state; `DriftOnly` accumulates
/// the bare sqrt(eta) m dY increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoglikMode {
    #[default]
    ItoCorrected,
    DriftOnly,
}

/// One hypothesis's full dynamical model.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    hamiltonian: Operator,
    f_op: Operator,
    eta: f64,
    dissipator_scaling: DissipatorScaling,
    ordering: DissipatorOrdering,
}

impl ModelSpec {
    pub fn new(
        hamiltonian: Operator,
        f_op: Operator,
        eta: f64,
        dissipator_scaling: DissipatorScaling,
        ordering: DissipatorOrdering,
    ) -> Result<Self, TrajectoryError> {
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(TrajectoryError::InvalidModel(format!(
                "eta = {} outside (0, 1]",
                eta
            )));
        }
        if !hamiltonian.is_hermitian(1e-12) {
            return Err(TrajectoryError::InvalidModel(
                "hamiltonian is not Hermitian".into(),
            ));
        }
        hamiltonian
            .check_dims(&f_op)
            .map_err(|e| TrajectoryError::InvalidModel(e.to_string()))?;
        Ok(Self {
            hamiltonian,
            f_op,
            eta,
            dissipator_scaling,
            ordering,
        })
    }

    pub fn hamiltonian(&self) -> &Operator {
        &self.hamiltonian
    }

    pub fn measurement_op(&self) -> &Operator {
        &self.f_op
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn dissipator_scaling(&self) -> DissipatorScaling {
        self.dissipator_scaling
    }

    pub fn ordering(&self) -> DissipatorOrdering {
        self.ordering
    }

    pub fn dim(&self) -> usize {
        self.hamiltonian.dim()
    }
}

/// Uniform time grid, units of 1/gamma.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimGrid {
    pub dt: f64,
    pub t_max: f64,
}

impl SimGrid {
    pub fn new(dt: f64, t_max: f64) -> Result<Self, TrajectoryError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(TrajectoryError::InvalidGrid(format!("dt = {}", dt)));
        }
        if !(t_max > 0.0 && t_max.is_finite()) {
            return Err(TrajectoryError::InvalidGrid(format!("t_max = {}", t_max)));
        }
        if dt > t_max {
            return Err(TrajectoryError::InvalidGrid(format!(
                "dt = {} exceeds t_max = {}",
                dt, t_max
            )));
        }
        Ok(Self { dt, t_max })
    }

    pub fn n_steps(&self) -> usize {
        ((self.t_max / self.dt).round() as usize).max(1)
    }

    /// Grid point i -> time i * dt, for i in 0..=n_steps.
    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }
}

/// Time grid plus the observed record increments dY.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRecord {
    pub grid: SimGrid,
    pub dy: Vec<f64>,
}

impl MeasurementRecord {
    pub fn new(grid: SimGrid, dy: Vec<f64>) -> Result<Self, TrajectoryError> {
        if dy.len() != grid.n_steps() {
            return Err(TrajectoryError::GridMismatch {
                record: dy.len(),
                grid: grid.n_steps(),
            });
        }
        if !dy.iter().all(|v| v.is_finite()) {
            return Err(TrajectoryError::NonFiniteNoise);
        }
        Ok(Self { grid, dy })
    }
}

/// A filtered trajectory: conditioned states and accumulated log-likelihood
/// at every grid point.
#[derive(Debug, Clone)]
pub struct FilterPath {
    pub states: Vec<DensityState>,
    pub loglik: Vec<f64>,
    pub mode: LoglikMode,
    pub repair_count: u64,
}

/// Source of Wiener increments dW ~ N(0, dt).
pub trait NoiseSource {
    fn sample_dw(&mut self, dt: f64) -> f64;
}

/// Gaussian increments from an RNG.
pub struct GaussianNoise<R: Rng> {
    rng: R,
}

impl<R: Rng> GaussianNoise<R> {
    pub fn new(rng: R) -> Self {
        Self { rng }
    }
}

impl<R: Rng> NoiseSource for GaussianNoise<R> {
    fn sample_dw(&mut self, dt: f64) -> f64 {
        let g: f64 = self.rng.sample(StandardNormal);
        g * dt.sqrt()
    }
}

/// Deterministic all-zero noise, a test hook for closed-form checks.
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn sample_dw(&mut self, _dt: f64) -> f64 {
        0.0
    }
}

/// Reusable stepping engine for one model: precomputed adjoints and scratch
/// buffers so the per-step loop does not allocate.
pub struct Propagator {
    h: DMatrix<Complex64>,
    f: DMatrix<Complex64>,
    f_adj: DMatrix<Complex64>,
    anti: DMatrix<Complex64>,
    diss_scale: f64,
    sqrt_eta: f64,
    eta: f64,
    dim: usize,
    // scratch
    b_frho: DMatrix<Complex64>,
    b_m: DMatrix<Complex64>,
    b_sand: DMatrix<Complex64>,
    b_anti: DMatrix<Complex64>,
    b_comm: DMatrix<Complex64>,
    step_index: usize,
    repair_count: u64,
}

impl Propagator {
    pub fn new(model: &ModelSpec) -> Self {
        let h = model.hamiltonian.matrix().clone();
        let f = model.f_op.matrix().clone();
        let f_adj = f.adjoint();
        let anti = match model.ordering {
            DissipatorOrdering::FFdag => &f * &f_adj,
            DissipatorOrdering::StandardFdagF => &f_adj * &f,
        };
        let diss_scale = match model.dissipator_scaling {
            DissipatorScaling::EtaScaled => model.eta,
            DissipatorScaling::Unit => 1.0,
        };
        let dim = h.nrows();
        let z = DMatrix::<Complex64>::zeros(dim, dim);
        Self {
            h,
            f,
            f_adj,
            anti,
            diss_scale,
            sqrt_eta: model.eta.sqrt(),
            eta: model.eta,
            dim,
            b_frho: z.clone(),
            b_m: z.clone(),
            b_sand: z.clone(),
            b_anti: z.clone(),
            b_comm: z,
            step_index: 0,
            repair_count: 0,
        }
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn repair_count(&self) -> u64 {
        self.repair_count
    }

    pub fn reset(&mut self) {
        self.step_index = 0;
        self.repair_count = 0;
    }

    /// Tr(M[F]rho), the measured-signal drift at the current state.
    pub fn signal(&mut self, rho: &DMatrix<Complex64>) -> f64 {
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        self.b_frho.gemm(one, &self.f, rho, zero);
        let mut tr = 0.0;
        for i in 0..self.dim {
            tr += 2.0 * self.b_frho[(i, i)].re;
        }
        tr
    }

    // Fills scratch with commutator, dissipator pieces, M[F]rho and returns
    // Tr(M[F]rho). Expects rho Hermitian.
    fn precompute(&mut self, rho: &DMatrix<Complex64>) -> f64 {
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        let n = self.dim;

        // F rho; M = F rho + (F rho)^dag (valid since rho is Hermitian)
        self.b_frho.gemm(one, &self.f, rho, zero);
        let mut m_tr = 0.0;
        for i in 0..n {
            for j in 0..n {
                self.b_m[(i, j)] = self.b_frho[(i, j)] + self.b_frho[(j, i)].conj();
            }
            m_tr += self.b_m[(i, i)].re;
        }

        // F rho F^dag
        self.b_sand.gemm(one, &self.b_frho, &self.f_adj, zero);
        // anti rho + rho anti
        self.b_anti.gemm(one, &self.anti, rho, zero);
        self.b_anti.gemm(one, rho, &self.anti, one);
        // [H, rho]
        self.b_comm.gemm(one, &self.h, rho, zero);
        self.b_comm.gemm(-one, rho, &self.h, one);

        m_tr
    }

    /// One Euler-Maruyama step of the normalized SME, in place. Returns the
    /// signal expectation Tr(M[F]rho) evaluated at the pre-step state.
    pub fn step_normalized_in_place(
        &mut self,
        rho: &mut DMatrix<Complex64>,
        dt: f64,
        dw: f64,
    ) -> Result<f64, TrajectoryError> {
        if !dw.is_finite() {
            return Err(TrajectoryError::NonFiniteNoise);
        }
        let m_tr = self.precompute(rho);
        self.apply_normalized_update(rho, dt, dw, m_tr)?;
        Ok(m_tr)
    }

    /// Truth-side step: computes dY = sqrt(eta) Tr(M[F]rho) dt + dW from the
    /// pre-step state, then advances the state with the same dW. Returns
    /// (signal, dY).
    pub fn step_generate_in_place(
        &mut self,
        rho: &mut DMatrix<Complex64>,
        dt: f64,
        dw: f64,
    ) -> Result<(f64, f64), TrajectoryError> {
        if !dw.is_finite() {
            return Err(TrajectoryError::NonFiniteNoise);
        }
        let m_tr = self.precompute(rho);
        let dy = self.sqrt_eta * m_tr * dt + dw;
        self.apply_normalized_update(rho, dt, dw, m_tr)?;
        Ok((m_tr, dy))
    }

    /// Filter-side step: re-expresses the observed dY as drift plus
    /// innovation using this model's own signal expectation, then advances
    /// the normalized state with that innovation. Returns the signal.
    pub fn step_filter_in_place(
        &mut self,
        rho: &mut DMatrix<Complex64>,
        dt: f64,
        dy: f64,
    ) -> Result<f64, TrajectoryError> {
        if !dy.is_finite() {
            return Err(TrajectoryError::NonFiniteNoise);
        }
        let m_tr = self.precompute(rho);
        let dw_innov = dy - self.sqrt_eta * m_tr * dt;
        self.apply_normalized_update(rho, dt, dw_innov, m_tr)?;
        Ok(m_tr)
    }

    fn apply_normalized_update(
        &mut self,
        rho: &mut DMatrix<Complex64>,
        dt: f64,
        dw: f64,
        m_tr: f64,
    ) -> Result<(), TrajectoryError> {
        let i_unit = Complex64::i();
        let stoch = self.sqrt_eta * dw;
        let n = self.dim;
        for r in 0..n {
            for c in 0..n {
                let drift = -i_unit * self.b_comm[(r, c)]
                    + self.diss_scale
                        * (self.b_sand[(r, c)] - 0.5 * self.b_anti[(r, c)]);
                let innov = self.b_m[(r, c)] - m_tr * rho[(r, c)];
                rho[(r, c)] += dt * drift + stoch * innov;
            }
        }
        symmetrize(rho);
        // renormalize trace
        let mut tr = 0.0;
        for i in 0..n {
            tr += rho[(i, i)].re;
        }
        if !(tr > 0.0 && tr.is_finite()) {
            return Err(TrajectoryError::IntegrationDiverged(
                f64::NEG_INFINITY,
                self.step_index,
            ));
        }
        let inv = Complex64::new(1.0 / tr, 0.0);
        rho.iter_mut().for_each(|v| *v *= inv);

        let min_eig = hermitian_min_eig(rho);
        if min_eig < DIVERGENCE_EIG {
            return Err(TrajectoryError::IntegrationDiverged(min_eig, self.step_index));
        }
        if min_eig < REPAIR_EIG {
            repair_psd(rho);
            self.repair_count += 1;
        }
        self.step_index += 1;
        Ok(())
    }

    /// One Euler-Maruyama step of the unnormalized SME, in place. The state
    /// matrix is rescaled to unit trace each step and the accumulated trace
    /// is folded into `log_trace`. Returns the pre-step Tr(M[F]rho).
    pub fn step_unnormalized_in_place(
        &mut self,
        rho: &mut DMatrix<Complex64>,
        log_trace: &mut f64,
        dt: f64,
        dy: f64,
    ) -> Result<f64, TrajectoryError> {
        if !dy.is_finite() {
            return Err(TrajectoryError::NonFiniteNoise);
        }
        let m_tr = self.precompute(rho);
        let i_unit = Complex64::i();
        let stoch = self.sqrt_eta * dy;
        let n = self.dim;
        for r in 0..n {
            for c in 0..n {
                let drift = -i_unit * self.b_comm[(r, c)]
                    + self.diss_scale
                        * (self.b_sand[(r, c)] - 0.5 * self.b_anti[(r, c)]);
                rho[(r, c)] += dt * drift + stoch * self.b_m[(r, c)];
            }
        }
        symmetrize(rho);
        let mut tr = 0.0;
        for i in 0..n {
            tr += rho[(i, i)].re;
        }
        if !(tr > 0.0 && tr.is_finite()) {
            return Err(TrajectoryError::NonPositiveTrace(tr, self.step_index));
        }
        *log_trace += tr.ln();
        let inv = Complex64::new(1.0 / tr, 0.0);
        rho.iter_mut().for_each(|v| *v *= inv);
        // the linear scheme drifts off the PSD cone; unguarded, the wrong-
        // hypothesis integration can leave the Bloch ball far enough that a
        // later trace factor goes negative, so apply the same repair policy
        // as the normalized step
        let min_eig = hermitian_min_eig(rho);
        if min_eig < REPAIR_EIG {
            repair_psd(rho);
            self.repair_count += 1;
        }
        self.step_index += 1;
        Ok(m_tr)
    }
}

fn symmetrize(m: &mut DMatrix<Complex64>) {
    let n = m.nrows();
    for i in 0..n {
        let d = m[(i, i)];
        m[(i, i)] = Complex64::new(d.re, 0.0);
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)].conj());
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
    }
}

fn hermitian_min_eig(m: &DMatrix<Complex64>) -> f64 {
    if m.nrows() == 2 {
        let a = m[(0, 0)].re;
        let d = m[(1, 1)].re;
        let b = m[(0, 1)].norm_sqr();
        let mid = 0.5 * (a + d);
        let rad = (0.25 * (a - d) * (a - d) + b).sqrt();
        mid - rad
    } else {
        Operator::from_matrix(m.clone())
            .expect("square")
            .min_eigenvalue()
    }
}

fn repair_psd(m: &mut DMatrix<Complex64>) {
    if m.nrows() == 2 {
        // closed form: clipping the negative eigenvalue of a unit-trace
        // Hermitian 2x2 and renormalizing is (m - lo*I) / (hi - lo)
        let a = m[(0, 0)].re;
        let d = m[(1, 1)].re;
        let b = m[(0, 1)].norm_sqr();
        let mid = 0.5 * (a + d);
        let rad = (0.25 * (a - d) * (a - d) + b).sqrt();
        let (lo, hi) = (mid - rad, mid + rad);
        if lo >= 0.0 || rad == 0.0 {
            return;
        }
        let inv = 1.0 / (hi - lo);
        m[(0, 0)] = Complex64::new((a - lo) * inv, 0.0);
        m[(1, 1)] = Complex64::new((d - lo) * inv, 0.0);
        m[(0, 1)] *= inv;
        m[(1, 0)] *= inv;
        return;
    }
    let op = Operator::from_matrix(m.clone()).expect("square");
    let mut proj = op.psd_projected().into_matrix();
    let tr: f64 = (0..proj.nrows()).map(|i| proj[(i, i)].re).sum();
    if tr > 0.0 {
        let inv = Complex64::new(1.0 / tr, 0.0);
        proj.iter_mut().for_each(|v| *v *= inv);
    }
    *m = proj;
}

/// One step of the normalized SME (Bloch-preserving convenience wrapper).
pub fn step_normalized(
    rho: &DensityState,
    model: &ModelSpec,
    dt: f64,
    dw: f64,
) -> Result<DensityState, TrajectoryError> {
    if !rho.normalized {
        return Err(TrajectoryError::InvalidModel(
            "step_normalized requires a normalized state".into(),
        ));
    }
    let mut prop = Propagator::new(model);
    let mut mat = rho.op.matrix().clone();
    prop.step_normalized_in_place(&mut mat, dt, dw)?;
    Ok(DensityState {
        op: Operator::from_matrix(mat)?,
        normalized: true,
        log_trace: 0.0,
    })
}

/// One step of the unnormalized SME. The returned state carries the
/// accumulated trace in `log_trace` and a unit-trace matrix.
pub fn step_unnormalized(
    rho_tilde: &DensityState,
    model: &ModelSpec,
    dt: f64,
    dy: f64,
) -> Result<DensityState, TrajectoryError> {
    let mut prop = Propagator::new(model);
    let mut mat = rho_tilde.op.matrix().clone();
    let mut log_trace = rho_tilde.log_trace;
    prop.step_unnormalized_in_place(&mut mat, &mut log_trace, dt, dy)?;
    Ok(DensityState {
        op: Operator::from_matrix(mat)?,
        normalized: false,
        log_trace,
    })
}

/// Simulate the truth trajectory and its measurement record:
/// dY = sqrt(eta) Tr(M[F]rho) dt + dW, with the state advanced by the same dW.
pub fn simulate_record<N: NoiseSource>(
    model: &ModelSpec,
    rho0: &DensityState,
    grid: SimGrid,
    noise: &mut N,
) -> Result<(FilterPath, MeasurementRecord), TrajectoryError> {
    let n = grid.n_steps();
    let dt = grid.dt;
    let mut prop = Propagator::new(model);
    let sqrt_eta = model.eta.sqrt();

    let mut mat = rho0.op.matrix().clone();
    let mut states = Vec::with_capacity(n + 1);
    let mut loglik = Vec::with_capacity(n + 1);
    let mut dy_seq = Vec::with_capacity(n);
    states.push(rho0.clone());
    loglik.push(0.0);
    let mut l = 0.0;

    for _ in 0..n {
        let dw = noise.sample_dw(dt);
        let (m_tr, dy) = prop.step_generate_in_place(&mut mat, dt, dw)?;
        dy_seq.push(dy);
        l += sqrt_eta * m_tr * dy - 0.5 * model.eta * m_tr * m_tr * dt;
        states.push(DensityState {
            op: Operator::from_matrix(mat.clone())?,
            normalized: true,
            log_trace: 0.0,
        });
        loglik.push(l);
    }

    let path = FilterPath {
        states,
        loglik,
        mode: LoglikMode::ItoCorrected,
        repair_count: prop.repair_count(),
    };
    let record = MeasurementRecord::new(grid, dy_seq)?;
    Ok((path, record))
}

/// Run the normalized-SME likelihood filter over a record. The filter
/// re-expresses each dY as drift plus innovation using its own model's
/// signal expectation; it never sees the truth's Wiener increments.
pub fn filter(
    record: &MeasurementRecord,
    model: &ModelSpec,
    rho0: &DensityState,
    mode: LoglikMode,
) -> Result<FilterPath, TrajectoryError> {
    if record.dy.len() != record.grid.n_steps() {
        return Err(TrajectoryError::GridMismatch {
            record: record.dy.len(),
            grid: record.grid.n_steps(),
        });
    }
    let dt = record.grid.dt;
    let mut prop = Propagator::new(model);
    let sqrt_eta = model.eta.sqrt();

    let mut mat = rho0.op.matrix().clone();
    let mut states = Vec::with_capacity(record.dy.len() + 1);
    let mut loglik = Vec::with_capacity(record.dy.len() + 1);
    states.push(rho0.clone());
    loglik.push(0.0);
    let mut l = 0.0;

    for &dy in &record.dy {
        let m_tr = prop.step_filter_in_place(&mut mat, dt, dy)?;
        let dl = match mode {
            LoglikMode::ItoCorrected => {
                sqrt_eta * m_tr * dy - 0.5 * model.eta * m_tr * m_tr * dt
            }
            LoglikMode::DriftOnly => sqrt_eta * m_tr * dy,
        };
        l += dl;
        states.push(DensityState {
            op: Operator::from_matrix(mat.clone())?,
            normalized: true,
            log_trace: 0.0,
        });
        loglik.push(l);
    }

    Ok(FilterPath {
        states,
        loglik,
        mode,
        repair_count: prop.repair_count(),
    })
}

/// Integrate the unnormalized SME over a record and return log Tr(rho_tilde)
/// at every grid point: the log-likelihood oracle.
pub fn trace_likelihood(
    record: &MeasurementRecord,
    model: &ModelSpec,
    rho0: &DensityState,
) -> Result<Vec<f64>, TrajectoryError> {
    if record.dy.len() != record.grid.n_steps() {
        return Err(TrajectoryError::GridMismatch {
            record: record.dy.len(),
            grid: record.grid.n_steps(),
        });
    }
    let dt = record.grid.dt;
    let mut prop = Propagator::new(model);
    let mut mat = rho0.op.matrix().clone();
    let mut log_trace = 0.0;
    let mut out = Vec::with_capacity(record.dy.len() + 1);
    out.push(0.0);
    for &dy in &record.dy {
        prop.step_unnormalized_in_place(&mut mat, &mut log_trace, dt, dy)?;
        out.push(log_trace);
    }
    Ok(out)
}
