//! Two-qubit state tomography from the 36 cardinal projections, one-sided
//! process extraction against a reference state, and relative fidelity
//! series.
//!
//! Qubit ordering: the first tensor factor is the photon that traverses
//! the stabilized channel. Pauli operators are taken in Stokes order
//! (`σ1 = Z` for H/V, `σ2 = X` for D/A, `σ3 = Y` for R/L).

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, Matrix2, Matrix4, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polcore::{jones_vector, pauli_stokes, Basis, Polarization, C64};

pub type CMatrix = DMatrix<C64>;

const HERMITIAN_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-9;
/// Relative singular-value floor for an invertible reference.
const RANK_TOL: f64 = 1e-6;
const MLE_MAX_ITER: usize = 5000;
const MLE_TOL: f64 = 1e-12;

/// Default coincidence window, ps.
pub const COINCIDENCE_WINDOW_PS: f64 = 660.0;

fn eigh(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let h = (m + m.adjoint()) * C64::new(0.5, 0.0);
    let e = SymmetricEigen::new(h);
    (e.eigenvalues.iter().copied().collect(), e.eigenvectors)
}

fn from_eigen(vals: &[f64], vecs: &CMatrix) -> CMatrix {
    let d = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        vals.len(),
        vals.iter().map(|v| C64::new(*v, 0.0)),
    ));
    vecs * d * vecs.adjoint()
}

fn min_eigenvalue(m: &CMatrix) -> f64 {
    eigh(m).0.into_iter().fold(f64::INFINITY, f64::min)
}

fn is_hermitian(m: &CMatrix, tol: f64) -> bool {
    (m - m.adjoint()).iter().all(|z| z.norm() <= tol)
}

/// Euclidean projection of `v` onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (k, x) in u.iter().enumerate() {
        acc += x;
        let t = (acc - 1.0) / (k + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Nearest (Frobenius) positive semi-definite, trace-one matrix.
pub fn project_physical(m: &CMatrix) -> CMatrix {
    let (vals, vecs) = eigh(m);
    from_eigen(&project_simplex(&vals), &vecs)
}

/// `√m` for a positive semi-definite matrix (negative rounding clipped).
pub fn psd_sqrt(m: &CMatrix) -> CMatrix {
    let (vals, vecs) = eigh(m);
    let r: Vec<f64> = vals.iter().map(|v| v.max(0.0).sqrt()).collect();
    from_eigen(&r, &vecs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(CMatrix);

impl DensityMatrix {
    pub fn new(m: CMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch(m.nrows(), m.ncols()));
        }
        if m.nrows() != 2 && m.nrows() != 4 {
            return Err(Error::InvalidArgument(format!(
                "density matrix dimension {} not 2 or 4",
                m.nrows()
            )));
        }
        if !is_hermitian(&m, HERMITIAN_TOL) {
            return Err(Error::InvalidArgument(
                "density matrix is not Hermitian".into(),
            ));
        }
        let tr = m.trace();
        if (tr.re - 1.0).abs() > 1e-9 || tr.im.abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "density matrix trace {tr} is not 1"
            )));
        }
        let lo = min_eigenvalue(&m);
        if lo < -PSD_TOL {
            return Err(Error::NotPositiveSemidefinite(lo));
        }
        Ok(DensityMatrix(m))
    }

    pub fn pure(psi: &[C64]) -> Result<Self> {
        let v = nalgebra::DVector::from_column_slice(psi);
        let n = v.norm();
        if n == 0.0 {
            return Err(Error::InvalidArgument("zero state vector".into()));
        }
        let v = v / C64::new(n, 0.0);
        DensityMatrix::new(&v * v.adjoint())
    }

    pub fn maximally_mixed(dim: usize) -> Result<Self> {
        DensityMatrix::new(CMatrix::identity(dim, dim) * C64::new(1.0 / dim as f64, 0.0))
    }

    /// `|Φ⁺⟩ = (|HH⟩ + |VV⟩)/√2`.
    pub fn phi_plus() -> Self {
        let r = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let z = C64::new(0.0, 0.0);
        DensityMatrix::pure(&[r, z, z, r]).expect("normalized")
    }

    /// `v·|Φ⁺⟩⟨Φ⁺| + (1 − v)·I/4`.
    pub fn werner(visibility: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&visibility) {
            return Err(Error::InvalidArgument(format!(
                "Werner visibility {visibility} outside [0, 1]"
            )));
        }
        let m = Self::phi_plus().0 * C64::new(visibility, 0.0)
            + CMatrix::identity(4, 4) * C64::new((1.0 - visibility) / 4.0, 0.0);
        DensityMatrix::new(m)
    }

    /// Projects an arbitrary Hermitian estimate onto the physical set.
    pub fn nearest(m: &CMatrix) -> Self {
        DensityMatrix(project_physical(m))
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// `(U ⊗ I) ρ (U ⊗ I)†` for a single-qubit `U` on the first factor.
    pub fn apply_first(&self, u: &Matrix2<C64>) -> Self {
        let big = kron2(u, &Matrix2::identity());
        DensityMatrix(&big * &self.0 * big.adjoint())
    }
}

fn kron2(a: &Matrix2<C64>, b: &Matrix2<C64>) -> CMatrix {
    let a = CMatrix::from_iterator(2, 2, a.iter().copied());
    let b = CMatrix::from_iterator(2, 2, b.iter().copied());
    a.kronecker(&b)
}

/// Single-qubit process in Choi form, normalized to unit trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiMatrix(CMatrix);

impl ChoiMatrix {
    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    /// Choi matrix of a unitary channel: `(U ⊗ I)|Φ⁺⟩⟨Φ⁺|(U ⊗ I)†`.
    pub fn unitary(u: &Matrix2<C64>) -> Self {
        ChoiMatrix(DensityMatrix::phi_plus().apply_first(u).0)
    }
}

/// Generalized Uhlmann fidelity `(Tr√(√a·b·√a))²`.
pub fn uhlmann_fidelity(a: &CMatrix, b: &CMatrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(a.nrows(), b.nrows()));
    }
    for m in [a, b] {
        if !is_hermitian(m, HERMITIAN_TOL) {
            return Err(Error::InvalidArgument(
                "fidelity argument is not Hermitian".into(),
            ));
        }
        let lo = min_eigenvalue(m);
        if lo < -PSD_TOL {
            return Err(Error::NotPositiveSemidefinite(lo));
        }
    }
    let sa = psd_sqrt(a);
    let inner = &sa * b * &sa;
    let s: f64 = eigh(&inner).0.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok(s * s)
}

pub fn state_fidelity(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    uhlmann_fidelity(&a.0, &b.0)
}

pub fn process_fidelity(a: &ChoiMatrix, b: &ChoiMatrix) -> Result<f64> {
    uhlmann_fidelity(&a.0, &b.0)
}

fn projector(p: Polarization) -> Matrix2<C64> {
    let v = jones_vector(p);
    v * v.adjoint()
}

/// One projection setting and its coincidences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub setting_a: Polarization,
    pub setting_b: Polarization,
    pub counts: f64,
    pub integration_s: f64,
    pub window_ps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TomographyRecord {
    pub settings: Vec<Setting>,
}

impl TomographyRecord {
    pub fn validate(&self) -> Result<()> {
        if self.settings.len() != 36 {
            return Err(Error::InvalidArgument(format!(
                "{} settings, expected 36",
                self.settings.len()
            )));
        }
        for a in Polarization::ALL {
            for b in Polarization::ALL {
                let n = self
                    .settings
                    .iter()
                    .filter(|s| s.setting_a == a && s.setting_b == b)
                    .count();
                if n != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "setting ({a},{b}) appears {n} times"
                    )));
                }
            }
        }
        if let Some(s) = self.settings.iter().find(|s| !(s.counts >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "negative counts {}",
                s.counts
            )));
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.settings.iter().map(|s| s.counts).sum()
    }

    pub fn counts(&self, a: Polarization, b: Polarization) -> f64 {
        self.settings
            .iter()
            .find(|s| s.setting_a == a && s.setting_b == b)
            .map_or(0.0, |s| s.counts)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for s in &self.settings {
            wr.serialize(s)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let settings = rd
            .deserialize()
            .collect::<std::result::Result<Vec<Setting>, _>>()?;
        let rec = TomographyRecord { settings };
        rec.validate()?;
        Ok(rec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TomographyConfig {
    /// Coincidences per second summed over one basis pair.
    pub pair_rate: f64,
    /// Seconds per setting.
    pub integration_time: f64,
    /// Uniform accidental rate per setting, 1/s.
    pub background: f64,
    pub window_ps: f64,
    /// Draw Poisson counts; otherwise record the expectations.
    pub poisson: bool,
}

impl Default for TomographyConfig {
    /// About 310 coincidences per 36-setting run.
    fn default() -> Self {
        TomographyConfig {
            pair_rate: 3.44,
            integration_time: 10.0,
            background: 0.0,
            window_ps: COINCIDENCE_WINDOW_PS,
            poisson: true,
        }
    }
}

impl TomographyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pair_rate > 0.0) || !(self.integration_time > 0.0) || self.background < 0.0 {
            return Err(Error::Config(
                "tomography rate and time must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn expected_total(&self, state: &DensityMatrix) -> f64 {
        expected_counts(state, self).iter().sum()
    }
}

fn expected_counts(state: &DensityMatrix, cfg: &TomographyConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(36);
    for a in Polarization::ALL {
        for b in Polarization::ALL {
            let proj = kron2(&projector(a), &projector(b));
            let p = (proj * state.matrix()).trace().re.max(0.0);
            out.push((cfg.pair_rate * p + cfg.background) * cfg.integration_time);
        }
    }
    out
}

/// Coincidence counts for all 36 settings.
pub fn simulate_tomography(
    state: &DensityMatrix,
    cfg: &TomographyConfig,
    seed: u64,
) -> Result<TomographyRecord> {
    cfg.validate()?;
    if state.dim() != 4 {
        return Err(Error::DimensionMismatch(state.dim(), 4));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let expected = expected_counts(state, cfg);
    let mut settings = Vec::with_capacity(36);
    let mut k = 0;
    for a in Polarization::ALL {
        for b in Polarization::ALL {
            let lambda = expected[k];
            k += 1;
            let counts = if cfg.poisson && lambda > 0.0 {
                Poisson::new(lambda)
                    .expect("positive rate")
                    .sample(&mut rng)
            } else if cfg.poisson {
                0.0
            } else {
                lambda
            };
            settings.push(Setting {
                setting_a: a,
                setting_b: b,
                counts,
                integration_s: cfg.integration_time,
                window_ps: cfg.window_ps,
            });
        }
    }
    Ok(TomographyRecord { settings })
}

const BASES: [Basis; 3] = [Basis::HV, Basis::DA, Basis::RL];

fn pair(b: Basis) -> (Polarization, Polarization) {
    match b {
        Basis::HV => (Polarization::H, Polarization::V),
        Basis::DA => (Polarization::D, Polarization::A),
        Basis::RL => (Polarization::R, Polarization::L),
    }
}

/// Correlation matrix `T[i][j] = Tr[ρ σi⊗σj]` (`σ0 = I`).
pub fn pauli_correlations(rho: &CMatrix) -> Matrix4<f64> {
    let s = pauli_stokes();
    let ops = [Matrix2::identity(), s[0], s[1], s[2]];
    Matrix4::from_fn(|i, j| (kron2(&ops[i], &ops[j]) * rho).trace().re)
}

fn from_correlations(t: &Matrix4<f64>) -> CMatrix {
    let s = pauli_stokes();
    let ops = [Matrix2::identity(), s[0], s[1], s[2]];
    let mut m = CMatrix::zeros(4, 4);
    for i in 0..4 {
        for j in 0..4 {
            m += kron2(&ops[i], &ops[j]) * C64::new(t[(i, j)] / 4.0, 0.0);
        }
    }
    m
}

/// Correlations estimated from the over-complete count set. Each basis
/// pair is normalized by its own total, marginals are averaged over the
/// partner's three bases.
pub fn estimate_correlations(record: &TomographyRecord) -> Result<Matrix4<f64>> {
    record.validate()?;
    if record.total() <= 0.0 {
        return Err(Error::ZeroCounts);
    }
    let mut t = Matrix4::zeros();
    t[(0, 0)] = 1.0;
    let mut marg_a = [(0.0, 0usize); 3];
    let mut marg_b = [(0.0, 0usize); 3];
    for (i, &ba) in BASES.iter().enumerate() {
        for (j, &bb) in BASES.iter().enumerate() {
            let (ap, am) = pair(ba);
            let (bp, bm) = pair(bb);
            let n = [
                record.counts(ap, bp),
                record.counts(ap, bm),
                record.counts(am, bp),
                record.counts(am, bm),
            ];
            let tot: f64 = n.iter().sum();
            if tot <= 0.0 {
                continue;
            }
            t[(i + 1, j + 1)] = (n[0] - n[1] - n[2] + n[3]) / tot;
            marg_a[i].0 += (n[0] + n[1] - n[2] - n[3]) / tot;
            marg_a[i].1 += 1;
            marg_b[j].0 += (n[0] - n[1] + n[2] - n[3]) / tot;
            marg_b[j].1 += 1;
        }
    }
    for k in 0..3 {
        if marg_a[k].1 > 0 {
            t[(k + 1, 0)] = marg_a[k].0 / marg_a[k].1 as f64;
        }
        if marg_b[k].1 > 0 {
            t[(0, k + 1)] = marg_b[k].0 / marg_b[k].1 as f64;
        }
    }
    Ok(t)
}

/// Linear inversion followed by projection onto physical states.
pub fn estimate_state(record: &TomographyRecord) -> Result<DensityMatrix> {
    let t = estimate_correlations(record)?;
    Ok(DensityMatrix::nearest(&from_correlations(&t)))
}

/// Maximum-likelihood state by the iterative `RρR` map, started from the
/// maximally mixed state.
pub fn estimate_state_mle(record: &TomographyRecord) -> Result<DensityMatrix> {
    record.validate()?;
    if record.total() <= 0.0 {
        return Err(Error::ZeroCounts);
    }
    let mut terms = Vec::with_capacity(36);
    for a in Polarization::ALL {
        for b in Polarization::ALL {
            terms.push((kron2(&projector(a), &projector(b)), record.counts(a, b)));
        }
    }
    let mut rho = CMatrix::identity(4, 4) * C64::new(0.25, 0.0);
    for _ in 0..MLE_MAX_ITER {
        let mut r = CMatrix::zeros(4, 4);
        for (proj, n) in &terms {
            if *n > 0.0 {
                let p = (proj * &rho).trace().re;
                if p > 0.0 {
                    r += proj * C64::new(n / p, 0.0);
                }
            }
        }
        let mut next = &r * &rho * &r;
        next = (&next + next.adjoint()) * C64::new(0.5, 0.0);
        let tr = next.trace().re;
        next /= C64::new(tr, 0.0);
        let change = (&next - &rho).norm();
        rho = next;
        if change < MLE_TOL {
            break;
        }
    }
    Ok(DensityMatrix::nearest(&rho))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Linear inversion projected onto physical states.
    #[default]
    LinearInversion,
    MaximumLikelihood,
}

pub fn estimate(record: &TomographyRecord, estimator: Estimator) -> Result<DensityMatrix> {
    match estimator {
        Estimator::LinearInversion => estimate_state(record),
        Estimator::MaximumLikelihood => estimate_state_mle(record),
    }
}

/// Pauli transfer matrix of the first-factor process that maps
/// `reference` to `state`, by least squares on the correlation matrices.
pub fn transfer_matrix(state: &DensityMatrix, reference: &DensityMatrix) -> Result<Matrix4<f64>> {
    for d in [state.dim(), reference.dim()] {
        if d != 4 {
            return Err(Error::DimensionMismatch(d, 4));
        }
    }
    let t_out = pauli_correlations(state.matrix());
    let t_ref = pauli_correlations(reference.matrix());
    let svd = t_ref.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= RANK_TOL * smax {
        return Err(Error::RankDeficientReference(smin));
    }
    // R·T_ref = T_out  ⇒  T_refᵀ·Rᵀ = T_outᵀ
    let rt = t_ref
        .transpose()
        .svd(true, true)
        .solve(&t_out.transpose(), 0.0)
        .map_err(|e| Error::InvalidArgument(e.into()))?;
    Ok(rt.transpose())
}

/// Choi matrix `½Σ E(|i⟩⟨j|) ⊗ |i⟩⟨j|` of the process on the traversed
/// qubit, projected to positive semi-definite with unit trace.
pub fn choi_from_two_qubit(state: &DensityMatrix, reference: &DensityMatrix) -> Result<ChoiMatrix> {
    let r = transfer_matrix(state, reference)?;
    let s = pauli_stokes();
    let ops = [Matrix2::identity(), s[0], s[1], s[2]];
    let mut c = CMatrix::zeros(4, 4);
    for i in 0..2 {
        for j in 0..2 {
            let mut e = Matrix2::<C64>::zeros();
            e[(i, j)] = C64::new(1.0, 0.0);
            // E(X) = ½ Σ_k (Σ_l R_kl Tr(σ_l X)) σ_k
            let mut out = Matrix2::<C64>::zeros();
            for k in 0..4 {
                let mut coeff = C64::new(0.0, 0.0);
                for l in 0..4 {
                    coeff += (ops[l] * e).trace() * r[(k, l)];
                }
                out += ops[k] * coeff * C64::new(0.5, 0.0);
            }
            c += kron2(&out, &e) * C64::new(0.5, 0.0);
        }
    }
    Ok(ChoiMatrix(project_physical(&c)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub mean: f64,
    pub std: f64,
}

fn stats(v: &[f64]) -> SeriesStats {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    SeriesStats {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelitySeries {
    /// `F(x_n, x_{n+1})`
    pub successive: Vec<f64>,
    /// `F(x_1, x_n)` for `n ≥ 2`
    pub vs_first: Vec<f64>,
    pub successive_stats: SeriesStats,
    pub vs_first_stats: SeriesStats,
}

impl FidelitySeries {
    pub fn from_matrices(ms: &[&CMatrix]) -> Result<Self> {
        if ms.len() < 2 {
            return Err(Error::InvalidArgument(
                "fidelity series needs at least two entries".into(),
            ));
        }
        let successive = ms
            .windows(2)
            .map(|w| uhlmann_fidelity(w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        let vs_first = ms[1..]
            .iter()
            .map(|m| uhlmann_fidelity(ms[0], m))
            .collect::<Result<Vec<_>>>()?;
        Ok(FidelitySeries {
            successive_stats: stats(&successive),
            vs_first_stats: stats(&vs_first),
            successive,
            vs_first,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesReport {
    pub state: FidelitySeries,
    pub process: FidelitySeries,
}

/// State series over the estimated states and process series over the
/// Choi matrices extracted against the first estimate.
pub fn fidelity_series(records: &[TomographyRecord], estimator: Estimator) -> Result<SeriesReport> {
    if records.len() < 2 {
        return Err(Error::InvalidArgument(
            "fidelity series needs at least two records".into(),
        ));
    }
    let states = records
        .iter()
        .map(|r| estimate(r, estimator))
        .collect::<Result<Vec<_>>>()?;
    series_from_states(&states)
}

pub fn series_from_states(states: &[DensityMatrix]) -> Result<SeriesReport> {
    let reference = &states[0];
    let chois = states
        .iter()
        .map(|s| choi_from_two_qubit(s, reference))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeriesReport {
        state: FidelitySeries::from_matrices(
            &states.iter().map(|s| s.matrix()).collect::<Vec<_>>(),
        )?,
        process: FidelitySeries::from_matrices(
            &chois.iter().map(|c| c.matrix()).collect::<Vec<_>>(),
        )?,
    })
}

impl SeriesReport {
    /// Columns: index, state_successive, state_vs_first,
    /// process_successive, process_vs_first. Row `n` compares entry `n`
    /// with `n + 1` and entry 1 with `n + 1`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "index",
            "state_successive",
            "state_vs_first",
            "process_successive",
            "process_vs_first",
        ])?;
        for n in 0..self.state.successive.len() {
            wr.write_record(&[
                (n + 1).to_string(),
                self.state.successive[n].to_string(),
                self.state.vs_first[n].to_string(),
                self.process.successive[n].to_string(),
                self.process.vs_first[n].to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polcore::PolRotation;
    use nalgebra::Vector3;
    use rand::Rng;

    fn noiseless() -> TomographyConfig {
        TomographyConfig {
            poisson: false,
            ..Default::default()
        }
    }

    fn random_unitary(rng: &mut impl Rng) -> Matrix2<C64> {
        let axis = Vector3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        PolRotation::about_axis(&axis, rng.random::<f64>() * 6.0).to_su2()
    }

    #[test]
    fn fidelity_basic_cases() {
        let h = DensityMatrix::pure(&[C64::new(1.0, 0.0), C64::new(0.0, 0.0)]).unwrap();
        let v = DensityMatrix::pure(&[C64::new(0.0, 0.0), C64::new(1.0, 0.0)]).unwrap();
        assert!(state_fidelity(&h, &v).unwrap().abs() < 1e-12);
        assert!((state_fidelity(&h, &h).unwrap() - 1.0).abs() < 1e-12);
        let w = DensityMatrix::werner(0.7).unwrap();
        assert!((state_fidelity(&w, &w).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fidelity_rejects_non_psd() {
        let mut m = CMatrix::identity(2, 2);
        m[(1, 1)] = C64::new(-0.5, 0.0);
        assert!(matches!(
            uhlmann_fidelity(&m, &CMatrix::identity(2, 2)),
            Err(Error::NotPositiveSemidefinite(_))
        ));
    }

    #[test]
    fn product_state_counts() {
        let hh = DensityMatrix::pure(&[
            C64::new(1.0, 0.0),
            C64::new(0.0, 0.0),
            C64::new(0.0, 0.0),
            C64::new(0.0, 0.0),
        ])
        .unwrap();
        let rec = simulate_tomography(&hh, &noiseless(), 0).unwrap();
        let full = 3.44 * 10.0;
        assert!((rec.counts(Polarization::H, Polarization::H) - full).abs() < 1e-9);
        assert!(rec.counts(Polarization::H, Polarization::V).abs() < 1e-12);
    }

    #[test]
    fn bell_state_counts_by_projector_arithmetic() {
        let rec = simulate_tomography(&DensityMatrix::phi_plus(), &noiseless(), 0).unwrap();
        let rt = 34.4;
        // |⟨ab|Φ⁺⟩|² = |⟨a|b*⟩|²/2 with b* the conjugate Jones vector
        for a in Polarization::ALL {
            for b in Polarization::ALL {
                let ja = jones_vector(a);
                let jb = jones_vector(b).map(|z| z.conj());
                let amp = ja.dotc(&jb);
                let want = rt * amp.norm_sqr() / 2.0;
                assert!((rec.counts(a, b) - want).abs() < 1e-9, "{a}{b}");
            }
        }
        assert!((rec.counts(Polarization::D, Polarization::D) - rt / 2.0).abs() < 1e-9);
        assert!(rec.counts(Polarization::R, Polarization::R).abs() < 1e-9);
    }

    #[test]
    fn default_scale_is_about_310_counts() {
        let cfg = TomographyConfig::default();
        let e = cfg.expected_total(&DensityMatrix::werner(0.95).unwrap());
        assert!((e - 310.0).abs() < 1.0, "{e}");
    }

    #[test]
    fn noiseless_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let psi: Vec<C64> = (0..4)
                .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                .collect();
            let truth = DensityMatrix::pure(&psi).unwrap();
            let rec = simulate_tomography(&truth, &noiseless(), 0).unwrap();
            let est = estimate_state(&rec).unwrap();
            assert!(state_fidelity(&est, &truth).unwrap() > 0.999);
        }
    }

    #[test]
    fn mle_noiseless_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 0..10 {
            let psi: Vec<C64> = (0..4)
                .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                .collect();
            let pure = DensityMatrix::pure(&psi).unwrap();
            let truth = if k % 2 == 0 {
                pure
            } else {
                let m = pure.matrix() * C64::new(0.8, 0.0)
                    + CMatrix::identity(4, 4) * C64::new(0.05, 0.0);
                DensityMatrix::new(m).unwrap()
            };
            let rec = simulate_tomography(&truth, &noiseless(), 0).unwrap();
            let est = estimate_state_mle(&rec).unwrap();
            assert!(state_fidelity(&est, &truth).unwrap() > 0.999);
        }
    }

    #[test]
    fn mle_is_steadier_than_linear_at_310_counts() {
        // independent-draw pairs of a Werner source at the default count scale
        let src = DensityMatrix::werner(0.97).unwrap();
        let cfg = TomographyConfig::default();
        let (mut lin, mut mle) = (0.0, 0.0);
        let n = 100;
        for k in 0..n {
            let a = simulate_tomography(&src, &cfg, 2 * k).unwrap();
            let b = simulate_tomography(&src, &cfg, 2 * k + 1).unwrap();
            lin +=
                state_fidelity(&estimate_state(&a).unwrap(), &estimate_state(&b).unwrap()).unwrap();
            mle += state_fidelity(
                &estimate_state_mle(&a).unwrap(),
                &estimate_state_mle(&b).unwrap(),
            )
            .unwrap();
        }
        let (lin, mle) = (lin / n as f64, mle / n as f64);
        assert!((0.88..0.94).contains(&lin), "{lin}");
        assert!((0.93..0.97).contains(&mle), "{mle}");
    }

    #[test]
    fn estimator_dispatch() {
        let rec = simulate_tomography(&DensityMatrix::phi_plus(), &noiseless(), 0).unwrap();
        assert_eq!(
            estimate(&rec, Estimator::LinearInversion).unwrap(),
            estimate_state(&rec).unwrap()
        );
        assert_eq!(
            estimate(&rec, Estimator::MaximumLikelihood).unwrap(),
            estimate_state_mle(&rec).unwrap()
        );
    }

    #[test]
    fn maximally_mixed_at_high_counts() {
        // 10⁶ coincidences per setting
        let cfg = TomographyConfig {
            pair_rate: 4e6,
            integration_time: 1.0,
            ..Default::default()
        };
        let mm = DensityMatrix::maximally_mixed(4).unwrap();
        let exact = estimate_state(
            &simulate_tomography(
                &mm,
                &TomographyConfig {
                    poisson: false,
                    ..cfg.clone()
                },
                0,
            )
            .unwrap(),
        )
        .unwrap();
        assert!((exact.matrix() - mm.matrix()).norm() < 1e-12);
        for seed in 0..5 {
            let est = estimate_state(&simulate_tomography(&mm, &cfg, seed).unwrap()).unwrap();
            let d = (est.matrix() - mm.matrix()).norm();
            assert!(d < 1e-3, "seed {seed}: {d}");
        }
    }

    #[test]
    fn estimate_is_scale_invariant() {
        let rec = simulate_tomography(
            &DensityMatrix::werner(0.9).unwrap(),
            &TomographyConfig::default(),
            5,
        )
        .unwrap();
        let mut doubled = rec.clone();
        for s in &mut doubled.settings {
            s.counts *= 2.0;
        }
        let a = estimate_state(&rec).unwrap();
        let b = estimate_state(&doubled).unwrap();
        assert!((a.matrix() - b.matrix()).norm() < 1e-12);
    }

    #[test]
    fn zero_counts_rejected() {
        let mut rec = simulate_tomography(&DensityMatrix::phi_plus(), &noiseless(), 0).unwrap();
        for s in &mut rec.settings {
            s.counts = 0.0;
        }
        assert!(matches!(estimate_state(&rec), Err(Error::ZeroCounts)));
    }

    #[test]
    fn choi_identity_and_unitary() {
        let reference = DensityMatrix::werner(0.9).unwrap();
        let c = choi_from_two_qubit(&reference, &reference).unwrap();
        let id = ChoiMatrix::unitary(&Matrix2::identity());
        assert!(process_fidelity(&c, &id).unwrap() > 1.0 - 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let u = random_unitary(&mut rng);
            let out = reference.apply_first(&u);
            let c = choi_from_two_qubit(&out, &reference).unwrap();
            assert!(process_fidelity(&c, &ChoiMatrix::unitary(&u)).unwrap() > 0.999);
        }
    }

    #[test]
    fn choi_composition() {
        let reference = DensityMatrix::werner(0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_unitary(&mut rng);
        let v = random_unitary(&mut rng);
        let ru = transfer_matrix(&reference.apply_first(&u), &reference).unwrap();
        let rv = transfer_matrix(&reference.apply_first(&v), &reference).unwrap();
        let rvu = transfer_matrix(&reference.apply_first(&(v * u)), &reference).unwrap();
        assert!((rv * ru - rvu).amax() < 1e-9);
    }

    #[test]
    fn rank_deficient_reference() {
        let mm = DensityMatrix::maximally_mixed(4).unwrap();
        assert!(matches!(
            choi_from_two_qubit(&DensityMatrix::phi_plus(), &mm),
            Err(Error::RankDeficientReference(_))
        ));
    }

    #[test]
    fn identical_records_give_unit_series() {
        let rec = simulate_tomography(
            &DensityMatrix::werner(0.9).unwrap(),
            &TomographyConfig::default(),
            9,
        )
        .unwrap();
        let rep =
            fidelity_series(&[rec.clone(), rec.clone(), rec], Estimator::LinearInversion).unwrap();
        // rank-deficient Choi matrices lose half their digits in the square root
        for f in rep
            .state
            .successive
            .iter()
            .chain(&rep.state.vs_first)
            .chain(&rep.process.vs_first)
        {
            assert!((f - 1.0).abs() < 1e-6, "{f}");
        }
    }

    #[test]
    fn record_csv_round_trip() {
        let rec = simulate_tomography(&DensityMatrix::phi_plus(), &TomographyConfig::default(), 1)
            .unwrap();
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let head = String::from_utf8(buf.clone()).unwrap();
        assert!(head.starts_with("setting_a,setting_b,counts,integration_s,window_ps"));
        assert_eq!(TomographyRecord::read_csv(&buf[..]).unwrap(), rec);
    }

    #[test]
    fn simplex_projection() {
        assert_eq!(project_simplex(&[0.5, 0.5]), vec![0.5, 0.5]);
        let p = project_simplex(&[1.2, -0.1, 0.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|x| *x >= 0.0));
    }
}
