//! Knowledge-guided discrete optimization of the code matrix.
//!
//! Codes are columns: `B ∈ {−1,+1}^{b×N}`, `T ∈ ℝ^{b×C}`, `Y ∈ ℝ^{C×N}` and
//! the real features `H ∈ ℝ^{N×b}` keep one row per sample. The objective is
//!
//! ```text
//! J(B) = α‖Y − TᵀB‖² + β‖Hᵀ − B‖²
//! ```
//!
//! Fixing every bit-plane except row `i` of `B` leaves a linear function of
//! that row, minimized in closed form by
//!
//! ```text
//! Bⁱ = sign(Sⁱ − α·Tⁱ·T'ᵀ·B'),   S = α·T·Y + β·Hᵀ
//! ```
//!
//! where primes drop plane `i`. Cycling this over the planes is discrete
//! cyclic coordinate descent; each update is an exact minimization, so `J`
//! never increases.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mat, Rng};

/// Largest `b·N` accepted by [`brute_force_solve`].
pub const BRUTE_FORCE_LIMIT: usize = 20;

pub const DEFAULT_MAX_SWEEPS: usize = 10;

/// Binary code matrix, one code per column, entries exactly ±1.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeMatrix(Mat);

impl CodeMatrix {
    pub fn new(m: Mat) -> Result<Self> {
        if m.data().iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::Contract("code matrix entries must be ±1".into()));
        }
        Ok(CodeMatrix(m))
    }

    /// Seeded Rademacher initialization.
    pub fn random(bits: usize, n: usize, rng: &mut Rng) -> Self {
        let data = (0..bits * n)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        CodeMatrix(Mat::from_vec(bits, n, data).expect("sized"))
    }

    /// `sign(Hᵀ)` with `sign(0) = +1`.
    pub fn sign_of_features(h: &Mat) -> Self {
        CodeMatrix(h.transpose().map(sign))
    }

    pub fn bits(&self) -> usize {
        self.0.rows()
    }

    pub fn len(&self) -> usize {
        self.0.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.0.cols() == 0
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }

    /// Columns `idx` as a b×|idx| matrix.
    pub fn columns(&self, idx: &[usize]) -> Mat {
        self.0.select_cols(idx)
    }

    /// Number of entries that differ from `other`.
    pub fn flips(&self, other: &CodeMatrix) -> usize {
        self.0
            .data()
            .iter()
            .zip(other.0.data())
            .filter(|(a, b)| a != b)
            .count()
    }
}

#[inline]
pub fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Closed-form bit-plane rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum DccRule {
    /// `S = α·T·Y + β·Hᵀ` with coupling weight `α`; exact minimizer of the objective.
    Derived,
    /// `S = β·T·Y + γ·Hᵀ`, coupling weight fixed at 1. Not a minimizer of
    /// [`objective`] in general.
    UnitCoupling { gamma: f64 },
}

/// Everything held fixed while `B` is optimized.
#[derive(Clone, Debug)]
pub struct DccProblem {
    /// C×N labels (one-hot or multi-hot columns).
    pub y: Mat,
    /// b×C projected knowledge.
    pub t: Mat,
    /// N×b real-valued features.
    pub h: Mat,
    pub alpha: f64,
    pub beta: f64,
    pub rule: DccRule,
}

impl DccProblem {
    pub fn new(y: Mat, t: Mat, h: Mat, alpha: f64, beta: f64) -> Result<Self> {
        let p = DccProblem {
            y,
            t,
            h,
            alpha,
            beta,
            rule: DccRule::Derived,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_rule(mut self, rule: DccRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn bits(&self) -> usize {
        self.t.rows()
    }

    pub fn samples(&self) -> usize {
        self.y.cols()
    }

    fn validate(&self) -> Result<()> {
        let (b, c) = self.t.shape();
        let n = self.y.cols();
        if self.y.rows() != c {
            return Err(Error::shape(
                "DccProblem",
                format!("Y has {} rows but T has {c} classes", self.y.rows()),
            ));
        }
        if self.h.shape() != (n, b) {
            return Err(Error::shape(
                "DccProblem",
                format!("H is {:?}, expected {n}x{b}", self.h.shape()),
            ));
        }
        Ok(())
    }

    fn check_codes(&self, b: &CodeMatrix) -> Result<()> {
        if b.as_mat().shape() != (self.bits(), self.samples()) {
            return Err(Error::shape(
                "kiddo",
                format!(
                    "codes are {:?}, problem is {}x{}",
                    b.as_mat().shape(),
                    self.bits(),
                    self.samples()
                ),
            ));
        }
        Ok(())
    }

    /// `S` under the active rule, and the coupling weight on `B'`.
    fn linear_term(&self) -> (Mat, f64) {
        let (wy, wh, coupling) = match self.rule {
            DccRule::Derived => (self.alpha, self.beta, self.alpha),
            DccRule::UnitCoupling { gamma } => (self.beta, gamma, 1.0),
        };
        let ty = self.t.matmul(&self.y).expect("validated");
        let ht = self.h.transpose();
        let s = ty.zip_map(&ht, |a, b| wy * a + wh * b).expect("validated");
        (s, coupling)
    }
}

/// `α‖Y − TᵀB‖² + β‖Hᵀ − B‖²`.
pub fn objective(p: &DccProblem, b: &CodeMatrix) -> Result<f64> {
    p.check_codes(b)?;
    let recon = p.t.matmul_tn(b.as_mat())?;
    let label_term = p.y.zip_map(&recon, |a, r| a - r)?.frobenius_sq();
    let feat_term =
        p.h.transpose()
            .zip_map(b.as_mat(), |a, c| a - c)?
            .frobenius_sq();
    Ok(p.alpha * label_term + p.beta * feat_term)
}

/// Solver state with `S` precomputed.
struct Sweeper {
    s: Mat,
    coupling: f64,
    /// T·Tᵀ (b×b)
    gram: Mat,
}

impl Sweeper {
    fn new(p: &DccProblem) -> Self {
        let (s, coupling) = p.linear_term();
        let gram = p.t.matmul_nt(&p.t).expect("square");
        Sweeper { s, coupling, gram }
    }

    /// Replaces plane `i` in place; returns the number of flipped entries.
    fn update(&self, b: &mut Mat, i: usize) -> usize {
        let (bits, n) = b.shape();
        let mut target = self.s.row(i).to_vec();
        for l in (0..bits).filter(|&l| l != i) {
            let w = self.coupling * self.gram.get(i, l);
            if w == 0.0 {
                continue;
            }
            for (t, v) in target.iter_mut().zip(b.row(l)) {
                *t -= w * v;
            }
        }
        let mut flips = 0;
        let row = b.row_mut(i);
        for j in 0..n {
            let new = sign(target[j]);
            if row[j] != new {
                flips += 1;
                row[j] = new;
            }
        }
        flips
    }
}

/// One closed-form update of bit-plane `i`; returns the new plane.
pub fn dcc_update_bit(p: &DccProblem, b: &mut CodeMatrix, i: usize) -> Result<Vec<f64>> {
    p.check_codes(b)?;
    if i >= p.bits() {
        return Err(Error::Contract(format!("bit index {i} out of range")));
    }
    Sweeper::new(p).update(&mut b.0, i);
    Ok(b.0.row(i).to_vec())
}

#[derive(Clone, Debug)]
pub struct DccOutcome {
    pub codes: CodeMatrix,
    pub sweeps: usize,
    pub flips_per_sweep: Vec<usize>,
    pub objective: f64,
}

/// Cyclic passes over planes `0..b` until a pass flips nothing or
/// `max_sweeps` passes have run.
pub fn dcc_solve(p: &DccProblem, b0: CodeMatrix, max_sweeps: usize) -> Result<DccOutcome> {
    p.check_codes(&b0)?;
    if max_sweeps == 0 {
        return Err(Error::Contract("max_sweeps must be at least 1".into()));
    }
    let sweeper = Sweeper::new(p);
    let mut b = b0.0;
    let mut flips_per_sweep = Vec::new();
    for _ in 0..max_sweeps {
        let flips: usize = (0..p.bits()).map(|i| sweeper.update(&mut b, i)).sum();
        flips_per_sweep.push(flips);
        if flips == 0 {
            break;
        }
    }
    let codes = CodeMatrix(b);
    let objective = objective(p, &codes)?;
    Ok(DccOutcome {
        codes,
        sweeps: flips_per_sweep.len(),
        flips_per_sweep,
        objective,
    })
}

/// Best of `restarts` runs: the first starts from `sign(Hᵀ)`, the rest from
/// random codes.
pub fn dcc_solve_restarts(
    p: &DccProblem,
    restarts: usize,
    max_sweeps: usize,
    rng: &mut Rng,
) -> Result<DccOutcome> {
    let mut best: Option<DccOutcome> = None;
    for r in 0..restarts.max(1) {
        let start = if r == 0 {
            CodeMatrix::sign_of_features(&p.h)
        } else {
            CodeMatrix::random(p.bits(), p.samples(), rng)
        };
        let out = dcc_solve(p, start, max_sweeps)?;
        if best.as_ref().is_none_or(|b| out.objective < b.objective) {
            best = Some(out);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Exact minimizer by enumerating all `2^{bN}` code matrices.
///
/// Entry `k` of the enumeration counter maps to row-major position `k`, bit
/// value 0 meaning −1. Among equal objectives the first enumerated matrix
/// (lexicographically smallest with −1 < +1) wins.
pub fn brute_force_solve(p: &DccProblem) -> Result<(CodeMatrix, f64)> {
    let (bits, n) = (p.bits(), p.samples());
    let total = bits * n;
    if total > BRUTE_FORCE_LIMIT {
        return Err(Error::Contract(format!(
            "instance has {total} binary entries; enumeration is limited to {BRUTE_FORCE_LIMIT}"
        )));
    }
    let mut best_val = f64::INFINITY;
    let mut best_mask = 0u32;
    let mut codes = Mat::zeros(bits, n);
    for mask in 0u32..(1u32 << total) {
        for k in 0..total {
            // most significant counter bit ↔ first entry, so counting order is lexicographic
            let bit = (mask >> (total - 1 - k)) & 1;
            codes.data_mut()[k] = if bit == 1 { 1.0 } else { -1.0 };
        }
        let v = objective(p, &CodeMatrix(codes.clone()))?;
        if v < best_val {
            best_val = v;
            best_mask = mask;
        }
    }
    for k in 0..total {
        let bit = (best_mask >> (total - 1 - k)) & 1;
        codes.data_mut()[k] = if bit == 1 { 1.0 } else { -1.0 };
    }
    Ok((CodeMatrix(codes), best_val))
}
