//! Right-hand-side kernel for the coupled moment equations of the multi-ion
//! EIT cooling problem.
//!
//! The tracked moments split into three families:
//!
//! - internal:  ⟨σ_{g₁g₁}⟩, ⟨σ_{g₂g₂}⟩, ⟨σ_{g₁g₂}⟩, ⟨σ_{g₁e}⟩, ⟨σ_{g₂e}⟩ per ion
//!   (⟨σ_ee⟩ is never stored; it is always substituted by
//!   1 − ⟨σ_{g₁g₁}⟩ − ⟨σ_{g₂g₂}⟩);
//! - external:  ⟨b_n⟩, the symmetric ⟨b_n b_k⟩ and the Hermitian ⟨b_n† b_k⟩
//!   (only n ≤ k is stored; partners follow by symmetry/conjugation);
//! - hybrid:    ⟨b_n σ_α^j⟩ for the eight σ labels
//!   {g₁g₁, g₂g₂, g₁g₂, g₂g₁, g₁e, eg₁, g₂e, eg₂}. Note ⟨b_n σ_{eg₁}⟩ is an
//!   independent moment, not the conjugate of ⟨b_n σ_{g₁e}⟩, because b_n is
//!   not conjugated.
//!
//! The hierarchy is closed at second order (Gaussian closure): third-order
//! moments are replaced by ⟨ABC⟩ ≈ ⟨AB⟩⟨C⟩ + ⟨AC⟩⟨B⟩ + ⟨BC⟩⟨A⟩ − 2⟨A⟩⟨B⟩⟨C⟩,
//! and electronic moments of *different* ions factorize into products of
//! single-ion means. Recurring sums over modes and ions ("partial sums") are
//! evaluated once per stage, which keeps the per-step cost at O(N³); the
//! dominant piece is the cross-ion family 𝒫^{Xσ}_{μ,[qj]} and its
//! contraction into the hybrid equations.
//!
//! Everything here is validated against derivatives of the exact single-ion
//! density-matrix evolution: for product states with a Gaussian motional
//! part the closure is exact, so the kernel must reproduce those derivatives
//! to finite-difference accuracy. That oracle pins every sign, factor and
//! conjugation in this file.

use ndarray::Array2;
use num_complex::Complex64 as C64;

use crate::eitmodel::{AtomParams, CouplingTensor, LaserGeometry};
use crate::error::{Error, Result};
use crate::linalg::{gemm_rc, gemm_rr};

/// Labels of the internal operators σ_αβ = |α⟩⟨β| appearing in hybrid moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaLabel {
    G1G1 = 0,
    G2G2 = 1,
    G1G2 = 2,
    G2G1 = 3,
    G1E = 4,
    EG1 = 5,
    G2E = 6,
    EG2 = 7,
}

pub const SIGMA_LABELS: [SigmaLabel; 8] = [
    SigmaLabel::G1G1,
    SigmaLabel::G2G2,
    SigmaLabel::G1G2,
    SigmaLabel::G2G1,
    SigmaLabel::G1E,
    SigmaLabel::EG1,
    SigmaLabel::G2E,
    SigmaLabel::EG2,
];

impl SigmaLabel {
    /// Label of the adjoint operator, e.g. (g₁e)† = eg₁.
    pub fn adjoint(self) -> SigmaLabel {
        use SigmaLabel::*;
        match self {
            G1G1 => G1G1,
            G2G2 => G2G2,
            G1G2 => G2G1,
            G2G1 => G1G2,
            G1E => EG1,
            EG1 => G1E,
            G2E => EG2,
            EG2 => G2E,
        }
    }

    /// Label with g₁ and g₂ exchanged.
    pub fn swapped(self) -> SigmaLabel {
        use SigmaLabel::*;
        match self {
            G1G1 => G2G2,
            G2G2 => G1G1,
            G1G2 => G2G1,
            G2G1 => G1G2,
            G1E => G2E,
            G2E => G1E,
            EG1 => EG2,
            EG2 => EG1,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Index layout of the flat moment vector.
///
/// Order: five internal blocks of length N, then ⟨b⟩ (N), then the packed
/// upper triangles of ⟨b b⟩ and ⟨b† b⟩ (N(N+1)/2 each), then eight hybrid
/// blocks of N_ion × N_mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MomentLayout {
    pub n: usize,
}

impl MomentLayout {
    pub fn new(n: usize) -> Self {
        MomentLayout { n }
    }

    #[inline]
    pub fn tri(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    pub fn len(&self) -> usize {
        6 * self.n + 2 * self.tri() + 8 * self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn sg1g1(&self, j: usize) -> usize {
        j
    }
    #[inline]
    pub fn sg2g2(&self, j: usize) -> usize {
        self.n + j
    }
    #[inline]
    pub fn sg1g2(&self, j: usize) -> usize {
        2 * self.n + j
    }
    #[inline]
    pub fn sg1e(&self, j: usize) -> usize {
        3 * self.n + j
    }
    #[inline]
    pub fn sg2e(&self, j: usize) -> usize {
        4 * self.n + j
    }
    #[inline]
    pub fn b(&self, n: usize) -> usize {
        5 * self.n + n
    }

    /// Packed index of the (n, k) upper-triangle entry, n ≤ k.
    #[inline]
    pub fn pair(&self, n: usize, k: usize) -> usize {
        debug_assert!(n <= k && k < self.n);
        n * self.n - n * (n + 1) / 2 + k
    }

    #[inline]
    pub fn bb(&self, n: usize, k: usize) -> usize {
        6 * self.n + self.pair(n, k)
    }

    #[inline]
    pub fn bdb(&self, n: usize, k: usize) -> usize {
        6 * self.n + self.tri() + self.pair(n, k)
    }

    #[inline]
    pub fn hybrid(&self, lbl: SigmaLabel, j: usize, m: usize) -> usize {
        6 * self.n + 2 * self.tri() + (lbl.index() * self.n + j) * self.n + m
    }

    /// Human-readable name of a flat index, for diagnostics.
    pub fn describe(&self, idx: usize) -> String {
        let n = self.n;
        if idx < 5 * n {
            let names = ["sigma_g1g1", "sigma_g2g2", "sigma_g1g2", "sigma_g1e", "sigma_g2e"];
            return format!("{}[ion {}]", names[idx / n], idx % n);
        }
        let mut rest = idx - 5 * n;
        if rest < n {
            return format!("b[mode {rest}]");
        }
        rest -= n;
        if rest < self.tri() {
            return format!("bb[pair {rest}]");
        }
        rest -= self.tri();
        if rest < self.tri() {
            return format!("bdag_b[pair {rest}]");
        }
        rest -= self.tri();
        let lbl = SIGMA_LABELS[rest / (n * n)];
        let j = (rest % (n * n)) / n;
        let m = rest % n;
        format!("b_sigma[{lbl:?}, ion {j}, mode {m}]")
    }
}

/// The full moment vector.
#[derive(Debug, Clone)]
pub struct MomentState {
    pub data: Vec<C64>,
    pub layout: MomentLayout,
}

impl MomentState {
    pub fn zero(n: usize) -> Self {
        let layout = MomentLayout::new(n);
        MomentState { data: vec![C64::new(0.0, 0.0); layout.len()], layout }
    }

    pub fn n_ions(&self) -> usize {
        self.layout.n
    }

    /// Unpack ⟨b_n b_k⟩ into a full symmetric matrix.
    pub fn bb_full(&self) -> Array2<C64> {
        let n = self.layout.n;
        let mut m = Array2::zeros((n, n));
        for a in 0..n {
            for b in a..n {
                let v = self.data[self.layout.bb(a, b)];
                m[[a, b]] = v;
                m[[b, a]] = v;
            }
        }
        m
    }

    /// Unpack ⟨b_n† b_k⟩ into a full Hermitian matrix.
    pub fn bdb_full(&self) -> Array2<C64> {
        let n = self.layout.n;
        let mut m = Array2::zeros((n, n));
        for a in 0..n {
            for b in a..n {
                let v = self.data[self.layout.bdb(a, b)];
                m[[a, b]] = v;
                m[[b, a]] = v.conj();
            }
        }
        m
    }

    /// Per-mode occupations Re⟨b_n† b_n⟩.
    pub fn nbar(&self) -> Vec<f64> {
        (0..self.layout.n).map(|m| self.data[self.layout.bdb(m, m)].re).collect()
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|z| !z.re.is_finite() || !z.im.is_finite())
    }
}

/// X-quantities derived from a moment state, where X_m = b_m + b_m†.
///
/// Operator ordering fixes the commutator bookkeeping:
/// ⟨b_n X_m⟩ = ⟨b_n b_m⟩ + ⟨b_m† b_n⟩ + δ_nm and
/// ⟨b_n† X_m⟩ = ⟨b_n† b_m⟩ + ⟨b_n b_m⟩*.
pub struct XMoments {
    /// ⟨X_m⟩ = 2 Re⟨b_m⟩.
    pub xm: Vec<f64>,
    /// ⟨X_l X_m⟩ (real symmetric), row-major N×N.
    pub xx: Vec<f64>,
    /// ⟨b_n X_m⟩ stored transposed: bxt[m*N + n].
    pub bxt: Vec<C64>,
    /// ⟨b_n† X_m⟩ stored transposed: dxt[m*N + n].
    pub dxt: Vec<C64>,
    /// ⟨X_m σ_α^j⟩ per label: xs[α][m*N + j].
    pub xs: [Vec<C64>; 8],
}

/// Compute all X-moments of a state (allocating; the kernel repeats the same
/// arithmetic against preallocated buffers).
pub fn x_moment_closure(state: &MomentState) -> XMoments {
    let n = state.layout.n;
    let mut out = XMoments {
        xm: vec![0.0; n],
        xx: vec![0.0; n * n],
        bxt: vec![C64::new(0.0, 0.0); n * n],
        dxt: vec![C64::new(0.0, 0.0); n * n],
        xs: std::array::from_fn(|_| vec![C64::new(0.0, 0.0); n * n]),
    };
    fill_x_moments(&state.data, state.layout, &mut out);
    out
}

fn fill_x_moments(d: &[C64], lay: MomentLayout, out: &mut XMoments) {
    let n = lay.n;
    for m in 0..n {
        out.xm[m] = 2.0 * d[lay.b(m)].re;
    }
    for a in 0..n {
        for b in a..n {
            let bbv = d[lay.bb(a, b)];
            let bdbv = d[lay.bdb(a, b)];
            let x = 2.0 * bbv.re + 2.0 * bdbv.re + if a == b { 1.0 } else { 0.0 };
            out.xx[a * n + b] = x;
            out.xx[b * n + a] = x;
            let del = if a == b { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
            // entry (n=a, m=b): ⟨b_a X_b⟩ = BB[a,b] + BDB[b,a] + δ.
            out.bxt[b * n + a] = bbv + bdbv.conj() + del;
            // entry (n=b, m=a): ⟨b_b X_a⟩ = BB[a,b] + BDB[a,b] + δ.
            out.bxt[a * n + b] = bbv + bdbv + del;
            // ⟨b_n† X_m⟩ = BDB[n,m] + BB[n,m]*.
            out.dxt[b * n + a] = bdbv + bbv.conj();
            out.dxt[a * n + b] = bdbv.conj() + bbv.conj();
        }
    }
    for lbl in SIGMA_LABELS {
        let adj = lbl.adjoint();
        let xs = &mut out.xs[lbl.index()];
        for j in 0..n {
            for m in 0..n {
                xs[m * n + j] = d[lay.hybrid(lbl, j, m)] + d[lay.hybrid(adj, j, m)].conj();
            }
        }
    }
}

/// The recurring summations, exactly as defined: 𝒫-sums over modes and
/// 𝒬-sums over the other ions. This is the reference implementation; the
/// production RHS computes the same quantities through matrix products and
/// is tested against it entry by entry.
pub struct PartialSums {
    /// 𝒫^X_{μ,j} = Σ_m λ^μ_{jm} ⟨X_m⟩.
    pub p_x: [Vec<f64>; 2],
    /// 𝒫^{XX}_{μ,j} = Σ_{l,m} λ^μ_{jl} λ^μ_{jm} ⟨X_l X_m⟩.
    pub p_xx: [Vec<f64>; 2],
    /// 𝒫^{bX}_{μ,jn} = Σ_m λ^μ_{jm} ⟨b_n X_m⟩, stored `[j*N + n]`.
    pub p_bx: [Vec<C64>; 2],
    /// 𝒫^{dX}_{μ,jn} = Σ_m λ^μ_{jm} ⟨b_n† X_m⟩, stored `[j*N + n]`.
    pub p_dx: [Vec<C64>; 2],
    /// 𝒫^{Xσ_α}_{μ,j} = Σ_m λ^μ_{jm} ⟨X_m σ_α^j⟩, stored `[α][j]`.
    pub p_xsigma: [[Vec<C64>; 8]; 2],
    /// 𝒫^{Xσ_α}_{μ,[qj]} = Σ_m λ^μ_{qm} ⟨X_m σ_α^j⟩, stored `[α][q*N + j]`.
    pub p_xsigma_cross: [[Vec<C64>; 8]; 2],
    /// 𝒬^{𝓛₁}_{jn}, stored `[j*N + n]`.
    pub q_l1: Vec<C64>,
    /// 𝒬^{𝓛₂(1),σ_α}_{jn}, stored `[α][j*N + n]`.
    pub q_l2_1: [Vec<C64>; 8],
    /// 𝒬^{𝓛₂(2)}_{jn}, stored `[j*N + n]`.
    pub q_l2_2: Vec<C64>,
    /// 𝒬^{𝓛₂(3)}_{jn}, stored `[j*N + n]`.
    pub q_l2_3: Vec<C64>,
}

/// Evaluate every partial sum by its defining summation (naive loops).
pub fn compute_partial_sums(state: &MomentState, couplings: &CouplingTensor) -> PartialSums {
    let n = state.layout.n;
    let xmom = x_moment_closure(state);
    let lam = |mu: usize, j: usize, m: usize| couplings.lambda_laser[[mu, j, m]];

    let mut p_x: [Vec<f64>; 2] = std::array::from_fn(|_| vec![0.0; n]);
    let mut p_xx: [Vec<f64>; 2] = std::array::from_fn(|_| vec![0.0; n]);
    let mut p_bx: [Vec<C64>; 2] = std::array::from_fn(|_| vec![C64::new(0.0, 0.0); n * n]);
    let mut p_dx: [Vec<C64>; 2] = std::array::from_fn(|_| vec![C64::new(0.0, 0.0); n * n]);
    let mut p_xsigma: [[Vec<C64>; 8]; 2] =
        std::array::from_fn(|_| std::array::from_fn(|_| vec![C64::new(0.0, 0.0); n]));
    let mut p_xsigma_cross: [[Vec<C64>; 8]; 2] =
        std::array::from_fn(|_| std::array::from_fn(|_| vec![C64::new(0.0, 0.0); n * n]));

    for mu in 0..2 {
        for j in 0..n {
            for m in 0..n {
                p_x[mu][j] += lam(mu, j, m) * xmom.xm[m];
                for l in 0..n {
                    p_xx[mu][j] += lam(mu, j, l) * lam(mu, j, m) * xmom.xx[l * n + m];
                }
            }
            for nn in 0..n {
                for m in 0..n {
                    p_bx[mu][j * n + nn] += lam(mu, j, m) * xmom.bxt[m * n + nn];
                    p_dx[mu][j * n + nn] += lam(mu, j, m) * xmom.dxt[m * n + nn];
                }
            }
            for lbl in SIGMA_LABELS {
                let a = lbl.index();
                for m in 0..n {
                    p_xsigma[mu][a][j] += lam(mu, j, m) * xmom.xs[a][m * n + j];
                }
            }
        }
        for lbl in SIGMA_LABELS {
            let a = lbl.index();
            for q in 0..n {
                for j in 0..n {
                    for m in 0..n {
                        p_xsigma_cross[mu][a][q * n + j] += lam(mu, q, m) * xmom.xs[a][m * n + j];
                    }
                }
            }
        }
    }

    let lay = state.layout;
    let sge = |mu: usize, q: usize| {
        if mu == 0 {
            state.data[lay.sg1e(q)]
        } else {
            state.data[lay.sg2e(q)]
        }
    };
    let i = C64::new(0.0, 1.0);
    let mut q_l1 = vec![C64::new(0.0, 0.0); n * n];
    let mut q_l2_2 = vec![C64::new(0.0, 0.0); n * n];
    let mut q_l2_3 = vec![C64::new(0.0, 0.0); n * n];
    let mut q_l2_1: [Vec<C64>; 8] = std::array::from_fn(|_| vec![C64::new(0.0, 0.0); n * n]);
    for j in 0..n {
        for nn in 0..n {
            for mu in 0..2 {
                let lbl_ge = if mu == 0 { SigmaLabel::G1E } else { SigmaLabel::G2E };
                for q in 0..n {
                    if q == j {
                        continue;
                    }
                    let om = couplings.rabi_complex[[mu, q]];
                    let z = om.conj() * sge(mu, q);
                    let lqn = lam(mu, q, nn);
                    q_l1[j * n + nn] -= 0.5 * lqn * (z - z.conj());
                    let gq = z + z.conj();
                    q_l2_3[j * n + nn] += 0.5 * i * lqn * p_x[mu][q] * gq;
                    let v = om.conj() * p_xsigma[mu][lbl_ge.index()][q];
                    q_l2_2[j * n + nn] += 0.5 * i * lqn * (v + v.conj());
                    for lbl in SIGMA_LABELS {
                        let a = lbl.index();
                        q_l2_1[a][j * n + nn] +=
                            0.5 * i * lqn * p_xsigma_cross[mu][a][q * n + j] * gq;
                    }
                }
            }
        }
    }

    PartialSums { p_x, p_xx, p_bx, p_dx, p_xsigma, p_xsigma_cross, q_l1, q_l2_1, q_l2_2, q_l2_3 }
}

/// Static problem data plus preallocated scratch for the production RHS.
pub struct MomentKernel {
    n: usize,
    /// λ^μ as [j*N + m] and its transpose [m*N + j].
    lam: [Vec<f64>; 2],
    lam_t: [Vec<f64>; 2],
    lam_sc: Vec<f64>,
    lam_sc_t: Vec<f64>,
    omega: Vec<f64>,
    rabi: [Vec<C64>; 2],
    gamma: [f64; 2],
    gamma_tot: f64,
    rec_gamma_u2: [f64; 2],
    detuning0: f64,
    k_x: [f64; 2],
    omega_r: f64,
    positions0: Vec<(f64, f64)>,
    scratch: Scratch,
}

struct Scratch {
    x: XMoments,
    p_x: [Vec<f64>; 2],
    p_xx: [Vec<f64>; 2],
    p_dx: [Vec<C64>; 2],
    p_xsigma: [[Vec<C64>; 8]; 2],
    // Per-(μ, ion) real weights entering the ion sums.
    g_w: [Vec<f64>; 2],
    imu_w: [Vec<f64>; 2],
    v_w: [Vec<f64>; 2],
    pxg_w: [Vec<f64>; 2],
    t_imu: Vec<f64>,
    t_v: Vec<f64>,
    t_pxg: Vec<f64>,
    w_mat: Vec<f64>,
    w_scaled: Vec<f64>,
    w_sum: Vec<f64>,
    u_xx: Vec<f64>,
    q_l1: Vec<C64>,
    q_l2_23: Vec<C64>,
    q_l2_1: [Vec<C64>; 8],
    delta: [Vec<f64>; 2],
    pe: Vec<C64>,
    g_mat: Vec<C64>,
    m1: Vec<C64>,
    f3: Vec<C64>,
    f3_acc: Vec<C64>,
    wxs: Vec<C64>,
    rec: Vec<C64>,
    rec_rows: Vec<C64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        let zn = vec![C64::new(0.0, 0.0); n];
        let znn = vec![C64::new(0.0, 0.0); n * n];
        let rn = vec![0.0; n];
        let rnn = vec![0.0; n * n];
        Scratch {
            x: XMoments {
                xm: rn.clone(),
                xx: rnn.clone(),
                bxt: znn.clone(),
                dxt: znn.clone(),
                xs: std::array::from_fn(|_| znn.clone()),
            },
            p_x: [rn.clone(), rn.clone()],
            p_xx: [rn.clone(), rn.clone()],
            p_dx: [znn.clone(), znn.clone()],
            p_xsigma: std::array::from_fn(|_| std::array::from_fn(|_| zn.clone())),
            g_w: [rn.clone(), rn.clone()],
            imu_w: [rn.clone(), rn.clone()],
            v_w: [rn.clone(), rn.clone()],
            pxg_w: [rn.clone(), rn.clone()],
            t_imu: rn.clone(),
            t_v: rn.clone(),
            t_pxg: rn.clone(),
            w_mat: rnn.clone(),
            w_scaled: rnn.clone(),
            w_sum: rnn.clone(),
            u_xx: rnn,
            q_l1: znn.clone(),
            q_l2_23: znn.clone(),
            q_l2_1: std::array::from_fn(|_| znn.clone()),
            delta: [rn.clone(), rn],
            pe: zn,
            g_mat: znn.clone(),
            m1: znn.clone(),
            f3: znn.clone(),
            f3_acc: znn.clone(),
            wxs: znn.clone(),
            rec: znn.clone(),
            rec_rows: znn,
        }
    }
}

impl MomentKernel {
    pub fn new(
        couplings: &CouplingTensor,
        geometry: &LaserGeometry,
        atom: &AtomParams,
        omega_r: f64,
    ) -> Self {
        let n = couplings.n_ions();
        let mut lam: [Vec<f64>; 2] = std::array::from_fn(|_| vec![0.0; n * n]);
        let mut lam_t: [Vec<f64>; 2] = std::array::from_fn(|_| vec![0.0; n * n]);
        for mu in 0..2 {
            for j in 0..n {
                for m in 0..n {
                    let v = couplings.lambda_laser[[mu, j, m]];
                    lam[mu][j * n + m] = v;
                    lam_t[mu][m * n + j] = v;
                }
            }
        }
        let mut lam_sc = vec![0.0; n * n];
        let mut lam_sc_t = vec![0.0; n * n];
        for j in 0..n {
            for m in 0..n {
                let v = couplings.lambda_sc[[j, m]];
                lam_sc[j * n + m] = v;
                lam_sc_t[m * n + j] = v;
            }
        }
        let rabi: [Vec<C64>; 2] =
            std::array::from_fn(|mu| (0..n).map(|j| couplings.rabi_complex[[mu, j]]).collect());
        MomentKernel {
            n,
            lam,
            lam_t,
            lam_sc,
            lam_sc_t,
            omega: couplings.freqs.to_vec(),
            rabi,
            gamma: [atom.gamma1, atom.gamma2],
            gamma_tot: atom.gamma_total(),
            rec_gamma_u2: [atom.gamma1 * atom.u2_1, atom.gamma2 * atom.u2_2],
            detuning0: geometry.detuning0,
            k_x: [geometry.k_x(0), geometry.k_x(1)],
            omega_r,
            positions0: couplings.positions0.clone(),
            scratch: Scratch::new(n),
        }
    }

    pub fn n_ions(&self) -> usize {
        self.n
    }

    pub fn layout(&self) -> MomentLayout {
        MomentLayout::new(self.n)
    }

    fn fill_detunings(&mut self, t: f64) {
        let (s, c) = (self.omega_r * t).sin_cos();
        for j in 0..self.n {
            let (x0, y0) = self.positions0[j];
            let vx = self.omega_r * (y0 * c - x0 * s);
            for mu in 0..2 {
                self.scratch.delta[mu][j] = self.detuning0 - self.k_x[mu] * vx;
            }
        }
    }

    /// Time derivative of the moment vector. `y` and `dy` use [`MomentLayout`].
    pub fn rhs(&mut self, t: f64, y: &[C64], dy: &mut [C64]) {
        let n = self.n;
        let lay = MomentLayout::new(n);
        debug_assert_eq!(y.len(), lay.len());
        let i = C64::new(0.0, 1.0);
        dy.fill(C64::new(0.0, 0.0));

        self.fill_detunings(t);
        let sc = &mut self.scratch;
        fill_x_moments(y, lay, &mut sc.x);

        // --- mode-sum partial sums ----------------------------------------
        for mu in 0..2 {
            for j in 0..n {
                let lrow = &self.lam[mu][j * n..(j + 1) * n];
                let mut acc = 0.0;
                for m in 0..n {
                    acc += lrow[m] * sc.x.xm[m];
                }
                sc.p_x[mu][j] = acc;
            }
            gemm_rc(&self.lam[mu], &sc.x.dxt, &mut sc.p_dx[mu], n, n, n, false);
            gemm_rr(&self.lam[mu], &sc.x.xx, &mut sc.u_xx, n, n, n, false);
            for j in 0..n {
                let urow = &sc.u_xx[j * n..(j + 1) * n];
                let lrow = &self.lam[mu][j * n..(j + 1) * n];
                let mut acc = 0.0;
                for m in 0..n {
                    acc += urow[m] * lrow[m];
                }
                sc.p_xx[mu][j] = acc;
            }
            for lbl in SIGMA_LABELS {
                let a = lbl.index();
                let xsa = &sc.x.xs[a];
                let out = &mut sc.p_xsigma[mu][a];
                for j in 0..n {
                    let lrow = &self.lam[mu][j * n..(j + 1) * n];
                    let mut acc = C64::new(0.0, 0.0);
                    for m in 0..n {
                        acc += lrow[m] * xsa[m * n + j];
                    }
                    out[j] = acc;
                }
            }
        }

        // --- ion-sum weights ------------------------------------------------
        for mu in 0..2 {
            for q in 0..n {
                let om = self.rabi[mu][q];
                let sge = if mu == 0 { y[lay.sg1e(q)] } else { y[lay.sg2e(q)] };
                let z = om.conj() * sge;
                sc.imu_w[mu][q] = 2.0 * z.im;
                let g = 2.0 * z.re;
                sc.g_w[mu][q] = g;
                sc.pxg_w[mu][q] = sc.p_x[mu][q] * g;
                let lbl_ge = if mu == 0 { SigmaLabel::G1E } else { SigmaLabel::G2E };
                let v = om.conj() * sc.p_xsigma[mu][lbl_ge.index()][q];
                sc.v_w[mu][q] = 2.0 * v.re;
            }
        }

        // 𝒬 sums via "full sum minus own term".
        sc.q_l1.fill(C64::new(0.0, 0.0));
        sc.q_l2_23.fill(C64::new(0.0, 0.0));
        for q in &mut sc.q_l2_1 {
            q.fill(C64::new(0.0, 0.0));
        }
        for mu in 0..2 {
            let lt = &self.lam_t[mu];
            for nn in 0..n {
                let row = &lt[nn * n..(nn + 1) * n];
                let (mut a1, mut a2, mut a3) = (0.0, 0.0, 0.0);
                for q in 0..n {
                    a1 += row[q] * sc.imu_w[mu][q];
                    a2 += row[q] * sc.v_w[mu][q];
                    a3 += row[q] * sc.pxg_w[mu][q];
                }
                sc.t_imu[nn] = a1;
                sc.t_v[nn] = a2;
                sc.t_pxg[nn] = a3;
            }
            for j in 0..n {
                let lrow = &self.lam[mu][j * n..(j + 1) * n];
                for nn in 0..n {
                    let l_own = lrow[nn];
                    sc.q_l1[j * n + nn] -= 0.5 * i * (sc.t_imu[nn] - l_own * sc.imu_w[mu][j]);
                    // 𝒬^{𝓛₂(2)} − 𝒬^{𝓛₂(3)} only ever enters as a difference.
                    sc.q_l2_23[j * n + nn] += 0.5
                        * i
                        * ((sc.t_v[nn] - l_own * sc.v_w[mu][j])
                            - (sc.t_pxg[nn] - l_own * sc.pxg_w[mu][j]));
                }
            }
            // 𝒬^{𝓛₂(1),σ_α} through W_μ = Λᵀ diag(g) Λ contracted with XS_α;
            // the q = j term is subtracted using 𝒫^{Xσ_α}_{μ,j}.
            for nn in 0..n {
                for q in 0..n {
                    sc.w_scaled[nn * n + q] = lt[nn * n + q] * sc.g_w[mu][q];
                }
            }
            gemm_rr(&sc.w_scaled, &self.lam[mu], &mut sc.w_mat, n, n, n, false);
            if mu == 0 {
                sc.w_sum.copy_from_slice(&sc.w_mat);
            } else {
                for (acc, w) in sc.w_sum.iter_mut().zip(&sc.w_mat) {
                    *acc += w;
                }
            }
            for lbl in SIGMA_LABELS {
                let a = lbl.index();
                gemm_rc(&sc.w_mat, &sc.x.xs[a], &mut sc.wxs, n, n, n, false);
                let q_out = &mut sc.q_l2_1[a];
                for j in 0..n {
                    let lrow = &self.lam[mu][j * n..(j + 1) * n];
                    let own = sc.g_w[mu][j] * sc.p_xsigma[mu][a][j];
                    for nn in 0..n {
                        q_out[j * n + nn] += 0.5 * i * (sc.wxs[nn * n + j] - lrow[nn] * own);
                    }
                }
            }
        }

        // Excited-state population, kept complex so the kernel is an exact
        // polynomial map of the stored moments.
        for j in 0..n {
            sc.pe[j] = C64::new(1.0, 0.0) - y[lay.sg1g1(j)] - y[lay.sg2g2(j)];
        }

        // =====================  internal moments  ==========================
        for pass in 0..2 {
            let (a, b) = (pass, 1 - pass);
            for j in 0..n {
                let om_a = self.rabi[a][j];
                let om_b = self.rabi[b][j];
                let s_ae = if a == 0 { y[lay.sg1e(j)] } else { y[lay.sg2e(j)] };
                let s_be = if b == 0 { y[lay.sg1e(j)] } else { y[lay.sg2e(j)] };
                let s_aa = if a == 0 { y[lay.sg1g1(j)] } else { y[lay.sg2g2(j)] };
                let s_bb = if b == 0 { y[lay.sg1g1(j)] } else { y[lay.sg2g2(j)] };
                let s_ab = if a == 0 { y[lay.sg1g2(j)] } else { y[lay.sg1g2(j)].conj() };
                let px_a = sc.p_x[a][j];
                let px_b = sc.p_x[b][j];
                let pxx_a = sc.p_xx[a][j];
                let pxx_b = sc.p_xx[b][j];
                let (lbl_ae, lbl_eb, lbl_ab, lbl_aa, lbl_bb) = if a == 0 {
                    (SigmaLabel::G1E, SigmaLabel::EG2, SigmaLabel::G1G2, SigmaLabel::G1G1, SigmaLabel::G2G2)
                } else {
                    (SigmaLabel::G2E, SigmaLabel::EG1, SigmaLabel::G2G1, SigmaLabel::G2G2, SigmaLabel::G1G1)
                };
                let pxs_a_ae = sc.p_xsigma[a][lbl_ae.index()][j];
                let pxs_a_eb = sc.p_xsigma[a][lbl_eb.index()][j];
                let pxs_b_ae = sc.p_xsigma[b][lbl_ae.index()][j];
                let pxs_a_aa = sc.p_xsigma[a][lbl_aa.index()][j];
                let pxs_a_bb = sc.p_xsigma[a][lbl_bb.index()][j];
                let pxs_b_ab = sc.p_xsigma[b][lbl_ab.index()][j];
                let d_a = sc.delta[a][j];
                let d_b = sc.delta[b][j];

                // d⟨σ_{g_a g_a}⟩/dt
                {
                    let z = om_a.conj() * s_ae;
                    let w = om_a.conj()
                        * (pxx_a * s_ae + 2.0 * px_a * pxs_a_ae - 2.0 * px_a * px_a * s_ae);
                    let r = om_a.conj() * pxs_a_ae;
                    let val = -0.5 * i * (z - z.conj()) + self.gamma[a] * sc.pe[j]
                        - 0.5 * (r + r.conj())
                        + 0.25 * i * (w - w.conj());
                    let idx = if a == 0 { lay.sg1g1(j) } else { lay.sg2g2(j) };
                    dy[idx] += val;
                }

                // d⟨σ_{g₁g₂}⟩/dt (single stored coherence)
                if pass == 0 {
                    let val = i * (d_a - d_b) * s_ab + 0.5 * i * om_a * s_be.conj()
                        - 0.5 * i * om_b.conj() * s_ae
                        - 0.5 * om_a * pxs_a_eb
                        - 0.5 * om_b.conj() * pxs_b_ae
                        - 0.25
                            * i
                            * om_a
                            * (pxx_a * s_be.conj() + 2.0 * px_a * pxs_a_eb
                                - 2.0 * px_a * px_a * s_be.conj())
                        + 0.25
                            * i
                            * om_b.conj()
                            * (pxx_b * s_ae + 2.0 * px_b * pxs_b_ae - 2.0 * px_b * px_b * s_ae);
                    dy[lay.sg1g2(j)] += val;
                }

                // d⟨σ_{g_a e}⟩/dt
                {
                    let pop = 2.0 * s_aa + s_bb - 1.0;
                    let val = -(0.5 * self.gamma_tot - i * d_a) * s_ae
                        - 0.5 * i * om_a * pop
                        - 0.5 * i * om_b * s_ab
                        + 0.5 * om_a * (2.0 * pxs_a_aa + pxs_a_bb - px_a)
                        + 0.5 * om_b * pxs_b_ab
                        + 0.25
                            * i
                            * om_a
                            * (pxx_a * pop + 2.0 * px_a * (2.0 * pxs_a_aa + pxs_a_bb - px_a)
                                - 2.0 * px_a * px_a * pop)
                        + 0.25
                            * i
                            * om_b
                            * (pxx_b * s_ab + 2.0 * px_b * pxs_b_ab - 2.0 * px_b * px_b * s_ab);
                    let idx = if a == 0 { lay.sg1e(j) } else { lay.sg2e(j) };
                    dy[idx] += val;
                }
            }
        }

        // =====================  external moments  ==========================
        for nn in 0..n {
            dy[lay.b(nn)] -= i * self.omega[nn] * y[lay.b(nn)];
        }
        for mu in 0..2 {
            let lbl_ge = if mu == 0 { SigmaLabel::G1E } else { SigmaLabel::G2E };
            for j in 0..n {
                let om = self.rabi[mu][j];
                let sge = if mu == 0 { y[lay.sg1e(j)] } else { y[lay.sg2e(j)] };
                let z = om.conj() * sge;
                let v = om.conj() * sc.p_xsigma[mu][lbl_ge.index()][j];
                let w = -0.5 * (z - z.conj()) + 0.5 * i * (v + v.conj());
                let lrow = &self.lam[mu][j * n..(j + 1) * n];
                for nn in 0..n {
                    dy[lay.b(nn)] += lrow[nn] * w;
                }
            }
        }

        // Recoil drive rec[n,k] = Σ_j (Σ_μ Γ_μ ⟨u²⟩_μ) λsc_{jn} λsc_{jk} σ_ee^j:
        // negative into ⟨b_n b_k⟩, positive into ⟨b_n† b_k⟩.
        let wrec = self.rec_gamma_u2[0] + self.rec_gamma_u2[1];
        for j in 0..n {
            let w = wrec * sc.pe[j];
            let src = &self.lam_sc[j * n..(j + 1) * n];
            let dst = &mut sc.rec_rows[j * n..(j + 1) * n];
            for m in 0..n {
                dst[m] = w * src[m];
            }
        }
        gemm_rc(&self.lam_sc_t, &sc.rec_rows, &mut sc.rec, n, n, n, false);

        // G_μ[j,k] = −(1/2)(Ω*⟨b_kσ_ge⟩ − Ω⟨b_kσ_eg⟩) + (i/2)(Ω* A + Ω A') and
        // F3_μ[j,n] = −(1/2)(Ω*⟨b_nσ_eg⟩* − Ω⟨b_nσ_ge⟩*) + (i/2)(Ω* B + Ω B');
        // m1 = Σ_μ Λᵀ G is shared by ⟨b b⟩ (as +m1[n,k] + m1[k,n]) and
        // ⟨b† b⟩ (as −m1[n,k]); f3_acc = Σ_μ Λᵀ F3 gives the k-side term.
        // ⟨b b⟩ also picks up the operator-ordering residue
        // (i/2) Σ_{μ,j} λ_{jn} λ_{jk} (Ω ⟨σ_eg⟩ + Ω* ⟨σ_ge⟩), which is the
        // already-formed W matrix. All of this is fixed by the exact-solver
        // derivative oracle.
        for mu in 0..2 {
            let (lbl_ge, lbl_eg) = if mu == 0 {
                (SigmaLabel::G1E, SigmaLabel::EG1)
            } else {
                (SigmaLabel::G2E, SigmaLabel::EG2)
            };
            for j in 0..n {
                let om = self.rabi[mu][j];
                let sge = if mu == 0 { y[lay.sg1e(j)] } else { y[lay.sg2e(j)] };
                let seg = sge.conj();
                let px = sc.p_x[mu][j];
                let pxs_ge = sc.p_xsigma[mu][lbl_ge.index()][j];
                let pxs_eg = sc.p_xsigma[mu][lbl_eg.index()][j];
                for k in 0..n {
                    let h_ge = y[lay.hybrid(lbl_ge, j, k)];
                    let h_eg = y[lay.hybrid(lbl_eg, j, k)];
                    let bk = y[lay.b(k)];
                    let pdx = sc.p_dx[mu][j * n + k];
                    let pdx_c = pdx.conj();
                    let a_term = pdx_c * sge + px * h_ge + pxs_ge * bk - 2.0 * px * sge * bk;
                    let a_term_eg = pdx_c * seg + px * h_eg + pxs_eg * bk - 2.0 * px * seg * bk;
                    sc.g_mat[j * n + k] = -0.5 * (om.conj() * h_ge - om * h_eg)
                        + 0.5 * i * (om.conj() * a_term + om * a_term_eg);
                    let b_term = pdx * sge + px * h_eg.conj() + pxs_ge * bk.conj()
                        - 2.0 * px * sge * bk.conj();
                    let b_term_eg = pdx * seg + px * h_ge.conj() + pxs_eg * bk.conj()
                        - 2.0 * px * seg * bk.conj();
                    sc.f3[j * n + k] = -0.5 * (om.conj() * h_eg.conj() - om * h_ge.conj())
                        + 0.5 * i * (om.conj() * b_term + om * b_term_eg);
                }
            }
            gemm_rc(&self.lam_t[mu], &sc.g_mat, &mut sc.m1, n, n, n, mu == 1);
            gemm_rc(&self.lam_t[mu], &sc.f3, &mut sc.f3_acc, n, n, n, mu == 1);
        }

        for nn in 0..n {
            for k in nn..n {
                let idx_bb = lay.bb(nn, k);
                let idx_bdb = lay.bdb(nn, k);
                dy[idx_bb] += -i * (self.omega[nn] + self.omega[k]) * y[idx_bb]
                    - sc.rec[nn * n + k]
                    + sc.m1[nn * n + k]
                    + sc.m1[k * n + nn]
                    + 0.5 * i * sc.w_sum[nn * n + k];
                dy[idx_bdb] += -i * (self.omega[k] - self.omega[nn]) * y[idx_bdb]
                    + sc.rec[nn * n + k]
                    - sc.m1[nn * n + k]
                    + sc.f3_acc[k * n + nn];
            }
        }

        // =====================  hybrid moments  ============================
        for pass in 0..2 {
            let (a, b) = (pass, 1 - pass);
            let (lbl_aa, lbl_bb, lbl_ab, lbl_ba, lbl_ae, lbl_eb) = if pass == 0 {
                (
                    SigmaLabel::G1G1,
                    SigmaLabel::G2G2,
                    SigmaLabel::G1G2,
                    SigmaLabel::G2G1,
                    SigmaLabel::G1E,
                    SigmaLabel::EG2,
                )
            } else {
                (
                    SigmaLabel::G2G2,
                    SigmaLabel::G1G1,
                    SigmaLabel::G2G1,
                    SigmaLabel::G1G2,
                    SigmaLabel::G2E,
                    SigmaLabel::EG1,
                )
            };
            for j in 0..n {
                let om_a = self.rabi[a][j];
                let om_b = self.rabi[b][j];
                let s_ae = if a == 0 { y[lay.sg1e(j)] } else { y[lay.sg2e(j)] };
                let s_be = if b == 0 { y[lay.sg1e(j)] } else { y[lay.sg2e(j)] };
                let s_aa = if a == 0 { y[lay.sg1g1(j)] } else { y[lay.sg2g2(j)] };
                let s_bb = if b == 0 { y[lay.sg1g1(j)] } else { y[lay.sg2g2(j)] };
                let s_ab = if a == 0 { y[lay.sg1g2(j)] } else { y[lay.sg1g2(j)].conj() };
                let px_a = sc.p_x[a][j];
                let px_b = sc.p_x[b][j];
                let pxx_a = sc.p_xx[a][j];
                let pxx_b = sc.p_xx[b][j];
                let pxs_a_ae = sc.p_xsigma[a][lbl_ae.index()][j];
                let pxs_a_ea = sc.p_xsigma[a][lbl_ae.adjoint().index()][j];
                let pxs_a_aa = sc.p_xsigma[a][lbl_aa.index()][j];
                let pxs_a_bb = sc.p_xsigma[a][lbl_bb.index()][j];
                let pxs_a_eb = sc.p_xsigma[a][lbl_eb.index()][j];
                let pxs_b_ae = sc.p_xsigma[b][lbl_ae.index()][j];
                let pxs_b_ab = sc.p_xsigma[b][lbl_ab.index()][j];
                let pxs_b_ba = sc.p_xsigma[b][lbl_ba.index()][j];
                let d_a = sc.delta[a][j];
                let d_b = sc.delta[b][j];
                let gamma_a = self.gamma[a];

                for nn in 0..n {
                    let bn = y[lay.b(nn)];
                    let haa = y[lay.hybrid(lbl_aa, j, nn)];
                    let hbb = y[lay.hybrid(lbl_bb, j, nn)];
                    let hab = y[lay.hybrid(lbl_ab, j, nn)];
                    let hba = y[lay.hybrid(lbl_ba, j, nn)];
                    let hae = y[lay.hybrid(lbl_ae, j, nn)];
                    let hea = y[lay.hybrid(lbl_ae.adjoint(), j, nn)];
                    let heb = y[lay.hybrid(lbl_eb, j, nn)];
                    let pdxa_c = sc.p_dx[a][j * n + nn].conj();
                    let pdxb_c = sc.p_dx[b][j * n + nn].conj();
                    let lam_a = self.lam[a][j * n + nn];
                    let lam_b = self.lam[b][j * n + nn];
                    let ql1 = sc.q_l1[j * n + nn];
                    let qd = sc.q_l2_23[j * n + nn];
                    let w_n = self.omega[nn];
                    let h11 = y[lay.hybrid(SigmaLabel::G1G1, j, nn)];
                    let h22 = y[lay.hybrid(SigmaLabel::G2G2, j, nn)];

                    // d⟨b_n σ_{g_a g_a}⟩/dt
                    {
                        let clo = om_a.conj()
                            * (pdxa_c * s_ae + px_a * hae + pxs_a_ae * bn - 2.0 * px_a * bn * s_ae)
                            + om_a
                                * (pdxa_c * s_ae.conj() + px_a * hea + pxs_a_ea * bn
                                    - 2.0 * px_a * bn * s_ae.conj());
                        let qua = om_a.conj()
                            * (pxx_a * hae + 2.0 * pdxa_c * pxs_a_ae
                                - 2.0 * px_a * px_a * bn * s_ae)
                            - om_a
                                * (pxx_a * hea + 2.0 * pdxa_c * pxs_a_ea
                                    - 2.0 * px_a * px_a * bn * s_ae.conj());
                        let val = -i * w_n * haa - 0.5 * i * (om_a.conj() * hae - om_a * hea)
                            + gamma_a * (bn - h11 - h22)
                            - 0.5 * om_a.conj() * lam_a * s_ae
                            - 0.5 * clo
                            + ql1 * s_aa
                            + 0.5 * i * om_a.conj() * lam_a * pxs_a_ae
                            + 0.25 * i * qua
                            + sc.q_l2_1[lbl_aa.index()][j * n + nn]
                            + qd * s_aa;
                        dy[lay.hybrid(lbl_aa, j, nn)] += val;
                    }

                    // d⟨b_n σ_{g_a g_b}⟩/dt
                    {
                        let clo_a = pdxa_c * s_be.conj() + px_a * heb + pxs_a_eb * bn
                            - 2.0 * px_a * bn * s_be.conj();
                        let clo_b =
                            pdxb_c * s_ae + px_b * hae + pxs_b_ae * bn - 2.0 * px_b * bn * s_ae;
                        let val = i * (d_a - d_b - w_n) * hab + 0.5 * i * om_a * heb
                            - 0.5 * i * om_b.conj() * hae
                            - 0.5 * om_b.conj() * lam_b * s_ae
                            - 0.5 * om_a * clo_a
                            - 0.5 * om_b.conj() * clo_b
                            + ql1 * s_ab
                            + 0.5 * i * om_b.conj() * lam_b * pxs_b_ae
                            - 0.25
                                * i
                                * om_a
                                * (pxx_a * heb + 2.0 * pdxa_c * pxs_a_eb
                                    - 2.0 * px_a * px_a * bn * s_be.conj())
                            + 0.25
                                * i
                                * om_b.conj()
                                * (pxx_b * hae + 2.0 * pdxb_c * pxs_b_ae
                                    - 2.0 * px_b * px_b * bn * s_ae)
                            + sc.q_l2_1[lbl_ab.index()][j * n + nn]
                            + qd * s_ab;
                        dy[lay.hybrid(lbl_ab, j, nn)] += val;
                    }

                    // Population-closure groups shared by the g_a e / e g_a pair.
                    let quad_aa =
                        pdxa_c * s_aa + px_a * haa + pxs_a_aa * bn - 2.0 * px_a * bn * s_aa;
                    let quad_bb =
                        pdxa_c * s_bb + px_a * hbb + pxs_a_bb * bn - 2.0 * px_a * bn * s_bb;
                    let pop_clo = 2.0 * quad_aa + quad_bb - pdxa_c;
                    let qua_aa =
                        pxx_a * haa + 2.0 * pdxa_c * pxs_a_aa - 2.0 * px_a * px_a * bn * s_aa;
                    let qua_bb =
                        pxx_a * hbb + 2.0 * pdxa_c * pxs_a_bb - 2.0 * px_a * px_a * bn * s_bb;
                    let qua_id = pxx_a * bn + 2.0 * pdxa_c * px_a - 2.0 * px_a * px_a * bn;
                    let pop_qua = 2.0 * qua_aa + qua_bb - qua_id;

                    // d⟨b_n σ_{g_a e}⟩/dt
                    {
                        let clo_b =
                            pdxb_c * s_ab + px_b * hab + pxs_b_ab * bn - 2.0 * px_b * bn * s_ab;
                        let val = -(0.5 * self.gamma_tot - i * (d_a - w_n)) * hae
                            - 0.5 * i * om_a * (2.0 * haa + hbb - bn)
                            - 0.5 * i * om_b * hab
                            + 0.5 * om_a * pop_clo
                            + 0.5 * om_a * lam_a * s_aa
                            + 0.5 * om_b * lam_b * s_ab
                            + 0.5 * om_b * clo_b
                            + ql1 * s_ae
                            + 0.25 * i * om_a * pop_qua
                            + 0.5 * i * om_a * lam_a * pxs_a_aa
                            + 0.5 * i * om_b * lam_b * pxs_b_ab
                            + 0.25
                                * i
                                * om_b
                                * (pxx_b * hab + 2.0 * pdxb_c * pxs_b_ab
                                    - 2.0 * px_b * px_b * bn * s_ab)
                            + sc.q_l2_1[lbl_ae.index()][j * n + nn]
                            + qd * s_ae;
                        dy[lay.hybrid(lbl_ae, j, nn)] += val;
                    }

                    // d⟨b_n σ_{e g_a}⟩/dt
                    {
                        let clo_b = pdxb_c * s_ab.conj() + px_b * hba + pxs_b_ba * bn
                            - 2.0 * px_b * bn * s_ab.conj();
                        let val = -(0.5 * self.gamma_tot + i * (d_a + w_n)) * hea
                            + 0.5 * i * om_a.conj() * (2.0 * haa + hbb - bn)
                            + 0.5 * i * om_b.conj() * hba
                            + 0.5 * om_a.conj() * pop_clo
                            + 0.5 * om_a.conj() * lam_a * (s_aa + s_bb - 1.0)
                            + 0.5 * om_b.conj() * clo_b
                            + ql1 * s_ae.conj()
                            - 0.25 * i * om_a.conj() * pop_qua
                            - 0.5 * i * om_a.conj() * lam_a * (pxs_a_aa + pxs_a_bb - px_a)
                            - 0.25
                                * i
                                * om_b.conj()
                                * (pxx_b * hba + 2.0 * pdxb_c * pxs_b_ba
                                    - 2.0 * px_b * px_b * bn * s_ab.conj())
                            + sc.q_l2_1[lbl_ae.adjoint().index()][j * n + nn]
                            + qd * s_ae.conj();
                        dy[lay.hybrid(lbl_ae.adjoint(), j, nn)] += val;
                    }
                }
            }
        }
    }

    /// RHS with a blow-up check, as used by the engines.
    pub fn rhs_checked(&mut self, t: f64, y: &[C64], dy: &mut [C64]) -> Result<()> {
        self.rhs(t, y, dy);
        if let Some(idx) = dy.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NumericalBlowup { moment: self.layout().describe(idx), t });
        }
        Ok(())
    }

    /// Internal 𝒬^{𝓛₂(1)} contraction after an [`Self::rhs`] call (test hook).
    #[cfg(test)]
    fn q_l2_1_scratch(&self, lbl: SigmaLabel) -> &[C64] {
        &self.scratch.q_l2_1[lbl.index()]
    }

    #[cfg(test)]
    fn q_l1_scratch(&self) -> &[C64] {
        &self.scratch.q_l1
    }

    #[cfg(test)]
    fn q_l2_23_scratch(&self) -> &[C64] {
        &self.scratch.q_l2_23
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{hz, B_FIELD_NIST, M_BE9_ION, Q_E};
    use crate::crystal::{drumhead_modes, solve_equilibrium, TrapParams};
    use crate::eitmodel::{build_couplings, optimum_rabi};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn trap(n: usize) -> TrapParams {
        TrapParams {
            ion_mass: M_BE9_ION,
            charge: Q_E,
            b_field: B_FIELD_NIST,
            omega_z: hz(1.59e6),
            omega_r: hz(180e3),
            wall_strength: 7.5e10,
            n_ions: n,
        }
    }

    fn setup(n: usize, misalign_deg: f64) -> (MomentKernel, CouplingTensor, LaserGeometry, AtomParams, f64) {
        let t = trap(n);
        let atom = AtomParams::be9();
        let rabi = optimum_rabi(hz(360e6), t.omega_z).unwrap();
        let g = LaserGeometry::new(
            hz(360e6),
            10f64.to_radians(),
            misalign_deg.to_radians(),
            rabi,
            rabi,
            &atom,
        )
        .unwrap();
        let c = solve_equilibrium(&t, 0).unwrap();
        let modes = drumhead_modes(&c, &t).unwrap();
        let cp = build_couplings(&modes, &g, &atom, &c).unwrap();
        let kernel = MomentKernel::new(&cp, &g, &atom, t.omega_r);
        (kernel, cp, g, atom, t.omega_r)
    }

    fn random_state(n: usize, seed: u64) -> MomentState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = MomentState::zero(n);
        for z in st.data.iter_mut() {
            *z = C64::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        }
        st
    }

    #[test]
    fn closure_commutator_terms() {
        // Vacuum: all b-moments zero → ⟨X_n X_n⟩ = 1 from the commutator.
        let st = MomentState::zero(3);
        let xm = x_moment_closure(&st);
        for a in 0..3 {
            for b in 0..3 {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((xm.xx[a * 3 + b] - expect).abs() < 1e-14);
            }
        }
        // Thermal mode: ⟨X²⟩ = 2 n̄ + 1.
        let mut st = MomentState::zero(1);
        st.data[st.layout.bdb(0, 0)] = C64::new(2.5, 0.0);
        let xm = x_moment_closure(&st);
        assert!((xm.xx[0] - 6.0).abs() < 1e-14);
    }

    /// Partial sums match naive recomputation, and the kernel's internal ion
    /// sums match the literal fold over the cross partial sums.
    #[test]
    fn partial_sums_match_naive_and_kernel() {
        let n = 3;
        let (mut kernel, cp, _g, _atom, _wr) = setup(n, 0.2);
        let st = random_state(n, 42);
        let sums = compute_partial_sums(&st, &cp);

        let xm = x_moment_closure(&st);
        for mu in 0..2 {
            for j in 0..n {
                let mut px = 0.0;
                let mut pxx = 0.0;
                for m in 0..n {
                    px += cp.lambda_laser[[mu, j, m]] * xm.xm[m];
                    for l in 0..n {
                        pxx += cp.lambda_laser[[mu, j, l]]
                            * cp.lambda_laser[[mu, j, m]]
                            * xm.xx[l * n + m];
                    }
                }
                assert!((px - sums.p_x[mu][j]).abs() < 1e-13);
                assert!((pxx - sums.p_xx[mu][j]).abs() < 1e-13);
                for nn in 0..n {
                    let mut bx = C64::new(0.0, 0.0);
                    let mut dx = C64::new(0.0, 0.0);
                    for m in 0..n {
                        bx += cp.lambda_laser[[mu, j, m]] * xm.bxt[m * n + nn];
                        dx += cp.lambda_laser[[mu, j, m]] * xm.dxt[m * n + nn];
                    }
                    assert!((bx - sums.p_bx[mu][j * n + nn]).norm() < 1e-13);
                    assert!((dx - sums.p_dx[mu][j * n + nn]).norm() < 1e-13);
                }
                for q in 0..n {
                    for lbl in SIGMA_LABELS {
                        let mut acc = C64::new(0.0, 0.0);
                        for m in 0..n {
                            acc += cp.lambda_laser[[mu, q, m]] * xm.xs[lbl.index()][m * n + j];
                        }
                        let got = sums.p_xsigma_cross[mu][lbl.index()][q * n + j];
                        assert!((acc - got).norm() < 1e-13);
                        if q == j {
                            assert!((acc - sums.p_xsigma[mu][lbl.index()][j]).norm() < 1e-13);
                        }
                    }
                }
            }
        }

        let mut dy = vec![C64::new(0.0, 0.0); st.layout.len()];
        kernel.rhs(0.0, &st.data, &mut dy);
        let i = C64::new(0.0, 1.0);
        for lbl in SIGMA_LABELS {
            let a = lbl.index();
            for j in 0..n {
                for nn in 0..n {
                    let mut fold = C64::new(0.0, 0.0);
                    for mu in 0..2 {
                        for q in 0..n {
                            if q == j {
                                continue;
                            }
                            let om = cp.rabi_complex[[mu, q]];
                            let sge = if mu == 0 {
                                st.data[st.layout.sg1e(q)]
                            } else {
                                st.data[st.layout.sg2e(q)]
                            };
                            let zz = om.conj() * sge;
                            fold += 0.5
                                * i
                                * cp.lambda_laser[[mu, q, nn]]
                                * sums.p_xsigma_cross[mu][a][q * n + j]
                                * (zz + zz.conj());
                        }
                    }
                    let got = kernel.q_l2_1_scratch(lbl)[j * n + nn];
                    assert!(
                        (fold - got).norm() < 1e-12 * (1.0 + fold.norm()),
                        "label {lbl:?} j {j} n {nn}: {fold} vs {got}"
                    );
                }
            }
        }
        for j in 0..n {
            for nn in 0..n {
                let expect = sums.q_l1[j * n + nn];
                let got = kernel.q_l1_scratch()[j * n + nn];
                assert!((expect - got).norm() < 1e-12 * (1.0 + expect.norm()));
                let expect_d = sums.q_l2_2[j * n + nn] - sums.q_l2_3[j * n + nn];
                let got_d = kernel.q_l2_23_scratch()[j * n + nn];
                assert!((expect_d - got_d).norm() < 1e-12 * (1.0 + expect_d.norm()));
            }
        }
    }

    /// Free evolution: no lasers, no decay → harmonic rotation of the mode
    /// moments, frozen internal state.
    #[test]
    fn free_limit() {
        let n = 2;
        let (_, cp, g, mut atom, omega_r) = setup(n, 0.0);
        atom.gamma1 = 0.0;
        atom.gamma2 = 1e-300; // validate() requires a nonzero total
        let mut cp0 = cp.clone();
        cp0.rabi_complex.fill(C64::new(0.0, 0.0));
        let mut kernel = MomentKernel::new(&cp0, &g, &atom, omega_r);
        let st = random_state(n, 7);
        let mut dy = vec![C64::new(0.0, 0.0); st.layout.len()];
        kernel.rhs(0.0, &st.data, &mut dy);
        let lay = st.layout;
        let i = C64::new(0.0, 1.0);
        for m in 0..n {
            let expect = -i * cp.freqs[m] * st.data[lay.b(m)];
            assert!((dy[lay.b(m)] - expect).norm() < 1e-6 * expect.norm().max(1.0));
        }
        for a in 0..n {
            for b in a..n {
                let e_bb = -i * (cp.freqs[a] + cp.freqs[b]) * st.data[lay.bb(a, b)];
                assert!((dy[lay.bb(a, b)] - e_bb).norm() < 1e-6 * e_bb.norm().max(1.0));
                let e_bdb = -i * (cp.freqs[b] - cp.freqs[a]) * st.data[lay.bdb(a, b)];
                assert!((dy[lay.bdb(a, b)] - e_bdb).norm() < 1e-6 * e_bdb.norm().max(1e6));
            }
        }
        for j in 0..n {
            assert!(dy[lay.sg1g1(j)].norm() < 1e-6);
            assert!(dy[lay.sg2g2(j)].norm() < 1e-6);
            // Aligned beams: Δ₁ = Δ₂, so σ_{g1g2} is frozen too.
            assert!(dy[lay.sg1g2(j)].norm() < 1e-6);
        }
    }

    /// With Ω = 0, Γ > 0, and no excited population, nothing moves in the
    /// electronic sector and there is no recoil heating.
    #[test]
    fn no_light_ground_manifold_frozen() {
        let n = 2;
        let (_, cp, g, atom, omega_r) = setup(n, 0.0);
        let mut cp0 = cp.clone();
        cp0.rabi_complex.fill(C64::new(0.0, 0.0));
        let mut kernel = MomentKernel::new(&cp0, &g, &atom, omega_r);
        let mut st = MomentState::zero(n);
        let lay = st.layout;
        for j in 0..n {
            // Exactly representable populations so 1 - p1 - p2 = 0 in f64.
            st.data[lay.sg1g1(j)] = C64::new(0.75, 0.0);
            st.data[lay.sg2g2(j)] = C64::new(0.25, 0.0);
        }
        st.data[lay.bdb(0, 0)] = C64::new(5.0, 0.0);
        let mut dy = vec![C64::new(0.0, 0.0); lay.len()];
        kernel.rhs(0.0, &st.data, &mut dy);
        for j in 0..n {
            assert!(dy[lay.sg1g1(j)].norm() < 1e-12);
            assert!(dy[lay.sg2g2(j)].norm() < 1e-12);
        }
        assert!(dy[lay.bdb(0, 0)].norm() < 1e-12);
    }

    /// Relabeling g₁↔g₂ in the state and the drive must commute with the
    /// derivative map (the "#-marked partner" rule is self-consistent).
    #[test]
    fn swap_consistency() {
        let n = 3;
        let t = trap(n);
        let mut atom = AtomParams::be9();
        atom.gamma2 = atom.gamma1;
        atom.u2_2 = atom.u2_1;
        let rabi = optimum_rabi(hz(360e6), t.omega_z).unwrap();
        let g = LaserGeometry::new(hz(360e6), 10f64.to_radians(), 0.37f64.to_radians(), rabi, 0.6 * rabi, &atom)
            .unwrap();
        let c = solve_equilibrium(&t, 0).unwrap();
        let modes = drumhead_modes(&c, &t).unwrap();
        let cp = build_couplings(&modes, &g, &atom, &c).unwrap();

        let g_sw = LaserGeometry { k1: g.k2, k2: g.k1, rabi1: g.rabi2, rabi2: g.rabi1, ..g };
        let mut cp_sw = cp.clone();
        for j in 0..n {
            for m in 0..n {
                cp_sw.lambda_laser[[0, j, m]] = cp.lambda_laser[[1, j, m]];
                cp_sw.lambda_laser[[1, j, m]] = cp.lambda_laser[[0, j, m]];
            }
            cp_sw.rabi_complex[[0, j]] = cp.rabi_complex[[1, j]];
            cp_sw.rabi_complex[[1, j]] = cp.rabi_complex[[0, j]];
        }

        let mut k1 = MomentKernel::new(&cp, &g, &atom, t.omega_r);
        let mut k2 = MomentKernel::new(&cp_sw, &g_sw, &atom, t.omega_r);

        let st = random_state(n, 13);
        let lay = st.layout;
        let mut st_sw = st.clone();
        for j in 0..n {
            st_sw.data[lay.sg1g1(j)] = st.data[lay.sg2g2(j)];
            st_sw.data[lay.sg2g2(j)] = st.data[lay.sg1g1(j)];
            st_sw.data[lay.sg1g2(j)] = st.data[lay.sg1g2(j)].conj();
            st_sw.data[lay.sg1e(j)] = st.data[lay.sg2e(j)];
            st_sw.data[lay.sg2e(j)] = st.data[lay.sg1e(j)];
            for m in 0..n {
                for lbl in SIGMA_LABELS {
                    st_sw.data[lay.hybrid(lbl.swapped(), j, m)] = st.data[lay.hybrid(lbl, j, m)];
                }
            }
        }

        let mut dy = vec![C64::new(0.0, 0.0); lay.len()];
        let mut dy_sw = vec![C64::new(0.0, 0.0); lay.len()];
        let tt = 0.83e-6;
        k1.rhs(tt, &st.data, &mut dy);
        k2.rhs(tt, &st_sw.data, &mut dy_sw);

        let scale: f64 = dy.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for j in 0..n {
            assert!((dy_sw[lay.sg1g1(j)] - dy[lay.sg2g2(j)]).norm() < 1e-12 * scale);
            assert!((dy_sw[lay.sg1g2(j)] - dy[lay.sg1g2(j)].conj()).norm() < 1e-12 * scale);
            assert!((dy_sw[lay.sg1e(j)] - dy[lay.sg2e(j)]).norm() < 1e-12 * scale);
            for m in 0..n {
                for lbl in SIGMA_LABELS {
                    assert!(
                        (dy_sw[lay.hybrid(lbl.swapped(), j, m)] - dy[lay.hybrid(lbl, j, m)]).norm()
                            < 1e-12 * scale,
                        "hybrid {lbl:?}"
                    );
                }
            }
        }
    }

    /// On a Hermitian-consistent state the derivative of diag⟨b†b⟩ is real.
    #[test]
    fn diagonal_occupation_derivative_is_real() {
        let n = 3;
        let (mut kernel, _cp, _g, _atom, _wr) = setup(n, 0.1);
        let mut st = MomentState::zero(n);
        let lay = st.layout;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Physical-ish state: real populations summing below 1, consistent
        // coherences, Gaussian-like motional moments.
        for j in 0..n {
            st.data[lay.sg1g1(j)] = C64::new(0.6, 0.0);
            st.data[lay.sg2g2(j)] = C64::new(0.3, 0.0);
            st.data[lay.sg1g2(j)] = C64::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
            st.data[lay.sg1e(j)] = C64::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
            st.data[lay.sg2e(j)] = C64::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
        }
        for m in 0..n {
            st.data[lay.b(m)] = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            st.data[lay.bdb(m, m)] = C64::new(rng.gen_range(0.5..3.0), 0.0);
        }
        // Hybrids as products ⟨b σ⟩ = ⟨b⟩⟨σ⟩ (consistent with conjugation).
        for j in 0..n {
            let vals = [
                st.data[lay.sg1g1(j)],
                st.data[lay.sg2g2(j)],
                st.data[lay.sg1g2(j)],
                st.data[lay.sg1g2(j)].conj(),
                st.data[lay.sg1e(j)],
                st.data[lay.sg1e(j)].conj(),
                st.data[lay.sg2e(j)],
                st.data[lay.sg2e(j)].conj(),
            ];
            for m in 0..n {
                for (lbl, v) in SIGMA_LABELS.iter().zip(vals) {
                    st.data[lay.hybrid(*lbl, j, m)] = st.data[lay.b(m)] * v;
                }
            }
        }
        let mut dy = vec![C64::new(0.0, 0.0); lay.len()];
        kernel.rhs(0.4e-6, &st.data, &mut dy);
        let scale: f64 = dy.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for m in 0..n {
            assert!(
                dy[lay.bdb(m, m)].im.abs() < 1e-10 * scale,
                "mode {m}: imag {:.3e}",
                dy[lay.bdb(m, m)].im
            );
        }
    }
}
