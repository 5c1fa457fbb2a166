//! Time integrators over flat complex state vectors.
//!
//! Production runs use the classic fixed-step fourth-order Runge-Kutta
//! scheme; step sizes are chosen by the callers from the fastest frequency in
//! the problem. An embedded Dormand-Prince 5(4) pair with adaptive step
//! control is provided as an independent cross-check.

use num_complex::Complex64;

/// Preallocated stage storage for [`rk4_step`].
pub struct Rk4Workspace {
    k1: Vec<Complex64>,
    k2: Vec<Complex64>,
    k3: Vec<Complex64>,
    k4: Vec<Complex64>,
    stage: Vec<Complex64>,
}

impl Rk4Workspace {
    pub fn new(dim: usize) -> Self {
        let z = vec![Complex64::new(0.0, 0.0); dim];
        Self { k1: z.clone(), k2: z.clone(), k3: z.clone(), k4: z.clone(), stage: z }
    }
}

/// Advance `y` from `t` by one RK4 step of size `dt`.
///
/// `rhs(t, y, dy)` must write the derivative of `y` into `dy`.
pub fn rk4_step<F>(rhs: &mut F, t: f64, dt: f64, y: &mut [Complex64], ws: &mut Rk4Workspace)
where
    F: FnMut(f64, &[Complex64], &mut [Complex64]),
{
    let n = y.len();
    debug_assert_eq!(ws.k1.len(), n);
    rhs(t, y, &mut ws.k1);
    for i in 0..n {
        ws.stage[i] = y[i] + 0.5 * dt * ws.k1[i];
    }
    rhs(t + 0.5 * dt, &ws.stage, &mut ws.k2);
    for i in 0..n {
        ws.stage[i] = y[i] + 0.5 * dt * ws.k2[i];
    }
    rhs(t + 0.5 * dt, &ws.stage, &mut ws.k3);
    for i in 0..n {
        ws.stage[i] = y[i] + dt * ws.k3[i];
    }
    rhs(t + dt, &ws.stage, &mut ws.k4);
    let w = dt / 6.0;
    for i in 0..n {
        y[i] += w * (ws.k1[i] + 2.0 * (ws.k2[i] + ws.k3[i]) + ws.k4[i]);
    }
}

/// Integrate `y` from `t0` to `t1` with the adaptive Dormand-Prince 5(4)
/// pair at the given relative tolerance. Returns the number of accepted
/// steps. Intended for validation runs, not production throughput.
pub fn dopri5_adaptive<F>(
    rhs: &mut F,
    t0: f64,
    t1: f64,
    y: &mut Vec<Complex64>,
    rtol: f64,
    atol: f64,
) -> usize
where
    F: FnMut(f64, &[Complex64], &mut [Complex64]),
{
    // Butcher tableau of DOPRI5.
    const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    const B5: [f64; 7] = [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];

    let n = y.len();
    let mut k = vec![vec![Complex64::new(0.0, 0.0); n]; 7];
    let mut stage = vec![Complex64::new(0.0, 0.0); n];
    let mut t = t0;
    let mut dt = (t1 - t0) * 1e-6;
    let mut accepted = 0usize;

    while t < t1 {
        if t + dt > t1 {
            dt = t1 - t;
        }
        rhs(t, y, &mut k[0]);
        for s in 0..6 {
            for i in 0..n {
                let mut acc = y[i];
                for (j, kj) in k.iter().enumerate().take(s + 1) {
                    acc += dt * A[s][j] * kj[i];
                }
                stage[i] = acc;
            }
            rhs(t + C[s] * dt, &stage, &mut k[s + 1]);
        }
        let mut err: f64 = 0.0;
        let mut ynew = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n {
            let mut y5 = y[i];
            let mut y4 = y[i];
            for (j, kj) in k.iter().enumerate() {
                y5 += dt * B5[j] * kj[i];
                y4 += dt * B4[j] * kj[i];
            }
            ynew[i] = y5;
            let sc = atol + rtol * y[i].norm().max(y5.norm());
            let e = (y5 - y4).norm() / sc;
            err = err.max(e);
        }
        if err <= 1.0 {
            t += dt;
            *y = ynew;
            accepted += 1;
        }
        let fac = (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
        dt *= fac;
        if !dt.is_finite() || dt <= 0.0 {
            panic!("dopri5: step size underflow at t = {t}");
        }
    }
    accepted
}
